"""Steerable adversarial driving-scenario generation with preference-aligned experts."""
from .pipeline import PipelineConfig, derive_seed, run_reference
from .policy import PolicyParams, load_checkpoint, save_checkpoint
from .scenario import Scenario, generate_corpus, load_corpus, save_corpus
from .steering import Experts, MixSpec, generate_steered

__version__ = "0.1.0"

__all__ = ["PipelineConfig", "derive_seed", "run_reference", "PolicyParams", "load_checkpoint",
           "save_checkpoint", "Scenario", "generate_corpus", "load_corpus", "save_corpus", "Experts", "MixSpec",
           "generate_steered"]
