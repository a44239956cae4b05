"""Train two small experts, then steer between them by mixing their weights.

    python3 demos/steering_demo.py [--scenarios 24] [--epochs 40]

Prints attack success rate and mean realism penalty for each lambda, then
the trajectory each mixed model picks on one scenario.
"""
import argparse

from steeradv.pipeline import PipelineConfig, build_corpus, finetune, pretrain
from steeradv.rewards import breakdown
from steeradv.steering import Experts, MixSpec, SteerConfig, generate_steered, pareto_sweep


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--scenarios", type=int, default=24)
    ap.add_argument("--epochs", type=int, default=40)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    cfg = PipelineConfig(seed=args.seed, n_scenarios=args.scenarios, epochs=args.epochs, batch_size=8)
    corpus = build_corpus(cfg)
    ref = pretrain(corpus, cfg)
    experts = Experts(finetune(ref, corpus, cfg, "adv")[0], finetune(ref, corpus, cfg, "real")[0])

    lambdas = (0.0, 0.25, 0.5, 0.75, 1.0)
    report = pareto_sweep(experts, ref, corpus, None, lambdas, ("weight_interp",), SteerConfig(), workers=None)
    print(f"{'lambda':>7} {'attack success':>15} {'mean P_real':>12}")
    for row in report.by_mode("weight_interp"):
        print(f"{row.lam:7.2f} {row.attack_success_rate:15.3f} {row.mean_p_real:12.3f}")

    s = corpus[0]
    ego = s.logged_future(s.ego)
    print(f"\nscenario {s.id}: final adversary position per lambda")
    for lam in lambdas:
        adv = generate_steered(MixSpec("weight_interp", lam), experts, ref, s, None, lam, 8)
        b = breakdown(adv, ego, s)
        x, y = adv.xy[-1]
        print(f"  lambda {lam:.2f}: ({x:7.2f}, {y:6.2f})  R_adv {b.adv:6.3f}  P_real {b.p_real:6.3f}")


if __name__ == "__main__":
    main()
