"""Numerical checks of the weight-interpolation optimality results.

Conventions: a user preference ``mu`` weights the adversarial reward,
``R_mu = mu R_adv + (1 - mu) R_real``, and the expert weight ``beta`` gives
``R_1 = beta R_adv + (1 - beta) R_real`` (adversarial expert, optimum
``theta_1``) and its mirror ``R_2`` (realism expert, optimum ``theta_2``).
Interpolation runs ``theta(lam) = (1 - lam) theta_2 + lam theta_1`` so that
``lam = 1`` is the adversarial expert, matching ``steering.interpolate``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .metrics import rows_csv

# ---------------------------------------------------------------------------
# isotropic quadratic landscapes


@dataclass(frozen=True, eq=False)
class QuadraticLandscape:
    theta_star_adv: np.ndarray
    theta_star_real: np.ndarray
    eta_adv: float = 1.0
    eta_real: float = 1.0
    C_adv: float = 0.0
    C_real: float = 0.0

    def __post_init__(self):
        a = np.asarray(self.theta_star_adv, dtype=float)
        r = np.asarray(self.theta_star_real, dtype=float)
        if a.shape != r.shape or a.ndim != 1:
            raise ValueError("optima must be vectors of equal length")
        if not (self.eta_adv > 0 and self.eta_real > 0):
            raise ValueError("curvatures must be strictly positive")
        object.__setattr__(self, "theta_star_adv", a)
        object.__setattr__(self, "theta_star_real", r)

    def r_adv(self, theta):
        d = np.asarray(theta) - self.theta_star_adv
        return self.C_adv - 0.5 * self.eta_adv * np.sum(d * d, axis=-1)

    def r_real(self, theta):
        d = np.asarray(theta) - self.theta_star_real
        return self.C_real - 0.5 * self.eta_real * np.sum(d * d, axis=-1)

    def r_mu(self, theta, mu: float):
        return mu * self.r_adv(theta) + (1 - mu) * self.r_real(theta)

    def grad_mu(self, theta, mu: float) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        return (-mu * self.eta_adv * (theta - self.theta_star_adv)
                - (1 - mu) * self.eta_real * (theta - self.theta_star_real))


def _weighted_optimum(land: QuadraticLandscape, w_adv: float) -> np.ndarray:
    a, r = w_adv * land.eta_adv, (1 - w_adv) * land.eta_real
    return (a * land.theta_star_adv + r * land.theta_star_real) / (a + r)


def expert_optima(land: QuadraticLandscape, beta: float) -> tuple[np.ndarray, np.ndarray]:
    """``(theta_1, theta_2)``: maximisers of the two expert rewards."""
    if not 0.5 < beta <= 1.0:
        raise ValueError("beta must lie in (0.5, 1]")
    theta_1 = land.theta_star_adv.copy() if beta == 1.0 else _weighted_optimum(land, beta)
    theta_2 = land.theta_star_real.copy() if beta == 1.0 else _weighted_optimum(land, 1 - beta)
    return theta_1, theta_2


def user_optimum(land: QuadraticLandscape, mu: float) -> np.ndarray:
    if not 0.0 <= mu <= 1.0:
        raise ValueError("mu must lie in [0, 1]")
    if mu == 1.0:
        return land.theta_star_adv.copy()
    if mu == 0.0:
        return land.theta_star_real.copy()
    return _weighted_optimum(land, mu)


@dataclass(frozen=True)
class LambdaSolution:
    lam: float
    in_range: bool


def optimal_lambda(mu: float, beta: float) -> LambdaSolution:
    """Interpolation coefficient that reproduces the user optimum (equal curvature)."""
    if not beta > 0.5:
        raise ValueError("beta must exceed 0.5")
    lam = (mu + beta - 1) / (2 * beta - 1)
    return LambdaSolution(lam, 1 - beta <= mu <= beta)


def interpolate_experts(theta_1, theta_2, lam):
    """``theta(lam)`` for scalar or 1-D array ``lam`` (rows follow ``lam``)."""
    lam = np.asarray(lam, dtype=float)
    return (1 - lam)[..., None] * theta_2 + lam[..., None] * theta_1


def lambda_grid(resolution: float) -> np.ndarray:
    return np.linspace(0.0, 1.0, int(round(1.0 / resolution)) + 1)


@dataclass(frozen=True)
class GapResult:
    closed_form: float
    measured: float
    argmax_lambda: float


def quadratic_gap(land: QuadraticLandscape, mu: float, beta: float, resolution: float = 1e-5,
                  grid_only: bool = False) -> GapResult:
    """Closed-form and grid-measured suboptimality of the best interpolant.

    The closed form needs equal curvatures; ``grid_only`` skips it (NaN)
    for unequal ones.
    """
    if land.eta_adv != land.eta_real and not grid_only:
        raise ValueError("closed form needs equal curvatures; pass grid_only=True")
    theta_1, theta_2 = expert_optima(land, beta)
    lams = lambda_grid(resolution)
    values = land.r_mu(interpolate_experts(theta_1, theta_2, lams), mu)
    k = int(np.argmax(values))
    measured = float(land.r_mu(user_optimum(land, mu), mu) - values[k])
    closed = float("nan")
    if not grid_only:
        clipped = min(max(mu, 1 - beta), beta)
        dist2 = float(np.sum((land.theta_star_adv - land.theta_star_real) ** 2))
        closed = 0.5 * land.eta_adv * (mu - clipped) ** 2 * dist2
    return GapResult(closed, measured, float(lams[k]))


# ---------------------------------------------------------------------------
# general strongly concave instances


@dataclass(frozen=True)
class BoundParams:
    L_adv: float
    L_real: float
    m_adv: float
    m_real: float
    beta: float
    mu: float

    def __post_init__(self):
        if not (0 < self.m_adv <= self.L_adv and 0 < self.m_real <= self.L_real):
            raise ValueError("need 0 < m <= L for both objectives")
        if not 0.5 < self.beta <= 1.0:
            raise ValueError("beta must lie in (0.5, 1]")
        if not 0.0 <= self.mu <= 1.0:
            raise ValueError("mu must lie in [0, 1]")

    @property
    def coefficients(self) -> tuple[float, float]:
        """``(c_1, c_2)`` with ``grad R_mu = c_1 grad R_1 + c_2 grad R_2``."""
        b, mu = self.beta, self.mu
        return (mu * b - (1 - mu) * (1 - b)) / (2 * b - 1), ((1 - mu) * b - mu * (1 - b)) / (2 * b - 1)

    @property
    def smoothness(self) -> tuple[float, float]:
        b = self.beta
        return b * self.L_adv + (1 - b) * self.L_real, (1 - b) * self.L_adv + b * self.L_real

    @property
    def m_mu(self) -> float:
        return self.mu * self.m_adv + (1 - self.mu) * self.m_real

    def bound(self, theta_1, theta_2) -> float:
        (c1, c2), (L1, L2) = self.coefficients, self.smoothness
        dist2 = float(np.sum((np.asarray(theta_1) - np.asarray(theta_2)) ** 2))
        return max(abs(c1) * L1, abs(c2) * L2) ** 2 / (2 * self.m_mu) * dist2


def spectrum_matrix(rng: np.random.Generator, d: int, m: float, L: float) -> np.ndarray:
    """Random symmetric matrix whose eigenvalues lie in ``[m, L]`` and include both ends."""
    q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    eig = rng.uniform(m, L, size=d)
    eig[0] = m
    if d > 1:
        eig[1] = L
    return (q * eig) @ q.T


@dataclass(frozen=True, eq=False)
class ConcaveQuadratic:
    """``R_adv = -1/2 (t - a)^T A (t - a)`` and the realism analogue with ``B``."""

    A: np.ndarray
    B: np.ndarray
    a: np.ndarray
    r: np.ndarray

    def hessian(self, w_adv: float) -> np.ndarray:
        return w_adv * self.A + (1 - w_adv) * self.B

    def optimum(self, w_adv: float) -> np.ndarray:
        return np.linalg.solve(self.hessian(w_adv), w_adv * self.A @ self.a + (1 - w_adv) * self.B @ self.r)

    def value(self, theta, w_adv: float) -> float:
        da, dr = theta - self.a, theta - self.r
        return float(-0.5 * w_adv * da @ self.A @ da - 0.5 * (1 - w_adv) * dr @ self.B @ dr)

    def gap(self, beta: float, mu: float) -> tuple[float, float, np.ndarray, np.ndarray]:
        """Exact gap of the best interpolant plus its ``lam`` and the expert optima."""
        t1, t2 = self.optimum(beta), self.optimum(1 - beta)
        d = t1 - t2
        H = self.hessian(mu)
        best = self.optimum(mu)
        # R_mu(t2 + lam d) is a concave parabola in lam
        slope = float(-(t2 - best) @ H @ d)
        curv = float(d @ H @ d)
        lam = 0.0 if curv <= 0 else min(max(slope / curv, 0.0), 1.0)
        return self.value(best, mu) - self.value(t2 + lam * d, mu), lam, t1, t2


def random_bound_instance(rng: np.random.Generator, d: int) -> tuple[BoundParams, ConcaveQuadratic]:
    m_adv, m_real = rng.uniform(0.1, 2.0, size=2)
    L_adv, L_real = m_adv * rng.uniform(1.0, 10.0), m_real * rng.uniform(1.0, 10.0)
    beta = rng.uniform(0.55, 1.0)
    mu = rng.uniform(0.0, 1.0)
    bp = BoundParams(L_adv, L_real, m_adv, m_real, beta, mu)
    inst = ConcaveQuadratic(spectrum_matrix(rng, d, m_adv, L_adv), spectrum_matrix(rng, d, m_real, L_real),
                            rng.normal(0, 2, size=d), rng.normal(0, 2, size=d))
    return bp, inst


@dataclass(frozen=True, eq=False)
class BoundReport:
    rows: list = field(default_factory=list)

    @property
    def violations(self) -> int:
        return sum(r["gap"] > r["bound"] * (1 + 1e-9) + 1e-12 for r in self.rows)

    @property
    def max_ratio(self) -> float:
        return max((r["gap"] / r["bound"] for r in self.rows if r["bound"] > 0), default=0.0)

    def to_csv(self) -> str:
        return rows_csv(self.rows)


def bound_check_general(trials: int = 1000, rng: np.random.Generator | None = None,
                        dims=(2, 8, 16)) -> BoundReport:
    """Measured interpolation gap versus the smoothness/concavity bound on random instances."""
    rng = rng if rng is not None else np.random.default_rng(0)
    rows = []
    for k in range(trials):
        d = int(dims[k % len(dims)])
        bp, inst = random_bound_instance(rng, d)
        gap, lam, t1, t2 = inst.gap(bp.beta, bp.mu)
        rows.append({"trial": k, "d": d, "beta": bp.beta, "mu": bp.mu, "m_adv": bp.m_adv, "L_adv": bp.L_adv,
                     "m_real": bp.m_real, "L_real": bp.L_real, "lambda": lam, "gap": max(gap, 0.0),
                     "bound": bp.bound(t1, t2)})
    return BoundReport(rows)


# ---------------------------------------------------------------------------
# weight mixing versus output mixing

Model = Callable[[np.ndarray, np.ndarray], np.ndarray]


def linear_model(X: np.ndarray, theta: np.ndarray) -> np.ndarray:
    return X @ theta


def quadratic_model(kappa: float) -> Model:
    """Scalar model ``x.t + kappa/2 (x.t)^2``; its parameter Hessian is constant."""
    def f(X, theta):
        z = X @ theta
        return z + 0.5 * kappa * z * z
    return f


@dataclass(frozen=True, eq=False)
class MixReport:
    lambdas: np.ndarray
    L_weight: np.ndarray
    L_ens: np.ndarray
    curvature: np.ndarray
    diversity: float

    @property
    def difference(self) -> np.ndarray:
        return self.L_weight - self.L_ens

    @property
    def approximation(self) -> np.ndarray:
        w = self.lambdas * (1 - self.lambdas) / 2
        return -w * self.curvature + w * self.diversity

    @property
    def residual(self) -> np.ndarray:
        return self.difference - self.approximation

    def relative_residual(self, lo: float = 0.2, hi: float = 0.8) -> float:
        sel = (self.lambdas >= lo) & (self.lambdas <= hi)
        return float(np.max(np.abs(self.residual[sel]) / np.abs(self.difference[sel])))

    def to_csv(self) -> str:
        rows = [{"lambda": l, "L_weight": a, "L_ens": b, "difference": a - b, "curvature": c,
                 "diversity": self.diversity, "approximation": p, "residual": r}
                for l, a, b, c, p, r in zip(self.lambdas, self.L_weight, self.L_ens, self.curvature,
                                            self.approximation, self.residual)]
        return rows_csv(rows)


def _mse(pred, y) -> float:
    d = np.asarray(pred) - y
    return float(0.5 * np.mean(np.sum(d.reshape(len(d), -1) ** 2, axis=1)))


def mix_decomposition_check(model: Model, theta_1, theta_2, X, y, lambdas, h: float = 1e-3) -> MixReport:
    """Exact weight-mixed and output-mixed losses next to the curvature/diversity terms.

    Mixing runs ``(1 - lam) theta_1 + lam theta_2``; the curvature is a
    central second difference of the weight-mixed loss with step ``h``.
    """
    lambdas = np.asarray(lambdas, dtype=float)
    if lambdas.size < 3:
        raise ValueError("need at least three lambda values")
    theta_1, theta_2 = np.asarray(theta_1, dtype=float), np.asarray(theta_2, dtype=float)
    f1, f2 = model(X, theta_1), model(X, theta_2)

    def lw(a):
        return _mse(model(X, (1 - a) * theta_1 + a * theta_2), y)

    L_weight = np.array([lw(a) for a in lambdas])
    L_ens = np.array([_mse((1 - a) * f1 + a * f2, y) for a in lambdas])
    curvature = np.array([(lw(a + h) - 2 * lw(a) + lw(a - h)) / (h * h) for a in lambdas])
    diff = np.asarray(f2 - f1)
    diversity = float(np.mean(np.sum(diff.reshape(len(diff), -1) ** 2, axis=1)))
    return MixReport(lambdas, L_weight, L_ens, curvature, diversity)


def quadratic_mix_instance(rng: np.random.Generator, d: int = 6, n: int = 200, kappa: float = 0.1,
                           step: float = 0.1, target_offset: float = -5.0):
    """Nearby endpoints of a quadratic model whose targets sit away from its predictions.

    Returns ``(model, theta_1, theta_2, X, y)``.
    """
    X = rng.standard_normal((n, d))
    theta_1 = rng.standard_normal(d)
    theta_2 = theta_1 + step * rng.standard_normal(d)
    model = quadratic_model(kappa)
    y = model(X, theta_1) + target_offset + 0.3 * rng.standard_normal(n)
    return model, theta_1, theta_2, X, y


# ---------------------------------------------------------------------------
# check suite


def random_landscape(rng: np.random.Generator, d: int, equal: bool = True) -> QuadraticLandscape:
    eta = rng.uniform(0.2, 3.0)
    return QuadraticLandscape(rng.normal(0, 1, d), rng.normal(0, 1, d), eta,
                              eta if equal else rng.uniform(0.2, 3.0), rng.normal(), rng.normal())


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str


def gap_trials(n: int = 500, rng: np.random.Generator | None = None, resolution: float = 1e-5,
               dims=(2, 8, 16)) -> list[dict]:
    rng = rng if rng is not None else np.random.default_rng(0)
    rows = []
    for k in range(n):
        land = random_landscape(rng, int(dims[k % len(dims)]))
        beta, mu = rng.uniform(0.55, 1.0), rng.uniform(0.0, 1.0)
        res = quadratic_gap(land, mu, beta, resolution)
        sol = optimal_lambda(mu, beta) if beta > 0.5 else None
        rows.append({"trial": k, "d": land.theta_star_adv.size, "beta": beta, "mu": mu,
                     "closed_form": res.closed_form, "measured": res.measured,
                     "argmax_lambda": res.argmax_lambda, "formula_lambda": sol.lam, "in_range": sol.in_range})
    return rows


CHECKS = ("quadratic_gap", "lambda_formula", "general_bound", "mix_linear", "mix_quadratic", "expert_optima")


def run_checks(which=CHECKS, seed: int = 0, trials_gap: int = 500, trials_bound: int = 1000):
    """Run the named checks; returns ``(results, csv_by_name)``."""
    unknown = set(which) - set(CHECKS)
    if unknown:
        raise ValueError(f"unknown checks {sorted(unknown)}")
    results, tables = [], {}
    rng = np.random.default_rng(seed)
    if "quadratic_gap" in which or "lambda_formula" in which:
        rows = gap_trials(trials_gap, np.random.default_rng(rng.integers(2**63)))
        tables["quadratic_gap"] = rows_csv(rows)
        if "quadratic_gap" in which:
            err = max(abs(r["closed_form"] - r["measured"]) for r in rows)
            results.append(CheckResult("quadratic_gap", err <= 1e-6, f"max |closed - measured| = {err:.3e}"))
        if "lambda_formula" in which:
            inside = [r for r in rows if r["in_range"]]
            err = max((abs(r["argmax_lambda"] - r["formula_lambda"]) for r in inside), default=0.0)
            results.append(CheckResult("lambda_formula", err <= 1e-4,
                                       f"{len(inside)} in-range trials, max |argmax - formula| = {err:.3e}"))
    if "general_bound" in which:
        rep = bound_check_general(trials_bound, np.random.default_rng(rng.integers(2**63)))
        tables["general_bound"] = rep.to_csv()
        results.append(CheckResult("general_bound", rep.violations == 0,
                                   f"{rep.violations} violations, max gap/bound = {rep.max_ratio:.4f}"))
    lams = np.round(np.linspace(0.0, 1.0, 11), 12)
    if "mix_linear" in which:
        r = np.random.default_rng(rng.integers(2**63))
        X, y = r.standard_normal((100, 5)), r.standard_normal(100)
        rep = mix_decomposition_check(linear_model, r.standard_normal(5), r.standard_normal(5), X, y, lams)
        err = float(np.max(np.abs(rep.difference)))
        tables["mix_linear"] = rep.to_csv()
        results.append(CheckResult("mix_linear", err <= 1e-12, f"max |L_weight - L_ens| = {err:.3e}"))
    if "mix_quadratic" in which:
        inst = quadratic_mix_instance(np.random.default_rng(rng.integers(2**63)))
        rep = mix_decomposition_check(*inst, lams)
        rel = rep.relative_residual()
        tables["mix_quadratic"] = rep.to_csv()
        results.append(CheckResult("mix_quadratic", rel < 0.1, f"max residual / |difference| = {rel:.4f}"))
    if "expert_optima" in which:
        r = np.random.default_rng(rng.integers(2**63))
        worst = 0.0
        for _ in range(50):
            land = random_landscape(r, 8, equal=False)
            beta = r.uniform(0.55, 1.0)
            t1, t2 = expert_optima(land, beta)
            worst = max(worst, float(np.linalg.norm(land.grad_mu(t1, beta))),
                        float(np.linalg.norm(land.grad_mu(t2, 1 - beta))))
        results.append(CheckResult("expert_optima", worst < 1e-10, f"max |grad| at optima = {worst:.3e}"))
    return results, tables


def format_table(results) -> str:
    width = max(len(r.name) for r in results)
    return "\n".join(f"{r.name:<{width}}  {'PASS' if r.passed else 'FAIL'}  {r.detail}" for r in results)
