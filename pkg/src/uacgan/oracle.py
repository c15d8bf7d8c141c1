"""Exhaustive references for the information-theoretic claims behind the objectives.

Everything here works on finite toy spaces (a joint table over ``n_x`` inputs
and ``K`` labels) in float64 and natural logs, with ``0 log 0 = 0``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np
import torch


def _xlogy(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    out = np.zeros(np.broadcast(x, y).shape)
    mask = np.broadcast_to(x > 0, out.shape)
    xb, yb = np.broadcast_to(x, out.shape), np.broadcast_to(y, out.shape)
    out[mask] = xb[mask] * np.log(yb[mask])
    return out


def _check_rows(table, name="table", tol=1e-9):
    t = np.asarray(table, dtype=np.float64)
    if t.ndim != 2 or (t < 0).any() or np.abs(t.sum(1) - 1).max() > tol:
        raise ValueError(f"{name} rows must lie on the simplex")
    return t


@dataclass
class DiscreteJoint:
    table: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.table, dtype=np.float64)
        if t.ndim != 2:
            raise ValueError("joint table must be 2-D (n_x, K)")
        if (t < 0).any():
            raise ValueError("joint table has negative entries")
        if abs(t.sum() - 1) > 1e-12:
            raise ValueError(f"joint table must sum to 1 (got {t.sum()!r})")
        self.table = t

    @classmethod
    def from_parts(cls, p_x, posterior) -> "DiscreteJoint":
        """Joint from an input marginal and a conditional table P(y|x)."""
        p_x = np.asarray(p_x, dtype=np.float64)
        joint = p_x[:, None] * _check_rows(posterior, "posterior")
        return cls(joint / joint.sum())

    @classmethod
    def random(cls, rng: np.random.Generator, n_x: int, K: int, concentration: float = 1.0) -> "DiscreteJoint":
        t = rng.dirichlet(np.full(n_x * K, concentration)).reshape(n_x, K)
        return cls(t / t.sum())

    @property
    def p_x(self) -> np.ndarray:
        return self.table.sum(1)

    @property
    def p_y(self) -> np.ndarray:
        return self.table.sum(0)

    @property
    def posterior(self) -> np.ndarray:
        """P(y|x); rows with zero input mass are uniform."""
        px = self.p_x[:, None]
        K = self.table.shape[1]
        return np.where(px > 0, self.table / np.where(px > 0, px, 1), 1.0 / K)


def entropy(p) -> float:
    return float(-_xlogy(p, p).sum())


def conditional_entropy(joint: DiscreteJoint) -> float:
    """H(Y|X) = -sum p(x, y) log p(y|x)."""
    return float(-_xlogy(joint.table, joint.posterior).sum())


def conditional_entropy_x_given_y(joint: DiscreteJoint) -> float:
    return conditional_entropy(DiscreteJoint(joint.table.T.copy()))


class MIDecomposition(NamedTuple):
    via_label_entropy: float   # H(Y) - H(Y|X)
    via_input_entropy: float   # H(X) - H(X|Y)

    @property
    def value(self) -> float:
        return self.via_label_entropy


def mutual_information(joint: DiscreteJoint) -> MIDecomposition:
    return MIDecomposition(
        entropy(joint.p_y) - conditional_entropy(joint),
        entropy(joint.p_x) - conditional_entropy_x_given_y(joint),
    )


def mutual_information_kl(joint: DiscreteJoint) -> float:
    """KL(P_XY || P_X (x) P_Y), computed directly."""
    prod = np.outer(joint.p_x, joint.p_y)
    m = joint.table > 0
    return float((joint.table[m] * np.log(joint.table[m] / prod[m])).sum())


def kl_identity_check(p_post, q_c_post, marginal) -> tuple[float, float]:
    """Both sides of ``-H(Y|X) + cross-entropy = E_x KL(P_{Y|X} || Q^c_{Y|X})``.

    ``p_post`` is the data (or generator) posterior, ``q_c_post`` the
    classifier's, ``marginal`` the input distribution the expectation runs over.
    """
    p = _check_rows(p_post, "p_post")
    q = _check_rows(q_c_post, "q_c_post")
    w = np.asarray(marginal, dtype=np.float64)
    joint = DiscreteJoint.from_parts(w, p)
    cross_entropy = float(-_xlogy(joint.table, q).sum())
    lhs = -conditional_entropy(joint) + cross_entropy
    kl_rows = _xlogy(p, p).sum(1) - _xlogy(p, q).sum(1)
    rhs = float((w / w.sum() * kl_rows).sum())
    return lhs, rhs


def tac_value_exhaustive(joint: DiscreteJoint, cmi_post) -> float:
    """E_{x,y ~ joint} log C_mi(y|x) for a twin-classifier posterior table."""
    return float(_xlogy(joint.table, _check_rows(cmi_post, "cmi_post")).sum())


# --------------------------------------------------------------------------- degenerate posterior


def _log_ratio(q_mi_row, q_c_row) -> np.ndarray:
    q_mi = np.asarray(q_mi_row, dtype=np.float64)
    q_c = np.asarray(q_c_row, dtype=np.float64)
    if (q_c <= 0).any():
        raise ValueError("classifier posterior must be strictly positive")
    with np.errstate(divide="ignore"):
        return np.log(q_mi) - np.log(q_c)


def degenerate_posterior(q_mi_row, q_c_row) -> np.ndarray:
    """One-hot at argmin_k log(q_mi(k) / q_c(k)); ties go to the lowest index."""
    r = _log_ratio(q_mi_row, q_c_row)
    out = np.zeros_like(r)
    out[int(np.argmin(r))] = 1.0
    return out


def posterior_objective(q_post_row, q_mi_row, q_c_row) -> float:
    """sum_k q(k) * log(q_mi(k) / q_c(k)): the per-input value of fake cross-entropy + twin value."""
    q = np.asarray(q_post_row, dtype=np.float64)
    r = _log_ratio(q_mi_row, q_c_row)
    m = q > 0
    return float((q[m] * r[m]).sum())


def simplex_grid(K: int, step: float) -> np.ndarray:
    """All points of the K-simplex whose coordinates are multiples of ``step``."""
    n = int(round(1 / step))
    if K == 1:
        return np.ones((1, 1))
    pts = []

    def rec(prefix, remaining, depth):
        if depth == K - 1:
            pts.append(prefix + [remaining])
            return
        for i in range(remaining + 1):
            rec(prefix + [i], remaining - i, depth + 1)
    rec([], n, 0)
    return np.asarray(pts, dtype=np.float64) / n


# --------------------------------------------------------------------------- DV bound on toys


def dv_exhaustive(joint: DiscreteJoint, T_table) -> float:
    """Exact DV value E_joint[T] - log E_{P_X (x) P_Y}[exp T] for a table T(x, y)."""
    T = np.asarray(T_table, dtype=np.float64)
    prod = np.outer(joint.p_x, joint.p_y)
    m = T.max()
    return float((joint.table * T).sum() - (m + np.log((prod * np.exp(T - m)).sum())))


def optimal_statistic(joint: DiscreteJoint, const: float = 0.0) -> np.ndarray:
    """T*(x, y) = log P(y|x) - log P(y) + const; zero-mass cells get -1e300."""
    with np.errstate(divide="ignore"):
        T = np.log(joint.posterior) - np.log(joint.p_y)[None, :] + const
    return np.where(np.isfinite(T), T, -1e300)


def gaussian_mi(rho: float) -> float:
    if not abs(rho) < 1:
        raise ValueError(f"|rho| must be < 1, got {rho}")
    return -0.5 * math.log1p(-rho * rho)


def class_gaussian_mi(means, stds, prior=None, lo: float = -60.0, hi: float = 80.0, n: int = 200001) -> float:
    """I(X; Y) for y ~ prior, x | y ~ Normal(means[y], stds[y]), by trapezoid quadrature."""
    from scipy.stats import norm

    means = np.asarray(means, dtype=np.float64)
    stds = np.asarray(stds, dtype=np.float64)
    prior = np.full(len(means), 1 / len(means)) if prior is None else np.asarray(prior, dtype=np.float64)
    x = np.linspace(lo, hi, n)
    logp = norm.logpdf(x[None, :], means[:, None], stds[:, None])          # (K, n)
    logmix = np.logaddexp.reduce(logp + np.log(prior)[:, None], axis=0)
    integrand = (prior[:, None] * np.exp(logp) * (logp - logmix[None, :])).sum(0)
    return float(np.trapezoid(integrand, x))


def sign_bucket_mi(rho: float, n: int = 400001) -> float:
    """I(X; sign(B)) for a standard bivariate normal (X, B) with correlation ``rho``."""
    from scipy.stats import norm

    x = np.linspace(-12, 12, n)
    p1 = norm.cdf(rho * x / math.sqrt(1 - rho * rho))
    h = -_xlogy(p1, p1) - _xlogy(1 - p1, 1 - p1)
    cond = float(np.trapezoid(norm.pdf(x) * h, x))
    return math.log(2) - cond


# --------------------------------------------------------------------------- gradient checks


def finite_difference_check(loss_fn: Callable[[torch.Tensor], torch.Tensor], params, eps: float = 1e-4,
                            n_coords: int = 200, seed: int = 0, floor: float = 1e-6) -> float:
    """Max relative error between central differences and autograd gradients.

    ``loss_fn`` maps a flat float64 parameter vector to a scalar tensor. At
    most ``n_coords`` coordinates are probed. Relative error per coordinate
    is ``|fd - bp| / max(|fd|, |bp|, floor)``.
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ValueError(f"eps must be in [1e-6, 1e-3], got {eps}")
    theta = torch.as_tensor(params, dtype=torch.float64).detach().clone().flatten()
    p = theta.clone().requires_grad_(True)
    loss = loss_fn(p)
    (grad,) = torch.autograd.grad(loss, p, allow_unused=True)
    grad = torch.zeros_like(theta) if grad is None else grad.detach()
    rng = np.random.default_rng(seed)
    idx = rng.choice(theta.numel(), size=min(n_coords, theta.numel()), replace=False)
    worst = 0.0
    with torch.no_grad():
        for i in idx:
            up, dn = theta.clone(), theta.clone()
            up[i] += eps
            dn[i] -= eps
            fu, fd_ = float(loss_fn(up)), float(loss_fn(dn))
            if not (math.isfinite(fu) and math.isfinite(fd_)):
                raise FloatingPointError(f"non-finite loss when perturbing coordinate {i}")
            fd = (fu - fd_) / (2 * eps)
            bp = float(grad[i])
            worst = max(worst, abs(fd - bp) / max(abs(fd), abs(bp), floor))
    return worst


# --------------------------------------------------------------------------- theory suite


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def verify_theory(n_instances: int = 1000, seed: int = 0, grid_step: float = 0.01) -> list[CheckResult]:
    """Run every exhaustive check; used by the ``verify-theory`` command."""
    rng = np.random.default_rng(seed)
    results = []

    # KL identities: real-data form (P posterior vs classifier) and fake-data form (Q posterior)
    worst = {"real": 0.0, "fake": 0.0}
    for i in range(n_instances):
        n_x, K = rng.integers(2, 7), rng.integers(2, 6)
        for which in worst:
            joint = DiscreteJoint.random(rng, n_x, K)
            q_c = rng.dirichlet(np.ones(K), size=n_x)
            lhs, rhs = kl_identity_check(joint.posterior, q_c, joint.p_x)
            worst[which] = max(worst[which], abs(lhs - rhs))
    for which, err in worst.items():
        results.append(CheckResult(f"kl identity ({which} data)", err <= 1e-10, f"max |lhs-rhs| = {err:.3e}"))

    # MI decompositions
    err = 0.0
    for _ in range(n_instances):
        joint = DiscreteJoint.random(rng, rng.integers(2, 8), rng.integers(2, 6), rng.choice([0.1, 1.0, 10.0]))
        a, b = mutual_information(joint)
        err = max(err, abs(a - b), abs(a - mutual_information_kl(joint)))
    results.append(CheckResult("mi decompositions agree", err <= 1e-12, f"max disagreement = {err:.3e}"))

    # optimal statistic recovers I exactly, for several additive constants
    err = 0.0
    for _ in range(n_instances):
        joint = DiscreteJoint.random(rng, rng.integers(2, 8), rng.integers(2, 6))
        target = mutual_information_kl(joint)
        for const in (0.0, 3.0, -7.5):
            err = max(err, abs(dv_exhaustive(joint, optimal_statistic(joint, const)) - target))
    results.append(CheckResult("optimal T recovers I", err <= 1e-9, f"max |DV(T*) - I| = {err:.3e}"))

    # DV lower bound for arbitrary statistics
    viol = -np.inf
    for _ in range(n_instances):
        joint = DiscreteJoint.random(rng, rng.integers(2, 6), rng.integers(2, 5))
        T = rng.normal(0, 3, size=joint.table.shape)
        viol = max(viol, dv_exhaustive(joint, T) - mutual_information_kl(joint))
    results.append(CheckResult("DV value <= I for any T", viol <= 1e-12, f"max DV - I = {viol:.3e}"))

    # twin-classifier value is a lower bound on -H(Y|X), tight at the true posterior
    err, viol = 0.0, -np.inf
    for _ in range(n_instances):
        joint = DiscreteJoint.random(rng, rng.integers(2, 6), rng.integers(2, 5))
        target = -conditional_entropy(joint)
        err = max(err, abs(tac_value_exhaustive(joint, joint.posterior) - target))
        other = rng.dirichlet(np.ones(joint.table.shape[1]), size=joint.table.shape[0])
        viol = max(viol, tac_value_exhaustive(joint, other) - target)
    results.append(CheckResult("twin value bounds -H(Y|X)", err <= 1e-9 and viol < 0,
                               f"tight err = {err:.3e}, max gap above bound = {viol:.3e}"))

    # degenerate posterior minimizes the per-input objective over a simplex grid
    grid = simplex_grid(3, grid_step)
    margin = np.inf
    for _ in range(50):
        q_mi = rng.dirichlet(np.ones(3))
        q_c = rng.dirichlet(np.ones(3))
        r = _log_ratio(q_mi, q_c)
        best = posterior_objective(degenerate_posterior(q_mi, q_c), q_mi, q_c)
        vals = grid @ r
        margin = min(margin, float(vals.min() - best))
    results.append(CheckResult("one-hot posterior is optimal (grid search)", margin >= -1e-12,
                               f"min(grid - onehot) = {margin:.3e} over {len(grid)} points"))
    return results
