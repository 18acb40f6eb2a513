"""Statistical distance estimators and numeric audits.

Includes a biased (V-statistic) squared MMD with an RBF kernel, an exact
discrete Wasserstein-1 via the assignment problem, and a Monte-Carlo audit
comparing the searched worst-case stylization against radius-matched random
ones.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from .backbone import Backbone, InstanceStats, TextEmbeddingBank, instance_stats
from .dataio import Dataset
from .losses import contrastive_ce
from .worstcase import (
    MixedStatistics,
    StyleCoefficients,
    WeraConfig,
    inner_ascent,
    select_bases,
    stylize,
)

W1_MAX_POINTS = 256


@dataclass
class KernelSpec:
    """RBF kernel; bandwidth None means the median pairwise-distance heuristic."""

    kind: str = "rbf"
    bandwidth: float | None = None

    def __post_init__(self):
        if self.kind != "rbf":
            raise ValueError(f"unsupported kernel kind {self.kind!r}")
        if self.bandwidth is not None and self.bandwidth <= 0:
            raise ValueError("explicit bandwidth must be positive")


@dataclass
class DivergenceReport:
    pairs: list[tuple[str, float]]
    gamma_hat: float
    meta: dict = field(default_factory=dict)


def _as_points(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x.reshape(-1, 1)
    return x


def median_bandwidth(pooled: np.ndarray) -> float:
    d = cdist(pooled, pooled)
    med = float(np.median(d[np.triu_indices(len(pooled), k=1)]))
    if med <= 0:
        raise ValueError("degenerate bandwidth: pooled sample has no spread")
    return med


def rbf_kernel(x: np.ndarray, y: np.ndarray, bandwidth: float) -> np.ndarray:
    sq = cdist(x, y, "sqeuclidean")
    return np.exp(-sq / (2.0 * bandwidth**2))


def mmd2(xs, ys, kernel: KernelSpec | None = None) -> float:
    """Biased V-statistic estimate of the squared MMD, clamped at zero."""
    xs, ys = _as_points(xs), _as_points(ys)
    kernel = kernel or KernelSpec()
    bw = kernel.bandwidth
    if bw is None:
        bw = median_bandwidth(np.concatenate([xs, ys], axis=0))
    n, m = len(xs), len(ys)
    value = (
        rbf_kernel(xs, xs, bw).sum() / n**2
        + rbf_kernel(ys, ys, bw).sum() / m**2
        - 2.0 * rbf_kernel(xs, ys, bw).sum() / (n * m)
    )
    return max(value, 0.0)


def source_target_divergence(
    source_sets: Sequence[np.ndarray],
    target_set: np.ndarray,
    encode: Callable[[np.ndarray], np.ndarray] | None = None,
    kernel: KernelSpec | None = None,
    names: Sequence[str] | None = None,
) -> DivergenceReport:
    """Per-source-domain MMD distance to the target, plus the average.

    A shared bandwidth (median over all pooled features) keeps the per-pair
    distances comparable.
    """
    if any(len(s) == 0 for s in source_sets) or len(target_set) == 0:
        raise ValueError("every domain needs at least one sample")
    if encode is not None:
        source_sets = [encode(s) for s in source_sets]
        target_set = encode(target_set)
    source_sets = [_as_points(s) for s in source_sets]
    target_set = _as_points(target_set)
    kernel = kernel or KernelSpec()
    if kernel.bandwidth is None:
        pooled = np.concatenate(list(source_sets) + [target_set], axis=0)
        kernel = KernelSpec(kind=kernel.kind, bandwidth=median_bandwidth(pooled))
    names = names or [f"source_{i}" for i in range(len(source_sets))]
    pairs = [
        (name, float(np.sqrt(mmd2(s, target_set, kernel))))
        for name, s in zip(names, source_sets)
    ]
    gamma_hat = float(np.mean([dist for _, dist in pairs]))
    return DivergenceReport(
        pairs=pairs, gamma_hat=gamma_hat,
        meta={"bandwidth": kernel.bandwidth,
              "sizes": [len(s) for s in source_sets] + [len(target_set)]},
    )


def w1_exact(xs, ys) -> float:
    """Exact Wasserstein-1 between equal-size empirical sets: the optimal
    assignment's mean Euclidean matching cost."""
    xs, ys = _as_points(xs), _as_points(ys)
    if xs.shape != ys.shape:
        raise ValueError(f"size mismatch: {xs.shape} vs {ys.shape}")
    n = len(xs)
    if n > W1_MAX_POINTS:
        raise ValueError(f"{n} points exceeds the exact-solver cap {W1_MAX_POINTS}")
    cost = cdist(xs, ys)
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].mean())


# ---------------------------------------------------------------------------
# worst-case audit
# ---------------------------------------------------------------------------


@dataclass
class AuditReport:
    fraction: float          # samples where the searched style is hardest
    rho: np.ndarray          # per-sample transport radius of the searched style
    n_samples: int
    n_trials: int
    degenerate_radius: bool  # ascent never moved or radii are ~0
    meta: dict = field(default_factory=dict)


def _embed(backbone: Backbone, zhat: np.ndarray, e_inv: np.ndarray) -> np.ndarray:
    return backbone.visual_rest(zhat, e_inv).data


def _ce_single(emb: np.ndarray, bank_w: np.ndarray, label: int, tau: float) -> float:
    return contrastive_ce(emb.reshape(1, -1), bank_w, [label], tau).item()


def _shrink_to_radius(
    target: StyleCoefficients,
    rho: float,
    zhat: np.ndarray,
    own: InstanceStats,
    base_stats,
    backbone: Backbone,
    e_inv: np.ndarray,
    z_orig: np.ndarray,
    iters: int = 25,
) -> np.ndarray:
    """Largest blend of identity -> target whose stylized embedding stays
    within transport cost rho of the original; identity is always feasible."""
    ident = StyleCoefficients.identity(len(target.values) - 1).values
    mus = np.stack([own.mu] + [b.mu for b in base_stats], axis=0)
    sigmas = np.stack([own.sigma] + [b.sigma for b in base_stats], axis=0)

    def cost(vec: np.ndarray) -> float:
        mixed = MixedStatistics(mu=vec @ mus, sigma=vec @ sigmas)
        emb = _embed(backbone, stylize(zhat, mixed), e_inv)
        return float(np.linalg.norm(emb - z_orig))
    if cost(target.values) <= rho * (1 + 1e-9) + 1e-12:
        return target.values
    lo, hi = 0.0, 1.0
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        vec = (1 - mid) * ident + mid * target.values
        if cost(vec) <= rho * (1 + 1e-9) + 1e-12:
            lo = mid
        else:
            hi = mid
    return (1 - lo) * ident + lo * target.values


def robustness_audit(
    dataset: Dataset,
    banks: TextEmbeddingBank,
    backbone: Backbone,
    e_inv: np.ndarray,
    cfg: WeraConfig,
    tau: float,
    trials: int = 16,
    seed: int = 0,
) -> AuditReport:
    """Does the searched stylization beat random radius-matched ones?

    Per sample: run the inner ascent, take its transport radius rho, draw
    ``trials`` random simplex styles shrunk toward identity until their cost
    is within rho, and compare classification losses. Report-only.
    """
    rng = np.random.default_rng(seed)
    n = len(dataset)
    zhat = backbone.front_batch(dataset.tokens)
    stats = [instance_stats(zhat[i]) for i in range(n)]
    rho = np.zeros(n)
    wins = 0
    moved = False
    init = StyleCoefficients.uniform(cfg.bases).values
    for i in range(n):
        base_idx = select_bases(n, i, cfg.bases, rng)
        base_stats = [stats[j] for j in base_idx]
        result = inner_ascent(
            zhat[i], int(dataset.labels[i]), base_stats,
            banks.invariant, e_inv, backbone, cfg, tau,
        )
        moved = moved or not np.allclose(result.coeffs.values, init)
        mixed = MixedStatistics(
            mu=result.coeffs.values @ np.stack([stats[i].mu] + [b.mu for b in base_stats]),
            sigma=result.coeffs.values @ np.stack([stats[i].sigma] + [b.sigma for b in base_stats]),
        )
        z_orig = _embed(backbone, zhat[i], e_inv)
        z_learned = _embed(backbone, stylize(zhat[i], mixed), e_inv)
        rho[i] = float(np.linalg.norm(z_learned - z_orig))
        ce_learned = _ce_single(z_learned, banks.invariant, int(dataset.labels[i]), tau)

        best_random = -np.inf
        for _ in range(trials):
            rand = StyleCoefficients(rng.dirichlet(np.ones(cfg.bases + 1)))
            vec = _shrink_to_radius(
                rand, rho[i], zhat[i], stats[i], base_stats,
                backbone, e_inv, z_orig,
            )
            mixed_r = MixedStatistics(
                mu=vec @ np.stack([stats[i].mu] + [b.mu for b in base_stats]),
                sigma=vec @ np.stack([stats[i].sigma] + [b.sigma for b in base_stats]),
            )
            emb = _embed(backbone, stylize(zhat[i], mixed_r), e_inv)
            best_random = max(
                best_random,
                _ce_single(emb, banks.invariant, int(dataset.labels[i]), tau),
            )
        wins += trials == 0 or ce_learned >= best_random
    return AuditReport(
        fraction=wins / n if n else 1.0,
        rho=rho,
        n_samples=n,
        n_trials=trials,
        degenerate_radius=(not moved) or float(np.median(rho)) < 1e-9,
        meta={"steps": cfg.steps, "eta": cfg.eta},
    )
