"""Stage 2: worst-case feature stylization and alignment fine-tuning.

Per sample, an inner sign-gradient ascent searches the simplex of statistic
mixing coefficients for the stylization that maximizes classification loss
minus a transport penalty; the outer loop then aligns the invariant visual
prompts across the original and worst-case features.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .backbone import Backbone, InstanceStats, PromptState, TextEmbeddingBank, instance_stats
from .dataio import Dataset
from .losses import LossWeights, contrastive_ce, l2_distill, worst_surrogate
from .stages import (
    FeatureCache,
    StageReport,
    _epoch_batches,
    _weighted_epoch_mean,
    build_feature_cache,
)

SIMPLEX_TOL = 1e-6
RESET_SUM = 1e-8


@dataclass
class WeraConfig:
    """Inner-search knobs: base count, step count, step size, penalty, blend."""

    bases: int = 3
    steps: int = 10
    eta: float = 0.05
    gamma_prime: float = 8.0
    alpha3: float = 0.4

    def __post_init__(self):
        if self.bases < 1:
            raise ValueError("bases must be >= 1")
        if self.steps < 0 or self.eta < 0:
            raise ValueError("steps and eta must be non-negative")


@dataclass
class StyleCoefficients:
    """Simplex mixing weights; entry 0 weights the sample's own statistics."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 1:
            raise ValueError("coefficients must be a flat vector")
        if v.min(initial=0.0) < -SIMPLEX_TOL or abs(v.sum() - 1.0) > SIMPLEX_TOL:
            raise ValueError(
                f"coefficients off the simplex (sum {v.sum():.9f}, min {v.min():.3g})"
            )
        self.values = v

    @classmethod
    def uniform(cls, n_bases: int) -> "StyleCoefficients":
        return cls(np.full(n_bases + 1, 1.0 / (n_bases + 1)))

    @classmethod
    def identity(cls, n_bases: int) -> "StyleCoefficients":
        v = np.zeros(n_bases + 1)
        v[0] = 1.0
        return cls(v)


@dataclass
class MixedStatistics:
    mu: np.ndarray
    sigma: np.ndarray


def project_simplex(v: np.ndarray) -> np.ndarray:
    """Clamp negatives to zero and renormalize; uniform if the mass vanishes."""
    v = np.maximum(np.asarray(v, dtype=np.float64), 0.0)
    total = v.sum()
    if total < RESET_SUM:
        return np.full(v.shape, 1.0 / v.size)
    return v / total


def select_bases(batch_size: int, i: int, m: int, rng) -> np.ndarray:
    """Indices of m peer samples, excluding i; without replacement when the
    batch allows it."""
    if batch_size < 1:
        raise ValueError("empty batch")
    peers = np.array([j for j in range(batch_size) if j != i], dtype=np.int64)
    if peers.size == 0:
        return np.full(m, i, dtype=np.int64)  # singleton batch: self is the only base
    replace = peers.size < m
    return rng.choice(peers, size=m, replace=replace)


def _stats_matrices(own: InstanceStats, bases: Sequence[InstanceStats]) -> tuple[np.ndarray, np.ndarray]:
    mus = np.stack([own.mu] + [b.mu for b in bases], axis=0)
    sigmas = np.stack([own.sigma] + [b.sigma for b in bases], axis=0)
    return mus, sigmas


def mix_statistics(
    coeffs: StyleCoefficients, own: InstanceStats, bases: Sequence[InstanceStats]
) -> MixedStatistics:
    """Convex combination of the sample's own and the base statistics."""
    v = coeffs.values
    if v.size != len(bases) + 1:
        raise ValueError(f"{v.size} coefficients for {len(bases)} bases")
    if v.min() < -SIMPLEX_TOL or abs(v.sum() - 1.0) > SIMPLEX_TOL:
        raise ValueError("coefficients off the simplex")
    mus, sigmas = _stats_matrices(own, bases)
    return MixedStatistics(mu=v @ mus, sigma=v @ sigmas)


def stylize(intermediate: np.ndarray, stats: MixedStatistics) -> np.ndarray:
    """Re-statistic the tokens: normalized by own stats, scaled and shifted
    by the mixed ones."""
    own = instance_stats(intermediate)
    normed = (intermediate - own.mu) / own.sigma
    return stats.mu + stats.sigma * normed


def _stylize_tape(normed: np.ndarray, mu_hat: ad.Array, sigma_hat: ad.Array) -> ad.Array:
    return ad.add(ad.mul(ad.Array(normed), sigma_hat), mu_hat)


def _mix_tape(coeff_arr: ad.Array, mus: np.ndarray, sigmas: np.ndarray):
    row = ad.reshape(coeff_arr, (1, -1))
    mu_hat = ad.reshape(ad.matmul(row, mus), (-1,))
    sigma_hat = ad.reshape(ad.matmul(row, sigmas), (-1,))
    return mu_hat, sigma_hat


@dataclass
class AscentResult:
    coeffs: StyleCoefficients
    loss_init: float
    loss_final: float
    simplex_sum_dev: float = 0.0   # worst |sum - 1| seen after projections
    simplex_min: float = 1.0       # smallest coefficient seen after projections


def inner_ascent(
    zhat: np.ndarray,
    label: int,
    base_stats: Sequence[InstanceStats],
    bank_w: np.ndarray,
    e_inv: np.ndarray,
    backbone: Backbone,
    cfg: WeraConfig,
    tau: float,
    init: StyleCoefficients | None = None,
) -> AscentResult:
    """Sign-gradient ascent on the mixing simplex with the prompts frozen."""
    own = instance_stats(zhat)
    mus, sigmas = _stats_matrices(own, base_stats)
    normed = (zhat - own.mu) / own.sigma
    z_orig = backbone.visual_rest(zhat, e_inv).data.reshape(1, -1)
    coeffs = (init or StyleCoefficients.uniform(cfg.bases)).values.copy()

    def loss_at(v: np.ndarray) -> float:
        mixed = MixedStatistics(mu=v @ mus, sigma=v @ sigmas)
        emb = backbone.visual_rest(stylize(zhat, mixed), e_inv).data.reshape(1, -1)
        return worst_surrogate(emb, bank_w, [label], z_orig, cfg.gamma_prime, tau).item()

    loss_init = loss_at(coeffs)
    sum_dev = 0.0
    min_coeff = float(coeffs.min())
    for _ in range(cfg.steps):
        arr = ad.Array(coeffs, requires_grad=True)
        with ad.Tape() as tape:
            mu_hat, sigma_hat = _mix_tape(arr, mus, sigmas)
            zw = _stylize_tape(normed, mu_hat, sigma_hat)
            emb = ad.reshape(backbone.visual_rest(zw, e_inv), (1, -1))
            loss = worst_surrogate(emb, bank_w, [label], z_orig, cfg.gamma_prime, tau)
            tape.backward(loss)
        coeffs = project_simplex(coeffs + cfg.eta * np.sign(arr.grad))
        sum_dev = max(sum_dev, abs(float(coeffs.sum()) - 1.0))
        min_coeff = min(min_coeff, float(coeffs.min()))
    return AscentResult(
        coeffs=StyleCoefficients(coeffs),
        loss_init=loss_init,
        loss_final=loss_at(coeffs),
        simplex_sum_dev=sum_dev,
        simplex_min=min_coeff,
    )


def ascent_gain(
    dataset: Dataset,
    banks: TextEmbeddingBank,
    backbone: Backbone,
    e_inv: np.ndarray,
    cfg: WeraConfig,
    tau: float,
    seed: int = 0,
    min_samples: int = 50,
) -> float:
    """Fraction of samples whose searched stylization is at least as hard as
    the initial one. Step count 0 counts as 1.0 by convention."""
    if len(dataset) < min_samples:
        raise ValueError(f"need at least {min_samples} samples, got {len(dataset)}")
    if cfg.steps == 0:
        return 1.0
    rng = np.random.default_rng(seed)
    zhat = backbone.front_batch(dataset.tokens)
    stats = [instance_stats(zhat[i]) for i in range(len(dataset))]
    wins = 0
    for i in range(len(dataset)):
        base_idx = select_bases(len(dataset), i, cfg.bases, rng)
        result = inner_ascent(
            zhat[i], int(dataset.labels[i]), [stats[j] for j in base_idx],
            banks.invariant, e_inv, backbone, cfg, tau,
        )
        wins += result.loss_final >= result.loss_init
    return wins / len(dataset)


def train_wera(
    dataset: Dataset,
    banks: TextEmbeddingBank,
    backbone: Backbone,
    prompts: PromptState,
    weights: LossWeights,
    cfg: WeraConfig,
    epochs: int,
    lr: float,
    weight_decay: float,
    batch_size: int,
    seed: int,
    cache: FeatureCache | None = None,
) -> StageReport:
    """Refine the invariant visual prompts against worst-case stylizations.

    Only ``prompts.e_inv`` is updated; the specific prompts and all text
    parameters stay bit-identical. Coefficients restart from uniform at
    every outer step and bases are re-drawn per step.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    cache = cache or build_feature_cache(dataset, backbone)
    stats = [instance_stats(cache.zhat[i]) for i in range(len(dataset))]

    e_inv = ad.Array(prompts.e_inv, requires_grad=True)
    rng = np.random.default_rng(seed)
    report = StageReport(stage="wera", used_ids=np.sort(dataset.ids.copy()))
    sum_dev = 0.0
    min_coeff = 1.0

    for _ in range(epochs):
        parts = []
        for batch in _epoch_batches(len(dataset), batch_size, rng):
            stylized = []
            gains = []
            for pos, i in enumerate(batch):
                base_idx = batch[select_bases(len(batch), pos, cfg.bases, rng)]
                result = inner_ascent(
                    cache.zhat[i], int(dataset.labels[i]),
                    [stats[j] for j in base_idx],
                    banks.invariant, e_inv.data, backbone, cfg, weights.tau,
                )
                mixed = mix_statistics(result.coeffs, stats[i],
                                       [stats[j] for j in base_idx])
                stylized.append(stylize(cache.zhat[i], mixed))
                gains.append(result.loss_final - result.loss_init)
                sum_dev = max(sum_dev, result.simplex_sum_dev)
                min_coeff = min(min_coeff, result.simplex_min)

            labels = dataset.labels[batch]
            with ad.Tape() as tape:
                feats_w = backbone.embed_batch(stylized, e_inv)
                feats_i = backbone.embed_batch([cache.zhat[i] for i in batch], e_inv)
                ce_worst = contrastive_ce(feats_w, banks.invariant, labels, weights.tau)
                ce_inv = contrastive_ce(feats_i, banks.invariant, labels, weights.tau)
                kg_inv = l2_distill(feats_i, cache.z_clip[batch])
                loss = ad.add(
                    ad.add(ad.mul(ce_inv, 1.0 - cfg.alpha3), ad.mul(ce_worst, cfg.alpha3)),
                    ad.mul(kg_inv, weights.alpha2),
                )
                tape.backward(loss)
            transport = float(((feats_w.data - feats_i.data) ** 2).sum(axis=1).mean())
            ad.sgd_step([e_inv], lr=lr, weight_decay=weight_decay)
            parts.append((len(batch), {
                "total": loss.item(), "ce_worst": ce_worst.item(), "ce_inv": ce_inv.item(),
                "kg_inv": kg_inv.item(), "inner_gain": float(np.mean(gains)),
                "transport": transport,
            }))
        report.loss_history.append(_weighted_epoch_mean(parts))

    report.extras["simplex_sum_dev"] = sum_dev
    report.extras["simplex_min"] = min_coeff
    return report
