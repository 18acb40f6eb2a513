"""Loss terms used by the three training stages.

Each loss is an independently testable function of unit-norm feature rows
and embedding banks; all batch reductions are means so the balancing
weights keep a consistent scale.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

UNIT_ROW_TOL = 1e-6


@dataclass
class LossWeights:
    """Balancing weights for the stage objectives plus the softmax temperature."""

    alpha1: float = 8.0
    alpha2: float = 2.0
    alpha3: float = 0.4
    beta1: float = 0.8
    gamma_prime: float = 8.0
    # 0.01 matches the usual pretrained-contrastive scale but makes the
    # worst-case landscape too cliff-like for the fixed-step inner search;
    # 0.05 keeps the sign-ascent within tolerance of the grid optimum
    tau: float = 0.05

    def __post_init__(self):
        for name in ("alpha1", "alpha2", "alpha3", "beta1", "gamma_prime"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.tau <= 0:
            raise ValueError("tau must be positive")


def _check_unit_rows(x, name: str) -> None:
    data = x.data if isinstance(x, ad.Array) else np.asarray(x)
    norms = np.sqrt((data * data).sum(axis=-1))
    drift = np.abs(norms - 1.0).max(initial=0.0)
    if drift > UNIT_ROW_TOL:
        raise ValueError(f"{name} rows must be unit-norm (max drift {drift:.3g})")


def _ce_against_targets(logits: ad.Array, targets: np.ndarray) -> ad.Array:
    """Mean cross-entropy of row softmaxes against fixed target rows."""
    logp = ad.log_softmax(logits, axis=-1)
    b = targets.shape[0]
    return ad.mul(ad.sum_(ad.mul(logp, targets)), -1.0 / b)


def contrastive_ce(features, embeddings, labels, tau: float) -> ad.Array:
    """Mean over the batch of -log softmax_k(<z_i, w_k>/tau) at k = label_i."""
    features = ad.as_array(features)
    embeddings = ad.as_array(embeddings)
    _check_unit_rows(features, "feature")
    _check_unit_rows(embeddings, "embedding")
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    b, k = features.shape[0], embeddings.shape[0]
    if labels.shape[0] != b:
        raise ValueError(f"{labels.shape[0]} labels for {b} feature rows")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise ValueError(f"label out of range [0, {k})")
    logits = ad.mul(ad.matmul(features, ad.transpose(embeddings)), 1.0 / tau)
    onehot = np.zeros((b, k))
    onehot[np.arange(b), labels] = 1.0
    return _ce_against_targets(logits, onehot)


def l2_distill(a, b) -> ad.Array:
    """Mean over rows of squared Euclidean distance."""
    a, b = ad.as_array(a), ad.as_array(b)
    if a.shape != b.shape:
        raise ad.ShapeError(f"l2_distill: {a.shape} vs {b.shape}")
    rows = a.shape[0] if len(a.shape) > 1 else 1
    d = ad.sub(a, b)
    return ad.mul(ad.sum_(ad.mul(d, d)), 1.0 / rows)


def confusion_loss(features, domain_embeddings, tau: float) -> ad.Array:
    """Cross-entropy of the domain softmax against the uniform distribution.

    Minimal (= ln N_s) exactly when every feature is equally similar to all
    domain embeddings.
    """
    features = ad.as_array(features)
    domain_embeddings = ad.as_array(domain_embeddings)
    _check_unit_rows(features, "feature")
    _check_unit_rows(domain_embeddings, "domain embedding")
    n_s = domain_embeddings.shape[0]
    if n_s < 2:
        raise ValueError("confusion loss needs at least two domains")
    b = features.shape[0]
    logits = ad.mul(ad.matmul(features, ad.transpose(domain_embeddings)), 1.0 / tau)
    uniform = np.full((b, n_s), 1.0 / n_s)
    return _ce_against_targets(logits, uniform)


def worst_surrogate(
    stylized, class_embeddings, labels, originals, gamma_prime: float, tau: float
) -> ad.Array:
    """Classification loss of stylized features minus the transport penalty."""
    ce = contrastive_ce(stylized, class_embeddings, labels, tau)
    penalty = l2_distill(stylized, originals)
    return ad.sub(ce, ad.mul(penalty, gamma_prime))
