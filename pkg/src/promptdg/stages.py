"""Stage 1 training: text prompt disentanglement against anchor guidance,
then visual prompt disentanglement guided by the frozen text embeddings.

Both stages update only their own parameter set; everything else is held
bit-identical, which the tests assert directly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .backbone import Backbone, PromptState, TextEmbeddingBank, zero_prompts
from .dataio import AnchorEmbeddings, Dataset, read_anchors
from .losses import LossWeights, confusion_loss, contrastive_ce, l2_distill


@dataclass
class StageReport:
    """Per-epoch loss components plus the sample ids the stage consumed."""

    stage: str
    loss_history: list[dict[str, float]] = field(default_factory=list)
    used_ids: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    extras: dict = field(default_factory=dict)

    def final_loss(self) -> float:
        return self.loss_history[-1]["total"] if self.loss_history else float("nan")


@dataclass
class FeatureCache:
    """Frozen per-sample features: front-half tokens and the zero-prompt
    reference embeddings. Recomputing yields identical arrays."""

    zhat: np.ndarray    # (N, L, c_mid)
    z_clip: np.ndarray  # (N, d)


def build_feature_cache(dataset: Dataset, backbone: Backbone, chunk: int = 64) -> FeatureCache:
    zhat = backbone.front_batch(dataset.tokens)
    blank = zero_prompts(backbone.dims)
    rows = []
    for start in range(0, len(dataset), chunk):
        block = [zhat[i] for i in range(start, min(start + chunk, len(dataset)))]
        rows.append(backbone.embed_batch(block, blank).data)
    z_clip = np.concatenate(rows, axis=0) if rows else np.empty((0, backbone.dims.d_embed))
    return FeatureCache(zhat=zhat, z_clip=z_clip)


def load_anchors(path, backbone: Backbone) -> AnchorEmbeddings:
    """Read an anchor file and check it matches the model's shape."""
    return read_anchors(
        path,
        n_classes=backbone.n_classes,
        n_domains=backbone.n_domains,
        d_embed=backbone.dims.d_embed,
    )


def _domain_positions(domains: np.ndarray, domain_ids: Sequence[int]) -> np.ndarray:
    lookup = {int(d): i for i, d in enumerate(domain_ids)}
    try:
        return np.array([lookup[int(d)] for d in domains], dtype=np.int64)
    except KeyError as exc:
        raise ValueError(f"sample from domain {exc} is not in the training domains") from exc


def _epoch_batches(n: int, batch_size: int, rng) -> list[np.ndarray]:
    perm = rng.permutation(n)
    return [perm[i : i + batch_size] for i in range(0, n, batch_size)]


def _weighted_epoch_mean(parts: list[tuple[int, dict[str, float]]]) -> dict[str, float]:
    total = sum(w for w, _ in parts)
    keys = parts[0][1].keys()
    return {k: sum(w * d[k] for w, d in parts) / total for k in keys}


def train_gat(
    dataset: Dataset,
    anchors: AnchorEmbeddings,
    backbone: Backbone,
    prompts: PromptState,
    weights: LossWeights,
    epochs: int,
    lr: float,
    weight_decay: float,
    batch_size: int,
    seed: int,
    domain_ids: Sequence[int] | None = None,
    cache: FeatureCache | None = None,
) -> tuple[TextEmbeddingBank, StageReport]:
    """Optimize the text context vectors; the visual path stays at the raw
    backbone. Returns the frozen class/domain text embedding banks."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if domain_ids is None:
        domain_ids = sorted(int(d) for d in np.unique(dataset.domains))
    if anchors.class_anchors.shape[0] != backbone.n_classes:
        raise ValueError("anchor class count does not match the model")
    cache = cache or build_feature_cache(dataset, backbone)
    domain_anchor_rows = anchors.domain_anchors[list(domain_ids)]
    y_pos = _domain_positions(dataset.domains, domain_ids)

    ctx_class = ad.Array(prompts.ctx_class, requires_grad=True)
    ctx_domain = ad.Array(prompts.ctx_domain, requires_grad=True)
    rng = np.random.default_rng(seed)
    report = StageReport(stage="gat", used_ids=np.sort(dataset.ids.copy()))

    for _ in range(epochs):
        parts = []
        for batch in _epoch_batches(len(dataset), batch_size, rng):
            z_batch = cache.z_clip[batch]
            with ad.Tape() as tape:
                bank_w, bank_h = backbone.text_bank(
                    ctx_class, ctx_domain, domain_ids=domain_ids
                )
                ce_inv = contrastive_ce(z_batch, bank_w, dataset.labels[batch], weights.tau)
                ce_spec = contrastive_ce(z_batch, bank_h, y_pos[batch], weights.tau)
                kg_inv = l2_distill(bank_w, anchors.class_anchors)
                kg_spec = l2_distill(bank_h, domain_anchor_rows)
                loss = ad.add(
                    ad.add(ce_inv, ce_spec),
                    ad.mul(ad.add(kg_inv, kg_spec), weights.alpha1),
                )
                tape.backward(loss)
            ad.sgd_step([ctx_class, ctx_domain], lr=lr, weight_decay=weight_decay)
            parts.append((len(batch), {
                "total": loss.item(), "ce_inv": ce_inv.item(), "ce_spec": ce_spec.item(),
                "kg_inv": kg_inv.item(), "kg_spec": kg_spec.item(),
            }))
        report.loss_history.append(_weighted_epoch_mean(parts))

    bank_w, bank_h = backbone.text_bank(ctx_class.data, ctx_domain.data, domain_ids=domain_ids)
    banks = TextEmbeddingBank(invariant=bank_w.data.copy(), specific=bank_h.data.copy())
    return banks, report


def train_imt(
    dataset: Dataset,
    banks: TextEmbeddingBank,
    backbone: Backbone,
    prompts: PromptState,
    weights: LossWeights,
    epochs: int,
    lr: float,
    weight_decay: float,
    batch_size: int,
    seed: int,
    domain_ids: Sequence[int] | None = None,
    cache: FeatureCache | None = None,
) -> StageReport:
    """Jointly optimize the two visual prompt sets against the frozen text
    banks; text parameters are untouched."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if domain_ids is None:
        domain_ids = sorted(int(d) for d in np.unique(dataset.domains))
    if banks.specific.shape[0] != len(domain_ids):
        raise ValueError(
            f"domain bank has {banks.specific.shape[0]} rows for {len(domain_ids)} domains"
        )
    cache = cache or build_feature_cache(dataset, backbone)
    y_pos = _domain_positions(dataset.domains, domain_ids)

    e_inv = ad.Array(prompts.e_inv, requires_grad=True)
    e_spec = ad.Array(prompts.e_spec, requires_grad=True)
    rng = np.random.default_rng(seed)
    report = StageReport(stage="imt", used_ids=np.sort(dataset.ids.copy()))

    for _ in range(epochs):
        parts = []
        for batch in _epoch_batches(len(dataset), batch_size, rng):
            zhats = [cache.zhat[i] for i in batch]
            with ad.Tape() as tape:
                feats_inv = backbone.embed_batch(zhats, e_inv)
                feats_spec = backbone.embed_batch(zhats, e_spec)
                ce_inv = contrastive_ce(feats_inv, banks.invariant, dataset.labels[batch], weights.tau)
                ce_spec = contrastive_ce(feats_spec, banks.specific, y_pos[batch], weights.tau)
                kg_inv = l2_distill(feats_inv, cache.z_clip[batch])
                mix = confusion_loss(feats_inv, banks.specific, weights.tau)
                loss = ad.add(
                    ad.add(ce_inv, ce_spec),
                    ad.add(ad.mul(kg_inv, weights.alpha2), ad.mul(mix, weights.beta1)),
                )
                tape.backward(loss)
            ad.sgd_step([e_inv, e_spec], lr=lr, weight_decay=weight_decay)
            parts.append((len(batch), {
                "total": loss.item(), "ce_inv": ce_inv.item(), "ce_spec": ce_spec.item(),
                "kg_inv": kg_inv.item(), "mix": mix.item(),
            }))
        report.loss_history.append(_weighted_epoch_mean(parts))
    return report
