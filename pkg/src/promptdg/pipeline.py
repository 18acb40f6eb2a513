"""Leave-one-domain-out orchestration: runs the stages in order, tracks
which sample ids each consumed, and evaluates held-out accuracy.

The held-out domain must never reach a training or prototype-building step;
``Provenance.assert_clean`` enforces that from the recorded ids.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .backbone import Backbone, Dims, PromptState, TextEmbeddingBank, zero_prompts
from .config import GeneratorConfig, RunConfig
from .dataio import AnchorEmbeddings, Dataset
from .diagnostics import DivergenceReport, source_target_divergence
from .losses import LossWeights
from .prototypes import (
    PrototypeBank,
    finetune_prototypes,
    init_prototypes,
    invariant_predict,
    specific_predict,
)
from .stages import FeatureCache, StageReport, build_feature_cache, train_gat, train_imt
from .synth import generate_synthetic
from .worstcase import WeraConfig, train_wera


class ProvenanceError(RuntimeError):
    """A held-out sample id leaked into a training step."""


@dataclass
class Provenance:
    consumed: dict[str, np.ndarray] = field(default_factory=dict)

    def record(self, step: str, ids: np.ndarray) -> None:
        self.consumed[step] = np.asarray(ids, dtype=np.int64)

    def assert_clean(self, held_out_ids: np.ndarray) -> None:
        held = set(int(i) for i in held_out_ids)
        for step, ids in self.consumed.items():
            leaked = held.intersection(int(i) for i in ids)
            if leaked:
                raise ProvenanceError(
                    f"step {step!r} consumed held-out sample ids {sorted(leaked)[:5]}"
                )


def dims_from_config(cfg: RunConfig) -> Dims:
    return Dims(
        l_tok=cfg.l_tok, c_in=cfg.c_in, c_mid=cfg.c_mid, d_embed=cfg.d_embed,
        l_ctx=cfg.l_ctx, l_vp=cfg.l_vp, d_tok=cfg.d_tok,
    )


def build_backbone(cfg: RunConfig, n_classes: int, n_domains: int) -> Backbone:
    return Backbone(cfg.backbone_seed, dims_from_config(cfg), n_classes, n_domains)


def loss_weights(cfg: RunConfig) -> LossWeights:
    return LossWeights(
        alpha1=cfg.alpha1, alpha2=cfg.alpha2, alpha3=cfg.alpha3,
        beta1=cfg.beta1, gamma_prime=cfg.gamma_prime, tau=cfg.tau,
    )


def wera_config(cfg: RunConfig) -> WeraConfig:
    return WeraConfig(
        bases=cfg.wera_bases, steps=cfg.wera_steps, eta=cfg.wera_eta,
        gamma_prime=cfg.gamma_prime, alpha3=cfg.alpha3,
    )


@dataclass
class EvalResult:
    overall: float
    per_domain: dict[int, float]
    n: int

    def rows(self) -> list[tuple[str, str, float]]:
        out = [("accuracy", f"domain_{d}", acc) for d, acc in sorted(self.per_domain.items())]
        out.append(("accuracy", "overall", self.overall))
        return out


def embed_dataset(dataset: Dataset, backbone: Backbone, prompts_matrix: np.ndarray,
                  cache: FeatureCache | None = None, chunk: int = 64) -> np.ndarray:
    zhat = cache.zhat if cache is not None else backbone.front_batch(dataset.tokens)
    rows = []
    for start in range(0, len(dataset), chunk):
        block = [zhat[i] for i in range(start, min(start + chunk, len(dataset)))]
        rows.append(backbone.embed_batch(block, prompts_matrix).data)
    return np.concatenate(rows, axis=0) if rows else np.empty((0, backbone.dims.d_embed))


def evaluate(
    dataset: Dataset,
    backbone: Backbone,
    prompts: PromptState,
    banks: TextEmbeddingBank,
    proto_bank: PrototypeBank | None = None,
    beta2: float = 5.0,
    tau: float = 0.05,
    cache: FeatureCache | None = None,
) -> EvalResult:
    """Accuracy of the blended (or invariant-only) prediction per domain."""
    feats_inv = embed_dataset(dataset, backbone, prompts.e_inv, cache)
    feats_spec = None
    if proto_bank is not None:
        feats_spec = embed_dataset(dataset, backbone, prompts.e_spec, cache)
    correct = np.zeros(len(dataset), dtype=bool)
    for i in range(len(dataset)):
        p = invariant_predict(feats_inv[i], banks.invariant, tau)
        if proto_bank is not None:
            p = p + beta2 * specific_predict(feats_spec[i], proto_bank)
        correct[i] = int(np.argmax(p)) == int(dataset.labels[i])
    per_domain = {
        int(d): float(correct[dataset.domains == d].mean())
        for d in np.unique(dataset.domains)
    }
    return EvalResult(overall=float(correct.mean()), per_domain=per_domain, n=len(dataset))


def divergence_report(
    dataset: Dataset,
    backbone: Backbone,
    e_inv: np.ndarray,
    held_out: int,
) -> DivergenceReport:
    """Average source-target MMD of the invariant features."""
    train, test = dataset.split_domain(held_out)
    source_ids = sorted(int(d) for d in np.unique(train.domains))
    sources = [train.subset(train.domains == d).tokens for d in source_ids]
    target = test.tokens

    def encode(tokens: np.ndarray) -> np.ndarray:
        ds = Dataset(
            tokens=tokens,
            labels=np.zeros(len(tokens), dtype=np.int64),
            domains=np.zeros(len(tokens), dtype=np.int64),
            ids=np.arange(len(tokens), dtype=np.int64),
            n_classes=1, n_domains=1,
        )
        return embed_dataset(ds, backbone, e_inv)

    return source_target_divergence(
        sources, target, encode=encode,
        names=[f"domain_{d}->domain_{held_out}" for d in source_ids],
    )


@dataclass
class FoldResult:
    """Everything one leave-one-domain-out run produces."""

    held_out: int
    prompts: PromptState
    banks: TextEmbeddingBank
    proto_bank: PrototypeBank
    proto_bank_tuned: PrototypeBank
    reports: dict[str, StageReport]
    acc_imt: EvalResult
    acc_wera: EvalResult
    acc_blend: EvalResult
    acc_blend_tuned: EvalResult
    divergence_before: DivergenceReport   # untrained prompts
    divergence_imt: DivergenceReport      # after stage 1
    divergence_after: DivergenceReport    # after worst-case alignment
    provenance: Provenance


def run_fold(
    dataset: Dataset,
    anchors: AnchorEmbeddings,
    cfg: RunConfig,
    held_out: int,
    seed: int | None = None,
) -> FoldResult:
    """Train the full pipeline on all domains but one and evaluate on it."""
    seed = cfg.train_seed if seed is None else seed
    backbone = build_backbone(cfg, dataset.n_classes, dataset.n_domains)
    weights = loss_weights(cfg)
    wcfg = wera_config(cfg)
    train, test = dataset.split_domain(held_out)
    domain_ids = sorted(int(d) for d in np.unique(train.domains))
    prompts = PromptState.init(backbone.dims, seed)
    provenance = Provenance()

    cache = build_feature_cache(train, backbone)
    test_cache = build_feature_cache(test, backbone)

    div_before = divergence_report(dataset, backbone, prompts.e_inv, held_out)

    banks, gat_report = train_gat(
        train, anchors, backbone, prompts, weights,
        epochs=cfg.gat_epochs, lr=cfg.lr, weight_decay=cfg.weight_decay,
        batch_size=cfg.batch_size, seed=seed, domain_ids=domain_ids, cache=cache,
    )
    provenance.record("gat", gat_report.used_ids)

    imt_report = train_imt(
        train, banks, backbone, prompts, weights,
        epochs=cfg.imt_epochs, lr=cfg.imt_lr, weight_decay=cfg.weight_decay,
        batch_size=cfg.batch_size, seed=seed + 1, domain_ids=domain_ids, cache=cache,
    )
    provenance.record("imt", imt_report.used_ids)
    acc_imt = evaluate(test, backbone, prompts, banks, tau=cfg.tau, cache=test_cache)
    div_imt = divergence_report(dataset, backbone, prompts.e_inv, held_out)

    wera_report = train_wera(
        train, banks, backbone, prompts, weights, wcfg,
        epochs=cfg.wera_epochs, lr=cfg.wera_lr, weight_decay=cfg.weight_decay,
        batch_size=cfg.batch_size, seed=seed + 2, cache=cache,
    )
    provenance.record("wera", wera_report.used_ids)
    acc_wera = evaluate(test, backbone, prompts, banks, tau=cfg.tau, cache=test_cache)

    div_after = divergence_report(dataset, backbone, prompts.e_inv, held_out)

    feats_spec = embed_dataset(train, backbone, prompts.e_spec, cache)
    proto_bank = init_prototypes(
        train, backbone, prompts.e_spec, cfg.beta_sharp,
        domain_ids=domain_ids, features=feats_spec,
    )
    provenance.record("build-proto", train.ids)
    proto_tuned = finetune_prototypes(
        proto_bank, train, backbone, prompts.e_spec,
        epochs=cfg.proto_epochs, lr=cfg.proto_lr, batch_size=cfg.batch_size,
        seed=seed + 3, features=feats_spec,
    )
    provenance.record("finetune-proto", train.ids)

    acc_blend = evaluate(
        test, backbone, prompts, banks, proto_bank, cfg.beta2, cfg.tau, cache=test_cache
    )
    acc_blend_tuned = evaluate(
        test, backbone, prompts, banks, proto_tuned, cfg.beta2, cfg.tau, cache=test_cache
    )

    provenance.assert_clean(test.ids)

    reports = {"gat": gat_report, "imt": imt_report, "wera": wera_report}
    return FoldResult(
        held_out=held_out, prompts=prompts, banks=banks,
        proto_bank=proto_bank, proto_bank_tuned=proto_tuned, reports=reports,
        acc_imt=acc_imt, acc_wera=acc_wera,
        acc_blend=acc_blend, acc_blend_tuned=acc_blend_tuned,
        divergence_before=div_before, divergence_imt=div_imt,
        divergence_after=div_after,
        provenance=provenance,
    )


def make_benchmark(cfg: RunConfig, gen: GeneratorConfig) -> tuple[Dataset, AnchorEmbeddings]:
    backbone = build_backbone(cfg, gen.n_classes, gen.n_domains)
    return generate_synthetic(gen, backbone)
