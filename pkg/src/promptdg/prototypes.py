"""Inference-time ensemble: a per-(domain, class) prototype cache blended
with the invariant text-bank prediction, plus optional cache fine-tuning.

Rows of the key matrix are unit-norm mean features; the one-hot value
matrix is frozen forever. Class scores aggregate affinities in row order
(bincount), so a plain loop over rows reproduces them bit-exactly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .backbone import Backbone
from .dataio import Dataset, FormatError, expect_magic, read_exact
from .stages import _epoch_batches

PROTO_MAGIC = b"PROT1\n"
UNIT_TOL = 1e-6


@dataclass
class PrototypeBank:
    """Key rows (unit norm) and frozen one-hot values; row (m, k) sits at
    index m * n_classes + k with m indexing ``domain_ids`` order."""

    keys: np.ndarray     # (n_domains * n_classes, d)
    values: np.ndarray   # (n_domains * n_classes, n_classes) one-hot
    beta_sharp: float
    n_classes: int
    n_domains: int
    domain_ids: tuple[int, ...] = ()

    def __post_init__(self):
        rows = self.n_classes * self.n_domains
        if self.keys.shape[0] != rows or self.values.shape != (rows, self.n_classes):
            raise ValueError("bank shapes do not match the declared counts")
        norms = np.linalg.norm(self.keys, axis=1)
        if np.abs(norms - 1.0).max(initial=0.0) > UNIT_TOL:
            raise ValueError("prototype rows must be unit-norm")
        one_hot = (self.values.sum(axis=1) == 1.0) & np.isin(self.values, (0.0, 1.0)).all(axis=1)
        if not one_hot.all():
            raise ValueError("value rows must be exactly one-hot")

    @property
    def row_classes(self) -> np.ndarray:
        return np.argmax(self.values, axis=1)

    def copy(self) -> "PrototypeBank":
        return PrototypeBank(
            keys=self.keys.copy(), values=self.values.copy(),
            beta_sharp=self.beta_sharp, n_classes=self.n_classes,
            n_domains=self.n_domains, domain_ids=self.domain_ids,
        )


def init_prototypes(
    dataset: Dataset,
    backbone: Backbone,
    e_spec: np.ndarray,
    beta_sharp: float,
    domain_ids: Sequence[int] | None = None,
    features: np.ndarray | None = None,
) -> PrototypeBank:
    """Renormalized mean specific-encoder feature per (domain, class) cell.

    ``features`` may carry precomputed embeddings aligned with the dataset;
    otherwise they are encoded here. Every cell must be populated.
    """
    if domain_ids is None:
        domain_ids = sorted(int(d) for d in np.unique(dataset.domains))
    if features is None:
        zhat = backbone.front_batch(dataset.tokens)
        features = np.concatenate([
            backbone.embed_batch([zhat[i] for i in range(s, min(s + 64, len(dataset)))], e_spec).data
            for s in range(0, len(dataset), 64)
        ], axis=0)
    n_c = dataset.n_classes
    keys = np.empty((len(domain_ids) * n_c, backbone.dims.d_embed))
    values = np.zeros((len(domain_ids) * n_c, n_c))
    for m, dom in enumerate(domain_ids):
        for k in range(n_c):
            mask = (dataset.domains == dom) & (dataset.labels == k)
            if not mask.any():
                raise ValueError(f"no samples for (domain {dom}, class {k})")
            mean = features[mask].mean(axis=0)
            keys[m * n_c + k] = mean / np.linalg.norm(mean)
            values[m * n_c + k, k] = 1.0
    return PrototypeBank(
        keys=keys, values=values, beta_sharp=beta_sharp,
        n_classes=n_c, n_domains=len(domain_ids), domain_ids=tuple(domain_ids),
    )


def affinity(query: np.ndarray, bank: PrototypeBank) -> np.ndarray:
    """exp(-beta * (1 - cos)) against every key row; entries in (0, 1]."""
    query = np.asarray(query, dtype=np.float64).reshape(-1)
    drift = abs(np.linalg.norm(query) - 1.0)
    if drift > UNIT_TOL:
        raise ValueError(f"query must be unit-norm (drift {drift:.3g})")
    sims = bank.keys @ query
    return np.exp(-bank.beta_sharp * (1.0 - sims))


def specific_predict(query: np.ndarray, bank: PrototypeBank) -> np.ndarray:
    """Raw cache scores per class: affinities summed through the one-hot
    values in row order."""
    phi = affinity(query, bank)
    return np.bincount(bank.row_classes, weights=phi, minlength=bank.n_classes)


def invariant_predict(query: np.ndarray, class_bank: np.ndarray, tau: float) -> np.ndarray:
    """Softmax over classes of text-bank similarities."""
    logits = (class_bank @ np.asarray(query).reshape(-1)) / tau
    shifted = np.exp(logits - logits.max())
    return shifted / shifted.sum()


def combined_predict(
    tokens: np.ndarray,
    backbone: Backbone,
    e_inv: np.ndarray,
    e_spec: np.ndarray,
    class_bank: np.ndarray,
    bank: PrototypeBank,
    beta2: float,
    tau: float,
) -> tuple[np.ndarray, int]:
    """Blend the invariant softmax with the cache scores; returns (P, argmax)."""
    zhat = backbone.visual_front(tokens)
    q_inv = backbone.visual_rest(zhat, e_inv).data
    q_spec = backbone.visual_rest(zhat, e_spec).data
    p_inv = invariant_predict(q_inv, class_bank, tau)
    p_spec = specific_predict(q_spec, bank)
    p = p_inv + beta2 * p_spec
    return p, int(np.argmax(p))


def finetune_prototypes(
    bank: PrototypeBank,
    dataset: Dataset,
    backbone: Backbone,
    e_spec: np.ndarray,
    epochs: int,
    lr: float,
    batch_size: int = 16,
    seed: int = 0,
    features: np.ndarray | None = None,
) -> PrototypeBank:
    """SGD on cross-entropy of softmax cache scores against class labels.

    Values stay frozen; key rows are renormalized after every step so the
    affinity stays a cosine read. Returns a new bank.
    """
    out = bank.copy()
    if epochs == 0:
        return out
    if features is None:
        zhat = backbone.front_batch(dataset.tokens)
        features = np.concatenate([
            backbone.embed_batch([zhat[i] for i in range(s, min(s + 64, len(dataset)))], e_spec).data
            for s in range(0, len(dataset), 64)
        ], axis=0)
    rng = np.random.default_rng(seed)
    keys = ad.Array(out.keys, requires_grad=True)
    values = out.values
    for _ in range(epochs):
        for batch in _epoch_batches(len(dataset), batch_size, rng):
            feats = features[batch]
            onehot = np.zeros((len(batch), bank.n_classes))
            onehot[np.arange(len(batch)), dataset.labels[batch]] = 1.0
            with ad.Tape() as tape:
                sims = ad.matmul(ad.Array(feats), ad.transpose(keys))
                phi = ad.exp(ad.mul(ad.add(sims, -1.0), bank.beta_sharp))
                scores = ad.matmul(phi, values)
                logp = ad.log_softmax(scores, axis=-1)
                loss = ad.mul(ad.sum_(ad.mul(logp, onehot)), -1.0 / len(batch))
                tape.backward(loss)
            ad.sgd_step([keys], lr=lr)
            keys.data /= np.linalg.norm(keys.data, axis=1, keepdims=True)
    return out


# ---------------------------------------------------------------------------
# PROT1 persistence
# ---------------------------------------------------------------------------


def save_prototypes(bank: PrototypeBank, path) -> None:
    with open(path, "wb") as fh:
        fh.write(PROTO_MAGIC)
        fh.write(struct.pack("<3I", bank.n_classes, bank.n_domains, bank.keys.shape[1]))
        fh.write(np.ascontiguousarray(bank.keys, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(bank.values, dtype="<f8").tobytes())


def load_prototypes(path, beta_sharp: float) -> PrototypeBank:
    with open(path, "rb") as fh:
        expect_magic(fh, PROTO_MAGIC)
        n_c, n_s, d = struct.unpack("<3I", read_exact(fh, 12, "prototype header"))
        rows = n_c * n_s
        keys = np.frombuffer(
            read_exact(fh, 8 * rows * d, "prototype keys"), dtype="<f8"
        ).reshape(rows, d).copy()
        values = np.frombuffer(
            read_exact(fh, 8 * rows * n_c, "prototype values"), dtype="<f8"
        ).reshape(rows, n_c).copy()
        if fh.read(1):
            raise FormatError("trailing bytes in prototype file")
    return PrototypeBank(
        keys=keys, values=values, beta_sharp=beta_sharp,
        n_classes=n_c, n_domains=n_s,
    )
