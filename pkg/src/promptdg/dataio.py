"""Binary file formats and the in-memory dataset.

All formats are little-endian with a 6-byte magic line and fail loudly with
the byte offset of the first violation. Sample payloads and anchors are
stored as float32; learnable checkpoint parameters as float64 so a
save/load round trip is bit-exact.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .backbone import Dims, PromptState, TextEmbeddingBank

DATASET_MAGIC = b"PADG1\n"
ANCHOR_MAGIC = b"ANCH1\n"
CHECKPOINT_MAGIC = b"CKPT1\n"
CHECKPOINT_VERSION = 1

STAGE_CODES = {"init": 0, "gat": 1, "imt": 2, "wera": 3}
STAGE_NAMES = {v: k for k, v in STAGE_CODES.items()}


class FormatError(ValueError):
    """A file violated its declared binary layout."""


@dataclass
class Dataset:
    """Token samples with class/domain labels and stable provenance ids."""

    tokens: np.ndarray   # (N, L, c_in) float64, float32-quantized values
    labels: np.ndarray   # (N,) int64, < n_classes
    domains: np.ndarray  # (N,) int64, < n_domains
    ids: np.ndarray      # (N,) int64, unique
    n_classes: int
    n_domains: int

    def __len__(self) -> int:
        return self.tokens.shape[0]

    @property
    def l_tok(self) -> int:
        return self.tokens.shape[1]

    @property
    def c_in(self) -> int:
        return self.tokens.shape[2]

    def subset(self, index) -> "Dataset":
        index = np.asarray(index)
        return Dataset(
            tokens=self.tokens[index],
            labels=self.labels[index],
            domains=self.domains[index],
            ids=self.ids[index],
            n_classes=self.n_classes,
            n_domains=self.n_domains,
        )

    def split_domain(self, held_out: int) -> tuple["Dataset", "Dataset"]:
        """(training split without the domain, the held-out domain)."""
        if not 0 <= held_out < self.n_domains:
            raise ValueError(f"held-out domain {held_out} not in [0, {self.n_domains})")
        mask = self.domains != held_out
        return self.subset(mask), self.subset(~mask)


@dataclass
class AnchorEmbeddings:
    """File-provided guidance embeddings; unit rows, never trained."""

    class_anchors: np.ndarray   # (n_classes, d)
    domain_anchors: np.ndarray  # (n_domains, d)


def read_exact(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise FormatError(
            f"truncated file: needed {n} bytes for {what} at byte offset {fh.tell() - len(data)}"
        )
    return data


def expect_magic(fh, magic: bytes) -> None:
    got = fh.read(len(magic))
    if got != magic:
        raise FormatError(
            f"bad magic at byte offset 0: expected {magic!r}, got {got!r}"
        )


# ---------------------------------------------------------------------------
# PADG1 dataset files
# ---------------------------------------------------------------------------


def write_dataset(dataset: Dataset, path) -> None:
    n = len(dataset)
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack(
            "<5I", n, dataset.l_tok, dataset.c_in, dataset.n_classes, dataset.n_domains
        ))
        for i in range(n):
            fh.write(struct.pack("<2I", int(dataset.labels[i]), int(dataset.domains[i])))
            fh.write(dataset.tokens[i].astype("<f4").tobytes())


def read_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        expect_magic(fh, DATASET_MAGIC)
        n, l_tok, c_in, n_classes, n_domains = struct.unpack(
            "<5I", read_exact(fh, 20, "dataset header")
        )
        tokens = np.empty((n, l_tok, c_in))
        labels = np.empty(n, dtype=np.int64)
        domains = np.empty(n, dtype=np.int64)
        row_bytes = 4 * l_tok * c_in
        for i in range(n):
            offset = fh.tell()
            label, domain = struct.unpack("<2I", read_exact(fh, 8, f"sample {i} labels"))
            if label >= n_classes:
                raise FormatError(
                    f"sample {i}: class label {label} >= {n_classes} at byte offset {offset}"
                )
            if domain >= n_domains:
                raise FormatError(
                    f"sample {i}: domain label {domain} >= {n_domains} at byte offset {offset + 4}"
                )
            payload = read_exact(fh, row_bytes, f"sample {i} tokens")
            tokens[i] = np.frombuffer(payload, dtype="<f4").reshape(l_tok, c_in)
            labels[i] = label
            domains[i] = domain
        trailing = fh.read(1)
        if trailing:
            raise FormatError(f"trailing bytes after sample data at byte offset {fh.tell() - 1}")
    return Dataset(
        tokens=tokens, labels=labels, domains=domains,
        ids=np.arange(n, dtype=np.int64), n_classes=n_classes, n_domains=n_domains,
    )


# ---------------------------------------------------------------------------
# ANCH1 anchor files
# ---------------------------------------------------------------------------


def write_anchors(anchors: AnchorEmbeddings, path) -> None:
    n_c, d = anchors.class_anchors.shape
    n_s = anchors.domain_anchors.shape[0]
    with open(path, "wb") as fh:
        fh.write(ANCHOR_MAGIC)
        fh.write(struct.pack("<3I", n_c, n_s, d))
        fh.write(anchors.class_anchors.astype("<f4").tobytes())
        fh.write(anchors.domain_anchors.astype("<f4").tobytes())


def read_anchors(
    path,
    n_classes: int | None = None,
    n_domains: int | None = None,
    d_embed: int | None = None,
) -> AnchorEmbeddings:
    """Load anchors; rows drifting from unit norm by more than 1e-6 are
    renormalized, and declared dimensions must match the caller's config."""
    with open(path, "rb") as fh:
        expect_magic(fh, ANCHOR_MAGIC)
        n_c, n_s, d = struct.unpack("<3I", read_exact(fh, 12, "anchor header"))
        if n_classes is not None and n_c != n_classes:
            raise FormatError(f"anchor file has {n_c} classes, config expects {n_classes}")
        if n_domains is not None and n_s != n_domains:
            raise FormatError(f"anchor file has {n_s} domains, config expects {n_domains}")
        if d_embed is not None and d != d_embed:
            raise FormatError(f"anchor file embeds in {d} dims, config expects {d_embed}")
        cls = np.frombuffer(
            read_exact(fh, 4 * n_c * d, "class anchors"), dtype="<f4"
        ).reshape(n_c, d).astype(np.float64)
        dom = np.frombuffer(
            read_exact(fh, 4 * n_s * d, "domain anchors"), dtype="<f4"
        ).reshape(n_s, d).astype(np.float64)
        trailing = fh.read(1)
        if trailing:
            raise FormatError(f"trailing bytes at byte offset {fh.tell() - 1}")
    for rows in (cls, dom):
        norms = np.linalg.norm(rows, axis=1, keepdims=True)
        if np.any(norms == 0.0):
            raise FormatError("anchor row has zero norm")
        drifted = np.abs(norms[:, 0] - 1.0) > 1e-6
        rows[drifted] /= norms[drifted]
    return AnchorEmbeddings(class_anchors=cls, domain_anchors=dom)


# ---------------------------------------------------------------------------
# CKPT1 prompt checkpoints
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    backbone_seed: int
    dims: Dims
    n_classes: int
    n_domains: int
    stage: str
    prompts: PromptState
    banks: TextEmbeddingBank | None


def checkpoint_save(
    path,
    prompts: PromptState,
    backbone_seed: int,
    dims: Dims,
    n_classes: int,
    n_domains: int,
    stage: str,
    banks: TextEmbeddingBank | None = None,
) -> None:
    """Persist learnable parameters and the backbone seed, never frozen weights."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack(
            "<12I",
            CHECKPOINT_VERSION, backbone_seed, n_classes, n_domains,
            dims.l_tok, dims.c_in, dims.c_mid, dims.d_embed,
            dims.l_ctx, dims.l_vp, dims.d_tok, STAGE_CODES[stage],
        ))
        if banks is None:
            fh.write(struct.pack("<2I", 0, 0))
        else:
            fh.write(struct.pack(
                "<2I", banks.invariant.shape[0], banks.specific.shape[0]
            ))
        for arr in (prompts.ctx_class, prompts.ctx_domain, prompts.e_inv, prompts.e_spec):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        if banks is not None:
            fh.write(np.ascontiguousarray(banks.invariant, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(banks.specific, dtype="<f8").tobytes())


def checkpoint_load(path, expect_backbone_seed: int | None = None) -> Checkpoint:
    with open(path, "rb") as fh:
        expect_magic(fh, CHECKPOINT_MAGIC)
        header = struct.unpack("<12I", read_exact(fh, 48, "checkpoint header"))
        (version, seed, n_classes, n_domains, l_tok, c_in, c_mid, d_embed,
         l_ctx, l_vp, d_tok, stage_code) = header
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"checkpoint version {version}, expected {CHECKPOINT_VERSION}")
        if expect_backbone_seed is not None and seed != expect_backbone_seed:
            raise FormatError(
                f"checkpoint backbone seed {seed} does not match configured seed "
                f"{expect_backbone_seed}"
            )
        if stage_code not in STAGE_NAMES:
            raise FormatError(f"unknown stage code {stage_code}")
        w_rows, h_rows = struct.unpack("<2I", read_exact(fh, 8, "bank row counts"))
        dims = Dims(
            l_tok=l_tok, c_in=c_in, c_mid=c_mid, d_embed=d_embed,
            l_ctx=l_ctx, l_vp=l_vp, d_tok=d_tok,
        )

        def read_mat(rows, cols, what):
            return np.frombuffer(
                read_exact(fh, 8 * rows * cols, what), dtype="<f8"
            ).reshape(rows, cols).copy()

        prompts = PromptState(
            ctx_class=read_mat(dims.l_ctx, dims.d_tok, "class context"),
            ctx_domain=read_mat(dims.l_ctx, dims.d_tok, "domain context"),
            e_inv=read_mat(dims.l_vp, dims.c_mid, "invariant visual prompts"),
            e_spec=read_mat(dims.l_vp, dims.c_mid, "specific visual prompts"),
        )
        banks = None
        if w_rows or h_rows:
            banks = TextEmbeddingBank(
                invariant=read_mat(w_rows, dims.d_embed, "class bank"),
                specific=read_mat(h_rows, dims.d_embed, "domain bank"),
            )
        trailing = fh.read(1)
        if trailing:
            raise FormatError(f"trailing bytes at byte offset {fh.tell() - 1}")
    return Checkpoint(
        backbone_seed=seed, dims=dims, n_classes=n_classes, n_domains=n_domains,
        stage=STAGE_NAMES[stage_code], prompts=prompts, banks=banks,
    )
