"""Frozen surrogate foundation model.

Stands in for a large pretrained vision-language encoder pair while keeping
the structural pieces the training stages act on: a text encoder over
learnable context vectors, a visual front half producing per-token
intermediate features whose channel statistics carry style, and a visual
rest that injects prompt tokens before pooling into a unit embedding.
All weights are a pure function of a seed and are never updated.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

# guards zero-variance tokens; small enough that re-extracted statistics of
# a stylized feature match the mixed targets to well under 1e-5
STATS_EPS = 1e-8


@dataclass(frozen=True)
class Dims:
    """Desk-scale model sizes shared by every stage."""

    l_tok: int = 8
    c_in: int = 16
    c_mid: int = 32
    d_embed: int = 32
    l_ctx: int = 16
    l_vp: int = 12
    d_tok: int = 16

    @property
    def h_vis(self) -> int:
        return 2 * self.c_mid

    @property
    def h_txt(self) -> int:
        # wide enough that the shared context can steer every class row of
        # the bank independently (needs roughly n_classes * d_embed)
        return 16 * self.d_tok

    @property
    def txt_in(self) -> int:
        return self.l_ctx * self.d_tok


@dataclass
class InstanceStats:
    """Per-channel token mean and epsilon-guarded standard deviation."""

    mu: np.ndarray
    sigma: np.ndarray


@dataclass
class PromptState:
    """All learnable parameters: text contexts and the two visual prompt sets.

    ``e_inv`` and ``e_spec`` start at zero so the untrained visual path
    coincides with the raw-backbone reference features.
    """

    ctx_class: np.ndarray
    ctx_domain: np.ndarray
    e_inv: np.ndarray
    e_spec: np.ndarray

    @classmethod
    def init(cls, dims: Dims, seed: int) -> "PromptState":
        rng = np.random.default_rng(seed)
        # visual prompts start at a live scale (inside tanh's active band, a
        # sizable share of the pooled feature); the raw-backbone reference
        # still uses zero prompt values
        return cls(
            ctx_class=0.02 * rng.standard_normal((dims.l_ctx, dims.d_tok)),
            ctx_domain=0.02 * rng.standard_normal((dims.l_ctx, dims.d_tok)),
            e_inv=rng.standard_normal((dims.l_vp, dims.c_mid)),
            e_spec=rng.standard_normal((dims.l_vp, dims.c_mid)),
        )

    def copy(self) -> "PromptState":
        return PromptState(
            self.ctx_class.copy(), self.ctx_domain.copy(),
            self.e_inv.copy(), self.e_spec.copy(),
        )


@dataclass
class TextEmbeddingBank:
    """Frozen text embeddings: one unit row per class and per domain."""

    invariant: np.ndarray
    specific: np.ndarray


def zero_prompts(dims: Dims) -> np.ndarray:
    return np.zeros((dims.l_vp, dims.c_mid))


class Backbone:
    """Seeded frozen weights for the text and visual encoders.

    Weight draw order is fixed, so two instances with the same seed and
    sizes are bit-identical. The two visual encoder instances used in
    training share this object and differ only in the prompt set passed in.
    """

    def __init__(self, seed: int, dims: Dims, n_classes: int, n_domains: int):
        self.seed = int(seed)
        self.dims = dims
        self.n_classes = int(n_classes)
        self.n_domains = int(n_domains)
        rng = np.random.default_rng(np.random.PCG64(self.seed))

        def draw(rows, cols):
            return rng.standard_normal((rows, cols)) / np.sqrt(rows)

        d = dims
        # equal column norms keep every intermediate channel's variance O(1),
        # so the epsilon guard in the instance statistics stays negligible
        front = rng.standard_normal((d.c_in, d.c_mid))
        self.w_front = front / np.linalg.norm(front, axis=0, keepdims=True) * np.sqrt(d.c_in)
        self.b_front = 0.1 * rng.standard_normal(d.c_mid)
        # quarter gain keeps typical token preactivations in tanh's active
        # band instead of the saturated tails
        self.w_tok = 0.25 * draw(d.c_mid, d.h_vis)
        self.b_tok = 0.1 * rng.standard_normal(d.h_vis)
        self.w_proj = draw(d.h_vis, d.d_embed)
        self.b_proj = 0.1 * rng.standard_normal(d.d_embed)
        self.w_txt1 = draw(d.txt_in, d.h_txt)
        self.b_txt1 = 0.1 * rng.standard_normal(d.h_txt)
        # the class/domain token gates the context pathway multiplicatively,
        # standing in for attention-style token interaction
        self.w_gate = 2.0 * draw(d.d_tok, d.h_txt)
        self.b_gate = 0.1 * rng.standard_normal(d.h_txt)
        self.w_txt2 = draw(d.h_txt, d.d_embed)
        self.b_txt2 = 0.1 * rng.standard_normal(d.d_embed)
        cls_c = rng.standard_normal((self.n_classes, d.d_tok))
        cls_d = rng.standard_normal((self.n_domains, d.d_tok))
        self.cls_class = cls_c / np.linalg.norm(cls_c, axis=1, keepdims=True)
        self.cls_domain = cls_d / np.linalg.norm(cls_d, axis=1, keepdims=True)

    # -- text side ---------------------------------------------------------

    def text_encode(self, context, index: int, kind: str = "class") -> ad.Array:
        """Encode [context tokens, frozen class/domain token] to a unit embedding."""
        if kind == "class":
            table = self.cls_class
        elif kind == "domain":
            table = self.cls_domain
        else:
            raise ValueError(f"unknown prompt kind {kind!r}")
        if not 0 <= index < table.shape[0]:
            raise IndexError(f"{kind} index {index} out of range [0, {table.shape[0]})")
        ctx = ad.as_array(context)
        if ctx.shape != (self.dims.l_ctx, self.dims.d_tok):
            raise ad.ShapeError(
                f"context shape {ctx.shape}, expected {(self.dims.l_ctx, self.dims.d_tok)}"
            )
        flat = ad.reshape(ctx, (1, self.dims.txt_in))
        hidden = ad.tanh(ad.add(ad.matmul(flat, self.w_txt1), self.b_txt1))
        gate = np.tanh(table[index] @ self.w_gate + self.b_gate).reshape(1, -1)
        out = ad.add(ad.reshape(ad.matmul(ad.mul(hidden, gate), self.w_txt2), (-1,)), self.b_txt2)
        return ad.l2_normalize(out)

    def text_bank(self, ctx_class, ctx_domain, domain_ids=None) -> tuple[ad.Array, ad.Array]:
        """Stack the per-class and per-domain text embeddings into row banks.

        ``domain_ids`` restricts (and orders) the domain rows, e.g. to the
        source domains of a leave-one-out split.
        """
        if domain_ids is None:
            domain_ids = range(self.n_domains)
        w_rows = [
            ad.reshape(self.text_encode(ctx_class, k, "class"), (1, -1))
            for k in range(self.n_classes)
        ]
        h_rows = [
            ad.reshape(self.text_encode(ctx_domain, m, "domain"), (1, -1))
            for m in domain_ids
        ]
        return ad.concat(w_rows, axis=0), ad.concat(h_rows, axis=0)

    # -- visual side ---------------------------------------------------------

    def visual_front(self, tokens: np.ndarray) -> np.ndarray:
        """Frozen per-token linear map from raw token width to channel width."""
        tokens = np.asarray(tokens, dtype=np.float64)
        if tokens.ndim != 2 or tokens.shape[1] != self.dims.c_in:
            raise ad.ShapeError(
                f"token matrix shape {tokens.shape}, expected (*, {self.dims.c_in})"
            )
        return tokens @ self.w_front + self.b_front

    def front_batch(self, token_batch: np.ndarray) -> np.ndarray:
        """visual_front over a (N, L, c_in) stack."""
        n, l, _ = token_batch.shape
        flat = self.visual_front(token_batch.reshape(n * l, -1))
        return flat.reshape(n, l, self.dims.c_mid)

    def visual_rest(self, intermediate, prompts) -> ad.Array:
        """Append prompt tokens, run the shared MLP, pool, project, normalize."""
        return ad.reshape(self.embed_batch([intermediate], prompts), (-1,))

    def embed_batch(self, intermediates, prompts) -> ad.Array:
        """Batched visual_rest: one (B, d) block of unit-row embeddings.

        ``intermediates`` is a sequence of (L, c_mid) values (Arrays or
        ndarrays); the same prompt set is appended to each. Gradients flow
        to the prompts and to any intermediate that carries them.
        """
        prompts = ad.as_array(prompts)
        if prompts.shape[-1] != self.dims.c_mid:
            raise ad.ShapeError(
                f"prompt width {prompts.shape[-1]}, expected {self.dims.c_mid}"
            )
        pieces = []
        seg_sizes = []
        for inter in intermediates:
            inter = ad.as_array(inter)
            if inter.shape[-1] != self.dims.c_mid:
                raise ad.ShapeError(
                    f"intermediate width {inter.shape[-1]}, expected {self.dims.c_mid}"
                )
            pieces.append(inter)
            pieces.append(prompts)
            seg_sizes.append(inter.shape[0] + prompts.shape[0])
        tokens = ad.concat(pieces, axis=0)
        hidden = ad.tanh(ad.add(ad.matmul(tokens, self.w_tok), self.b_tok))
        # fixed-order segment mean over each sample's (tokens + prompts) block
        b = len(seg_sizes)
        pool = np.zeros((b, sum(seg_sizes)))
        offset = 0
        for i, size in enumerate(seg_sizes):
            pool[i, offset : offset + size] = 1.0 / size
            offset += size
        pooled = ad.matmul(ad.Array(pool), hidden)
        out = ad.add(ad.matmul(pooled, self.w_proj), self.b_proj)
        return ad.l2_normalize(out)

    def encode_image(self, tokens: np.ndarray, prompts) -> ad.Array:
        return self.visual_rest(self.visual_front(tokens), prompts)

    def weight_fingerprint(self) -> bytes:
        """Concatenated raw bytes of every frozen weight, for frozen-ness checks."""
        parts = [
            self.w_front, self.b_front, self.w_tok, self.b_tok,
            self.w_proj, self.b_proj, self.w_txt1, self.b_txt1,
            self.w_gate, self.b_gate, self.w_txt2, self.b_txt2,
            self.cls_class, self.cls_domain,
        ]
        return b"".join(np.ascontiguousarray(p).tobytes() for p in parts)


def instance_stats(intermediate: np.ndarray) -> InstanceStats:
    """Per-channel mean and epsilon-guarded std over a sample's tokens."""
    z = np.asarray(intermediate, dtype=np.float64)
    mu = z.mean(axis=0)
    var = ((z - mu) ** 2).mean(axis=0)
    return InstanceStats(mu=mu, sigma=np.sqrt(var + STATS_EPS))
