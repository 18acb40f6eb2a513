"""Synthetic multi-domain benchmark generator.

Each class has a fixed content direction in token space; each domain applies
a per-channel scale and shift, so the only cross-domain difference is in
first and second moments — the exact family the stylization stage models.
Anchor embeddings are the backbone encodings of the clean class/domain
directions plus controlled noise, standing in for externally provided
guidance text.
"""

from __future__ import annotations

import numpy as np

from .backbone import Backbone, zero_prompts
from .config import GeneratorConfig
from .dataio import AnchorEmbeddings, Dataset


def _quantize(x: np.ndarray) -> np.ndarray:
    # file payloads are float32; keep the in-memory values identical
    return x.astype(np.float32).astype(np.float64)


def generate_synthetic(cfg: GeneratorConfig, backbone: Backbone) -> tuple[Dataset, AnchorEmbeddings]:
    """Deterministic dataset + anchors; identical seeds give identical bytes."""
    if backbone.n_classes != cfg.n_classes or backbone.n_domains != cfg.n_domains:
        raise ValueError(
            f"backbone built for {backbone.n_classes} classes / {backbone.n_domains} "
            f"domains, generator wants {cfg.n_classes} / {cfg.n_domains}"
        )
    dims = backbone.dims
    rng = np.random.default_rng(cfg.gen_seed)
    content, scales, shifts = _draw_params(cfg, dims.c_in, rng)

    n = cfg.n_domains * cfg.n_classes * cfg.per_cell
    tokens = np.empty((n, dims.l_tok, dims.c_in))
    labels = np.empty(n, dtype=np.int64)
    domains = np.empty(n, dtype=np.int64)
    i = 0
    for m in range(cfg.n_domains):
        for k in range(cfg.n_classes):
            for _ in range(cfg.per_cell):
                noise = cfg.token_noise * rng.standard_normal((dims.l_tok, dims.c_in))
                tokens[i] = scales[m] * (content[k] + noise) + shifts[m]
                labels[i] = k
                domains[i] = m
                i += 1
    tokens = _quantize(tokens)

    dataset = Dataset(
        tokens=tokens, labels=labels, domains=domains,
        ids=np.arange(n, dtype=np.int64),
        n_classes=cfg.n_classes, n_domains=cfg.n_domains,
    )

    blank = zero_prompts(dims)

    def encode_direction(row: np.ndarray) -> np.ndarray:
        clean = np.tile(row, (dims.l_tok, 1))
        return backbone.encode_image(clean, blank).data

    class_anchors = np.empty((cfg.n_classes, dims.d_embed))
    for k in range(cfg.n_classes):
        vec = encode_direction(content[k])
        vec = vec + cfg.anchor_noise * rng.standard_normal(dims.d_embed)
        class_anchors[k] = vec / np.linalg.norm(vec)

    mean_content = content.mean(axis=0)
    domain_anchors = np.empty((cfg.n_domains, dims.d_embed))
    for m in range(cfg.n_domains):
        vec = encode_direction(scales[m] * mean_content + shifts[m])
        vec = vec + cfg.anchor_noise * rng.standard_normal(dims.d_embed)
        domain_anchors[m] = vec / np.linalg.norm(vec)

    anchors = AnchorEmbeddings(
        class_anchors=_quantize(class_anchors),
        domain_anchors=_quantize(domain_anchors),
    )
    return dataset, anchors


def _draw_params(cfg: GeneratorConfig, c_in: int, rng) -> tuple[np.ndarray, ...]:
    content = rng.standard_normal((cfg.n_classes, c_in))
    scales = rng.uniform(cfg.style_scale_min, cfg.style_scale_max,
                         size=(cfg.n_domains, c_in))
    shifts = rng.uniform(cfg.style_shift_min, cfg.style_shift_max,
                         size=(cfg.n_domains, c_in))
    return content, scales, shifts


def generator_params(cfg: GeneratorConfig, c_in: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """The (content, scales, shifts) a given config draws; moment-check oracle."""
    return _draw_params(cfg, c_in, np.random.default_rng(cfg.gen_seed))
