"""Config parsing, binary formats, generator: round trips and oracles."""

from __future__ import annotations

import numpy as np
import pytest

from promptdg.backbone import Backbone, Dims, PromptState, TextEmbeddingBank, zero_prompts
from promptdg.config import GeneratorConfig, RunConfig, load_config, parse_config_text
from promptdg.dataio import (
    AnchorEmbeddings,
    FormatError,
    checkpoint_load,
    checkpoint_save,
    read_anchors,
    read_dataset,
    write_anchors,
    write_dataset,
)
from promptdg.synth import generate_synthetic, generator_params

SMALL = GeneratorConfig(n_classes=3, n_domains=2, per_cell=4, gen_seed=5)
DIMS = Dims()


def small_backbone():
    return Backbone(seed=7, dims=DIMS, n_classes=SMALL.n_classes, n_domains=SMALL.n_domains)


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------


def test_config_roundtrip(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("tau = 0.02\nbatch_size=8\nn_classes=3  # generator key\n")
    run, gen = load_config(path)
    assert run.tau == 0.02
    assert run.batch_size == 8
    assert gen.n_classes == 3
    assert run.alpha1 == 8.0  # untouched default


def test_config_rejects_unknown_and_duplicate_keys():
    with pytest.raises(ValueError, match="unknown key"):
        parse_config_text("no_such_knob = 3\n")
    with pytest.raises(ValueError, match="duplicate"):
        parse_config_text("tau = 1\ntau = 2\n")
    with pytest.raises(ValueError, match="key=value"):
        parse_config_text("just some words\n")


def test_config_validation():
    with pytest.raises(ValueError):
        RunConfig(batch_size=0)
    with pytest.raises(ValueError):
        RunConfig(wera_bases=0)
    with pytest.raises(ValueError):
        GeneratorConfig(style_scale_min=-1.0)


# ---------------------------------------------------------------------------
# dataset files
# ---------------------------------------------------------------------------


def test_dataset_write_read_write_identical(tmp_path):
    dataset, _ = generate_synthetic(SMALL, small_backbone())
    p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
    write_dataset(dataset, p1)
    loaded = read_dataset(p1)
    write_dataset(loaded, p2)
    assert p1.read_bytes() == p2.read_bytes()
    assert np.array_equal(loaded.tokens, dataset.tokens)
    assert np.array_equal(loaded.labels, dataset.labels)
    assert np.array_equal(loaded.domains, dataset.domains)


def test_dataset_truncation_error(tmp_path):
    dataset, _ = generate_synthetic(SMALL, small_backbone())
    path = tmp_path / "trunc.bin"
    write_dataset(dataset, path)
    blob = path.read_bytes()
    path.write_bytes(blob[:-3])
    with pytest.raises(FormatError, match="byte offset"):
        read_dataset(path)


def test_dataset_bad_magic(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"NOPE!\n" + b"\x00" * 40)
    with pytest.raises(FormatError, match="magic"):
        read_dataset(path)


def test_dataset_label_out_of_range(tmp_path):
    dataset, _ = generate_synthetic(SMALL, small_backbone())
    path = tmp_path / "label.bin"
    write_dataset(dataset, path)
    blob = bytearray(path.read_bytes())
    # first sample's class label sits right after the 26-byte header
    blob[26:30] = (99).to_bytes(4, "little")
    path.write_bytes(bytes(blob))
    with pytest.raises(FormatError, match="sample 0"):
        read_dataset(path)


# ---------------------------------------------------------------------------
# anchors
# ---------------------------------------------------------------------------


def test_anchor_roundtrip_and_dim_check(tmp_path):
    _, anchors = generate_synthetic(SMALL, small_backbone())
    path = tmp_path / "anch.bin"
    write_anchors(anchors, path)
    loaded = read_anchors(path, n_classes=3, n_domains=2, d_embed=DIMS.d_embed)
    assert np.allclose(loaded.class_anchors, anchors.class_anchors, atol=1e-7)
    with pytest.raises(FormatError, match="classes"):
        read_anchors(path, n_classes=4)


def test_anchor_single_row_exact(tmp_path):
    row = np.zeros((1, 8))
    row[0, 0] = 1.0
    path = tmp_path / "one.bin"
    write_anchors(AnchorEmbeddings(row, row.copy()), path)
    loaded = read_anchors(path)
    assert np.array_equal(loaded.class_anchors, row)


def test_anchor_bad_magic(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"WRONG\n" + b"\x00" * 12)
    with pytest.raises(FormatError, match="magic"):
        read_anchors(path)


def test_anchor_renormalized_on_drift(tmp_path):
    row = np.full((1, 4), 0.7)  # norm 1.4, well past the drift tolerance
    path = tmp_path / "drift.bin"
    write_anchors(AnchorEmbeddings(row, row.copy()), path)
    loaded = read_anchors(path)
    assert abs(np.linalg.norm(loaded.class_anchors[0]) - 1.0) < 1e-12


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(11)
    prompts = PromptState.init(DIMS, seed=3)
    prompts.e_inv += 0.1 * rng.standard_normal(prompts.e_inv.shape)
    banks = TextEmbeddingBank(
        invariant=rng.standard_normal((3, DIMS.d_embed)),
        specific=rng.standard_normal((2, DIMS.d_embed)),
    )
    path = tmp_path / "ck.bin"
    checkpoint_save(path, prompts, 7, DIMS, 3, 2, "imt", banks)
    loaded = checkpoint_load(path)
    assert loaded.stage == "imt"
    assert loaded.backbone_seed == 7
    for a, b in (
        (loaded.prompts.ctx_class, prompts.ctx_class),
        (loaded.prompts.ctx_domain, prompts.ctx_domain),
        (loaded.prompts.e_inv, prompts.e_inv),
        (loaded.prompts.e_spec, prompts.e_spec),
        (loaded.banks.invariant, banks.invariant),
        (loaded.banks.specific, banks.specific),
    ):
        assert np.array_equal(a, b)  # 0 ulp


def test_checkpoint_seed_mismatch(tmp_path):
    path = tmp_path / "ck.bin"
    checkpoint_save(path, PromptState.init(DIMS, 0), 7, DIMS, 3, 2, "gat")
    with pytest.raises(FormatError, match="seed"):
        checkpoint_load(path, expect_backbone_seed=8)


# ---------------------------------------------------------------------------
# generator oracles
# ---------------------------------------------------------------------------


def test_generator_deterministic_bytes(tmp_path):
    bb = small_backbone()
    d1, a1 = generate_synthetic(SMALL, bb)
    d2, a2 = generate_synthetic(SMALL, bb)
    pa, pb = tmp_path / "a.bin", tmp_path / "b.bin"
    write_dataset(d1, pa)
    write_dataset(d2, pb)
    assert pa.read_bytes() == pb.read_bytes()
    assert np.array_equal(a1.class_anchors, a2.class_anchors)


def test_generator_cell_counts():
    dataset, _ = generate_synthetic(SMALL, small_backbone())
    for m in range(SMALL.n_domains):
        for k in range(SMALL.n_classes):
            cell = np.sum((dataset.domains == m) & (dataset.labels == k))
            assert cell == SMALL.per_cell


def test_generator_moment_oracle():
    """Per-domain channel mean matches scale*mean(content)+shift within 3 SE."""
    cfg = GeneratorConfig(n_classes=4, n_domains=3, per_cell=80, gen_seed=15)
    bb = Backbone(seed=7, dims=DIMS, n_classes=4, n_domains=3)
    dataset, _ = generate_synthetic(cfg, bb)
    content, scales, shifts = generator_params(cfg, DIMS.c_in)
    cbar = content.mean(axis=0)
    for m in range(cfg.n_domains):
        rows = dataset.tokens[dataset.domains == m].reshape(-1, DIMS.c_in)
        expected = scales[m] * cbar + shifts[m]
        se = scales[m] * cfg.token_noise / np.sqrt(rows.shape[0])
        # class-content spread does not enter the SE: classes are balanced
        assert np.all(np.abs(rows.mean(axis=0) - expected) <= 3.0 * se + 1e-9)


def test_generator_anchor_alignment_oracle():
    """Anchors stay close (cosine >= 0.9) to the encoded class directions."""
    cfg = GeneratorConfig(n_classes=5, n_domains=2, per_cell=2, anchor_noise=0.05, gen_seed=13)
    bb = Backbone(seed=7, dims=DIMS, n_classes=5, n_domains=2)
    _, anchors = generate_synthetic(cfg, bb)
    content, _, _ = generator_params(cfg, DIMS.c_in)
    blank = zero_prompts(DIMS)
    for k in range(cfg.n_classes):
        clean = np.tile(content[k], (DIMS.l_tok, 1))
        direction = bb.encode_image(clean, blank).data
        cos = float(np.dot(direction, anchors.class_anchors[k]))
        assert cos >= 0.9


def test_generator_backbone_count_mismatch():
    with pytest.raises(ValueError, match="backbone"):
        generate_synthetic(SMALL, Backbone(seed=7, dims=DIMS, n_classes=9, n_domains=2))
