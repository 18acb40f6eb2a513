"""Prototype cache: initialization oracle, affinity math, blending, and
fine-tuning invariants."""

from __future__ import annotations

import math

import numpy as np
import pytest

from promptdg.backbone import Backbone, Dims, PromptState
from promptdg.config import GeneratorConfig
from promptdg.dataio import FormatError
from promptdg.prototypes import (
    PrototypeBank,
    affinity,
    combined_predict,
    finetune_prototypes,
    init_prototypes,
    invariant_predict,
    load_prototypes,
    save_prototypes,
    specific_predict,
)
from promptdg.stages import build_feature_cache
from promptdg.synth import generate_synthetic

DIMS = Dims()
GEN = GeneratorConfig(n_classes=4, n_domains=3, per_cell=6, gen_seed=33)


@pytest.fixture(scope="module")
def world():
    backbone = Backbone(seed=7, dims=DIMS, n_classes=GEN.n_classes, n_domains=GEN.n_domains)
    dataset, _ = generate_synthetic(GEN, backbone)
    prompts = PromptState.init(DIMS, seed=40)
    bank = init_prototypes(dataset, backbone, prompts.e_spec, beta_sharp=5.0)
    return backbone, dataset, prompts, bank


def unit(v):
    return v / np.linalg.norm(v)


def toy_bank(beta=5.0):
    rng = np.random.default_rng(50)
    keys = rng.normal(size=(6, 8))
    keys /= np.linalg.norm(keys, axis=1, keepdims=True)
    values = np.zeros((6, 3))
    for r in range(6):
        values[r, r % 3] = 1.0
    return PrototypeBank(keys=keys, values=values, beta_sharp=beta,
                         n_classes=3, n_domains=2)


def test_bank_validation():
    bank = toy_bank()
    with pytest.raises(ValueError, match="unit-norm"):
        PrototypeBank(keys=bank.keys * 2, values=bank.values, beta_sharp=5.0,
                      n_classes=3, n_domains=2)
    bad_values = bank.values.copy()
    bad_values[0] = 0.5
    with pytest.raises(ValueError, match="one-hot"):
        PrototypeBank(keys=bank.keys, values=bad_values, beta_sharp=5.0,
                      n_classes=3, n_domains=2)


def test_init_prototypes_shape_and_recompute(world):
    backbone, dataset, prompts, bank = world
    assert bank.keys.shape == (GEN.n_domains * GEN.n_classes, DIMS.d_embed)
    cache = build_feature_cache(dataset, backbone)
    feats = np.concatenate([
        backbone.embed_batch([cache.zhat[i] for i in range(s, min(s + 64, len(dataset)))],
                             prompts.e_spec).data
        for s in range(0, len(dataset), 64)
    ])
    rng = np.random.default_rng(3)
    for _ in range(5):
        m = int(rng.integers(GEN.n_domains))
        k = int(rng.integers(GEN.n_classes))
        mask = (dataset.domains == m) & (dataset.labels == k)
        expected = unit(feats[mask].mean(axis=0))
        assert np.allclose(bank.keys[m * GEN.n_classes + k], expected, atol=1e-12)
        assert bank.values[m * GEN.n_classes + k, k] == 1.0


def test_init_prototypes_single_sample_cell():
    backbone = Backbone(seed=7, dims=DIMS, n_classes=2, n_domains=2)
    gen = GeneratorConfig(n_classes=2, n_domains=2, per_cell=1, gen_seed=8)
    dataset, _ = generate_synthetic(gen, backbone)
    prompts = PromptState.init(DIMS, seed=1)
    bank = init_prototypes(dataset, backbone, prompts.e_spec, beta_sharp=5.0)
    feats = backbone.encode_image(dataset.tokens[0], prompts.e_spec).data
    row = dataset.domains[0] * 2 + dataset.labels[0]
    assert np.allclose(bank.keys[row], feats, atol=1e-12)


def test_init_prototypes_empty_cell_error(world):
    backbone, dataset, prompts, _ = world
    subset = dataset.subset(~((dataset.domains == 1) & (dataset.labels == 2)))
    with pytest.raises(ValueError, match=r"domain 1.*class 2"):
        init_prototypes(subset, backbone, prompts.e_spec, beta_sharp=5.0)


def test_prototype_mean_arithmetic():
    a, b = np.array([1.0, 0.0]), np.array([0.0, 1.0])
    mean = unit((a + b) / 2)
    assert np.allclose(mean, [math.sqrt(0.5), math.sqrt(0.5)])


def test_affinity_values():
    bank = toy_bank(beta=5.0)
    phi = affinity(bank.keys[2], bank)
    assert phi[2] == pytest.approx(1.0, abs=1e-12)
    assert np.all(phi > 0.0) and np.all(phi <= 1.0)
    # orthogonal query: affinity exp(-beta)
    q = unit(np.linalg.svd(bank.keys)[2][-1])
    sims = bank.keys @ q
    expected = np.exp(-5.0 * (1.0 - sims))
    assert np.allclose(affinity(q, bank), expected)
    assert math.isclose(np.exp(-5.0), 6.7379e-3, rel_tol=1e-4)


def test_affinity_unit_check():
    bank = toy_bank()
    with pytest.raises(ValueError, match="unit-norm"):
        affinity(np.full(8, 0.5), bank)


def test_affinity_monotone_in_similarity():
    bank = toy_bank(beta=3.0)
    rng = np.random.default_rng(4)
    for _ in range(100):
        q = unit(rng.normal(size=8))
        sims = bank.keys @ q
        phi = affinity(q, bank)
        order = np.argsort(sims)
        assert np.all(np.diff(phi[order]) >= 0.0)


def test_specific_predict_matches_row_loop():
    bank = toy_bank()
    rng = np.random.default_rng(5)
    for _ in range(100):
        q = unit(rng.normal(size=8))
        phi = affinity(q, bank)
        expected = np.zeros(3)
        for r in range(6):
            expected[int(np.argmax(bank.values[r]))] += phi[r]
        assert np.array_equal(specific_predict(q, bank), expected)  # bit-exact


def test_specific_predict_one_hot_and_symmetry():
    bank = toy_bank(beta=50.0)
    scores = specific_predict(bank.keys[4], bank)
    assert int(np.argmax(scores)) == 4 % 3
    # all-equal affinities: every class collects n_domains * v
    uniform = PrototypeBank(keys=np.tile(unit(np.ones(8)), (6, 1)),
                            values=bank.values, beta_sharp=2.0,
                            n_classes=3, n_domains=2)
    q = unit(np.ones(8))
    scores = specific_predict(q, uniform)
    assert np.allclose(scores, scores[0])
    assert scores[0] == pytest.approx(2.0 * np.exp(0.0))


def test_combined_predict_blend_and_degenerate(world):
    backbone, dataset, prompts, bank = world
    rng = np.random.default_rng(6)
    class_bank = rng.normal(size=(GEN.n_classes, DIMS.d_embed))
    class_bank /= np.linalg.norm(class_bank, axis=1, keepdims=True)
    tokens = dataset.tokens[17]
    p0, arg0 = combined_predict(tokens, backbone, prompts.e_inv, prompts.e_spec,
                                class_bank, bank, beta2=0.0, tau=0.05)
    q_inv = backbone.encode_image(tokens, prompts.e_inv).data
    assert arg0 == int(np.argmax(invariant_predict(q_inv, class_bank, 0.05)))
    p5, _ = combined_predict(tokens, backbone, prompts.e_inv, prompts.e_spec,
                             class_bank, bank, beta2=5.0, tau=0.05)
    q_spec = backbone.encode_image(tokens, prompts.e_spec).data
    assert np.allclose(p5 - p0, 5.0 * specific_predict(q_spec, bank), atol=1e-12)


def test_argmax_scaling_invariance(world):
    """beta2 -> c*beta2 with cache scores/c leaves the decision unchanged."""
    backbone, dataset, prompts, bank = world
    rng = np.random.default_rng(7)
    class_bank = rng.normal(size=(GEN.n_classes, DIMS.d_embed))
    class_bank /= np.linalg.norm(class_bank, axis=1, keepdims=True)
    for i in range(10):
        tokens = dataset.tokens[i]
        q_inv = backbone.encode_image(tokens, prompts.e_inv).data
        q_spec = backbone.encode_image(tokens, prompts.e_spec).data
        p_inv = invariant_predict(q_inv, class_bank, 0.05)
        p_spec = specific_predict(q_spec, bank)
        for c in (0.5, 2.0, 10.0):
            a = np.argmax(p_inv + 5.0 * p_spec)
            b = np.argmax(p_inv + (5.0 * c) * (p_spec / c))
            assert a == b


def test_finetune_keeps_values_frozen_and_keys_unit(world):
    backbone, dataset, prompts, bank = world
    tuned = finetune_prototypes(bank, dataset, backbone, prompts.e_spec,
                                epochs=3, lr=0.05, seed=9)
    assert np.array_equal(tuned.values, bank.values)  # bitwise frozen
    assert not np.array_equal(tuned.keys, bank.keys)
    assert np.abs(np.linalg.norm(tuned.keys, axis=1) - 1.0).max() < 1e-12
    untouched = finetune_prototypes(bank, dataset, backbone, prompts.e_spec,
                                    epochs=0, lr=0.05)
    assert np.array_equal(untouched.keys, bank.keys)


def test_finetune_improves_training_accuracy(world):
    backbone, dataset, prompts, bank = world

    def cache_accuracy(b):
        cache = build_feature_cache(dataset, backbone)
        feats = np.concatenate([
            backbone.embed_batch([cache.zhat[i] for i in range(s, min(s + 64, len(dataset)))],
                                 prompts.e_spec).data
            for s in range(0, len(dataset), 64)
        ])
        preds = [int(np.argmax(specific_predict(f, b))) for f in feats]
        return float(np.mean(np.array(preds) == dataset.labels))

    before = cache_accuracy(bank)
    tuned = finetune_prototypes(bank, dataset, backbone, prompts.e_spec,
                                epochs=15, lr=0.05, seed=10)
    assert cache_accuracy(tuned) >= before


def test_prototype_file_roundtrip(tmp_path, world):
    _, _, _, bank = world
    path = tmp_path / "proto.bin"
    save_prototypes(bank, path)
    loaded = load_prototypes(path, beta_sharp=bank.beta_sharp)
    assert np.array_equal(loaded.keys, bank.keys)
    assert np.array_equal(loaded.values, bank.values)
    path.write_bytes(b"JUNK!\n" + path.read_bytes()[6:])
    with pytest.raises(FormatError, match="magic"):
        load_prototypes(path, beta_sharp=5.0)
