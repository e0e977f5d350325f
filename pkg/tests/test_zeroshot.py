import json

import numpy as np
import pytest
from conftest import tiny_config
from hypothesis import given, settings
from hypothesis import strategies as st

from pointy.backbone import forward_patches, init_params
from pointy.data import gen_synthetic, split
from pointy.geometry import PatchSet
from pointy.train import TrainConfig, preprocess_eval, train
from pointy.zeroshot import (
    PrototypeBank,
    build_prototypes,
    cosine_similarities,
    cosine_topk,
    extract_features,
    rank_classes,
    topk_accuracy,
    write_rankings_csv,
    write_report,
    zeroshot_eval,
)


def bank(protos):
    protos = np.asarray(protos, dtype=float)
    return PrototypeBank(protos, [str(i) for i in range(len(protos))], np.ones(len(protos), int))


# prototypes --------------------------------------------------------------------

def test_prototypes_single_sample_and_cancelling_pair():
    f = np.random.default_rng(0).normal(size=(3, 5))
    np.testing.assert_array_equal(build_prototypes(f, [0, 1, 2]).prototypes, f)
    v = f[0]
    zero = build_prototypes(np.stack([v, -v]), [0, 0]).prototypes[0]
    assert np.all(zero == 0)
    with pytest.warns(UserWarning, match="zero-norm"):
        sims = cosine_similarities(v, PrototypeBank(np.stack([zero, v]), ["a", "b"], np.ones(2)))
    assert sims[0, 0] == -np.inf and sims[0, 1] == pytest.approx(1.0)


def test_prototypes_empty_class_is_named():
    with pytest.raises(ValueError, match="'b'"):
        build_prototypes(np.ones((2, 3)), [0, 0], ["a", "b"])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_prototypes_match_brute_force_and_ignore_order(seed):
    rng = np.random.default_rng(seed)
    labels = np.concatenate([np.arange(4), rng.integers(4, size=20)])
    f = rng.normal(size=(len(labels), 6))
    protos = build_prototypes(f, labels).prototypes
    for c in range(4):
        np.testing.assert_allclose(protos[c], sum(f[labels == c]) / (labels == c).sum(), atol=1e-12)
    perm = rng.permutation(len(labels))
    np.testing.assert_allclose(build_prototypes(f[perm], labels[perm]).prototypes, protos, atol=1e-12)


# scoring -----------------------------------------------------------------------

def test_exact_match_ranks_first():
    b = bank(np.eye(4) * [1, 2, 3, 4])
    f = b.prototypes[2]
    sims = cosine_similarities(f, b)
    assert rank_classes(sims)[0, 0] == 2 and sims[0, 2] == 1.0
    assert cosine_topk(5 * f, b) == cosine_topk(f, b)


def test_ties_break_by_class_index():
    b = bank([[1, 0], [1, 0], [0, 1]])
    assert rank_classes(cosine_similarities(np.array([1.0, 0.0]), b))[0].tolist() == [0, 1, 2]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.floats(1e-3, 1e3))
def test_ranking_matches_brute_force_and_is_scale_invariant(seed, scale):
    rng = np.random.default_rng(seed)
    b = bank(rng.normal(size=(10, 8)))
    f = rng.normal(size=8)
    sims = [float(f @ p / (np.linalg.norm(f) * np.linalg.norm(p))) for p in b.prototypes]
    expected = sorted(range(10), key=lambda c: (-sims[c], c))
    assert rank_classes(cosine_similarities(f, b))[0].tolist() == expected
    assert cosine_topk(scale * f, b, ks=(1, 3, 10)) == cosine_topk(f, b, ks=(1, 3, 10))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 8))
def test_topk_accuracy_is_monotone(seed, C):
    rng = np.random.default_rng(seed)
    ranking = np.stack([rng.permutation(C) for _ in range(30)])
    labels = rng.integers(C, size=30)
    acc = topk_accuracy(ranking, labels, ks=range(1, C + 1))
    values = [acc[k] for k in range(1, C + 1)]
    assert all(a <= b for a, b in zip(values, values[1:]))
    assert acc[C] == 100.0


def test_one_hot_features_are_perfect():
    labels = np.array([0, 1, 2, 1, 0])
    feats = np.eye(3)[labels]
    b = build_prototypes(feats, labels)
    assert topk_accuracy(rank_classes(cosine_similarities(feats, b)), labels, ks=(1,))[1] == 100.0


def test_dimension_mismatch():
    with pytest.raises(ValueError, match="dim"):
        cosine_similarities(np.ones(3), bank(np.eye(4)))


# features from a model ---------------------------------------------------------

@pytest.fixture(scope="module")
def transfer():
    ds = gen_synthetic(["cone", "torus", "helix"], per_class=6, n_points=48, seed=1)
    return split(ds, 0.5, seed=1)


def test_features_are_deterministic_and_permutation_invariant(transfer):
    cfg = tiny_config()
    params = init_params(cfg, seed=1)
    a, _ = extract_features((cfg, params), transfer[0])
    b, _ = extract_features((cfg, params), transfer[0])
    assert a.tobytes() == b.tobytes() and a.shape == (9, cfg.D)
    ps = preprocess_eval(transfer[0], cfg)[0]
    perm = np.random.default_rng(0).permutation(ps.k)
    shuffled = PatchSet(ps.anchor_indices, ps.anchors, ps.neighbor_indices[:, perm],
                        ps.relative[:, perm], ps.absolute[:, perm])
    np.testing.assert_array_equal(forward_patches(shuffled, params, cfg)["pooled"].data, a[0].astype(np.float32))


def test_zeroshot_eval_and_reports(tmp_path, transfer):
    cfg = tiny_config()
    src = gen_synthetic(["sphere", "plane", "cube"], per_class=6, n_points=48)
    result = train(cfg, *split(src, 0.5), TrainConfig(lr=1e-3, batch_size=3, epochs=1, deterministic=True))
    zs = zeroshot_eval(result.best_checkpoint, *transfer, ks=(1, 3))
    report = write_report(zs, tmp_path / "r.json", "ckpt", "synth:transfer")
    assert json.loads((tmp_path / "r.json").read_text()) == report
    assert set(report["accuracy"]) == {"top1", "top3"} and report["accuracy"]["top3"] == 100.0
    assert report["C"] == 3 and report["M"] == 9
    write_rankings_csv(zs, tmp_path / "rank.csv")
    assert len((tmp_path / "rank.csv").read_text().splitlines()) == 10


def test_label_space_mismatch(transfer):
    cfg = tiny_config()
    other = gen_synthetic(["sphere"], per_class=2, n_points=48)
    with pytest.raises(ValueError, match="label spaces"):
        zeroshot_eval((cfg, init_params(cfg)), transfer[0], other)
