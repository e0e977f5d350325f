"""Acceptance criteria, one test each, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the lines as they
happen; they are also repeated in the terminal summary.
"""

import time
from contextlib import contextmanager
from pathlib import Path

import conftest
import numpy as np
import pytest
from conftest import random_cloud, tiny_config
from oracles import brute_fps, brute_knn, check_gradients, primitive_gradient_cases

from pointy.backbone import ModelConfig, count_params, forward_patches, init_params, preset
from pointy.checkpoint import decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint
from pointy.data import (
    TRANSFER_CLASSES,
    FormatError,
    decode_pcf,
    encode_pcf,
    gen_synthetic,
    load_manifest,
    nearest_centroid_oa,
    split,
)
from pointy.embed import EmbedParams, embed_patches, embed_patchset
from pointy.geometry import PatchSet, PointCloud, fps, knn_group, patchify
from pointy.numerics import Tensor, cross_entropy, make_rng, softmax, sum_
from pointy.train import TrainConfig, train, write_history_csv
from pointy.zeroshot import topk_accuracy, zeroshot_eval

README = Path(__file__).resolve().parents[1] / "README.md"


@contextmanager
def criterion(name):
    detail = {}
    try:
        yield detail
    except BaseException:
        _emit("FAIL", name, detail)
        raise
    _emit("PASS", name, detail)


def _emit(status, name, detail):
    extra = ", ".join(f"{k}={v}" for k, v in detail.items())
    line = f"[{status}] {name}" + (f" ({extra})" if extra else "")
    print(line)
    conftest.ACCEPTANCE_LINES.append(line)


def shuffle_within_patches(ps: PatchSet, rng) -> PatchSet:
    perm = np.stack([rng.permutation(ps.k) for _ in range(ps.n_patches)])
    take = lambda a: np.take_along_axis(a, perm[..., None], axis=1)  # noqa: E731
    return PatchSet(ps.anchor_indices, ps.anchors, np.take_along_axis(ps.neighbor_indices, perm, 1),
                    take(ps.relative), take(ps.absolute))


# ---------------------------------------------------------------------------

def test_geometry_oracle_equivalence():
    with criterion("geometry oracle equivalence") as d:
        t0 = time.perf_counter()
        for seed in range(100):
            rng = np.random.default_rng(1000 + seed)
            n = int(rng.integers(64, 513))
            pts = PointCloud(rng.normal(size=(n, 3))).points.astype(np.float64)
            p, k = int(rng.integers(1, 65)), int(rng.integers(1, 33))
            anchors = fps(pts, p)
            np.testing.assert_array_equal(anchors, brute_fps(pts, p))
            grouped = knn_group(pts, anchors, k)
            for row in range(0, p, max(1, p // 4)):
                np.testing.assert_array_equal(grouped.neighbor_indices[row], brute_knn(pts, anchors[row], k))
        elapsed = time.perf_counter() - t0
        d["clouds"], d["seconds"] = 100, round(elapsed, 2)
        assert elapsed < 10.0


def test_gradient_suite():
    with criterion("gradient suite") as d:
        t0 = time.perf_counter()
        worst = 0.0
        for name, (f, params) in primitive_gradient_cases().items():
            worst = max(worst, check_gradients(f, params, 1e-5).max_rel_err)
        # attention block and embedding, 64-bit
        cfg = tiny_config()
        block = init_params(cfg, seed=3, precision="f64").blocks[0]
        x = Tensor(np.random.default_rng(0).normal(size=(4, 12)), requires_grad=True)
        w = Tensor(np.random.default_rng(1).normal(size=(4, 12)))
        from pointy.backbone import attention_block

        worst = max(worst, check_gradients(lambda: sum_(attention_block(x, block, cfg) * w),
                                           {"x": x, **block.parameters()}, 1e-5).max_rel_err)
        emb = EmbedParams.create(6, make_rng(1), hidden=5)
        rng = np.random.default_rng(0)
        rel = rng.normal(size=(3, 4, 3))
        absolute = rel + rng.normal(size=(3, 1, 3))
        wt = Tensor(rng.normal(size=(3, 6)))
        worst = max(worst, check_gradients(lambda: sum_(embed_patches(rel, absolute, absolute[:, 0], emb) * wt),
                                           emb.parameters(), 1e-5).max_rel_err)
        d["primitives_max_rel_err"] = f"{worst:.2e}"
        # reduced end-to-end model: D=12, H=4, L=2, P=4, k=4, 64-bit
        cfg = tiny_config(embed_hidden=8)
        params = init_params(cfg, seed=0, precision="f64")
        batch = [patchify(random_cloud(s, 32), cfg.P, cfg.k) for s in (100, 101)]
        labels = np.array([0, 2])
        e2e = check_gradients(lambda: cross_entropy(forward_patches(batch, params, cfg)["logits"], labels),
                              params.parameters(), 1e-4)
        elapsed = time.perf_counter() - t0
        d["end_to_end_max_rel_err"] = f"{e2e.max_rel_err:.2e}"
        d["coords"], d["seconds"] = e2e.n_checked, round(elapsed, 1)
        assert elapsed < 60.0


def test_parameter_budgets():
    with criterion("parameter budgets") as d:
        small, base = count_params(preset("small")), count_params(preset("base"))
        d["small"], d["base"] = small.total, base.total
        assert 2.7e6 <= small.total <= 3.3e6
        assert 17.5e6 <= base.total <= 21.3e6
        for report, name in ((small, "small"), (base, "base")):
            assert sum(report.items.values()) == report.total
            actual = sum(t.size for t in init_params(preset(name)).parameters().values())
            assert actual == report.total


def test_architecture_invariants():
    with criterion("architecture invariants") as d:
        cfg = preset("small")
        assert cfg.token_counts()[:6] == [64, 32, 16, 8, 4, 2]
        flat = preset("small", hierarchical=False)
        assert flat.token_counts()[-1] == 64
        tiny_flat = tiny_config(P=8, hierarchical=False)
        ps = patchify(random_cloud(0, 32), 8, 4)
        assert forward_patches(ps, init_params(tiny_flat), tiny_flat)["tokens"].shape == (8, 12)
        for name in ("small", "base"):
            c = preset(name)
            lin = ModelConfig(**{**c.to_dict(), "merge_strategy": "linear"})
            delta = count_params(lin).total - count_params(c).total
            assert delta == sum(f * c.D * c.D + c.D for f in c.schedule if f > 1)
            assert c.D // c.H == 3 and c.D % c.H == 0
        d["token_counts"] = "->".join(map(str, cfg.token_counts()[:6]))


def test_exact_invariances():
    with criterion("exact invariances") as d:
        cfg = preset("small")
        params = init_params(cfg, seed=0)
        for seed in range(3):
            ps = patchify(random_cloud(seed, 2048), cfg.P, cfg.k)
            shuffled = shuffle_within_patches(ps, np.random.default_rng(seed))
            assert embed_patchset(ps, params.embed).data.tobytes() == \
                embed_patchset(shuffled, params.embed).data.tobytes()
            a = forward_patches(ps, params, cfg)["logits"].data
            b = forward_patches(shuffled, params, cfg)["logits"].data
            assert a.tobytes() == b.tobytes()
        rng = np.random.default_rng(0)
        worst_shift = worst_sum = 0.0
        for _ in range(200):
            logits = rng.normal(size=(8, 5)) * rng.uniform(0.1, 30)
            labels = rng.integers(5, size=8)
            c = rng.uniform(-1000, 1000)
            base = cross_entropy(Tensor(logits), labels).item()
            worst_shift = max(worst_shift, abs(cross_entropy(Tensor(logits + c), labels).item() - base))
            worst_sum = max(worst_sum, np.abs(softmax(Tensor(logits), axis=1).data.sum(axis=1) - 1).max())
        assert worst_shift <= 1e-10 and worst_sum <= 1e-12
        for _ in range(50):
            C = int(rng.integers(2, 10))
            ranking = np.stack([rng.permutation(C) for _ in range(40)])
            acc = topk_accuracy(ranking, rng.integers(C, size=40), ks=range(1, C + 1))
            assert all(acc[k] <= acc[k + 1] for k in range(1, C))
        d["ce_shift"], d["softmax_sum"] = f"{worst_shift:.1e}", f"{worst_sum:.1e}"


# synthetic benchmark -------------------------------------------------------------

BENCH_SEEDS = (0, 1, 2, 3)
REDUCED = dict(D=96, H=32, P=32, k=16, n_points=512, num_classes=4)


@pytest.fixture(scope="module")
def benchmark():
    """Four seeded 30-epoch runs of the reduced Small model, shared by two criteria."""
    runs = {}
    t0 = time.perf_counter()
    for seed in BENCH_SEEDS:
        train_set, test_set = split(gen_synthetic(per_class=200, n_points=512, noise_sigma=0.02, seed=seed),
                                    0.85, seed=seed)
        oracle = nearest_centroid_oa(train_set, test_set)
        tcfg = TrainConfig(lr=1e-4, batch_size=16, epochs=30, seed=seed, augment=True)
        result = train(ModelConfig(**REDUCED), train_set, test_set, tcfg)
        runs[seed] = (result, oracle)
    return runs, time.perf_counter() - t0


def test_synthetic_training(benchmark):
    with criterion("synthetic training run") as d:
        runs, elapsed = benchmark
        reached = [s for s, (r, _) in runs.items() if r.best_oa >= 90.0]
        beat = [s for s, (r, oracle) in runs.items() if r.best_oa > oracle]
        d["model_oa"] = "/".join(f"{r.best_oa:.1f}" for r, _ in runs.values())
        d["oracle_oa"] = "/".join(f"{o:.1f}" for _, o in runs.values())
        d["minutes"] = round(elapsed / 60, 1)
        assert all(o >= 80.0 for _, o in runs.values())
        assert len(reached) >= 3 and len(beat) >= 3
        assert elapsed <= 30 * 60


@pytest.fixture(scope="module")
def transfer_splits():
    return split(gen_synthetic(TRANSFER_CLASSES, per_class=200, n_points=512, seed=100), 0.85, seed=100)


def test_zeroshot_transfer(benchmark, transfer_splits):
    with criterion("zero-shot transfer, pre-trained checkpoint") as d:
        result, _ = benchmark[0][0]
        zs = zeroshot_eval(result.best_checkpoint, *transfer_splits, ks=(1, 3))
        d["top1"] = f"{zs.accuracy[1]:.1f}"
        assert zs.accuracy[1] >= 200.0 / 3


def test_zeroshot_null_control(transfer_splits):
    with criterion("zero-shot null control, random init within 15 points of chance") as d:
        cfg = ModelConfig(**REDUCED)
        zs = zeroshot_eval((cfg, init_params(cfg, seed=0)), *transfer_splits, ks=(1,))
        chance = 100.0 / 3
        d["top1"], d["chance"] = f"{zs.accuracy[1]:.1f}", f"{chance:.1f}"
        assert abs(zs.accuracy[1] - chance) <= 15.0


# persistence ---------------------------------------------------------------------

def test_determinism_and_persistence(tmp_path):
    with criterion("determinism and persistence") as d:
        data = split(gen_synthetic(["sphere", "cube", "plane"], per_class=8, n_points=64, seed=3), 0.75, seed=3)
        cfg = tiny_config(P=8, k=8, n_points=64)
        tcfg = TrainConfig(lr=1e-3, batch_size=4, epochs=4, seed=3, deterministic=True)
        csvs = []
        for i in range(2):
            run = train(cfg, *data, tcfg)
            write_history_csv(run.history, tmp_path / f"h{i}.csv")
            csvs.append((tmp_path / f"h{i}.csv").read_bytes())
        assert csvs[0] == csvs[1]
        half = train(cfg, *data, TrainConfig(**{**tcfg.to_dict(), "epochs": 2}))
        save_checkpoint(half.last_checkpoint, tmp_path / "half.ptyc")
        resumed = train(cfg, *data, tcfg, resume=load_checkpoint(tmp_path / "half.ptyc"))
        assert encode_checkpoint(resumed.last_checkpoint) == encode_checkpoint(run.last_checkpoint)
        raw = encode_checkpoint(run.last_checkpoint)
        assert encode_checkpoint(decode_checkpoint(raw)) == raw
        cloud = PointCloud(np.random.default_rng(0).normal(size=(300, 3)), extras=np.ones((300, 3)))
        pcf = encode_pcf(cloud)
        assert encode_pcf(decode_pcf(pcf)) == pcf
        rejected = 0
        for bad in (raw[:-7], b"XXXX" + raw[4:], raw[:30] + bytes([raw[30] ^ 1]) + raw[31:]):
            with pytest.raises(FormatError, match="byte"):
                decode_checkpoint(bad)
            rejected += 1
        for bad in (pcf[:-5], b"PCF2" + pcf[4:], pcf[:20] + bytes([pcf[20] ^ 1]) + pcf[21:]):
            with pytest.raises(FormatError, match="byte"):
                decode_pcf(bad)
            rejected += 1
        d["corrupt_files_rejected"] = rejected


def test_non_reproducibility_statement(tmp_path):
    with criterion("non-reproducibility statement") as d:
        text = README.read_text(encoding="utf-8")
        section = text.split("## Scope of reproduction", 1)[1].split("\n## ", 1)[0]
        for number in ("90.4", "90.6", "80.0", "78.5", "36.3", "36.4", "83.9", "85.3"):
            assert number in section, number
        assert "not acceptance targets" in section and "manifest" in section
        # the recorded regime and the ingestion path the statement points to
        regime = TrainConfig()
        assert (regime.lr, regime.batch_size, regime.augment, regime.weight_decay) == (1e-4, 16, True, 0.01)
        from pointy.data import save_pcf, write_manifest

        save_pcf(PointCloud(np.random.default_rng(0).normal(size=(10_000, 3))), tmp_path / "a.pcf")
        write_manifest(tmp_path / "m.csv", [("a.pcf", "chair")])
        assert len(load_manifest(tmp_path / "m.csv").clouds[0]) == 2048
        d["headline_numbers_listed"] = 8
