import json
import math
import os

import numpy as np
import pytest
import torch

from dualseg import pipeline
from dualseg.config import desk_profile, resolve_config
from dualseg.errors import (
    CheckpointError,
    ParameterError,
    RunDirError,
    SingleSourceError,
    StageIsolationError,
)
from dualseg.morphology import bbox_of
from dualseg.networks import load_checkpoint, parameter_digest
from dualseg.phantom import STYLES, PhantomSpec, gen_dataset
from dualseg.pipeline import (
    GeomDraw,
    apply_geometry,
    apply_geometry_composed,
    augment,
    coarse_localize,
    pad_box_to_divisor,
    rotate_inplane,
)
from dualseg.reports import read_csv
from dualseg.volume import NORMALIZED, BBox, Mask, Volume, dsc

torch.set_num_threads(2)

SPEC = PhantomSpec()


def _cfg(stage, **over):
    text = {k: str(v) for k, v in over.items()}
    return desk_profile(resolve_config(stage, None, text))


@pytest.fixture(scope="module")
def data_dirs(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    dirs = {}
    gen_dataset(SPEC, STYLES["srcA"], 4, 0, str(root / "srcA"), n_val=1, n_test=1)
    gen_dataset(SPEC, STYLES["srcB"], 2, 500, str(root / "srcB"), n_test=2)
    gen_dataset(SPEC, STYLES["srcC"], 2, 900, str(root / "srcC"), n_test=2)
    for name in ("srcA", "srcB", "srcC"):
        dirs[name] = str(root / name)
    return dirs


@pytest.fixture(scope="module")
def trained_runs(tmp_path_factory, data_dirs):
    root = tmp_path_factory.mktemp("runs")
    runs = {"bl": str(root / "bl"), "gfs": str(root / "gfs"), "lis": str(root / "lis")}
    pipeline.train_gfs([data_dirs["srcA"]], _cfg("gfs", epochs=2, **{"contrast.weight": 0.0}),
                       runs["bl"])
    pipeline.train_gfs([data_dirs["srcA"]], _cfg("gfs", epochs=2), runs["gfs"])
    pipeline.train_lis([data_dirs["srcA"]], _cfg("lis", epochs=2), runs["lis"],
                       gfs_run_dir=runs["gfs"])
    return runs


# --------------------------------------------------------------------------
# augmentation geometry


def test_sequential_and_composed_transforms_agree_on_masks():
    rng = np.random.default_rng(11)
    for trial in range(30):
        m = (rng.random((6, 11, 9)) > 0.6).astype(np.uint8)
        g = GeomDraw(float(rng.uniform(-15, 15)), *(bool(b) for b in rng.integers(0, 2, 3)))
        a = Mask(apply_geometry(m, g, order=0))
        b = Mask(apply_geometry_composed(m, g, order=0))
        if a.count() == 0 and b.count() == 0:
            continue
        assert dsc(a, b) == 1.0


def test_sequential_and_composed_transforms_agree_on_images():
    rng = np.random.default_rng(12)
    for trial in range(10):
        img = rng.random((5, 12, 10)).astype(np.float32)
        g = GeomDraw(float(rng.uniform(-15, 15)), *(bool(b) for b in rng.integers(0, 2, 3)))
        a = apply_geometry(img, g, order=1)
        b = apply_geometry_composed(img, g, order=1)
        np.testing.assert_allclose(a, b, atol=1e-6)


def test_rotation_exact_on_linear_ramp_interior():
    h, w = 21, 17
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    a_coef, b_coef = 0.3, -0.7
    img = np.repeat((a_coef * ys + b_coef * xs)[None], 3, axis=0).astype(np.float32)
    theta = 9.0
    out = rotate_inplane(img, theta, order=1)
    t = math.radians(theta)
    cy, cx = (h - 1) / 2, (w - 1) / 2
    sy = cy + math.cos(t) * (ys - cy) + math.sin(t) * (xs - cx)
    sx = cx - math.sin(t) * (ys - cy) + math.cos(t) * (xs - cx)
    expected = a_coef * sy + b_coef * sx
    interior = ((sy >= 1) & (sy <= h - 2) & (sx >= 1) & (sx <= w - 2))
    np.testing.assert_allclose(out[1][interior], expected[interior], atol=1e-4)


def test_rotation_zero_is_identity_and_masks_stay_binary():
    rng = np.random.default_rng(3)
    arr = rng.random((4, 8, 8)).astype(np.float32)
    np.testing.assert_array_equal(rotate_inplane(arr, 0.0, order=1), arr)
    m = (rng.random((4, 9, 9)) > 0.5).astype(np.uint8)
    out = rotate_inplane(m, 7.3, order=0)
    assert set(np.unique(out)) <= {0, 1}


def test_augment_public_contract():
    rng = np.random.default_rng(5)
    x = Volume(rng.random((8, 12, 12)).astype(np.float32), (1, 1, 1), NORMALIZED)
    y = Mask((rng.random((8, 12, 12)) > 0.7).astype(np.uint8))
    xa, ya = augment(x, y, np.random.default_rng(9))
    assert xa.shape == x.shape and ya.shape == y.shape
    assert xa.domain == NORMALIZED
    assert 0.0 <= float(xa.voxels.min()) and float(xa.voxels.max()) <= 1.0
    assert set(np.unique(ya.voxels)) <= {0, 1}


def test_augment_disabled_is_identity():
    from dualseg.config import AugmentCfg

    rng = np.random.default_rng(5)
    x = Volume(rng.random((4, 8, 8)).astype(np.float32), (1, 1, 1), NORMALIZED)
    y = Mask((rng.random((4, 8, 8)) > 0.5).astype(np.uint8))
    xa, ya = augment(x, y, np.random.default_rng(0), AugmentCfg(enabled=False))
    np.testing.assert_array_equal(xa.voxels, x.voxels)
    np.testing.assert_array_equal(ya.voxels, y.voxels)


# --------------------------------------------------------------------------
# localization


def test_pad_box_to_divisor_properties():
    rng = np.random.default_rng(21)
    grid = (64, 64, 64)
    for _ in range(50):
        lo = rng.integers(0, 50, 3)
        hi = lo + rng.integers(1, 14, 3)
        box = BBox(tuple(int(v) for v in lo), tuple(int(v) for v in hi))
        out = pad_box_to_divisor(box, 4, grid)
        assert all(s % 4 == 0 for s in out.shape)
        assert out.contains(box)
        assert BBox((0, 0, 0), grid).contains(out)


def test_coarse_localize_oracle_contains_label(data_dirs):
    cases = pipeline.load_cases(data_dirs["srcA"], "train")
    for case in cases:
        box = coarse_localize(case.norm, "oracle", margin=4, divisor=4, label=case.label)
        tight = bbox_of(case.label)
        assert box.contains(tight)
        assert all(s % 4 == 0 for s in box.shape)
    with pytest.raises(ParameterError):
        coarse_localize(cases[0].norm, "oracle", margin=4, divisor=4)
    with pytest.raises(ParameterError):
        coarse_localize(cases[0].norm, "nearest", margin=4, divisor=4, label=cases[0].label)


def test_coarse_localize_learned_containment_gate(data_dirs):
    cases = pipeline.load_cases(data_dirs["srcA"], "train")
    torch.manual_seed(0)
    loc = pipeline.train_localizer(cases, epochs=60)
    for case in cases:
        box = coarse_localize(case.norm, "learned", margin=4, divisor=4, localizer=loc)
        inside = case.label.voxels[box.slices()].sum()
        assert inside / case.label.count() >= 0.99


def test_coarse_localize_learned_empty_fallback(data_dirs, caplog):
    from dualseg.networks import build_gfs

    case = pipeline.load_cases(data_dirs["srcA"], "train")[0]
    loc = build_gfs(pipeline.localizer_spec())
    with torch.no_grad():
        loc.seg_head.weight.zero_()
        loc.seg_head.bias.fill_(-10.0)
    with caplog.at_level("WARNING", logger="dualseg"):
        box = coarse_localize(case.norm, "learned", margin=4, divisor=4, localizer=loc)
    assert box == BBox((0, 0, 0), case.norm.shape)
    assert any("full grid" in r.message for r in caplog.records)


# --------------------------------------------------------------------------
# stage-1 training


def test_train_gfs_bookkeeping_and_rerun_guard(data_dirs, trained_runs):
    run = trained_runs["gfs"]
    assert os.path.exists(os.path.join(run, "config.json"))
    assert os.path.exists(os.path.join(run, "checkpoints", "gfs", "manifest.json"))
    header, rows = read_csv(os.path.join(run, "logs", "losses.csv"))
    assert header == list(pipeline.LOSS_HEADER)
    n_train = len(pipeline.load_cases(data_dirs["srcA"], "train"))
    assert len(rows) == 2 * n_train
    stats = pipeline.read_stats(run)
    assert stats.steps == len(rows)
    with pytest.raises(RunDirError):
        pipeline.train_gfs([data_dirs["srcA"]], _cfg("gfs", epochs=1), run)


def test_train_gfs_rejects_mixed_sources(data_dirs, tmp_path):
    with pytest.raises(SingleSourceError):
        pipeline.train_gfs([data_dirs["srcA"], data_dirs["srcB"]],
                           _cfg("gfs", epochs=1), str(tmp_path / "x"))


def test_train_gfs_wrong_stage_config(data_dirs, tmp_path):
    with pytest.raises(ParameterError):
        pipeline.train_gfs([data_dirs["srcA"]], _cfg("lis", epochs=1), str(tmp_path / "x"))


def test_train_gfs_seeded_repeat_is_bit_identical(data_dirs, tmp_path):
    cfg_a = _cfg("gfs", epochs=2, seed=3)
    cfg_b = _cfg("gfs", epochs=2, seed=3)
    pipeline.train_gfs([data_dirs["srcA"]], cfg_a, str(tmp_path / "a"))
    pipeline.train_gfs([data_dirs["srcA"]], cfg_b, str(tmp_path / "b"))
    with open(tmp_path / "a" / "logs" / "losses.csv", "rb") as fh:
        bytes_a = fh.read()
    with open(tmp_path / "b" / "logs" / "losses.csv", "rb") as fh:
        bytes_b = fh.read()
    assert bytes_a == bytes_b
    cfg_c = _cfg("gfs", epochs=2, seed=4)
    pipeline.train_gfs([data_dirs["srcA"]], cfg_c, str(tmp_path / "c"))
    with open(tmp_path / "c" / "logs" / "losses.csv", "rb") as fh:
        assert fh.read() != bytes_a


def test_baseline_never_builds_contrastive_batches(data_dirs, tmp_path, monkeypatch):
    class Landmine:
        def __init__(self, *a, **k):
            raise RuntimeError("contrastive batch constructed")

        from_patches = __init__

    monkeypatch.setattr(pipeline, "ContrastiveBatch", Landmine)
    cfg = _cfg("gfs", epochs=1, **{"contrast.weight": 0.0})
    stats = pipeline.train_gfs([data_dirs["srcA"]], cfg, str(tmp_path / "bl"))
    assert stats.contrastive_batches == 0
    assert stats.contrastive_skips == 0
    with pytest.raises(RuntimeError, match="contrastive batch constructed"):
        pipeline.train_gfs([data_dirs["srcA"]], _cfg("gfs", epochs=1),
                           str(tmp_path / "full"))


def test_gfs_loss_log_columns(trained_runs):
    header, rows = read_csv(os.path.join(trained_runs["gfs"], "logs", "losses.csv"))
    idx = {h: i for i, h in enumerate(header)}
    for row in rows:
        assert row[idx["t"]] == ""
        assert row[idx["l_rec"]] == ""
        assert float(row[idx["l_seg"]]) > 0
        lr = float(row[idx["lr"]])
        assert 0 < lr <= 1e-4


# --------------------------------------------------------------------------
# stage-2 training


def test_train_lis_requires_stage1_checkpoint(data_dirs, tmp_path):
    with pytest.raises(CheckpointError, match="stage-1"):
        pipeline.train_lis([data_dirs["srcA"]], _cfg("lis", epochs=1),
                           str(tmp_path / "lis"), gfs_run_dir=str(tmp_path / "nope"))


def test_train_lis_bookkeeping_and_schedule(data_dirs, trained_runs):
    run = trained_runs["lis"]
    header, rows = read_csv(os.path.join(run, "logs", "losses.csv"))
    idx = {h: i for i, h in enumerate(header)}
    n_train = len(pipeline.load_cases(data_dirs["srcA"], "train"))
    assert len(rows) == 2 * n_train
    first, last = rows[0], rows[-1]
    assert float(first[idx["t"]]) == 0.2
    assert float(last[idx["t"]]) == 0.001
    for row in rows:
        assert row[idx["l_con"]] == ""
        for col in ("l_rec", "l_adv_g", "l_adv_d", "l_total"):
            assert row[idx[col]] != ""
    stats = pipeline.read_stats(run)
    assert stats.corruption_events == len(rows)
    assert stats.contrastive_batches == 0


def test_train_lis_keeps_stage1_frozen(trained_runs):
    gfs_nets, _ = load_checkpoint(os.path.join(trained_runs["gfs"], "checkpoints", "gfs"))
    lis_nets, manifest = load_checkpoint(os.path.join(trained_runs["lis"], "checkpoints", "lis"))
    assert parameter_digest(gfs_nets["gfs"]) == parameter_digest(lis_nets["gfs"])
    assert manifest["extra"]["gfs_digest"] == parameter_digest(lis_nets["gfs"])
    with pytest.raises(StageIsolationError):
        pipeline._verify_frozen("aaa", "bbb")


def test_train_lis_seeded_repeat_is_bit_identical(data_dirs, trained_runs, tmp_path):
    cfg = _cfg("lis", epochs=1, seed=6)
    pipeline.train_lis([data_dirs["srcA"]], cfg, str(tmp_path / "r1"),
                       gfs_run_dir=trained_runs["gfs"])
    cfg2 = _cfg("lis", epochs=1, seed=6)
    pipeline.train_lis([data_dirs["srcA"]], cfg2, str(tmp_path / "r2"),
                       gfs_run_dir=trained_runs["gfs"])
    with open(tmp_path / "r1" / "logs" / "losses.csv", "rb") as fh:
        a = fh.read()
    with open(tmp_path / "r2" / "logs" / "losses.csv", "rb") as fh:
        assert fh.read() == a


# --------------------------------------------------------------------------
# inference and evaluation


def test_infer_output_shape_and_determinism(data_dirs, trained_runs):
    bundle = pipeline.load_bundle(trained_runs["lis"])
    case = pipeline.load_cases(data_dirs["srcB"], "test")[0]
    mask1, triple1, info1 = pipeline.infer_case(bundle, case.norm, label=case.label)
    mask2, triple2, info2 = pipeline.infer_case(bundle, case.norm, label=case.label)
    assert mask1.shape == case.norm.shape
    np.testing.assert_array_equal(mask1.voxels, mask2.voxels)
    np.testing.assert_array_equal(triple1.unc_map, triple2.unc_map)
    assert info1 == info2
    assert info1["unc_count"] == int((triple1.unc_map > 0.01).sum())


def test_infer_never_runs_restoration_decoder(data_dirs, trained_runs, monkeypatch):
    from dualseg.networks import LisNet

    def boom(self, *a, **k):
        raise AssertionError("joint forward with restoration decoder was called")

    monkeypatch.setattr(LisNet, "forward", boom)
    bundle = pipeline.load_bundle(trained_runs["lis"])
    case = pipeline.load_cases(data_dirs["srcB"], "test")[0]
    mask, _, _ = pipeline.infer_case(bundle, case.norm, label=case.label)
    assert mask.shape == case.norm.shape


def test_gfs_bundle_inference(data_dirs, trained_runs):
    bundle = pipeline.load_bundle(trained_runs["bl"])
    assert bundle.kind == "gfs" and bundle.lis is None
    case = pipeline.load_cases(data_dirs["srcA"], "val")[0]
    mask, triple, _ = pipeline.infer_case(bundle, case.norm, label=case.label)
    assert mask.shape == case.norm.shape
    assert triple.unc_map.max() <= 0.5 + 1e-6


def test_eval_matrix_cross_cells_and_means(data_dirs, trained_runs, tmp_path):
    bundles = {"srcA": pipeline.load_bundle(trained_runs["gfs"])}
    out = str(tmp_path / "m.csv")
    rows = pipeline.eval_matrix(bundles, data_dirs, out)
    cross = [r for r in rows if r["test_source"] not in ("mean",)]
    assert sorted(r["test_source"] for r in cross) == ["srcB", "srcC"]
    mean_row = [r for r in rows if r["test_source"] == "mean"][0]
    expected = sum(r["mean_dsc"] for r in cross) / len(cross)
    assert abs(mean_row["mean_dsc"] - expected) < 1e-9
    header, csv_rows = read_csv(out)
    got = [float(r[2]) for r in csv_rows if r[1] == "mean"][0]
    recomputed = sum(float(r[2]) for r in csv_rows if r[1] not in ("mean",)) / 2
    assert abs(got - recomputed) < 1e-9


def test_eval_matrix_single_source_self_grid(data_dirs, trained_runs, tmp_path):
    bundles = {"srcA": pipeline.load_bundle(trained_runs["bl"])}
    rows = pipeline.eval_matrix(bundles, {"srcA": data_dirs["srcA"]},
                                str(tmp_path / "m.csv"))
    assert [r["test_source"] for r in rows] == ["srcA", "mean"]
    assert rows[0]["mean_dsc"] == rows[1]["mean_dsc"]


def test_sweep_one_row_per_value(data_dirs, trained_runs, tmp_path):
    out = str(tmp_path / "sweep.csv")
    rows = pipeline.sweep(trained_runs["lis"],
                          {"srcA": data_dirs["srcA"], "srcB": data_dirs["srcB"]},
                          "srcA", "t", [0.1, 0.01, 0.001, 0.0001], out)
    assert len(rows) == 4
    header, csv_rows = read_csv(out)
    assert len(csv_rows) == 4
    assert [float(r[1]) for r in csv_rows] == [0.1, 0.01, 0.001, 0.0001]
    k_rows = pipeline.sweep(trained_runs["lis"], {"srcB": data_dirs["srcB"]},
                            "srcA", "k", [3, 8], str(tmp_path / "k.csv"))
    assert len(k_rows) == 2
    with pytest.raises(ParameterError):
        pipeline.sweep(trained_runs["lis"], {"srcB": data_dirs["srcB"]},
                       "srcA", "lr", [0.1], str(tmp_path / "x.csv"))


# --------------------------------------------------------------------------
# ablation


def test_ablate_variants_and_reports(data_dirs, tmp_path):
    cfg_g = _cfg("gfs", epochs=1)
    cfg_l = _cfg("lis", epochs=1)
    out = str(tmp_path / "ab")
    ab_rows, unc_rows = pipeline.ablate(
        {"srcA": data_dirs["srcA"], "srcB": data_dirs["srcB"]},
        "srcA", cfg_g, cfg_l, out, seeds=[0])
    assert sorted({r["variant"] for r in ab_rows}) == sorted(pipeline.VARIANTS)
    assert len(ab_rows) == 4
    assert all(r["test_source"] == "srcB" for r in ab_rows)
    n_test = len(pipeline.load_cases(data_dirs["srcB"], "test"))
    assert len(unc_rows) == 4 * n_test
    assert all("unc_count" in r and "unc_sum" in r for r in unc_rows)
    for name in ("ablation.csv", "uncertainty.csv", "ablation.png"):
        assert os.path.exists(os.path.join(out, "reports", name))
    bl_stats = pipeline.read_stats(os.path.join(out, "seed0", "bl"))
    assert bl_stats.contrastive_batches == 0
    ours_cfg = json.load(open(os.path.join(out, "seed0", "ours", "config.json")))
    assert ours_cfg["stage"] == "lis"
    with pytest.raises(ParameterError):
        pipeline.ablate({"srcA": data_dirs["srcA"]}, "srcA", cfg_g, cfg_l,
                        str(tmp_path / "ab2"), seeds=[0])
