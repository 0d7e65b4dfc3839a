import json
import os

import pytest

from dualseg.cli import main
from dualseg.phantom import STYLES, PhantomSpec, gen_dataset
from dualseg.reports import read_csv
from dualseg.volume import Mask, read_volume


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("clidata")
    gen_dataset(PhantomSpec(), STYLES["srcA"], 3, 0, str(root / "srcA"), n_val=0, n_test=1)
    gen_dataset(PhantomSpec(), STYLES["srcB"], 1, 77, str(root / "srcB"), n_test=1)
    return root


@pytest.fixture(scope="module")
def gfs_run(tmp_path_factory, data_dir):
    run = str(tmp_path_factory.mktemp("clirun") / "gfs")
    rc = main(["train", "--stage", "gfs", "--data", str(data_dir / "srcA"),
               "--run-dir", run, "--desk", "--seed", "0", "--set", "epochs=1"])
    assert rc == 0
    return run


def test_help_exits_zero(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--help"])
    assert exc.value.code == 0
    assert "SUBCOMMAND" in capsys.readouterr().out
    for sub in ("gen-data", "train", "sweep", "report"):
        with pytest.raises(SystemExit) as exc:
            main([sub, "--help"])
        assert exc.value.code == 0


def test_unknown_flag_is_usage_error(capsys):
    assert main(["train", "--bogus"]) == 1
    assert "usage" in capsys.readouterr().err.lower()
    assert main(["no-such-command"]) == 1
    assert main([]) == 1


def test_gen_data_writes_dataset(tmp_path):
    out = str(tmp_path / "d")
    assert main(["gen-data", "--style", "srcA", "--n", "2", "--seed", "7",
                 "--out", out]) == 0
    manifest = json.load(open(os.path.join(out, "manifest.json")))
    assert len(manifest["cases"]) == 2
    for case in manifest["cases"]:
        assert os.path.exists(os.path.join(out, case["volume"]))
        assert os.path.exists(os.path.join(out, case["label"]))


def test_gen_data_spec_file(tmp_path):
    spec_path = tmp_path / "spec.json"
    spec_path.write_text(json.dumps({"n_distractors": 0}))
    assert main(["gen-data", "--style", "srcA", "--n", "1", "--out",
                 str(tmp_path / "d"), "--spec", str(spec_path)]) == 0
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"organ_radius": 3}))
    assert main(["gen-data", "--style", "srcA", "--n", "1", "--out",
                 str(tmp_path / "d2"), "--spec", str(bad)]) == 1


def test_skeletonize_roundtrip(tmp_path, data_dir):
    manifest = json.load(open(data_dir / "srcA" / "manifest.json"))
    label_path = str(data_dir / "srcA" / manifest["cases"][0]["label"])
    out = str(tmp_path / "skel.dsv")
    assert main(["skeletonize", "--in", label_path, "--out", out]) == 0
    skel = read_volume(out)
    assert isinstance(skel, Mask) and skel.count() > 0
    assert main(["skeletonize", "--in", out, "--out", str(tmp_path / "c.dsv"),
                 "--op", "centerline", "--radius", "1"]) == 0
    vol_path = str(data_dir / "srcA" / manifest["cases"][0]["volume"])
    assert main(["skeletonize", "--in", vol_path, "--out", str(tmp_path / "x.dsv")]) == 2


def test_train_writes_run_layout(gfs_run):
    assert os.path.exists(os.path.join(gfs_run, "config.json"))
    assert os.path.exists(os.path.join(gfs_run, "logs", "losses.csv"))
    assert os.path.exists(os.path.join(gfs_run, "reports", "losses.png"))
    snap = json.load(open(os.path.join(gfs_run, "config.json")))
    assert snap["epochs"] == 1
    assert snap["seed"] == 0


def test_train_refuses_completed_run_dir(gfs_run, data_dir, capsys):
    rc = main(["train", "--stage", "gfs", "--data", str(data_dir / "srcA"),
               "--run-dir", gfs_run, "--desk", "--set", "epochs=1"])
    assert rc == 2
    assert "force" in capsys.readouterr().err


def test_train_config_precedence(tmp_path, data_dir):
    cfg_file = tmp_path / "c.json"
    cfg_file.write_text(json.dumps({"epochs": 2, "seed": 9}))
    run = str(tmp_path / "run")
    rc = main(["train", "--stage", "gfs", "--data", str(data_dir / "srcA"),
               "--run-dir", run, "--desk", "--config", str(cfg_file),
               "--set", "epochs=1"])
    assert rc == 0
    snap = json.load(open(os.path.join(run, "config.json")))
    assert snap["epochs"] == 1
    assert snap["seed"] == 9


def test_train_unknown_config_key_is_usage_error(tmp_path, data_dir, capsys):
    rc = main(["train", "--stage", "gfs", "--data", str(data_dir / "srcA"),
               "--run-dir", str(tmp_path / "r"), "--set", "contrast.heat=1"])
    assert rc == 1
    assert "contrast.heat" in capsys.readouterr().err


def test_train_lis_without_gfs_run(tmp_path, data_dir, capsys):
    rc = main(["train", "--stage", "lis", "--data", str(data_dir / "srcA"),
               "--run-dir", str(tmp_path / "lis"), "--desk", "--set", "epochs=1"])
    assert rc == 1
    rc = main(["train", "--stage", "lis", "--data", str(data_dir / "srcA"),
               "--run-dir", str(tmp_path / "lis"), "--desk", "--set", "epochs=1",
               "--gfs-run", str(tmp_path / "missing")])
    assert rc == 2
    assert "stage-1" in capsys.readouterr().err


def test_infer_and_report(tmp_path, data_dir, gfs_run):
    out = str(tmp_path / "pred")
    rc = main(["infer", "--model", gfs_run, "--data", str(data_dir / "srcA"),
               "--split", "test", "--out", out])
    assert rc == 0
    header, rows = read_csv(os.path.join(out, "cases.csv"))
    assert header == ["case_id", "dsc", "unc_count", "unc_sum"]
    assert len(rows) == 1
    pred = read_volume(os.path.join(out, "pred", rows[0][0] + ".dsv"))
    assert isinstance(pred, Mask)
    assert os.path.exists(os.path.join(out, "unc", rows[0][0] + ".dsv"))
    assert main(["report", "--run", gfs_run]) == 0
    assert main(["report", "--run", str(tmp_path / "empty")]) == 2


def test_eval_matrix_cli(tmp_path, data_dir, gfs_run):
    out = str(tmp_path / "ev")
    rc = main(["eval", "--model", f"srcA={gfs_run}",
               "--data", f"srcA={data_dir / 'srcA'}",
               "--data", f"srcB={data_dir / 'srcB'}", "--out", out])
    assert rc == 0
    header, rows = read_csv(os.path.join(out, "reports", "eval_matrix.csv"))
    assert [r[1] for r in rows] == ["srcB", "mean"]
    assert os.path.exists(os.path.join(out, "reports", "eval_matrix.png"))
    assert main(["eval", "--model", "srcA", "--data", "srcA=x", "--out", out]) == 1


def test_sweep_cli_four_rows(tmp_path, data_dir, gfs_run):
    out = str(tmp_path / "sweep.csv")
    rc = main(["sweep", "--model", gfs_run, "--data", f"srcB={data_dir / 'srcB'}",
               "--train-src", "srcA", "--param", "t",
               "--values", "0.1,0.01,0.001,0.0001", "--out", out])
    assert rc == 0
    header, rows = read_csv(out)
    assert len(rows) == 4
    assert main(["sweep", "--model", gfs_run, "--data", f"srcB={data_dir / 'srcB'}",
                 "--train-src", "srcA", "--param", "t", "--values", "abc",
                 "--out", out]) == 1


def test_thread_cap_env(monkeypatch, tmp_path):
    monkeypatch.setenv("DUALSEG_THREADS", "2")
    assert main(["gen-data", "--style", "srcB", "--n", "1",
                 "--out", str(tmp_path / "d")]) == 0
    monkeypatch.setenv("DUALSEG_THREADS", "zero")
    assert main(["gen-data", "--style", "srcB", "--n", "1",
                 "--out", str(tmp_path / "d2")]) == 1


def test_ablate_cli_smoke(tmp_path, data_dir):
    out = str(tmp_path / "ab")
    rc = main(["ablate", "--data", f"srcA={data_dir / 'srcA'}",
               "--data", f"srcB={data_dir / 'srcB'}", "--train-src", "srcA",
               "--out", out, "--seeds", "0", "--desk", "--set", "epochs=1"])
    assert rc == 0
    header, rows = read_csv(os.path.join(out, "reports", "ablation.csv"))
    assert sorted({r[1] for r in rows}) == ["bl", "bl_gfs", "bl_lis", "ours"]
    assert os.path.exists(os.path.join(out, "reports", "uncertainty.csv"))
    assert main(["ablate", "--data", f"srcA={data_dir / 'srcA'}",
                 "--data", f"srcB={data_dir / 'srcB'}", "--train-src", "srcA",
                 "--out", out, "--seeds", "0;1", "--desk"]) == 1
