import json
import subprocess
import sys

import pytest

from mmfa.cli import run
from mmfa.config import describe_keys, load_config
from mmfa.errors import ConfigurationError

TINY = {
    "data": {"categories": ["tile"], "n_train": 4, "n_test_normal": 2, "n_test_anomalous": 2,
             "image_size": [32, 32], "spec_overrides": {"radius_range": [2.0, 3.0]}},
    "backbone": {"point_n_groups": 32, "point_group_size": 8},
    "adaptor": {"proj_dim": 32},
    "trainer": {"epochs": 1, "batch_size": 2, "warmup_steps": 1},
}


@pytest.fixture
def tiny(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(TINY))
    return ["--config", str(cfg), "--data-root", str(tmp_path / "data"),
            "--run-dir", str(tmp_path / "run")]


def test_config_precedence(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"trainer": {"lr": 0.5}, "paths": {"run_dir": "file"}}))
    cfg = load_config(p, ["trainer.lr=0.25", ("losses.lam", 0.1)],
                      env={"MMFA_RUN_DIR": "env"})
    assert cfg.trainer.lr == 0.25 and cfg.losses.lam == 0.1 and cfg.paths.run_dir == "env"
    assert cfg.train_config().lam == 0.1


@pytest.mark.parametrize("item", ["trainer.nope=1", "nosection.x=1", "trainer.epochs=abc",
                                  "trainer.epochs=1.5", "banks.exclude_self=1",
                                  "data.categories=tile", "banks.coreset_fraction=0",
                                  "trainer.update_mode=parallel", "losses.ablate=xyz",
                                  "data.categories=[\"cube\"]"])
def test_bad_overrides_rejected(item):
    with pytest.raises(ConfigurationError):
        load_config(None, [item], env={})


def test_override_parsing():
    cfg = load_config(None, ["scorer.smoothing_sigma=null", "data.image_size=[32, 48]",
                             "banks.exclude_self=false", "trainer.epochs=3"], env={})
    assert cfg.scorer.smoothing_sigma is None and cfg.data.image_size == [32, 48]
    assert cfg.banks.exclude_self is False and cfg.trainer.epochs == 3


def test_help_lists_every_key(capsys):
    assert run(["--help"]) == 0
    out = capsys.readouterr().out
    for cmd in ("gen-data", "train", "build-banks", "score", "eval", "plot", "sweep"):
        assert cmd in out
    assert "losses.lam = 0.6" in out and "published: lambda = 0.6" in out
    assert describe_keys().count("\n") > 30


def test_exit_codes(tiny, tmp_path, capsys):
    assert run(["train", *tiny]) == 2  # no dataset yet
    assert "error" in capsys.readouterr().err
    assert run(["eval", "--set", "trainer.bogus=1"]) == 2
    assert run(["gen-data", "--bogus-flag"]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert run(["gen-data", "--config", str(bad)]) == 2


def test_end_to_end(tiny, tmp_path, capsys):
    assert run(["gen-data", *tiny]) == 0
    out = capsys.readouterr().out
    digest = [ln.split("\t")[1] for ln in out.splitlines() if ln.startswith("dataset_sha256")]
    assert len(digest) == 1 and len(digest[0]) == 64
    assert run(["train", *tiny, "--lr", "0.001"]) == 0
    assert "trained\ttile" in capsys.readouterr().out
    assert run(["build-banks", *tiny]) == 0
    assert run(["score", *tiny]) == 0
    capsys.readouterr()
    assert run(["eval", *tiny]) == 0
    csv = capsys.readouterr().out.splitlines()
    assert csv[0] == "metric,tile,mean"
    assert [ln.split(",")[0] for ln in csv[1:]] == ["I-AUROC", "P-AUROC", "AUPRO@0.3"]
    assert run(["eval", *tiny, "--json"]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert set(rep["per_category"]) == {"tile"}
    assert run(["plot", *tiny]) == 0
    pngs = list((tmp_path / "run" / "plots" / "tile").glob("*.png"))
    assert len(pngs) == 4
    saved = json.loads((tmp_path / "run" / "config.json").read_text())
    assert saved["trainer"]["lr"] == 0.001


def test_plot_warns_without_results(tiny, capsys):
    assert run(["plot", *tiny]) == 0
    assert "warning" in capsys.readouterr().err


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "mmfa", "eval", "--set", "x.y=1"],
                         capture_output=True, text=True)
    assert res.returncode == 2


def test_eval_matches_golden_fixture(tmp_path, capsys):
    import shutil
    from pathlib import Path

    golden = Path(__file__).parent / "fixtures" / "golden"
    shutil.copytree(golden / "run", tmp_path / "run")
    expected = json.loads((golden / "golden.json").read_text())
    args = ["--config", str(golden / "config.json"), "--data-root", str(golden / "data"),
            "--run-dir", str(tmp_path / "run")]
    assert run(["eval", *args, "--json"]) == 0
    got = json.loads(capsys.readouterr().out)["per_category"]
    for cat, vals in expected.items():
        for key, v in vals.items():
            assert got[cat][key] == pytest.approx(v, abs=1e-12), (cat, key)


def test_eval_missing_results_and_bad_root(tmp_path, capsys):
    assert run(["eval", "--run-dir", str(tmp_path / "nothing"),
                "--data-root", str(tmp_path)]) == 2
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert run(["gen-data", "--data-root", str(blocker / "sub"), "--set", "data.n_train=1",
                "--set", "data.n_test_normal=0", "--set", "data.n_test_anomalous=0"]) == 2
    assert "error" in capsys.readouterr().err
