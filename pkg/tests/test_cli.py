import json

import pytest

from msrgcn.cli import main


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "config.json"
    cfg.write_text(json.dumps({
        "gen": {"n_images": 40, "d": 10, "grid_min": 2, "grid_max": 3, "seed": 2},
        "model": {"d1": 4, "d2": 4, "attention_dim": 8, "hidden_dim": 8},
        "train": {"max_epochs": 2, "batch_size": 8, "k": 2, "lr": 0.01},
    }))
    assert main(["gen", "--config", str(cfg), "--out", str(root / "data")]) == 0
    assert main(["train", "--data", str(root / "data"), "--config", str(cfg), "--variant", "Full", "--out", str(root / "run")]) == 0
    return root, cfg


def error_line(capsys):
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1
    return json.loads(err[0])


def test_gen_writes_manifest(workspace):
    root, _ = workspace
    manifest = json.loads((root / "data" / "manifest.json").read_text())
    assert len(manifest["images"]) == 40


def test_train_outputs(workspace):
    root, _ = workspace
    report = json.loads((root / "run" / "report.json").read_text())
    assert report["variant"] == "Full" and len(report["folds"]) == 2
    assert (root / "run" / "fold0.model").exists() and (root / "run" / "fold1.model").exists()
    assert json.loads((root / "run" / "foldspec.json").read_text())["k"] == 2


def test_eval_prints_metrics(workspace, capsys):
    root, _ = workspace
    capsys.readouterr()
    assert main(["eval", "--model", str(root / "run" / "fold0.model"), "--data", str(root / "data"), "--split", "test"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert {"macro_auc", "qw_kappa", "confusion"} <= set(out)
    report = json.loads((root / "run" / "report.json").read_text())
    assert out["qw_kappa"] == report["folds"][0]["test"]["qw_kappa"]


@pytest.mark.parametrize("suffix", ["csv", "pgm"])
def test_heatmap_export(workspace, suffix):
    root, _ = workspace
    out = root / f"hm.{suffix}"
    assert main(["heatmap", "--model", str(root / "run" / "fold0.model"), "--data", str(root / "data"),
                 "--image", "img00001", "--out", str(out)]) == 0
    assert out.stat().st_size > 0


def test_ablate_outputs(workspace):
    root, cfg = workspace
    assert main(["ablate", "--data", str(root / "data"), "--config", str(cfg), "--variants", "Full,Single20",
                 "--out", str(root / "abl")]) == 0
    table = json.loads((root / "abl" / "ablation.json").read_text())["table"]
    assert [r["variant"] for r in table] == ["Full", "Single20"]
    assert "Single20" in (root / "abl" / "ablation.txt").read_text()


def test_gradcheck(capsys):
    assert main(["gradcheck"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines and all(line.startswith("PASS") for line in lines)


@pytest.mark.parametrize(
    "argv, kind",
    [
        (["bogus"], "CliError"),
        (["train", "--data", "/nonexistent", "--out", "/tmp/x"], "DatasetError"),
        (["ablate", "--data", "/nonexistent", "--variants", "Nope", "--out", "/tmp/x"], "DatasetError"),
    ],
)
def test_errors_are_one_json_line(argv, kind, capsys):
    assert main(argv) == 1
    assert error_line(capsys)["error"] == kind


def test_unknown_image(workspace, capsys):
    root, _ = workspace
    assert main(["heatmap", "--model", str(root / "run" / "fold0.model"), "--data", str(root / "data"),
                 "--image", "nope", "--out", str(root / "x.csv")]) == 1
    assert "nope" in error_line(capsys)["message"]


def test_bad_split(workspace, capsys):
    root, _ = workspace
    assert main(["eval", "--model", str(root / "run" / "fold0.model"), "--data", str(root / "data"), "--split", "dev"]) == 1
    assert "split" in error_line(capsys)["message"]
