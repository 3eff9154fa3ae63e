import json

import pytest

from hazecascade.cli import main
from hazecascade.config import RunConfig, config_from_dict, load_config
from hazecascade.errors import ConfigError
from hazecascade.imageio import DetectionRecord, read_detections, write_detections

SMALL = {
    "seed": 4,
    "out": "run",
    "dataset": {"n_train": 16, "n_val": 6, "n_test": 2},
    "dehaze": {"epochs": 1},
    "detect": {"light_epochs": 2, "heavy_epochs": 1},
    "pipeline": {"n_pairs": 1},
}


def write_config(path, data=SMALL):
    path.write_text(json.dumps(data))
    return path


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    """Config plus the output of synth, train-dehaze, train-detect and benchmark."""
    root = tmp_path_factory.mktemp("cli")
    cfg = write_config(root / "small.json")
    for cmd in (["synth"], ["train-dehaze"], ["train-detect"], ["benchmark"]):
        assert main(cmd + ["--config", str(cfg)]) == 0
    return root


# ---- config ------------------------------------------------------------------

def test_config_defaults_and_paths(tmp_path):
    cfg = load_config(write_config(tmp_path / "c.json", {"out": "x/y", "dataset": {"n_train": 5}}))
    assert cfg.out_dir == tmp_path / "x" / "y"
    assert cfg.dataset.n_train == 5 and cfg.dataset.n_val == RunConfig().dataset.n_val
    assert config_from_dict({"out": "/abs"}).out_dir.as_posix() == "/abs"


@pytest.mark.parametrize("bad,needle", [
    ({"sed": 1}, "unknown keys"),
    ({"dataset": {"n_trian": 3}}, "config.dataset"),
    ({"seed": "zero"}, "integer"),
    ({"fog": {"beta": True}}, "number"),
    ({"dehaze": {"use_gt_rois": 1}}, "true/false"),
    ({"pipeline": []}, "JSON object"),
    ({"detect": {"families": "A"}}, "list"),
])
def test_config_rejects_bad_documents(bad, needle):
    with pytest.raises(ConfigError, match=needle):
        config_from_dict(bad)


def test_config_invalid_json_location(tmp_path):
    (tmp_path / "c.json").write_text('{"seed": 1,\n  oops}')
    with pytest.raises(ConfigError, match="line 2"):
        load_config(tmp_path / "c.json")


def test_demo_config_parses():
    from pathlib import Path
    cfg = load_config(Path(__file__).resolve().parents[1] / "configs" / "demo.json")
    assert cfg.dataset.n_train == 1000 and cfg.detect.families == ("A", "B")


# ---- dispatch and exit codes -------------------------------------------------

def test_no_arguments_prints_usage(capsys):
    assert main([]) == 2
    assert "usage" in capsys.readouterr().err


def test_unknown_subcommand_and_flag(capsys):
    with pytest.raises(SystemExit) as e:
        main(["frobnicate"])
    assert e.value.code == 2
    with pytest.raises(SystemExit) as e:
        main(["synth", "--bogus"])
    assert e.value.code == 2


def test_runtime_failures_exit_one(tmp_path, capsys):
    assert main(["benchmark", "--out", str(tmp_path / "empty")]) == 1
    assert "synth" in capsys.readouterr().err
    bad = write_config(tmp_path / "bad.json", {"nope": 1})
    assert main(["synth", "--config", str(bad)]) == 1
    assert "error[ConfigError]" in capsys.readouterr().err
    assert main(["synth", "--threads", "0", "--out", str(tmp_path)]) == 2


def test_missing_weights_name_the_archive(run_dir, tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json")
    assert main(["synth", "--config", str(cfg)]) == 0
    assert main(["benchmark", "--config", str(cfg)]) == 1
    assert "det_A_heavy.ppwa" in capsys.readouterr().err


# ---- workflows ---------------------------------------------------------------

def test_pipeline_outputs(run_dir):
    out = run_dir / "run"
    rows = (out / "benchmark" / "benchmark.csv").read_text().splitlines()
    assert len(rows) == 7
    assert (out / "tables" / "table1.md").read_text().startswith("| Model | Average Loss | SSIM |")
    for name in ("aodnet", "aodnetx", "det_A_light", "det_A_heavy", "det_B_light", "det_B_heavy"):
        assert (out / "weights" / f"{name}.ppwa").is_file()
        assert (out / "logs" / f"{name}_loss.csv").is_file()
    assert len(list((out / "benchmark" / "detections").glob("*.jsonl"))) == 12
    assert len(list((out / "benchmark" / "pairs").rglob("*.ppm"))) == 8


def test_eval_detect_pipeline_commands(run_dir, capsys):
    cfg = str(run_dir / "small.json")
    out = run_dir / "run"
    assert main(["eval-dehaze", "--config", cfg]) == 0
    text = capsys.readouterr().out
    assert "hazy input" in text and "aodnetx" in text
    assert main(["detect", "--config", cfg, "--family", "B", "--width", "light"]) == 0
    assert (out / "detections" / "B_light_val_foggy.jsonl").is_file()
    dest = run_dir / "p.jsonl"
    assert main(["pipeline", "--config", cfg, "--condition", "clear", "--output", str(dest)]) == 0
    assert "A-light+AOD-NetX+A-heavy" in capsys.readouterr().out
    assert all(d.image_id.startswith("val_") for d in read_detections(dest))


def test_threads_do_not_change_results(run_dir, tmp_path):
    cfg = str(run_dir / "small.json")
    out = run_dir / "run" / "benchmark" / "benchmark.csv"
    single = out.read_bytes()
    assert main(["benchmark", "--config", cfg, "--threads", "2"]) == 0
    assert out.read_bytes() == single


def test_rerun_is_byte_identical(run_dir, tmp_path):
    cfg = str(run_dir / "small.json")
    other = tmp_path / "again"
    for cmd in (["synth"], ["train-dehaze"], ["train-detect"], ["benchmark"]):
        assert main(cmd + ["--config", cfg, "--out", str(other)]) == 0
    first = {k: v for k, v in tree_bytes(run_dir / "run").items() if not k.startswith("detections/")}
    first = {k: v for k, v in first.items() if "dehaze_eval" not in k}
    second = tree_bytes(other)
    assert first == second


def test_ingest_command(run_dir, tmp_path, capsys):
    path = tmp_path / "ext.jsonl"
    write_detections(path, [DetectionRecord("val_00001", 0, 0.5, 1, 1, 4, 4)])
    assert main(["ingest", str(path), "--config", str(run_dir / "small.json"), "--split", "val"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["images"] == 6 and report["detections"] == 1 and report["per_image"]["val_00001"] == 1
    path.write_text("{broken\n")
    assert main(["ingest", str(path)]) == 1
    assert "line 1" in capsys.readouterr().err
