import json

import pytest

from mfas import cli
from mfas.training import NumericalError

FAST = ["--set", "pretrain_epochs=1", "--set", "search_epochs=1", "--set", "level_eval_epochs=1",
        "--set", "derive_epochs=1", "--set", "folds=[0]", "--set", "pretrain_lr=1e-4", "--set", "lr=3e-4"]


def run(*argv):
    return cli.main([str(a) for a in argv])


def run_pipeline(root):
    """gen-toy -> pretrain x2 -> search -> derive -> eval -> plot-grid."""
    data, out = root / "data", root / "run"
    codes = {"gen": run("gen-toy", "--out", data, "--n", 40, "--seed", 1, "--rigged")}
    man = data / "manifest.jsonl"
    common = ["--manifest", man, "--out-dir", out, *FAST]
    codes["base"] = run("pretrain", *common, "--set", "objective=continuous")
    codes["asr"] = run("pretrain", *common, "--set", "objective=quantized")
    ext = ["--set", f"base_checkpoint={out / 'continuous.pt'}", "--set", f"asr_checkpoint={out / 'quantized.pt'}"]
    codes["search"] = run("search", *common, *ext)
    codes["derive"] = run("derive", *common, *ext)
    codes["eval"] = run("eval", *common, *ext)
    codes["plot"] = run("plot-grid", "--search", out / "search.json", "--out", out / "grid.svg")
    return {"root": root, "manifest": man, "out": out, "codes": codes, "ext": ext}


REPORTS = ("continuous_report.json", "quantized_report.json", "search.json", "derive_report.json", "eval_report.json")


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    return run_pipeline(tmp_path_factory.mktemp("cli"))


def test_pipeline_exit_codes(pipeline):
    assert pipeline["codes"] == {k: 0 for k in ("gen", "base", "asr", "search", "derive", "eval", "plot")}
    out = pipeline["out"]
    for name in (*REPORTS, "continuous.pt", "quantized.pt", "grid.svg", "derived/fold0.pt"):
        assert (out / name).exists(), name


def test_eval_matches_derive(pipeline):
    out = pipeline["out"]
    derive = json.loads((out / "derive_report.json").read_text())
    ev = json.loads((out / "eval_report.json").read_text())
    assert derive["folds"] == ev["folds"]


def test_pipeline_is_deterministic(pipeline, tmp_path):
    again = run_pipeline(tmp_path)
    assert set(again["codes"].values()) == {0}
    for name in REPORTS:
        assert json.loads((again["out"] / name).read_text()) == json.loads((pipeline["out"] / name).read_text()), name
    assert (again["out"] / "grid.svg").read_bytes() == (pipeline["out"] / "grid.svg").read_bytes()


def test_report_command_prints_table(pipeline, capsys):
    assert run("report", pipeline["out"] / "derive_report.json") == 0
    text = capsys.readouterr().out
    assert text.splitlines()[0].split() == ["fold", "held_out", "level", "op", "ua", "wa"]
    assert "mean" in text
    assert run("report", pipeline["out"] / "search.json") == 0
    assert "best_level" in capsys.readouterr().out


def test_usage_errors_exit_1(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        run("no-such-command")
    assert exc.value.code == 1
    assert run("search", "--out-dir", tmp_path) == 1  # no manifest
    assert run("search", "--manifest", "m.jsonl", "--set", "bogus_key=1") == 1
    assert run("search", "--manifest", "m.jsonl", "--set", "noequals") == 1
    bad = tmp_path / "r.json"
    bad.write_text("{}")
    assert run("report", bad) == 1
    assert "usage error" in capsys.readouterr().err


def test_data_errors_exit_2(tmp_path, pipeline):
    assert run("search", "--manifest", tmp_path / "missing.jsonl", "--out-dir", tmp_path) == 2
    # extractors not configured
    assert run("search", "--manifest", pipeline["manifest"], "--out-dir", tmp_path) == 2
    # derive before search
    assert run("derive", "--manifest", pipeline["manifest"], "--out-dir", tmp_path, *pipeline["ext"]) == 2
    # eval with no derived models
    assert run("eval", "--manifest", pipeline["manifest"], "--out-dir", tmp_path, *pipeline["ext"]) == 2
    empty = tmp_path / "search.json"
    empty.write_text(json.dumps({"folds": []}))
    assert run("plot-grid", "--search", empty, "--out", tmp_path / "g.svg") == 2
    assert not (tmp_path / "g.svg").exists()


def test_numerical_failure_exit_3(monkeypatch, pipeline, tmp_path):
    def boom(cfg):
        raise NumericalError("non-finite search loss: nan")

    monkeypatch.setattr(cli, "run_search", boom)
    assert run("search", "--manifest", pipeline["manifest"], "--out-dir", tmp_path, *pipeline["ext"]) == 3


def test_config_file_and_overrides(tmp_path):
    cfg_path = tmp_path / "c.yaml"
    cfg_path.write_text("lr: 0.01\nencoder:\n  n_layers: 2\n")
    args = cli.build_parser().parse_args(
        ["search", "--config", str(cfg_path), "--manifest", "m.jsonl", "--set", "encoder.model_dim=32", "--seed", "4"]
    )
    cfg = cli._load_cfg(args, "search")
    assert (cfg.lr, cfg.seed, cfg.encoder["n_layers"], cfg.encoder["model_dim"]) == (0.01, 4, 2, 32)


def test_format_table_alignment():
    text = cli.format_table([{"a": 1, "b": 0.5}, {"a": "long", "b": 2}], ["a", "b"])
    lines = text.splitlines()
    assert lines[0] == "a     b"
    assert lines[2] == "1     0.5000"
