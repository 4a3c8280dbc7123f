import filecmp
import json

import pytest

from atlasaug.cli import (EXIT_DATA, EXIT_OK, EXIT_USAGE, run_cli)
from atlasaug.pipeline import TABLE_METHODS, ExperimentConfig
from atlasaug.toydata import ToyGenParams


def tiny_config(tmp_path, **over):
    """A micro-scale config so CLI runs finish in seconds."""
    cfg = ExperimentConfig()
    cfg.toy = ToyGenParams(size=32, warp_amplitude=2.0, warp_spacing=8)
    cfg.n_train, cfg.n_val, cfg.n_test = 3, 1, 2
    cfg.widths = (4, 8, 8)
    cfg.seg_widths = (4, 8, 8)
    cfg.spatial_steps = 4
    cfg.appearance_steps = 4
    cfg.seg_max_epochs = 1
    cfg.seg_patience = 1
    cfg.seg_iters_per_epoch = 1
    cfg.seg_batch_size = 4
    for k, v in over.items():
        setattr(cfg, k, v)
    path = tmp_path / "config.json"
    path.write_text(cfg.to_json())
    return path


def run(cfg_path, out, *argv):
    return run_cli(["--config", str(cfg_path), "--out", str(out), *argv])


def trees_equal(a, b):
    cmp = filecmp.dircmp(a, b)
    if cmp.left_only or cmp.right_only or cmp.diff_files:
        return False
    _, mismatch, errors = filecmp.cmpfiles(a, b, cmp.common_files, shallow=False)
    return not mismatch and not errors


# ---------------------------------------------------------------------------
# usage errors


def test_missing_subcommand_exits_usage(tmp_path):
    assert run_cli(["--out", str(tmp_path)]) == EXIT_USAGE


def test_unknown_subcommand_exits_usage(tmp_path):
    assert run_cli(["--out", str(tmp_path), "frobnicate"]) == EXIT_USAGE


def test_train_seg_requires_mode(tmp_path):
    assert run_cli(["--out", str(tmp_path), "train-seg"]) == EXIT_USAGE


def test_train_seg_rejects_unknown_mode(tmp_path):
    assert run_cli(["--out", str(tmp_path), "train-seg", "--mode", "psychic"]) \
        == EXIT_USAGE


# ---------------------------------------------------------------------------
# data errors


def test_missing_config_file_is_data_error(tmp_path):
    rc = run_cli(["--config", str(tmp_path / "nope.json"),
                  "--out", str(tmp_path), "gen-toy"])
    assert rc == EXIT_DATA


def test_evaluate_without_predictions_names_method(tmp_path, capsys):
    cfg = tiny_config(tmp_path)
    out = tmp_path / "ws"
    assert run(cfg, out, "gen-toy") == EXIT_OK
    rc = run(cfg, out, "evaluate", "--methods", "SAS", "ours-indep")
    captured = capsys.readouterr()
    assert rc == EXIT_DATA
    assert "SAS" in captured.err


def test_train_spatial_without_corpus_is_data_error(tmp_path):
    cfg = tiny_config(tmp_path)
    assert run(cfg, tmp_path / "ws", "train-spatial") == EXIT_DATA


# ---------------------------------------------------------------------------
# generation determinism


def test_gen_toy_is_reproducible(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        rc = run_cli(["--seed", "7", "--out", str(out), "--config",
                      str(tiny_config(tmp_path)), "gen-toy"])
        assert rc == EXIT_OK
    assert trees_equal(a / "data", b / "data")


# ---------------------------------------------------------------------------
# full pipeline


@pytest.fixture(scope="module")
def pipeline_ws(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    cfg = tiny_config(tmp)
    out = tmp / "ws"
    assert run(cfg, out, "gen-toy") == EXIT_OK
    assert run(cfg, out, "train-spatial") == EXIT_OK
    assert run(cfg, out, "train-appearance") == EXIT_OK
    return cfg, out


def test_synth_dump_writes_examples(pipeline_ws):
    cfg, out = pipeline_ws
    rc = run(cfg, out, "synth", "dump", "--count", "3", "--mode", "indep")
    assert rc == EXIT_OK
    synth_dir = out / "synth"
    images = sorted(synth_dir.glob("synth_*_image.vtf"))
    assert len(images) == 3
    assert len(list(synth_dir.glob("synth_*_labels.vtf"))) == 3
    with open(synth_dir / "synth_0000_provenance.json") as fh:
        prov = json.load(fh)
    assert prov["mode"] == "indep"
    assert prov["spatial_target_index"] is not None


def test_full_pipeline_reports_table_rows(pipeline_ws, capsys):
    cfg, out = pipeline_ws
    assert run(cfg, out, "baseline-sas") == EXIT_OK
    for mode in ("indep", "coupled", "rand-aug", "indep+rand",
                 "sas-aug", "supervised"):
        assert run(cfg, out, "train-seg", "--mode", mode) == EXIT_OK
    rc = run(cfg, out, "evaluate", "--methods", *TABLE_METHODS)
    assert rc == EXIT_OK
    shown = capsys.readouterr().out
    for method in TABLE_METHODS:
        assert method in shown
    with open(out / "report" / "summary.json") as fh:
        summary = json.load(fh)
    assert sorted(summary["methods"]) == sorted(TABLE_METHODS)
    assert summary["baseline"] == "SAS"
    assert (out / "report" / "metrics.csv").exists()


def test_report_subcommand_prints_table(pipeline_ws, capsys):
    cfg, out = pipeline_ws
    rc = run(cfg, out, "report", "--methods", "SAS", "ours-indep")
    assert rc == EXIT_OK
    shown = capsys.readouterr().out
    assert "mean Dice" in shown and "ours-indep" in shown
