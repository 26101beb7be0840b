import json
import os

import pytest

from deepsup.expcli import (
    ConfigError,
    RunConfig,
    build_dataset,
    compare_schemes,
    emit_pck_curve,
    format_rows,
    load_config,
    parse_config,
    read_rows,
    run_matrix,
)
from deepsup.expcli.cli import main
from deepsup.expcli.runner import quotas_for
from deepsup.network import TrainConfig

TINY = """
[run]
seeds = 0, 1
schemes = single, ladder

[data]
family = cuboid-vehicle
n_train = 60
n_val = 10
n_test = 20
models_train = 6
models_val = 2
models_test = 3
seed = 3

[arch]
conv_layers = 4
filters = 2, 3, 3
downsample = 2, 3
branch_hidden = 4
dropout_rate = 0

[train]
epochs = 1
batch_size = 20

[metrics]
curve = 0.05, 0.1, 0.2
"""


def rows_for(values):
    """values: {scheme: {seed: value}} -> consolidated-style rows."""
    return [{"scheme": s, "seed": k, "occlusion_type": "all", "metric": "pck2d", "alpha": 0.1, "value": v}
            for s, d in values.items() for k, v in d.items()]


@pytest.fixture(scope="module")
def matrix(tmp_path_factory):
    out = tmp_path_factory.mktemp("matrix")
    cfg = parse_config(TINY)
    res = run_matrix(cfg, str(out))
    return cfg, out, res


class TestConfig:
    def test_defaults(self):
        cfg = parse_config("")
        assert cfg == RunConfig()
        assert cfg.arch.conv_layers == 12 and cfg.train.lr == 0.01 and cfg.train.momentum == 0.9

    def test_parse(self):
        cfg = parse_config(TINY)
        assert cfg.seeds == (0, 1) and cfg.schemes == ("single", "ladder")
        assert cfg.arch.filters_per_stage == (2, 3, 3) and cfg.arch.input_size == 32
        assert cfg.data_seed == 3 and cfg.data.n_train == 60

    @pytest.mark.parametrize("text,match", [
        ("[bogus]\nx = 1\n", "section"),
        ("[run]\nseedz = 1\n", "unknown keys"),
        ("[run]\nschemes = single, sideways\n", "scheme"),
        ("[run]\nseeds = a\n", "invalid"),
        ("[train]\nbatch_size = 10\nquotas = full:5, truncated:4\n", "sum"),
        ("[hierarchy]\nweights = pose:1\n", "weights"),
        ("[arch]\ndownsample = 8, 4\n", "increasing"),
        ("no section header\n", "header"),
    ])
    def test_errors(self, text, match):
        with pytest.raises(ConfigError, match=match):
            parse_config(text)

    def test_variants(self):
        cfg = parse_config("[run]\nvariants = all: full+truncated+multi_object, full: full\n")
        assert [v.name for v in cfg.variants] == ["all", "full"]
        assert cfg.variants[1].types == ("full",)
        assert cfg.cell_label("single", cfg.variants[1]) == "single+full"

    def test_fingerprint_tracks_content(self):
        assert parse_config(TINY).fingerprint() == parse_config(TINY).fingerprint()
        assert parse_config(TINY).fingerprint() != parse_config(TINY.replace("epochs = 1", "epochs = 2")).fingerprint()

    def test_quotas_rescaled_to_kept_types(self):
        tc = TrainConfig(batch_size=100, quotas={"full": 50, "truncated": 20, "multi_object": 30})
        assert quotas_for(tc, ("full", "truncated", "multi_object")) == {"full": 50, "truncated": 20, "multi_object": 30}
        assert quotas_for(tc, ("full",)) == {"full": 100}
        assert quotas_for(TrainConfig(), ("full",)) is None


class TestDataset:
    def test_mix_proportions_and_manifest(self, tmp_path):
        text = TINY.replace("seed = 3", "seed = 3\nmix = full:0.5, truncated:0.2, multi_object:0.3")
        text = text.replace("n_train = 60", "n_train = 10").replace("n_test = 20", "n_test = 20")
        cfg = parse_config(text)
        splits = build_dataset(cfg, str(tmp_path))
        man = json.loads((tmp_path / "manifest.json").read_text())
        assert man["splits"]["train"]["types"] == {"full": 5, "truncated": 2, "multi_object": 3}
        assert man["splits"]["test"]["types"] == {"full": 10, "truncated": 4, "multi_object": 6}
        assert man["splits"]["train"]["count"] == len(splits["train"]) == 10
        pools = [set(man["splits"][s]["models"]) for s in ("train", "val", "test")]
        assert not (pools[0] & pools[1]) and not (pools[0] & pools[2]) and not (pools[1] & pools[2])

    def test_reuse_when_manifest_matches(self, tmp_path):
        cfg = parse_config(TINY.replace("n_train = 60", "n_train = 6"))
        build_dataset(cfg, str(tmp_path))
        stamp = os.stat(tmp_path / "train.dsd").st_mtime_ns
        build_dataset(cfg, str(tmp_path))
        assert os.stat(tmp_path / "train.dsd").st_mtime_ns == stamp


class TestMatrix:
    def test_outputs(self, matrix):
        cfg, out, res = matrix
        assert not res.failures
        assert [c.status for c in res.cells] == ["trained"] * 4
        assert res.steps == 4 * 3
        rows = read_rows(res.csv_path)
        assert {r["scheme"] for r in rows} == {"single", "ladder"}
        assert {r["seed"] for r in rows} == {0, 1}
        assert open(res.csv_path).readline().strip() == "scheme,seed,occlusion_type,metric,alpha,value"
        text = open(res.report_path).read()
        assert "median single" in text and "median ladder" in text
        svg = open(res.svg_path).read()
        assert svg.startswith("<?xml") and svg.count("<polyline") == 2

    def test_resume_skips_finished_cells(self, matrix):
        cfg, out, res = matrix
        before = open(res.csv_path, "rb").read()
        again = run_matrix(cfg, str(out))
        assert again.steps == 0
        assert {c.status for c in again.cells} == {"skipped"}
        assert open(again.csv_path, "rb").read() == before

    def test_failed_cell_is_reported(self, matrix, tmp_path, monkeypatch):
        cfg, out, _ = matrix
        import deepsup.expcli.runner as runner
        real = runner.train

        def flaky(net, *a, **k):
            if len(net.branches) > 1:
                raise RuntimeError("boom")
            return real(net, *a, **k)

        monkeypatch.setattr(runner, "train", flaky)
        from dataclasses import replace
        res = run_matrix(replace(cfg, seeds=(0,), data_dir=str(out / "data")), str(tmp_path))
        assert [(c.label, c.status) for c in res.cells] == [("single", "trained"), ("ladder", "failed")]
        assert "boom" in (tmp_path / "cells" / "ladder" / "seed0" / "error.txt").read_text()
        assert "FAILED ladder seed 0: RuntimeError: boom" in open(res.report_path).read()

    def test_missing_data_dir(self, matrix, tmp_path):
        from dataclasses import replace
        with pytest.raises(FileNotFoundError, match="train.dsd"):
            run_matrix(replace(matrix[0], data_dir=str(tmp_path / "nowhere")), str(tmp_path / "o"))


class TestCompare:
    def test_identical_results_claim_nothing(self):
        cmp = compare_schemes(rows_for({"a": {0: 0.5, 1: 0.6}, "b": {0: 0.5, 1: 0.6}}), "pck2d", 0.1)
        assert cmp.claims() == []
        assert "no ordering claimed" in cmp.text()

    def test_hand_medians_and_wins(self):
        cmp = compare_schemes(rows_for({"a": {0: 0.1, 1: 0.5, 2: 0.9}, "b": {0: 0.2, 1: 0.3, 2: 0.4}}), "pck2d", 0.1)
        assert cmp.medians == {"a": 0.5, "b": 0.3}
        p = cmp.pair("a", "b")
        assert p.wins == 2 and p.n == 3 and p.median_diff == pytest.approx(0.2)
        assert cmp.claims() == [("a", "b")]

    def test_lower_is_better(self):
        rows = [dict(r, metric="yaw_error", alpha=None)
                for r in rows_for({"a": {0: 2.0}, "b": {0: 5.0}})]
        assert compare_schemes(rows, "yaw_error", None, higher_is_better=False).claims() == [("a", "b")]

    def test_mismatched_seeds(self):
        with pytest.raises(ValueError, match="seed"):
            compare_schemes(rows_for({"a": {0: 0.1, 1: 0.2}, "b": {0: 0.1}}), "pck2d", 0.1)

    def test_needs_two_schemes(self):
        with pytest.raises(ValueError):
            compare_schemes(rows_for({"a": {0: 0.1}}), "pck2d", 0.1)

    def test_format_round_trip(self, tmp_path):
        rows = rows_for({"a": {0: 0.123456789}})
        (tmp_path / "r.csv").write_text(format_rows(rows))
        back = read_rows(str(tmp_path / "r.csv"))
        assert back[0]["value"] == 0.123457 and back[0]["alpha"] == 0.1


class TestSVG:
    def test_deterministic(self):
        c = {"a": ([0.05, 0.1], [0.3, 0.6]), "b": ([0.05, 0.1], [0.2, 0.5])}
        assert emit_pck_curve(c) == emit_pck_curve(dict(c))

    def test_perfect_curve_on_top_edge(self):
        svg = emit_pck_curve({"p": ([0.1, 0.2], [1.0, 1.0])})
        pts = svg.split('points="')[1].split('"')[0].split()
        assert {p.split(",")[1] for p in pts} == {"30.0000"}

    def test_empty(self):
        with pytest.raises(ValueError):
            emit_pck_curve({})


class TestCLI:
    def test_json_error_line(self, tmp_path, capsys):
        rc = main(["eval", "--scheme", "single", "--checkpoint", str(tmp_path / "missing.bin"),
                   "--data", str(tmp_path / "missing.dsd")])
        assert rc == 1
        err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert set(err) == {"error", "message"}

    def test_bad_config_is_reported(self, tmp_path, capsys):
        p = tmp_path / "bad.ini"
        p.write_text("[run]\nseedz = 1\n")
        assert main(["run-matrix", "--config", str(p), "--out", str(tmp_path / "o")]) == 1
        assert json.loads(capsys.readouterr().err.strip())["error"] == "ConfigError"

    def test_run_matrix_resume_and_report(self, matrix, tmp_path, capsys):
        cfg, out, res = matrix
        p = tmp_path / "tiny.ini"
        p.write_text(TINY)
        assert main(["run-matrix", "--config", str(p), "--out", str(out)]) == 0
        printed = capsys.readouterr().out
        assert "4 cells (0 trained, 4 resumed, 0 failed)" in printed
        assert main(["report", "--results", res.csv_path, "--metric", "pck2d", "--alpha", "0.1"]) == 0
        assert "median ladder" in capsys.readouterr().out

    def test_eval_reproduces_cell_metrics(self, matrix, capsys, tmp_path):
        cfg, out, _ = matrix
        p = tmp_path / "tiny.ini"
        p.write_text(TINY)
        d = out / "cells" / "ladder" / "seed1"
        rc = main(["eval", "--config", str(p), "--scheme", "ladder", "--checkpoint", str(d / "checkpoint.bin"),
                   "--data", str(out / "data" / "test.dsd")])
        assert rc == 0
        printed = capsys.readouterr().out
        want = {line.split(",", 2)[2] for line in (d / "metrics.csv").read_text().splitlines()[1:]}
        got = {line.split(",", 2)[2] for line in printed.splitlines()[1:] if line.count(",") == 5}
        assert got == want

    def test_genprob_command(self, tmp_path, capsys):
        assert main(["genprob", "--out", str(tmp_path)]) == 0
        assert "all checks hold" in capsys.readouterr().out

    def test_load_config_file(self, tmp_path):
        p = tmp_path / "c.ini"
        p.write_text(TINY)
        assert load_config(p) == parse_config(TINY)
