import csv
import filecmp
import json
import math
import statistics
import xml.etree.ElementTree as ET
from pathlib import Path

import numpy as np
import pytest
import yaml

from robustlab.harness import ConfigError, emit_curves, load_config, main, parse_config, read_curves, run
from robustlab.harness import runner as runner_module
from robustlab.harness.curves import CURVE_COLUMNS

TINY = """
name: tiny
master_seed: 3
output_dir: {out}
dataset:
  train_per_class: 5
  test_per_class: 2
sweep:
  n_train: [20, 40]
  seeds: [0, 1]
training:
  epochs: 1
  batch_size: 10
modes:
  - kind: normal
attacks:
  - {{name: pgd_linf, kind: pgd, norm: linf, epsilon: 0.3, iterations: 3, restarts: 1, samples: 8}}
  - {{name: on_manifold, kind: on_manifold, norm: latent-linf, epsilon: 0.3, iterations: 3, restarts: 1, samples: 8}}
manifold:
  kind: true
projection:
  modes: [normal]
  samples: 4
  knn: 5
  bins: 4
"""


def tiny(tmp_path, **replace) -> str:
    text = TINY.format(out=(tmp_path / "out").as_posix())
    for old, new in replace.items():
        text = text.replace(old, new)
    return text


def diagnostics(text) -> list[str]:
    with pytest.raises(ConfigError) as info:
        parse_config(text, "cfg.yaml")
    return info.value.diagnostics


class TestConfig:
    def test_valid(self, tmp_path):
        cfg = parse_config(tiny(tmp_path))
        assert cfg.sweep.n_train == [20, 40] and cfg.modes[0].kind == "normal"
        assert cfg.manifold.kind == "true"

    def test_round_trip(self, tmp_path):
        cfg = parse_config(tiny(tmp_path))
        again = parse_config(cfg.dump())
        assert again == cfg and again.dump() == cfg.dump()

    def test_negative_epsilon(self, tmp_path):
        text = tiny(tmp_path, **{"kind: pgd, norm: linf, epsilon: 0.3": "kind: pgd, norm: linf, epsilon: -1"})
        lines = diagnostics(text)
        assert any("epsilon" in d and d.startswith("cfg.yaml:") for d in lines)

    def test_line_numbers(self, tmp_path):
        text = tiny(tmp_path, **{"epochs: 1": "epochs: 0"})
        (line,) = diagnostics(text)
        expected = 1 + text.splitlines().index("  epochs: 0")
        assert line.startswith(f"cfg.yaml:{expected}:") and "training.epochs" in line

    def test_on_manifold_without_manifold(self, tmp_path):
        text = tiny(tmp_path, **{"  - kind: normal": "  - kind: normal\n  - kind: on_manifold"}).replace("manifold:\n  kind: true\n", "manifold: null\n")
        assert any("manifold" in d for d in diagnostics(text))

    def test_empty_sweep(self, tmp_path):
        assert any("n_train" in d for d in diagnostics(tiny(tmp_path, **{"n_train: [20, 40]": "n_train: []"})))

    def test_infeasible_n(self, tmp_path):
        assert any("n_train" in d for d in diagnostics(tiny(tmp_path, **{"n_train: [20, 40]": "n_train: [20, 400]"})))

    def test_unknown_key(self, tmp_path):
        assert any("epoch" in d for d in diagnostics(tiny(tmp_path, **{"epochs: 1": "epoch: 1"})))

    def test_seed_count_expands(self, tmp_path):
        cfg = parse_config(tiny(tmp_path, **{"seeds: [0, 1]": "seeds: 3"}))
        assert cfg.sweep.seeds == [0, 1, 2]

    def test_defaults(self, tmp_path):
        cfg = parse_config(f"output_dir: {(tmp_path / 'x').as_posix()}\n")
        assert cfg.sweep.n_train == [250, 500, 1000, 2000, 4000] and len(cfg.sweep.seeds) == 3
        assert cfg.training.epochs == 20 and cfg.training.batch_size == 100

    def test_environment_overrides(self, tmp_path, monkeypatch):
        cfg = parse_config(tiny(tmp_path))
        monkeypatch.setenv("ROBUSTLAB_OUTPUT_DIR", str(tmp_path / "elsewhere"))
        monkeypatch.setenv("ROBUSTLAB_WORKERS", "3")
        assert cfg.resolved_output_dir() == tmp_path / "elsewhere" and cfg.resolved_workers() == 3

    def test_load_config(self, tmp_path):
        path = tmp_path / "c.yaml"
        path.write_text(tiny(tmp_path))
        assert load_config(path).name == "tiny"


def cell_metrics(rows):
    return [{"mode": m, "N": n, "seed": s, "test_error": e, "metric_name": "success_rate:pgd", "metric_value": v} for m, n, s, e, v in rows]


class TestCurves:
    ROWS = [("normal", 250, 0, 0.4, 0.9), ("normal", 250, 1, 0.5, 0.7), ("normal", 1000, 0, 0.2, 0.5), ("normal", 1000, 1, 0.3, 0.4)]

    def test_row_count(self, tmp_path):
        rows = emit_curves(cell_metrics(self.ROWS), "vs_test_error", tmp_path / "c.csv")
        assert sum(r["row_type"] == "aggregate" for r in rows) == 2
        assert sum(r["row_type"] == "cell" for r in rows) == 4
        assert len(read_curves(tmp_path / "c.csv")) == 6

    def test_columns(self, tmp_path):
        emit_curves(cell_metrics(self.ROWS), "vs_n", tmp_path / "c.csv")
        with open(tmp_path / "c.csv") as fh:
            header = next(csv.reader(fh))
        assert tuple(header) == CURVE_COLUMNS and header[:6] == ["mode", "N", "seed", "test_error", "metric_name", "metric_value"]

    def test_means_recomputed(self, tmp_path):
        rng = np.random.default_rng(0)
        rows = [("m", n, s, float(rng.uniform()), float(rng.uniform())) for n in (10, 20, 30) for s in range(5)]
        emit_curves(cell_metrics(rows), "vs_n", tmp_path / "c.csv")
        table = read_curves(tmp_path / "c.csv")
        for agg in (r for r in table if r["row_type"] == "aggregate"):
            group = [r for r in table if r["row_type"] == "cell" and r["N"] == agg["N"]]
            values = [float(r["metric_value"]) for r in group]
            errors = [float(r["test_error"]) for r in group]
            assert abs(float(agg["metric_value"]) - sum(values) / len(values)) <= 1e-12
            assert abs(float(agg["test_error"]) - sum(errors) / len(errors)) <= 1e-12
            assert abs(float(agg["metric_std"]) - statistics.stdev(values)) <= 1e-12
            assert int(agg["n_seeds"]) == 5

    def test_svg_parses(self, tmp_path):
        emit_curves(cell_metrics(self.ROWS), "vs_test_error", tmp_path / "c.csv", title="a & b")
        root = ET.parse(tmp_path / "c.svg").getroot()
        assert root.tag.endswith("svg") and root.findall(".//{http://www.w3.org/2000/svg}polyline")

    def test_single_seed_has_zero_spread(self, tmp_path):
        rows = emit_curves(cell_metrics(self.ROWS[:1]), "vs_n", tmp_path / "c.csv", svg=False)
        assert rows[-1]["metric_std"] == 0.0 and not (tmp_path / "c.svg").exists()

    def test_missing_metric_is_skipped(self, tmp_path):
        rows = cell_metrics(self.ROWS[:2])
        rows[1]["metric_value"] = None
        agg = [r for r in emit_curves(rows, "vs_n", tmp_path / "c.csv") if r["row_type"] == "aggregate"]
        assert agg[0]["n_seeds"] == 1 and agg[0]["metric_value"] == 0.9

    def test_unknown_kind(self, tmp_path):
        with pytest.raises(ValueError):
            emit_curves(cell_metrics(self.ROWS), "vs_time", tmp_path / "c.csv")


def snapshot(root: Path) -> dict:
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    base = tmp_path_factory.mktemp("grid")
    cfg = parse_config(tiny(base))
    first = run(cfg, log=lambda *_: None)
    files = snapshot(first["output_dir"])
    second = run(cfg, log=lambda *_: None)
    return cfg, first, files, second


class TestRun:
    def test_cells(self, tiny_run):
        _, first, _, _ = tiny_run
        assert len(first["records"]) == 4 and first["manifest"]["failed"] == []
        assert not any(r["cached"] for r in first["records"])

    def test_cache_and_byte_identical_rerun(self, tiny_run):
        _, first, files, second = tiny_run
        assert all(r["cached"] for r in second["records"])
        assert snapshot(second["output_dir"]) == files

    def test_curve_files(self, tiny_run):
        _, first, files, _ = tiny_run
        curves = first["manifest"]["curves"]
        assert set(curves) == {"onmanifold_success_vs_test_error", "regular_success_vs_test_error", "test_error_vs_n", "distance_histograms"}
        assert all(c in files for c in curves.values())

    def test_rows_are_traceable(self, tiny_run):
        _, first, _, _ = tiny_run
        out = first["output_dir"]
        for name in ("onmanifold_success_vs_test_error", "regular_success_vs_test_error"):
            for row in read_curves(out / first["manifest"]["curves"][name]):
                if row["row_type"] != "cell":
                    continue
                summary = json.loads((out / row["source"]).read_text())
                assert (out / summary["model"]).is_file()
                attack = row["metric_name"].split(":", 1)[1]
                assert (out / summary["attacks"][attack]["csv"]).is_file()
                assert float(row["metric_value"]) == summary["attacks"][attack]["success_rate"]

    def test_projection_histograms(self, tiny_run):
        _, first, _, _ = tiny_run
        out = first["output_dir"]
        with open(out / "curves" / "distance_histograms.csv") as fh:
            rows = list(csv.DictReader(fh))
        groups = {}
        for r in rows:
            groups.setdefault((r["N"], r["seed"], r["attack"], r["method"]), []).append(float(r["mass"]))
        assert {k[3] for k in groups} == {"decoder", "knn_test_centered", "knn_mean_centered"}
        assert all(abs(math.fsum(m) - 1) < 1e-12 for m in groups.values())

    def test_manifest(self, tiny_run):
        cfg, first, _, _ = tiny_run
        manifest = json.loads((first["output_dir"] / "manifest.json").read_text())
        assert manifest["config"] == cfg.to_dict() and manifest["seeds"] == [0, 1]
        assert parse_config((first["output_dir"] / "config.effective.yaml").read_text()) == cfg

    def test_cache_key_depends_on_code_version(self, tiny_run, monkeypatch):
        cfg, _, _, _ = tiny_run
        cell = runner_module.grid(cfg)[0]
        before = runner_module.cell_key(cfg, cell)
        monkeypatch.setattr(runner_module, "code_version", lambda: "other")
        assert runner_module.cell_key(cfg, cell) != before

    def test_cache_key_depends_on_seed_and_mode(self, tiny_run):
        cfg, _, _, _ = tiny_run
        keys = {runner_module.cell_key(cfg, c) for c in runner_module.grid(cfg)}
        assert len(keys) == 4


class TestFailureIsolation:
    def test_failed_cell_does_not_stop_the_run(self, tmp_path, monkeypatch):
        text = tiny(tmp_path, **{"n_train: [20, 40]": "n_train: [20]"})
        cfg = parse_config(text)
        original = runner_module.run_attack

        def flaky(spec, model, images, labels, index, manifold, dataset):
            if spec.name == "pgd_linf" and model.meta.get("boom"):
                raise RuntimeError("injected")
            return original(spec, model, images, labels, index, manifold, dataset)

        original_train = runner_module.train_or_load

        def marking(cfg, cell, out):
            model, *rest = original_train(cfg, cell, out)
            model.meta["boom"] = cell.seed == 1
            return (model, *rest)

        monkeypatch.setattr(runner_module, "run_attack", flaky)
        monkeypatch.setattr(runner_module, "train_or_load", marking)
        result = run(cfg, log=lambda *_: None)
        assert result["manifest"]["failed"] == ["normal-N20-s1"]
        assert "injected" in (result["output_dir"] / "cells" / "normal-N20-s1" / "error.txt").read_text()
        assert (result["output_dir"] / "cells" / "normal-N20-s0" / "summary.json").is_file()


class TestCli:
    def write(self, tmp_path, text):
        path = tmp_path / "c.yaml"
        path.write_text(text)
        return str(path)

    def test_validate_prints_effective_config(self, tmp_path, capsys):
        assert main(["validate", self.write(tmp_path, tiny(tmp_path))]) == 0
        echoed = capsys.readouterr().out
        assert yaml.safe_load(echoed)["training"]["learning_rate"] == 0.01
        assert parse_config(echoed) == parse_config(tiny(tmp_path))

    def test_validate_rejects(self, tmp_path, capsys):
        bad = tiny(tmp_path, **{"epsilon: 0.3, iterations": "epsilon: -1, iterations"})
        assert main(["validate", self.write(tmp_path, bad)]) == 1
        assert "c.yaml:" in capsys.readouterr().err

    def test_missing_file(self, tmp_path):
        assert main(["validate", str(tmp_path / "nope.yaml")]) == 1

    def test_bad_flag(self):
        with pytest.raises(SystemExit) as info:
            main(["train", "--nope"])
        assert info.value.code == 1

    def test_run_exit_code_on_failure(self, tmp_path, monkeypatch):
        def broken(cfg, cell, out):
            raise RuntimeError("no model")

        monkeypatch.setattr(runner_module, "train_or_load", broken)
        path = self.write(tmp_path, tiny(tmp_path, **{"n_train: [20, 40]": "n_train: [20]", "seeds: [0, 1]": "seeds: [0]"}))
        assert main(["run", path]) == 2

    def test_toy(self, capsys):
        assert main(["toy", "--point-mass", "0.5", "0.5"]) == 0
        assert json.loads(capsys.readouterr().out)["valid"] is False

    def test_generate_train_attack_project(self, tmp_path, capsys):
        data, model = tmp_path / "data", tmp_path / "m.rbt"
        assert main(["generate", "--out", str(data), "--train-per-class", "5", "--test-per-class", "2", "--fonts", "2"]) == 0
        assert main(["train", "--data", str(data), "--out", str(model), "--epochs", "1", "--batch-size", "10", "--metrics", str(tmp_path / "m.csv")]) == 0
        common = ["--model", str(model), "--data", str(data), "--iterations", "3", "--restarts", "1", "--samples", "10"]
        assert main(["attack", *common, "--out", str(tmp_path / "a.csv")]) == 0
        with open(tmp_path / "a.csv") as fh:
            assert len(list(csv.DictReader(fh))) == 10
        code = main(["project", *common, "--method", "knn_test_centered", "--k", "5", "--out", str(tmp_path / "h.csv")])
        assert code in (0, 2)  # 2 only when no attack succeeded
        assert main(["attack", "--model", str(tmp_path / "none.rbt"), "--data", str(data), "--out", str(tmp_path / "x.csv")]) == 1

    def test_env_output_dir(self, tmp_path, monkeypatch):
        monkeypatch.setenv("ROBUSTLAB_OUTPUT_DIR", str(tmp_path / "env_out"))
        text = tiny(tmp_path, **{"n_train: [20, 40]": "n_train: [20]", "seeds: [0, 1]": "seeds: [0]"})
        assert main(["run", self.write(tmp_path, text)]) == 0
        assert (tmp_path / "env_out" / "manifest.json").is_file()
        assert main(["run", self.write(tmp_path, text), "--output-dir", str(tmp_path / "flag_out")]) == 0
        assert filecmp.cmp(tmp_path / "env_out" / "curves" / "test_error_vs_n.csv", tmp_path / "flag_out" / "curves" / "test_error_vs_n.csv", shallow=False)
