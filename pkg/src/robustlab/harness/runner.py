"""Grid execution: datasets, cached training, attack suites, projections and curves."""

from __future__ import annotations

import functools
import hashlib
import json
import shutil
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .. import __version__
from ..attacks import AttackConfig
from ..autodiff import build_architecture
from ..autodiff.serialize import load_classifier, save_classifier
from ..defenses import AttackSpec, TrainingMode, TrainingSchedule, evaluate, run_attack, train, write_metrics
from ..fonts import builtin_prototypes, load_prototypes, make_splits
from ..manifold import (
    ClassManifolds,
    ManifoldModel,
    ManifoldTrainingConfig,
    TrueManifold,
    distance_histogram,
    project_knn,
    project_with_restarts,
    train_class_manifolds,
    train_manifold,
)
from .config import ExperimentConfig, ModeSpec
from .curves import emit_curves

PACKAGE_ROOT = Path(__file__).resolve().parents[1]


@functools.lru_cache(maxsize=None)
def code_version() -> str:
    """Package version plus a digest of every source file."""
    h = hashlib.sha256()
    for path in sorted(PACKAGE_ROOT.rglob("*.py")):
        h.update(path.relative_to(PACKAGE_ROOT).as_posix().encode())
        h.update(b"\0")
        h.update(path.read_bytes())
    return f"{__version__}+{h.hexdigest()[:16]}"


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


@dataclass(frozen=True)
class Cell:
    mode: ModeSpec
    n: int
    seed: int

    @property
    def cell_id(self) -> str:
        return f"{self.mode.label}-N{self.n}-s{self.seed}"


def grid(cfg: ExperimentConfig) -> list[Cell]:
    return [Cell(m, n, s) for m in cfg.modes for n in cfg.sweep.n_train for s in cfg.sweep.seeds]


# resources -------------------------------------------------------------------------------

_DATASETS: dict = {}
_MANIFOLDS: dict = {}


def dataset_key(cfg: ExperimentConfig) -> str:
    return _digest({"dataset": asdict(cfg.dataset), "master_seed": cfg.master_seed, "code": code_version()})


def load_dataset(cfg: ExperimentConfig):
    """Train and test splits for the config (memoised per process)."""
    key = dataset_key(cfg)
    if key not in _DATASETS:
        ds = cfg.dataset
        if ds.kind == "directory":
            protos = load_prototypes(ds.prototypes_dir, ds.image_size)
        else:
            protos = builtin_prototypes(ds.image_size, ds.fonts)
        _DATASETS[key] = make_splits(protos, ds.train_per_class, ds.test_per_class, seed=cfg.master_seed)
    return _DATASETS[key]


def manifold_key(cfg: ExperimentConfig) -> str:
    return _digest({"dataset": dataset_key(cfg), "manifold": asdict(cfg.manifold)})


def load_manifold(cfg: ExperimentConfig, out: Path):
    """``"true"`` or a learned manifold trained once on the full training set and cached."""
    if cfg.manifold is None or cfg.manifold.kind == "true":
        return "true"
    key = manifold_key(cfg)
    if key in _MANIFOLDS:
        return _MANIFOLDS[key]
    folder = out / "manifolds" / key[:24]
    train_set, _ = load_dataset(cfg)
    spec = cfg.manifold
    classes = sorted(set(train_set.labels.tolist()))
    names = [f"class_{c}.rbt" for c in classes] if spec.scope == "class-specific" else ["all.rbt"]
    if all((folder / n).is_file() for n in names):
        models = [ManifoldModel.load(folder / n) for n in names]
    else:
        mcfg = ManifoldTrainingConfig(
            latent_dim=spec.latent_dim,
            lambda_recon=spec.lambda_recon,
            adversarial_weight=spec.adversarial_weight,
            epochs=spec.epochs,
            seed=cfg.master_seed,
        )
        if spec.scope == "class-specific":
            models = list(train_class_manifolds(train_set.images, train_set.labels, mcfg).models.values())
        else:
            models = [train_manifold(train_set.images, "class-agnostic", mcfg)]
        folder.mkdir(parents=True, exist_ok=True)
        for model, name in zip(models, names):
            model.save(folder / name)
    result = ClassManifolds(dict(zip(classes, models))) if spec.scope == "class-specific" else models[0]
    _MANIFOLDS[key] = result
    return result


# one grid cell --------------------------------------------------------------------------


def cell_key(cfg: ExperimentConfig, cell: Cell) -> str:
    """Content hash of everything that determines a trained model."""
    needs_manifold = TrainingMode(cell.mode.kind).needs_manifold
    return _digest(
        {
            "dataset": dataset_key(cfg),
            "architecture": cfg.architecture,
            "training": asdict(cfg.training),
            "mode": asdict(cell.mode),
            "n": cell.n,
            "seed": cell.seed,
            "manifold": asdict(cfg.manifold) if needs_manifold and cfg.manifold else None,
            "code": code_version(),
        }
    )


def training_mode(spec: ModeSpec) -> TrainingMode:
    attack = None
    if spec.kind != "normal" and (spec.norm is not None or spec.epsilon is not None):
        from ..defenses.training import DEFAULT_BUDGETS

        norm, eps = DEFAULT_BUDGETS["adv_half" if spec.kind == "mixed" else spec.kind]
        attack = AttackConfig(norm=spec.norm or norm, epsilon=spec.epsilon if spec.epsilon is not None else eps)
    manifold_attack = AttackConfig(norm="latent-linf", epsilon=spec.manifold_epsilon)
    return TrainingMode(spec.kind, attack, spec.fraction, manifold_attack, spec.mix_ratio)


def attack_specs(cfg: ExperimentConfig, seed) -> list[AttackSpec]:
    return [
        AttackSpec(
            a.name,
            a.kind,
            AttackConfig(
                norm=a.norm,
                epsilon=a.epsilon,
                iterations=a.iterations,
                learning_rate=a.learning_rate,
                restarts=a.restarts,
                early_stop=a.early_stop,
                seed=seed,
            ),
            a.samples,
        )
        for a in cfg.attacks
    ]


def train_or_load(cfg: ExperimentConfig, cell: Cell, out: Path):
    """Return (model, cached, model_path, metrics_path)."""
    key = cell_key(cfg, cell)
    model_path = out / "models" / f"{key[:24]}.rbt"
    metrics_path = out / "models" / f"{key[:24]}.metrics.csv"
    if model_path.is_file() and metrics_path.is_file():
        return load_classifier(model_path), True, model_path, metrics_path
    train_set, test_set = load_dataset(cfg)
    manifold = load_manifold(cfg, out)
    model = build_architecture(cfg.architecture, train_set.images.shape[1:], train_set.num_classes, seed=cell.seed)
    t = cfg.training
    schedule = TrainingSchedule(t.epochs, t.batch_size, t.learning_rate, t.decay, t.weight_decay, seed=cell.seed, n_train=cell.n)
    run = train(model, train_set, training_mode(cell.mode), schedule, manifold=manifold, test_set=test_set)
    model_path.parent.mkdir(parents=True, exist_ok=True)
    tmp = model_path.with_suffix(".tmp")
    save_classifier(tmp, model)
    write_metrics(run.metrics, metrics_path)
    tmp.replace(model_path)
    return model, False, model_path, metrics_path


def decoder_distances(batch, test_set, rows, restarts: int = 2, seed=0, iterations: int = 100):
    """Distance of each adversarial image to the true manifold of its own prototype."""
    man = TrueManifold.for_dataset(test_set, batch.indices[rows])
    return project_with_restarts(
        batch.adversarial[rows], man, man.lower, man.upper, init=man.poses, restarts=restarts, seed=seed, iterations=iterations
    )


def _projection(cfg, cell, out_cell, batches, train_set, test_set) -> dict:
    """Decoder and k-NN distance histograms for the chosen attacks; returns summary stats."""
    pr = cfg.projection
    stats = {}
    per_attack = {}
    for role, name in (("regular", pr.regular_attack), ("on_manifold", pr.manifold_attack)):
        if name is None:
            continue
        batch = batches[name]
        hits = np.flatnonzero(batch.success & (batch.predicted_before == batch.labels))[: pr.samples]
        if len(hits) == 0:
            continue
        dec = decoder_distances(batch, test_set, hits, seed=[cfg.master_seed, cell.seed])
        delta = batch.image_perturbation[hits].reshape(len(hits), -1)
        delta_norm = np.sqrt((delta * delta).sum(axis=1))
        clean = test_set.images[batch.indices[hits]]
        pool = train_set.images[: cell.n]
        k = min(pr.knn, len(pool))
        results = {"decoder": dec.distance}
        for anchor in ("test_image", "neighbor_mean"):
            res = project_knn(batch.adversarial[hits], clean, pool, k=k, anchor=anchor)
            results[res.method] = res.distance
        per_attack[name] = results
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = dec.distance / delta_norm
        stats[name] = {
            "role": role,
            "projected": int(len(hits)),
            "median_decoder_distance": float(np.median(dec.distance)),
            "median_distance_ratio": float(np.nanmedian(ratio)) if np.isfinite(ratio).any() else None,
        }
    if not per_attack:
        return stats
    top = max(float(np.max(d)) for r in per_attack.values() for d in r.values())
    hist_range = (0.0, top if top > 0 else 1.0)
    for name, results in per_attack.items():
        for method, dist in results.items():
            hist = distance_histogram(dist, bins=pr.bins, range=hist_range)
            hist.to_csv(out_cell / f"hist_{name}_{method}.csv")
    return stats


def run_cell(cfg: ExperimentConfig, cell: Cell, out: Path) -> dict:
    """Train (or load) one model, attack it and write the cell's files."""
    record = {"cell": cell.cell_id, "mode": cell.mode.label, "N": cell.n, "seed": cell.seed, "key": cell_key(cfg, cell)}
    try:
        model, cached, model_path, metrics_path = train_or_load(cfg, cell, out)
        train_set, test_set = load_dataset(cfg)
        manifold = load_manifold(cfg, out)
        out_cell = out / "cells" / cell.cell_id
        if out_cell.exists():
            shutil.rmtree(out_cell)
        out_cell.mkdir(parents=True)
        shutil.copyfile(metrics_path, out_cell / "metrics.csv")
        record.update(
            status="ok",
            cached=cached,
            model=model_path.relative_to(out).as_posix(),
            test_error=evaluate(model, test_set.images, test_set.labels),
            attacks={},
        )
        batches = {}
        for spec in attack_specs(cfg, [cfg.master_seed, cell.seed]):
            n = min(spec.samples, len(test_set))
            index = np.arange(n)
            batch = run_attack(spec, model, test_set.images[:n], test_set.labels[:n], index, manifold, test_set)
            csv_path = out_cell / f"attack_{spec.name}.csv"
            batch.to_csv(csv_path)
            eligible = batch.predicted_before == batch.labels
            hits = batch.success & eligible
            record["attacks"][spec.name] = {
                "success_rate": float(hits.sum() / eligible.sum()) if eligible.any() else None,
                "eligible": int(eligible.sum()),
                "attacked": n,
                "mean_norm_success": float(batch.perturbation_norm[hits].mean()) if hits.any() else None,
                "csv": csv_path.relative_to(out).as_posix(),
            }
            batches[spec.name] = batch
        if cfg.projection is not None and cell.mode.label in cfg.projection.modes and cfg.manifold is not None:
            record["projection"] = _projection(cfg, cell, out_cell, batches, train_set, test_set)
        (out_cell / "summary.json").write_text(json.dumps(_stable(record), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except Exception as exc:  # isolate the failure to this cell
        record.update(status="failed", error=f"{type(exc).__name__}: {exc}", traceback=traceback.format_exc())
        err_dir = out / "cells" / cell.cell_id
        err_dir.mkdir(parents=True, exist_ok=True)
        (err_dir / "error.txt").write_text(record["traceback"], encoding="utf-8")
    return record


def _stable(record: dict) -> dict:
    """Drop fields that legitimately differ between a fresh run and a cached one."""
    return {k: v for k, v in record.items() if k not in ("cached", "traceback")}


def _cell_job(args):
    cfg_dict, source, cell, out = args
    from .config import parse_config

    import yaml

    cfg = parse_config(yaml.safe_dump(cfg_dict, sort_keys=False), source)
    return run_cell(cfg, cell, Path(out))


# the whole grid ---------------------------------------------------------------------------


def curve_rows(records: list[dict]) -> dict[str, list[dict]]:
    """Rows for the on-manifold, regular and test-error curves."""
    curves = {"onmanifold_success_vs_test_error": [], "regular_success_vs_test_error": [], "test_error_vs_n": []}
    for r in records:
        if r.get("status") != "ok":
            continue
        base = {
            "mode": r["mode"],
            "N": r["N"],
            "seed": r["seed"],
            "test_error": r["test_error"],
            "source": f"cells/{r['cell']}/summary.json",
        }
        curves["test_error_vs_n"].append({**base, "metric_name": "test_error", "metric_value": r["test_error"]})
        for name, a in r["attacks"].items():
            row = {**base, "metric_name": f"success_rate:{name}", "metric_value": a["success_rate"]}
            key = "onmanifold_success_vs_test_error" if a.get("kind") in ("on_manifold", "random_latent") else "regular_success_vs_test_error"
            curves[key].append(row)
    return curves


def _histogram_curve(out: Path, records: list[dict]) -> Path:
    """Concatenate per-cell histograms into one long-format CSV."""
    path = out / "curves" / "distance_histograms.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["mode,N,seed,attack,method,bin_left,bin_right,mass,source"]
    for r in sorted(records, key=lambda r: r["cell"]):
        if r.get("status") != "ok" or "projection" not in r:
            continue
        for f in sorted((out / "cells" / r["cell"]).glob("hist_*.csv")):
            attack, method = _split_hist_name(f.stem, r["attacks"])
            rel = f.relative_to(out).as_posix()
            for line in f.read_text(encoding="utf-8").splitlines()[1:]:
                lines.append(f"{r['mode']},{r['N']},{r['seed']},{attack},{method},{line},{rel}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def _split_hist_name(stem: str, attacks: dict) -> tuple[str, str]:
    body = stem[len("hist_") :]
    for name in sorted(attacks, key=len, reverse=True):
        if body.startswith(name + "_"):
            return name, body[len(name) + 1 :]
    return body, ""


def run(cfg: ExperimentConfig, workers: int | None = None, output_dir=None, log=print) -> dict:
    """Execute the full grid and write curves plus ``manifest.json``.

    Failing cells are recorded in the manifest and do not stop the run.
    """
    out = Path(output_dir) if output_dir else cfg.resolved_output_dir()
    out.mkdir(parents=True, exist_ok=True)
    workers = cfg.resolved_workers() if workers is None else workers
    cells = grid(cfg)
    kinds = {a.name: a.kind for a in cfg.attacks}
    load_dataset(cfg)  # fail early and warm the cache before forking
    if workers > 1 and len(cells) > 1:
        jobs = [(cfg.to_dict(), cfg.source, c, str(out)) for c in cells]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(_cell_job, jobs))
    else:
        records = [run_cell(cfg, c, out) for c in cells]
    for r in records:
        for name, a in r.get("attacks", {}).items():
            a["kind"] = kinds[name]
        state = r["status"] if r["status"] == "failed" else ("cached" if r["cached"] else "trained")
        log(f"[{state}] {r['cell']}" + (f": {r['error']}" if r["status"] == "failed" else f" test_error={r['test_error']:.4f}"))
    curves = {}
    ok = [r for r in records if r["status"] == "ok"]
    for name, rows in curve_rows(records).items():
        if not rows:
            continue
        kind = "vs_n" if name.endswith("_vs_n") else "vs_test_error"
        path = out / "curves" / f"{name}.csv"
        emit_curves(rows, kind, path, svg=cfg.svg)
        curves[name] = path.relative_to(out).as_posix()
    if any("projection" in r for r in ok):
        curves["distance_histograms"] = _histogram_curve(out, ok).relative_to(out).as_posix()
    manifest = {
        "config": cfg.to_dict(),
        "code_version": code_version(),
        "master_seed": cfg.master_seed,
        "seeds": list(cfg.sweep.seeds),
        "cells": [_stable(r) for r in sorted(records, key=lambda r: r["cell"])],
        "curves": curves,
        "failed": sorted(r["cell"] for r in records if r["status"] == "failed"),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (out / "config.effective.yaml").write_text(cfg.dump(), encoding="utf-8")
    return {"manifest": manifest, "records": records, "output_dir": out}
