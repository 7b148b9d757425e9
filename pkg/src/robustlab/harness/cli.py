"""Command-line entry point: ``robustlab <verb> ...``.

Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure
(for ``run``: at least one grid cell failed).

Environment overrides: ``ROBUSTLAB_OUTPUT_DIR`` replaces the configured
output directory and ``ROBUSTLAB_WORKERS`` the worker count.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


class InputError(ValueError):
    """Bad user input outside the config file (exit code 1)."""


def _dataset_split(path, split: str):
    from ..fonts import SyntheticDataset

    path = Path(path)
    folder = path / split if (path / split / "index.json").is_file() else path
    if not (folder / "index.json").is_file():
        raise InputError(f"no dataset found at {path}")
    return SyntheticDataset.load(folder)


def _attack_config(args):
    from ..attacks import AttackConfig

    return AttackConfig(
        norm=args.norm,
        epsilon=args.epsilon,
        iterations=args.iterations,
        learning_rate=args.learning_rate,
        restarts=args.restarts,
        seed=args.seed,
    )


# verbs ------------------------------------------------------------------------------------


def cmd_generate(args) -> int:
    from ..fonts import builtin_prototypes, load_prototypes, make_splits

    protos = load_prototypes(args.prototypes_dir, args.image_size) if args.prototypes_dir else builtin_prototypes(args.image_size, args.fonts)
    train_set, test_set = make_splits(protos, args.train_per_class, args.test_per_class, seed=args.seed)
    out = Path(args.out)
    train_set.save(out / "train")
    test_set.save(out / "test")
    print(f"wrote {len(train_set)} training and {len(test_set)} test images to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from ..autodiff import build_architecture
    from ..autodiff.serialize import save_classifier
    from ..defenses import TrainingSchedule, train, write_metrics
    from .config import ModeSpec
    from .runner import training_mode

    train_set = _dataset_split(args.data, "train")
    test_set = _dataset_split(args.data, "test") if (Path(args.data) / "test").is_dir() else None
    spec = ModeSpec(kind=args.mode, norm=args.norm, epsilon=args.epsilon, fraction=args.fraction)
    if args.n is not None and not 2 <= args.n <= len(train_set):
        raise InputError(f"--n must lie in [2, {len(train_set)}]")
    model = build_architecture(args.architecture, train_set.images.shape[1:], train_set.num_classes, seed=args.seed)
    schedule = TrainingSchedule(args.epochs, args.batch_size, args.learning_rate, seed=args.seed, n_train=args.n)

    def report(row):
        te = "" if row["test_error"] is None else f" test_error={row['test_error']:.4f}"
        print(f"epoch {row['epoch']}: loss={row['train_loss']:.4f} train_error={row['train_error']:.4f}{te}", flush=True)

    run = train(model, train_set, training_mode(spec), schedule, manifold="true", test_set=test_set, on_epoch=report)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_classifier(args.out, model)
    if args.metrics:
        write_metrics(run.metrics, args.metrics)
    print(f"saved model to {args.out}")
    return EXIT_OK


def _load_model(path):
    from ..autodiff.serialize import load_classifier

    if not Path(path).is_file():
        raise InputError(f"model file {path} not found")
    return load_classifier(path)


def _attack(args):
    from ..defenses import AttackSpec, run_attack

    model = _load_model(args.model)
    test_set = _dataset_split(args.data, "test")
    n = min(args.samples, len(test_set))
    spec = AttackSpec(args.kind, args.kind, _attack_config(args), n)
    index = np.arange(n)
    batch = run_attack(spec, model, test_set.images[:n], test_set.labels[:n], index, "true", test_set)
    return batch, test_set, model


def cmd_attack(args) -> int:
    from ..attacks import attack_success_rate

    batch, _, _ = _attack(args)
    batch.to_csv(args.out)
    rate = attack_success_rate(batch)
    print(f"success rate {'n/a' if rate is None else f'{rate:.4f}'} over {int((batch.predicted_before == batch.labels).sum())} correctly classified inputs; wrote {args.out}")
    return EXIT_OK


def cmd_project(args) -> int:
    from ..manifold import distance_histogram, project_knn
    from .runner import decoder_distances

    batch, test_set, _ = _attack(args)
    hits = np.flatnonzero(batch.success & (batch.predicted_before == batch.labels))
    if len(hits) == 0:
        print("no successful adversarial examples to project")
        return EXIT_RUNTIME
    if args.method == "decoder":
        dist = decoder_distances(batch, test_set, hits, seed=args.seed).distance
    else:
        train_set = _dataset_split(args.data, "train")
        anchor = "test_image" if args.method == "knn_test_centered" else "neighbor_mean"
        clean = test_set.images[batch.indices[hits]]
        dist = project_knn(batch.adversarial[hits], clean, train_set.images, k=args.k, anchor=anchor).distance
    delta = batch.image_perturbation[hits].reshape(len(hits), -1)
    norms = np.sqrt((delta * delta).sum(axis=1))
    distance_histogram(dist, bins=args.bins).to_csv(args.out)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.nanmedian(dist / norms)
    print(f"{len(hits)} projections: median distance {np.median(dist):.4f}, median distance/||delta|| {ratio:.4f}; wrote {args.out}")
    return EXIT_OK


def cmd_toy(args) -> int:
    from ..toy import TsiprasToy, defense_of_definition_report, point_mass_validity

    if args.point_mass is not None:
        eps, x = args.point_mass
        v = point_mass_validity(x, eps, args.label)
        print(json.dumps({"defined": v.defined, "posterior_pos": v.posterior_pos, "posterior_neg": v.posterior_neg, "valid": v.valid}))
        return EXIT_OK
    toy = TsiprasToy(args.p, args.eta, args.dim)
    rows = defense_of_definition_report(toy, args.shifts, args.out)
    for r in rows:
        print(f"x1={r['x1']:+d} label={r['label']:+d} shift={r['shift']:g}: p(y=+1|x)={r['posterior_pos']:.6g} invariant={r['label_invariant']}")
    return EXIT_OK


def cmd_validate(args) -> int:
    from .config import load_config

    cfg = load_config(args.config)
    print(cfg.dump(), end="")
    return EXIT_OK


def cmd_run(args) -> int:
    from .config import load_config
    from .runner import run

    cfg = load_config(args.config)
    result = run(cfg, workers=args.workers, output_dir=args.output_dir)
    failed = result["manifest"]["failed"]
    print(f"{len(result['records'])} cells, {len(failed)} failed; manifest at {result['output_dir'] / 'manifest.json'}")
    return EXIT_RUNTIME if failed else EXIT_OK


# parser -----------------------------------------------------------------------------------


def _add_attack_flags(p, kinds):
    p.add_argument("--model", required=True, help="trained model file")
    p.add_argument("--data", required=True, help="dataset directory (from 'generate')")
    p.add_argument("--kind", default="pgd", choices=kinds)
    p.add_argument("--norm", default="linf", help="linf | l2 | latent-linf | latent-l2 | transform-linf")
    p.add_argument("--epsilon", type=float, default=0.3)
    p.add_argument("--iterations", type=int, default=40)
    p.add_argument("--learning-rate", type=float, default=0.005)
    p.add_argument("--restarts", type=int, default=5)
    p.add_argument("--samples", type=int, default=200, help="first N test inputs")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)


def build_parser() -> argparse.ArgumentParser:
    from ..defenses.profile import ATTACK_KINDS
    from ..defenses.training import KINDS

    parser = _Parser(prog="robustlab", description="On- and off-manifold adversarial robustness experiments.")
    sub = parser.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    p = sub.add_parser("generate", help="render a synthetic train/test dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--train-per-class", type=int, default=400)
    p.add_argument("--test-per-class", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--image-size", type=int, default=28)
    p.add_argument("--fonts", type=int, default=None, help="built-in fonts per class (default: all)")
    p.add_argument("--prototypes-dir", default=None, help="import prototypes from <dir>/<class>/<image>")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train one classifier")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="model file to write")
    p.add_argument("--mode", default="normal", choices=KINDS)
    p.add_argument("--n", type=int, default=None, help="use the first N training examples")
    p.add_argument("--norm", default=None)
    p.add_argument("--epsilon", type=float, default=None)
    p.add_argument("--fraction", type=float, default=None)
    p.add_argument("--architecture", default="conv_small", choices=("conv_small", "mlp"))
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch-size", type=int, default=100)
    p.add_argument("--learning-rate", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--metrics", default=None, help="per-epoch metrics CSV")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("attack", help="attack a trained model, write per-example CSV")
    _add_attack_flags(p, ATTACK_KINDS)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("project", help="distance histogram of adversarial examples to the manifold")
    _add_attack_flags(p, ATTACK_KINDS)
    p.add_argument("--method", default="decoder", choices=("decoder", "knn_test_centered", "knn_mean_centered"))
    p.add_argument("--k", type=int, default=50)
    p.add_argument("--bins", type=int, default=20)
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("toy", help="closed-form label-invariance analysis")
    p.add_argument("--p", type=float, default=0.9)
    p.add_argument("--eta", type=float, default=3.0)
    p.add_argument("--dim", type=int, default=2)
    p.add_argument("--shifts", type=float, nargs="+", default=[0.0, 3.0, 6.0])
    p.add_argument("--point-mass", type=float, nargs=2, metavar=("EPSILON", "X"), default=None)
    p.add_argument("--label", type=int, default=1, choices=(1, -1))
    p.add_argument("--out", default=None, help="report CSV")
    p.set_defaults(func=cmd_toy)

    p = sub.add_parser("validate", help="check a config and print it with defaults expanded")
    p.add_argument("config")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("run", help="execute an experiment grid")
    p.add_argument("config")
    p.add_argument("--workers", type=int, default=None, help="overrides ROBUSTLAB_WORKERS and the config")
    p.add_argument("--output-dir", default=None, help="overrides ROBUSTLAB_OUTPUT_DIR and the config")
    p.set_defaults(func=cmd_run)
    return parser


def main(argv=None) -> int:
    from .config import ConfigError

    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        for line in exc.diagnostics:
            print(line, file=sys.stderr)
        return EXIT_INVALID
    except (InputError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
