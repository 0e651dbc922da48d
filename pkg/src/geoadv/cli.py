"""Command-line entry point: ``geoadv <subcommand> ...``.

Exit codes: 0 on success, 1 on usage errors, 2 on runtime errors.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .attack import AttackConfig, AttackResult, REGULARIZERS
from .classifier import TrainConfig, init_model, load, save, train
from .datasets import SHAPES, DatasetSpec, gen_dataset, load_dataset, save_dataset
from .errors import GeoAdvError
from .evaluation import (
    DROP_RATIOS,
    SURROGATE_NOTE,
    Instance,
    format_table,
    resample_robustness,
    run_ablation,
    run_attacks,
    select_instances,
    sweep,
)
from .fileio import atomic_write_text, read_json, read_xyz, write_json, write_xyz
from .geometry import sor_defense

SCHEMA_VERSION = 1


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}")


def _fmt():
    return argparse.ArgumentDefaultsHelpFormatter


def _ratio_list(text: str) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("empty ratio list")
    return vals


def _add_attack_flags(p: argparse.ArgumentParser) -> None:
    d = AttackConfig()
    g = p.add_argument_group("attack configuration")
    g.add_argument("--target", type=int, default=None, help="fixed target class; one random target per cloud when unset")
    g.add_argument("--untargeted", action="store_true", help="push away from the true class instead")
    g.add_argument("--lambda1", type=float, default=d.lambda1, help="Hausdorff weight")
    g.add_argument("--lambda2", type=float, default=d.lambda2, help="curvature weight")
    g.add_argument("--beta-init", type=float, default=d.beta_init, help="initial regulariser weight")
    g.add_argument("--binary-steps", type=int, default=d.binary_search_steps, help="binary search stages")
    g.add_argument("--iters", type=int, default=d.iters_per_step, help="Adam iterations per stage")
    g.add_argument("--lr", type=float, default=d.learning_rate, help="Adam learning rate")
    g.add_argument("--k", type=int, default=d.k, help="neighbourhood size")
    g.add_argument("--itertanjit", action="store_true", help="take gradients at tangent-jittered copies")
    g.add_argument("--sigma", type=float, default=d.sigma, help="tangent jitter scale")
    g.add_argument("--seed", type=int, default=d.seed, help="attack and target-selection seed")
    g.add_argument("--refresh-period", type=int, default=d.refresh_period, help="iterations between kNN refreshes")
    g.add_argument("--regularizer", choices=REGULARIZERS, default=d.regularizer, help="regulariser family")


def _attack_config(args) -> AttackConfig:
    return AttackConfig(
        untargeted=args.untargeted,
        target=args.target,
        lambda1=args.lambda1,
        lambda2=args.lambda2,
        beta_init=args.beta_init,
        binary_search_steps=args.binary_steps,
        iters_per_step=args.iters,
        learning_rate=args.lr,
        k=args.k,
        itertanjit=args.itertanjit,
        sigma=args.sigma,
        seed=args.seed,
        refresh_period=args.refresh_period,
        regularizer=args.regularizer,
    )


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="geoadv", description="Geometry-aware adversarial attacks on point clouds.", formatter_class=_fmt())
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    d = DatasetSpec()
    p = sub.add_parser("gen-data", help="generate the synthetic shape dataset", formatter_class=_fmt())
    p.add_argument("--out", required=True, type=Path, help="output directory")
    p.add_argument("--classes", default=",".join(d.classes), help=f"comma-separated subset of {','.join(SHAPES)}")
    p.add_argument("--train-per-class", type=int, default=d.train_per_class)
    p.add_argument("--test-per-class", type=int, default=d.test_per_class)
    p.add_argument("--n-points", type=int, default=d.n_points)
    p.add_argument("--noise", type=float, default=d.noise, help="uniform coordinate noise bound")
    p.add_argument("--no-rotate", action="store_true", help="disable random rotation about z")
    p.add_argument("--seed", type=int, default=d.seed)

    t = TrainConfig()
    p = sub.add_parser("train", help="train the classifier", formatter_class=_fmt())
    p.add_argument("--data", required=True, type=Path, help="dataset directory from gen-data")
    p.add_argument("--out", required=True, type=Path, help="model file to write")
    p.add_argument("--report", type=Path, default=None, help="training report JSON (default: <out>.json)")
    p.add_argument("--epochs", type=int, default=t.epochs)
    p.add_argument("--batch-size", type=int, default=t.batch_size)
    p.add_argument("--lr", type=float, default=t.learning_rate)
    p.add_argument("--lr-decay", type=float, default=t.lr_decay)
    p.add_argument("--seed", type=int, default=t.seed, help="initialisation and shuffling seed")

    p = sub.add_parser("attack", help="attack test clouds or single XYZ files", formatter_class=_fmt())
    p.add_argument("--model", required=True, type=Path)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--data", type=Path, help="dataset directory; correctly classified test clouds are attacked")
    src.add_argument("--input", type=Path, nargs="+", help="XYZ files to attack (needs --label)")
    p.add_argument("--label", type=int, default=None, help="true class of the --input clouds")
    p.add_argument("--count", type=int, default=10, help="number of test clouds to attack")
    p.add_argument("--out", required=True, type=Path, help="output directory")
    p.add_argument("--workers", type=int, default=1, help="parallel attack processes")
    _add_attack_flags(p)

    p = sub.add_parser("defend", help="apply statistical outlier removal", formatter_class=_fmt())
    p.add_argument("--input", required=True, type=Path, nargs="+")
    p.add_argument("--ratio", required=True, type=float, help="fraction of points to drop")
    p.add_argument("--k-sor", type=int, default=16)
    p.add_argument("--out", required=True, type=Path, help="output directory")

    p = sub.add_parser("eval", help="success under outlier removal and regularity", formatter_class=_fmt())
    p.add_argument("--model", required=True, type=Path)
    p.add_argument("--results", required=True, type=Path, help="results.json from attack")
    p.add_argument("--out", required=True, type=Path, help="report JSON to write")
    p.add_argument("--ratios", type=_ratio_list, default=list(DROP_RATIOS), help="drop ratios")
    p.add_argument("--k-sor", type=int, default=16)
    p.add_argument("--resample-sigma", type=float, default=None, help="also run the tangent re-sampling probe")
    p.add_argument("--trials", type=int, default=5, help="re-sampling trials per cloud")

    p = sub.add_parser("ablate", help="run the regulariser ablation grid", formatter_class=_fmt())
    p.add_argument("--model", required=True, type=Path)
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--out", required=True, type=Path, help="output directory")
    p.add_argument("--ratios", type=_ratio_list, default=list(DROP_RATIOS))
    p.add_argument("--k-sor", type=int, default=16)
    p.add_argument("--workers", type=int, default=1)
    _add_attack_flags(p)
    return parser


# --- results serialisation -------------------------------------------------------


def result_row(rid: str, rel_file: str, r: AttackResult) -> dict:
    """JSON row for one attack; timing is left out so reruns are byte-identical."""
    return {
        "id": rid,
        "file": rel_file,
        "success": bool(r.success),
        "predicted_class": int(r.predicted_class),
        "true_label": None if r.true_label is None else int(r.true_label),
        "target": None if r.target is None else int(r.target),
        "untargeted": bool(r.untargeted),
        "best_beta": r.best_beta,
        "geo_loss_final": float(r.geo_loss_final),
        "regularity": float(r.regularity),
        "stages": r.stages,
        "iterations": len(r.loss_trace),
    }


def load_results(path: Path) -> tuple[dict, list[str], list[AttackResult]]:
    doc = read_json(path)
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise GeoAdvError(f"unsupported results schema {doc.get('schema_version')!r}")
    ids, results = [], []
    for row in doc["results"]:
        adv = read_xyz(path.parent / row["file"])
        results.append(
            AttackResult(
                adv, row["success"], row["predicted_class"], row["best_beta"], row["geo_loss_final"], [],
                row["regularity"], row["true_label"], row["target"], row["untargeted"], row["stages"],
            )
        )
        ids.append(row["id"])
    return doc, ids, results


def _sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _attack_instances(args, model) -> list[Instance]:
    if args.input:
        if args.untargeted and args.label is None:
            raise UsageError("geoadv attack: error: --untargeted with --input needs --label")
        if not args.untargeted and args.target is None:
            raise UsageError("geoadv attack: error: --input needs --target for targeted attacks")
        return [
            Instance(f"input-{i:05d}-{path.stem}", read_xyz(path), args.label, args.target)
            for i, path in enumerate(args.input)
        ]
    ds = load_dataset(args.data)
    ids = [f"test-{i:05d}" for i in range(len(ds.test_labels))]
    insts = select_instances(model, ds.test_points, ds.test_labels, args.count, seed=args.seed,
                             targeted=not args.untargeted, ids=ids)
    if args.target is not None:
        insts = [Instance(x.id, x.points, x.label, args.target) for x in insts if x.label != args.target]
    return insts


# --- subcommands -------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    spec = DatasetSpec(
        classes=tuple(c.strip() for c in args.classes.split(",") if c.strip()),
        train_per_class=args.train_per_class,
        test_per_class=args.test_per_class,
        n_points=args.n_points,
        rotate=not args.no_rotate,
        noise=args.noise,
        seed=args.seed,
    )
    ds = gen_dataset(spec)
    save_dataset(ds, args.out)
    print(f"wrote {len(ds.train_labels)} train and {len(ds.test_labels)} test clouds to {args.out}")
    return 0


def cmd_train(args) -> int:
    ds = load_dataset(args.data)
    cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, learning_rate=args.lr,
                      lr_decay=args.lr_decay, seed=args.seed)
    model, rep = train(init_model(len(ds.class_names), seed=args.seed), ds, cfg)
    save(model, args.out)
    report = {
        "schema_version": SCHEMA_VERSION,
        "config": asdict(cfg),
        "classes": ds.class_names,
        "train_accuracy": rep.train_accuracy,
        "test_accuracy": rep.test_accuracy,
        "epoch_losses": rep.epoch_losses,
    }
    write_json(args.report or args.out.with_name(args.out.name + ".json"), report)
    print(f"test accuracy {rep.test_accuracy:.4f} ({rep.seconds:.1f} s)")
    return 0


def cmd_attack(args) -> int:
    cfg = _attack_config(args)
    model = load(args.model)
    insts = _attack_instances(args, model)
    results = run_attacks(model, insts, cfg, args.workers)
    rows = []
    for inst, r in zip(insts, results):
        rel = f"adv/{inst.id}.xyz"
        write_xyz(r.adversarial, args.out / rel)
        rows.append(result_row(inst.id, rel, r))
    doc = {"schema_version": SCHEMA_VERSION, "config": cfg.to_dict(), "model_sha256": _sha256(args.model), "results": rows}
    write_json(args.out / "results.json", doc)
    ok = sum(r.success for r in results)
    print(f"{ok}/{len(results)} attacks succeeded")
    return 0


def cmd_defend(args) -> int:
    for path in args.input:
        write_xyz(sor_defense(read_xyz(path), args.k_sor, args.ratio), args.out / path.name)
    print(f"filtered {len(args.input)} clouds")
    return 0


def cmd_eval(args) -> int:
    doc, ids, results = load_results(args.results)
    model = load(args.model)
    rep = sweep("results", results, ids, model, args.ratios, args.k_sor, doc["config"]["k"])
    out = {"schema_version": SCHEMA_VERSION, "config": doc["config"], "k_sor": args.k_sor, "report": rep.to_dict()}
    if args.resample_sigma is not None:
        out["resample"] = {
            "note": SURROGATE_NOTE,
            "sigma_test": args.resample_sigma,
            "trials": args.trials,
            "seed": doc["config"]["seed"],
            "rate": resample_robustness(results, model, args.resample_sigma, args.trials,
                                        doc["config"]["seed"], doc["config"]["k"]),
        }
    write_json(args.out, out)
    print(format_table({"results": rep}))
    return 0


def cmd_ablate(args) -> int:
    cfg = _attack_config(args)
    model = load(args.model)
    ds = load_dataset(args.data)
    ids = [f"test-{i:05d}" for i in range(len(ds.test_labels))]
    insts = select_instances(model, ds.test_points, ds.test_labels, args.count, seed=args.seed,
                             targeted=not args.untargeted, ids=ids)
    reports = run_ablation(model, insts, cfg, drop_ratios=args.ratios, k_sor=args.k_sor, workers=args.workers)
    doc = {
        "schema_version": SCHEMA_VERSION,
        "config": cfg.to_dict(),
        "reports": {name: rep.to_dict() for name, rep in reports.items()},
    }
    write_json(args.out / "ablation.json", doc)
    table = format_table(reports)
    atomic_write_text(args.out / "ablation.txt", table + "\n")
    print(table)
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "attack": cmd_attack,
    "defend": cmd_defend,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except (GeoAdvError, OSError, ValueError, KeyError) as exc:
        print(f"geoadv {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
