"""Command-line entry point: ``lipshift {train,certify,attack,inspect,sweep}``.

Exit codes: 0 success, 1 runtime failure, 2 configuration or format error.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from .attack import attack_dataset, write_attack_report
from .certify import evaluate, write_certificates
from .config import build_run_config, parse_file, parse_value
from .exceptions import ConfigError, ContractError, DimensionError, FormatError
from .model import build_model, lipschitz_report, load_checkpoint
from .train import TARGET_EPS, train

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2
SWEEP_PARAMS = {
    "p_drop": "arch.p_drop",
    "lr": "train.lr",
    "batch_size": "train.batch_size",
    "stage_depths": "arch.stage_depths",
}
SUMMARY_HEADER = ["param", "value", "epochs", "final_loss", "clean_acc", "vra", "backbone_bound", "scaled_bound", "out_dir"]


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--eps", type=float, help="l2 radius (default 36/255)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--paper-drop-scaling", action="store_true", help="certify with (1 - p_drop) * bound")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lipshift", description="Lipschitz-certified shift networks")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write log, checkpoints and bound report")
    _common(p)
    p.add_argument("--no-resume", action="store_true", help="ignore an existing last checkpoint")

    for name, helptext in (("certify", "certify a dataset and write certificates.csv"),
                           ("attack", "run l2 PGD and write attack.csv")):
        p = sub.add_parser(name, help=helptext)
        _common(p)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--data", help="dataset file (overrides dataset.path / dataset.test_path)")
        p.add_argument("--format", choices=["cifar10", "cifar100", "raw"], default=None)
        if name == "attack":
            p.add_argument("--steps", type=int)
            p.add_argument("--restarts", type=int)

    p = sub.add_parser("inspect", help="print per-layer Lipschitz bounds of a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("sweep", help="train once per value of one hyperparameter")
    _common(p)
    p.add_argument("--param", required=True)
    p.add_argument("--values", nargs="+", required=True)
    p.add_argument("--parallel", type=int, default=1, help="number of concurrent runs (default serial)")
    return parser


def _flat_config(args) -> dict:
    flat = parse_file(args.config) if args.config else {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set: expected KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        flat[k.strip()] = parse_value(v)
    if args.seed is not None:
        flat["seed"] = args.seed
        flat["train.seed"] = args.seed
        flat["attack.seed"] = args.seed
    if args.out is not None:
        flat["out"] = args.out
    if args.eps is not None:
        flat["train.target_eps"] = args.eps
        flat["attack.eps"] = args.eps
        if "attack.step_size" not in flat:
            flat["attack.step_size"] = None
    if args.epochs is not None:
        flat["train.epochs"] = args.epochs
    if args.paper_drop_scaling:
        flat["train.paper_drop_scaling"] = True
    if getattr(args, "steps", None) is not None:
        flat["attack.steps"] = args.steps
        flat.setdefault("attack.step_size", None)
    if getattr(args, "restarts", None) is not None:
        flat["attack.restarts"] = args.restarts
    if getattr(args, "data", None):
        flat["dataset.test_path"] = args.data
        flat["dataset.path"] = args.data
        flat["dataset.format"] = args.format or flat.get("dataset.format", "raw")
        if flat["dataset.format"] == "synthetic":
            flat["dataset.format"] = "raw"
    return flat


def _apply_threads():
    raw = os.environ.get("LIPSHIFT_THREADS")
    if not raw:
        return nullcontext()
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        raise ConfigError(f"LIPSHIFT_THREADS: expected a positive integer, got {raw!r}") from None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def _run_training(flat: dict, resume: bool = True, verbose: bool = True) -> dict:
    cfg = build_run_config(flat)
    train_ds, test_ds = cfg.dataset.load(cfg.arch.input_shape, cfg.arch.num_classes)
    model = build_model(cfg.arch, cfg.seed)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    from .config import to_text

    (out / "config.cfg").write_text(to_text(cfg))
    result = train(model, train_ds, cfg.train, eval_dataset=test_ds, out_dir=out, resume=resume, verbose=verbose)
    last = result.log[-1] if result.log else {}
    return {
        "epochs": cfg.train.epochs,
        "final_loss": last.get("loss", ""),
        "clean_acc": last.get("clean_acc", ""),
        "vra": last.get("vra", ""),
        "backbone_bound": result.report.backbone_bound,
        "scaled_bound": result.report.scaled_bound,
        "out_dir": str(out),
    }


def cmd_train(args) -> int:
    flat = _flat_config(args)
    build_run_config(flat)  # validate before any compute
    summary = _run_training(flat, resume=not args.no_resume)
    print(f"final checkpoint: {Path(summary['out_dir']) / 'checkpoints' / 'final.lsft'}")
    print(f"backbone_bound={summary['backbone_bound']:.6g} scaled_bound={summary['scaled_bound']:.6g}")
    return EXIT_OK


def _load_for_eval(args):
    model, _, _ = load_checkpoint(args.checkpoint)
    flat = _flat_config(args)
    flat.setdefault("arch.num_classes", model.cfg.num_classes)
    if flat.get("dataset.format", "synthetic") == "synthetic":
        flat.setdefault("dataset.classes", model.cfg.num_classes)
    cfg = build_run_config(flat)
    ds = cfg.dataset.load_eval(model.cfg.num_classes, model.cfg.input_shape)
    if tuple(ds.shape) != tuple(model.cfg.input_shape):
        raise DimensionError(f"dataset images {ds.shape} do not match checkpoint input {model.cfg.input_shape}")
    if ds.num_classes > model.cfg.num_classes:
        raise DimensionError(f"dataset has {ds.num_classes} classes, checkpoint {model.cfg.num_classes}")
    return model, ds, cfg


def cmd_certify(args) -> int:
    model, ds, cfg = _load_for_eval(args)
    eps = TARGET_EPS if args.eps is None else args.eps
    report = lipschitz_report(model)
    clean, vra_value, certs = evaluate(model, ds, eps, report=report, paper_drop_scaling=cfg.train.paper_drop_scaling)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    out.mkdir(parents=True, exist_ok=True)
    write_certificates(out / "certificates.csv", certs)
    print(f"samples={len(ds)} eps={eps:.6g}")
    print(f"clean_acc={clean:.6f}")
    print(f"vra={vra_value:.6f}")
    print(f"backbone_bound={report.backbone_bound:.6g} scaled_bound={report.scaled_bound:.6g} "
          f"bound_used={'scaled' if cfg.train.paper_drop_scaling else 'unscaled'}")
    print(f"certificates: {out / 'certificates.csv'}")
    return EXIT_OK


def cmd_attack(args) -> int:
    model, ds, cfg = _load_for_eval(args)
    acfg = cfg.attack
    result = attack_dataset(model, ds, acfg)
    report = lipschitz_report(model)
    _, vra_value, certs = evaluate(model, ds, acfg.eps, report=report, paper_drop_scaling=cfg.train.paper_drop_scaling)
    certified = np.array([c.certified for c in certs]) & result.clean_correct
    broken = int((certified & result.success).sum())
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    out.mkdir(parents=True, exist_ok=True)
    write_attack_report(out / "attack.csv", result)
    robust = result.robust_accuracy
    print(f"samples={len(ds)} eps={acfg.eps:.6g} steps={acfg.steps} restarts={acfg.restarts}")
    print(f"clean_acc={result.clean_accuracy:.6f}")
    print(f"empirical_robust_acc={robust:.6f}")
    print(f"vra={vra_value:.6f}")
    print(f"certified_samples_broken={broken}")
    ok = vra_value <= robust <= result.clean_accuracy and broken == 0
    print(f"check vra <= empirical <= clean: {'ok' if ok else 'VIOLATED'}")
    return EXIT_OK if ok else EXIT_RUNTIME


def cmd_inspect(args) -> int:
    model, extra, meta = load_checkpoint(args.checkpoint)
    report = lipschitz_report(model)
    print(f"checkpoint: {args.checkpoint}")
    print(f"parameters: {model.num_parameters()}")
    if "epoch" in meta:
        print(f"epoch: {meta['epoch']}")
    print("per-layer bounds:")
    for name, bound in report.per_layer:
        print(f"  {name:<32} {bound:.6f}")
    print(f"backbone_bound: {report.backbone_bound:.6f}")
    print(f"p_drop: {report.p_drop}")
    print(f"scaled_bound: {report.scaled_bound:.6f}  (= {1 - report.p_drop:.6g} x backbone)")
    if report.flagged:
        print(f"not converged: {', '.join(report.flagged)}")
    print("loosest layers:")
    for name, bound in report.loosest(5):
        print(f"  {name:<32} {bound:.6f}")
    return EXIT_OK


def _sweep_one(job):
    flat, verbose = job
    return _run_training(flat, resume=True, verbose=verbose)


def cmd_sweep(args) -> int:
    if args.param not in SWEEP_PARAMS:
        raise ConfigError(f"--param: unknown sweep parameter {args.param!r}; expected one of {sorted(SWEEP_PARAMS)}")
    if args.parallel < 1:
        raise ConfigError("--parallel: must be >= 1")
    base = _flat_config(args)
    root = Path(base.get("out", "runs/sweep"))
    key = SWEEP_PARAMS[args.param]
    jobs = []
    for raw in args.values:
        value = parse_value(raw)
        flat = dict(base)
        flat[key] = value
        flat["out"] = str(root / f"{args.param}={raw}")
        build_run_config(flat)  # every run validated before the first one starts
        jobs.append((raw, flat))
    if args.parallel > 1:
        with ProcessPoolExecutor(max_workers=args.parallel) as ex:
            results = list(ex.map(_sweep_one, [(f, False) for _, f in jobs]))
    else:
        results = [_sweep_one((f, True)) for _, f in jobs]
    root.mkdir(parents=True, exist_ok=True)
    with open(root / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SUMMARY_HEADER)
        for (raw, _), res in zip(jobs, results):
            w.writerow([args.param, raw] + [res[k] for k in SUMMARY_HEADER[2:]])
    print(f"summary: {root / 'summary.csv'}")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "certify": cmd_certify, "attack": cmd_attack, "inspect": cmd_inspect, "sweep": cmd_sweep}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with _apply_threads():
            return COMMANDS[args.command](args)
    except (ConfigError, FormatError, DimensionError, ContractError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime error
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        if os.environ.get("LIPSHIFT_DEBUG"):
            traceback.print_exc()
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
