"""Command-line interface: ``gen``, ``fit``, ``eval`` and ``sample``.

Exit codes: 0 on success, 1 for configuration or data errors, 2 when a fit
fails numerically (the partial report is still written).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from contextlib import nullcontext
from pathlib import Path

from .core import XDError, load_checkpoint, save_checkpoint
from .data import PRESETS, Schema, generate_synthetic, load_csv, sample_model, split, write_csv
from .em import EmConfig, fit_em
from .init import kmeans_init
from .likelihood import mean_log_likelihood
from .sgd import SgdConfig, fit_sgd

log = logging.getLogger("xdeconv")

FIT_DEFAULTS = {
    "method": "minibatch-em",
    "k": 8,
    "epochs": 20,
    "batch_size": 500,
    "step_size": 1e-2,
    "lr": 1e-2,
    "reg_w": 1e-3,
    "init": "kmeans",
    "init_checkpoint": None,
    "kmeans_epochs": 10,
    "halve_step_at": [10],
    "lr_drop_at": [10],
    "seed": 0,
    "threads": 1,
    "val_data": None,
}


class UsageError(Exception):
    pass


def _int_list(text):
    return [int(v) for v in text.split(",") if v.strip()]


def _add_shared(p, data=True):
    if data:
        p.add_argument("--data", help="CSV catalogue")
        p.add_argument("--schema", help="schema JSON (default: schema.json beside --data)")
    p.add_argument("--out", help="output directory or file")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int, help="BLAS threads (default 1)")


def build_parser():
    parser = argparse.ArgumentParser(prog="xdeconv", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic noisy dataset")
    _add_shared(p, data=False)
    p.add_argument("--preset", choices=sorted(PRESETS), default="three-blobs")
    p.add_argument("--truth", help="checkpoint to sample from instead of a preset")
    p.add_argument("--n", type=int, default=20000)
    p.add_argument("--sigma-range", default="0.2,1.0", help="per-axis noise std range")
    p.add_argument("--split", help="train,val,test fractions, e.g. 0.8,0.1,0.1")

    p = sub.add_parser("fit", help="fit a mixture to a catalogue")
    _add_shared(p)
    p.add_argument("--config", help="JSON file of fit settings; flags override it")
    p.add_argument("--method", choices=["batch-em", "minibatch-em", "sgd"])
    p.add_argument("--k", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--step-size", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--reg-w", type=float)
    p.add_argument("--init", choices=["kmeans", "checkpoint"])
    p.add_argument("--init-checkpoint")
    p.add_argument("--kmeans-epochs", type=int)
    p.add_argument("--halve-step-at", type=_int_list, help="comma-separated epochs")
    p.add_argument("--lr-drop-at", type=_int_list, help="comma-separated epochs")
    p.add_argument("--val-data", help="held-out CSV with the same schema")

    p = sub.add_parser("eval", help="mean log-likelihood of a model on a catalogue")
    _add_shared(p)
    p.add_argument("--model", required=True)

    p = sub.add_parser("sample", help="draw samples from a model")
    _add_shared(p, data=False)
    p.add_argument("--model", required=True)
    p.add_argument("--n", type=int, default=100000)
    return parser


def _threads(n):
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        return nullcontext()
    return threadpool_limits(limits=n or 1)


def _schema_path(args_schema, data_path):
    if args_schema:
        return args_schema
    return str(Path(data_path).with_name("schema.json"))


def _load(data_path, schema_path):
    if not data_path:
        raise UsageError("--data is required")
    return load_csv(data_path, Schema.load(_schema_path(schema_path, data_path)))


def resolve_fit_config(args):
    cfg = dict(FIT_DEFAULTS)
    if args.config:
        overrides = json.loads(Path(args.config).read_text())
        unknown = set(overrides) - set(cfg) - {"data", "schema", "out"}
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(overrides)
    for key in FIT_DEFAULTS:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    for key in ("data", "schema", "out"):
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    return cfg


def cmd_gen(args):
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    truth = load_checkpoint(args.truth) if args.truth else PRESETS[args.preset]()
    lo, hi = (float(v) for v in args.sigma_range.split(","))
    data, truth = generate_synthetic(truth, args.n, seed=args.seed or 0, sigma_range=(lo, hi))
    schema = Schema(data.names, {c: True for c in data.names})
    schema.save(out / "schema.json")
    save_checkpoint(truth, out / "truth.json")
    if args.split:
        fractions = [float(v) for v in args.split.split(",")]
        for name, part in zip(("train", "val", "test"), split(data, fractions, args.seed or 0)):
            write_csv(part, out / f"{name}.csv", schema)
    else:
        write_csv(data, out / "data.csv", schema)
    return 0


def _initial_params(cfg, data):
    if cfg["init"] == "checkpoint":
        if not cfg.get("init_checkpoint"):
            raise UsageError("--init checkpoint needs --init-checkpoint")
        params = load_checkpoint(cfg["init_checkpoint"]).check()
        if params.d != data.d_latent:
            raise UsageError("initial checkpoint dimension does not match data")
        return params
    if data.d_latent != data.d_obs:
        raise UsageError("k-means initialisation needs an identity projection")
    return kmeans_init(data.X, cfg["k"], cfg["kmeans_epochs"], cfg["batch_size"], cfg["seed"])


def cmd_fit(args):
    cfg = resolve_fit_config(args)
    if not cfg.get("out"):
        raise UsageError("--out is required")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    data = _load(cfg.get("data"), cfg.get("schema"))
    val = _load(cfg["val_data"], cfg.get("schema")) if cfg["val_data"] else None
    init = _initial_params(cfg, data)
    if cfg["method"] == "sgd":
        fit, fit_cfg = fit_sgd, SgdConfig(
            batch_size=cfg["batch_size"],
            epochs=cfg["epochs"],
            lr=cfg["lr"],
            lr_drop_at=tuple(cfg["lr_drop_at"]),
            reg_w=cfg["reg_w"],
            seed=cfg["seed"],
        )
    else:
        fit, fit_cfg = fit_em, EmConfig(
            mode="batch" if cfg["method"] == "batch-em" else "minibatch",
            batch_size=cfg["batch_size"],
            step_size=cfg["step_size"],
            halve_step_at=tuple(cfg["halve_step_at"]),
            epochs=cfg["epochs"],
            reg_w=cfg["reg_w"],
            seed=cfg["seed"],
        )

    def progress(epoch, params, record):
        log.info("epoch %d: train ll %.6f (%.2fs)", epoch, record.train_ll, record.wall_clock)

    report_path = out / "report.json"
    model_path = out / "model.json"
    try:
        with _threads(cfg["threads"]):
            report = fit(data, init, fit_cfg, callbacks=[progress], val_data=val)
    except XDError as exc:
        report = getattr(exc, "report", None)
        if report is None:
            raise
        report.config = {"resolved": cfg, "fitter": report.config}
        if report.params is not None:
            save_checkpoint(report.params, model_path)
            report.checkpoint = str(model_path)
        report.save(report_path)
        print(f"error: {exc}", file=sys.stderr)
        return 2
    save_checkpoint(report.params, model_path)
    report.checkpoint = str(model_path)
    report.config = {"resolved": cfg, "fitter": report.config}
    report.save(report_path)
    print(f"{report.final_train_ll:.6f}")
    return 0


def cmd_eval(args):
    params = load_checkpoint(args.model)
    data = _load(args.data, args.schema)
    if params.d != data.d_latent:
        raise UsageError(
            f"model dimension {params.d} does not match data dimension {data.d_latent}"
        )
    with _threads(args.threads):
        print(f"{mean_log_likelihood(params, data):.6f}")
    return 0


def cmd_sample(args):
    params = load_checkpoint(args.model).check()
    v = sample_model(params, args.n, seed=args.seed or 0)
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(fh, lineterminator="\n")
        for row in v:
            w.writerow([repr(float(x)) for x in row])
    finally:
        if args.out:
            fh.close()
    return 0


COMMANDS = {"gen": cmd_gen, "fit": cmd_fit, "eval": cmd_eval, "sample": cmd_sample}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(message)s",
    )
    try:
        return COMMANDS[args.command](args)
    except (UsageError, XDError, OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
