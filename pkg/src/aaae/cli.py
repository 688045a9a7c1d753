"""Command-line entry point: ``aaae <command> [options]``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import torch
import yaml

from aaae import config as C
from aaae.boundcheck import verify_bound
from aaae.data import load_dataset, ring_centers
from aaae.errors import AAAEError, ConfigurationError
from aaae.evaluation import TorchExtractor, evaluate, generate_samples
from aaae.latent import attribute_vector, encode_all, interpolate, manipulate
from aaae.trainer import load_model, reconstruct, train
from aaae.viz import interleave_columns, save_grid

COMMANDS = ("train", "sample", "reconstruct", "interpolate", "manipulate", "eval", "verify-bound", "sweep")
FLAG_KEYS = {
    "seed": "train.seed",
    "epochs": "train.epochs",
    "lambda1": "train.hyperparams.lambda1",
    "lambda2": "train.hyperparams.lambda2",
    "k": "train.k",
    "out": "out",
    "extractor": "extractor",
}


def _eval_sections(cfg):
    return ("test_dataset",) if cfg.get("test_dataset") else ("dataset",)


# dataset sections each command reads
DATA_SECTIONS = {
    "train": lambda cfg: ("dataset", "test_dataset"),
    "sweep": lambda cfg: ("dataset", "test_dataset"),
    "sample": lambda cfg: (),
    "verify-bound": lambda cfg: (),
    "reconstruct": _eval_sections,
    "interpolate": _eval_sections,
    "manipulate": _eval_sections,
    "eval": _eval_sections,
}

log = logging.getLogger("aaae")


def _common(p):
    p.add_argument("--config", type=Path, help="YAML run config")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lambda1", type=float)
    p.add_argument("--lambda2", type=float)
    p.add_argument("--k", type=int)
    p.add_argument("--out", type=str)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--extractor", type=str)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aaae", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        _common(p)
        if name == "interpolate":
            p.add_argument("--steps", type=int, default=8)
            p.add_argument("--pairs", type=int, default=4, help="number of image pairs (rows)")
        if name == "manipulate":
            p.add_argument("--strength", type=float, default=1.0)
            p.add_argument("--attribute", type=str)
            p.add_argument("--sweep", type=str, help="comma-separated strengths, one column each")
            p.add_argument("--count", type=int, default=8)
        if name == "sample":
            p.add_argument("--n", type=int, default=64)
        if name == "verify-bound":
            p.add_argument("--family", choices=("categorical", "gaussian"), default="categorical")
            p.add_argument("--trials", type=int, default=10_000)
        if name == "sweep":
            p.add_argument("--param", required=True, help="dotted config key or a flag name, e.g. lambda1")
            p.add_argument("--values", required=True, help="comma-separated values")
            p.add_argument("--workers", type=int, default=1)
    return parser


def effective_config(args) -> dict:
    overrides = {key: getattr(args, flag, None) for flag, key in FLAG_KEYS.items()}
    cfg = C.load_config(args.config, overrides)
    if args.checkpoint is not None:
        cfg["checkpoint"] = str(args.checkpoint)
    C.validate_paths(cfg, DATA_SECTIONS[args.command](cfg))
    return cfg


def _out(cfg) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _model(cfg):
    if not cfg.get("checkpoint"):
        raise ConfigurationError("--checkpoint is required for this command")
    return load_model(cfg["checkpoint"])


def _test_data(cfg):
    sec = cfg.get("test_dataset") or {**cfg["dataset"], "split": "test"}
    return load_dataset(C.dataset_spec(sec))


def _write_json(obj, path: Path):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=float), encoding="utf-8")


def cmd_train(cfg, args) -> dict:
    out = _out(cfg)
    dataset = load_dataset(C.dataset_spec(cfg["dataset"]))
    result = train(C.train_config(cfg), dataset, C.model_spec(cfg), out_dir=out,
                   resume=cfg.get("checkpoint"))
    summary = {
        "epochs_run": result.last.epoch,
        "best_epoch": result.best.best_epoch,
        "best_val_recon": result.best.best_val,
        "stopped_early": result.stopped_early,
        "global_step": result.last.global_step,
    }
    if cfg.get("test_dataset"):
        test = load_dataset(C.dataset_spec(cfg["test_dataset"]))
        summary["test_report"] = _eval_report(cfg, result.best.model, test).to_dict()
    _write_json(summary, out / "summary.json")
    return summary


def _eval_report(cfg, model, test):
    ev = cfg["eval"]
    extractor = TorchExtractor.load(cfg["extractor"]) if cfg.get("extractor") else None
    ring = None
    if cfg["dataset"].get("kind") == "synthetic-ring":
        d = cfg["dataset"]
        ring = (ring_centers(d.get("n_modes", 8), d.get("radius", 2.0)), d.get("sigma", 0.05))
        test_images = None
    else:
        test_images = test.data
    return evaluate(model, test_images, extractor, ev["n_samples"], cfg["train"]["seed"], ring, ev["splits"])


def cmd_eval(cfg, args) -> dict:
    out = _out(cfg)
    model = _model(cfg)
    test = None if cfg["dataset"].get("kind") == "synthetic-ring" else _test_data(cfg)
    report = _eval_report(cfg, model, test)
    (out / "eval.json").write_text(report.to_json(), encoding="utf-8")
    return report.to_dict()


def cmd_sample(cfg, args) -> dict:
    out = _out(cfg)
    model = _model(cfg)
    samples = generate_samples(model, args.n, cfg["train"]["seed"])
    if samples.dim() == 4:
        save_grid(samples, out / "samples.png", ncol=8)
    np.save(out / "samples.npy", samples.numpy())
    return {"n": args.n, "path": str(out / "samples.npy")}


def cmd_reconstruct(cfg, args) -> dict:
    from aaae.evaluation import mse

    out = _out(cfg)
    model = _model(cfg)
    test = _test_data(cfg)
    x = test.data[: cfg["eval"]["grid"] // 2]
    x_rec = reconstruct(model, x)
    save_grid(interleave_columns(x, x_rec), out / "reconstructions.png", ncol=8)
    full = reconstruct(model, test.data)
    return {"mse": mse(test.data, full), "n": len(test)}


def cmd_interpolate(cfg, args) -> dict:
    out = _out(cfg)
    model = _model(cfg)
    test = _test_data(cfg)
    if len(test) < 2 * args.pairs:
        raise ConfigurationError("not enough test images for the requested pairs")
    rows = []
    for i in range(args.pairs):
        x, y = test.data[2 * i], test.data[2 * i + 1]
        strip = interpolate(model, x, y, args.steps)
        rows.append(torch.cat([x[None], strip, y[None]]))
    save_grid(torch.cat(rows), out / "interpolation.png", ncol=args.steps + 2)
    return {"pairs": args.pairs, "steps": args.steps}


def cmd_manipulate(cfg, args) -> dict:
    out = _out(cfg)
    model = _model(cfg)
    test = _test_data(cfg)
    if test.attributes is None and test.labels is None:
        raise ConfigurationError("manipulate needs attribute annotations or labels")
    if test.attributes is not None:
        name = args.attribute or test.attributes.names[0]
        labels = test.attributes.column(name)
    else:
        name = args.attribute or "1"
        labels = (test.labels == int(name)).astype(int)
    attr = attribute_vector(encode_all(model, test.data), labels, name)
    strengths = [float(s) for s in args.sweep.split(",")] if args.sweep else [args.strength]
    x = test.data[: args.count]
    cols = [x] + [manipulate(model, x, attr, s) for s in strengths]
    tiles = torch.stack(cols, dim=1).reshape(-1, *x.shape[1:])
    save_grid(tiles, out / f"manipulate_{name}.png", ncol=len(cols))
    return {"attribute": name, "strengths": strengths, "n_positive": attr.n_positive,
            "n_negative": attr.n_negative, "direction_norm": float(attr.direction.norm())}


def cmd_verify_bound(cfg, args) -> dict:
    report = verify_bound(args.family, args.trials, cfg["train"]["seed"])
    d = report.to_dict()
    if args.out:
        _write_json(d, _out(cfg) / f"bound_{args.family}.json")
    if not report.ok:
        raise AAAEError(f"bound violated on {report.violations + report.mc_violations} instances")
    return d


def _sweep_one(cfg):
    out = _out(cfg)
    C.write_run_files(cfg, out, "sweep-run")
    dataset = load_dataset(C.dataset_spec(cfg["dataset"]))
    result = train(C.train_config(cfg), dataset, C.model_spec(cfg), out_dir=out)
    test = _test_data(cfg)
    report = _eval_report(cfg, result.best.model, test)
    (out / "eval.json").write_text(report.to_json(), encoding="utf-8")
    return report.to_dict()


def cmd_sweep(cfg, args) -> dict:
    out = _out(cfg)
    key = FLAG_KEYS.get(args.param, args.param)
    try:
        C.get_path(cfg, key)
    except (KeyError, TypeError):
        raise ConfigurationError(f"unknown sweep parameter {args.param!r}") from None
    values = [yaml_scalar(v) for v in args.values.split(",")]
    runs = []
    for v in values:
        sub = C.deep_merge(cfg, {})
        C.set_path(sub, key, v)
        sub["out"] = str(out / f"{args.param}={v}")
        runs.append(sub)
    if args.workers > 1:
        with ProcessPoolExecutor(args.workers) as pool:
            reports = list(pool.map(_sweep_one, runs))
    else:
        reports = [_sweep_one(r) for r in runs]
    table = [{args.param: v, "mse": r.get("mse"), "fid": r.get("fid"), "icp": r.get("icp")}
             for v, r in zip(values, reports)]
    with open(out / "sweep.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(table[0]))
        w.writeheader()
        w.writerows(table)
    _write_json(table, out / "sweep.json")
    return {"runs": table}


def yaml_scalar(text: str):
    return yaml.safe_load(text)


HANDLERS = {
    "train": cmd_train,
    "sample": cmd_sample,
    "reconstruct": cmd_reconstruct,
    "interpolate": cmd_interpolate,
    "manipulate": cmd_manipulate,
    "eval": cmd_eval,
    "verify-bound": cmd_verify_bound,
    "sweep": cmd_sweep,
}


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = effective_config(args)
        if args.command != "verify-bound" or args.out:
            C.write_run_files(cfg, _out(cfg), args.command)
        result = HANDLERS[args.command](cfg, args)
    except (AAAEError, OSError) as exc:
        record = {"error": type(exc).__name__, "message": str(exc), "command": args.command}
        print(json.dumps(record), file=sys.stderr)
        return 1
    print(json.dumps(result, indent=2, sort_keys=True, default=float))
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
