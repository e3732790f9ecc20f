"""Command-line interface.

Every subcommand accepts `--config file.toml` whose keys provide defaults;
explicit flags win. Exit codes: 0 success, 2 configuration error, 3 runtime
failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

try:
    import tomllib  # py311+
except ModuleNotFoundError:
    import tomli as tomllib

from . import harness as hs
from . import train as tr
from . import tune as tn
from .grid import SynthConfig, load_dataset, save_dataset, synth_generate
from .losses import HyperParams
from .networks import load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


def _load_config(path):
    if path is None:
        return {}
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except (OSError, tomllib.TOMLDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}")


def _merged(args, key, default):
    """flag > config file > default"""
    flag = getattr(args, key.replace("-", "_"), None)
    if flag is not None:
        return flag
    return args._config.get(key, default)


def _parse_grid(text):
    """'a:b:n' linspace or comma-separated values."""
    if ":" in text:
        a, b, n = text.split(":")
        return [round(float(v), 6) for v in
                np.linspace(float(a), float(b), int(n))]
    return [float(v) for v in text.split(",")]


def build_parser():
    p = argparse.ArgumentParser(prog="hyperreg",
                                description="amortized-hyperparameter "
                                            "registration toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", default=None, help="TOML defaults file")
        sp.add_argument("--seed", type=int, default=None)

    sp = sub.add_parser("synth", help="generate a synthetic dataset")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--size", type=int, default=None)
    sp.add_argument("--pairs", type=int, default=None)
    sp.add_argument("--warp-mag", type=float, default=None)
    sp.add_argument("--within-subject-frac", type=float, default=None)
    sp.add_argument("--cross-modality-frac", type=float, default=None)

    for name in ("train", "train-baseline"):
        sp = sub.add_parser(name, help=f"{name} a model")
        common(sp)
        sp.add_argument("--data", required=True)
        sp.add_argument("--out", required=True, help="checkpoint path")
        sp.add_argument("--steps", type=int, default=None)
        sp.add_argument("--batch", type=int, default=None)
        sp.add_argument("--lr", type=float, default=None)
        sp.add_argument("--metric", default=None,
                        choices=(None, "mse", "ncc", "nmi"))
        sp.add_argument("--semi-supervised", action="store_true", default=None)
        sp.add_argument("--label-subset", default=None,
                        help="comma-separated training labels")
        sp.add_argument("--preset", default=None, choices=(None, *hs.REG_PRESETS))
        sp.add_argument("--curves", default=None, help="loss-curve CSV path")
        if name == "train":
            sp.add_argument("--active", default=None,
                            help="comma list, e.g. lam,gamma")
        else:
            sp.add_argument("--lam", type=float, default=None)
            sp.add_argument("--gamma", type=float, default=None)

    sp = sub.add_parser("sweep", help="evaluate a hyperparameter grid")
    common(sp)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--split", default="val")
    sp.add_argument("--grid", default="0.02:0.98:25",
                    help="'a:b:n' or comma list of lambda values")
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("tune", help="automatic hyperparameter tuning")
    common(sp)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--split", default="val")
    sp.add_argument("--pairs", type=int, default=None, help="limit pair count")
    sp.add_argument("--scope", default=None,
                    choices=(None, "subpopulation", "task", "label"))

    sp = sub.add_parser("eval", help="evaluate a checkpoint")
    common(sp)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--split", default="test")
    sp.add_argument("--lam", type=float, default=None)
    sp.add_argument("--gamma", type=float, default=None)

    sp = sub.add_parser("exp", help="run a full experiment")
    sp.add_argument("experiment", choices=("e1", "e1-2hp", "e2", "e3"))
    common(sp)
    sp.add_argument("--steps", type=int, default=None)
    sp.add_argument("--size", type=int, default=None)
    sp.add_argument("--pairs", type=int, default=None)
    sp.add_argument("--seeds", default=None, help="comma-separated seeds")
    sp.add_argument("--metrics", default=None, help="comma list of metrics")
    sp.add_argument("--preset", default=None, choices=(None, *hs.REG_PRESETS))
    sp.add_argument("--out", default=None)

    sp = sub.add_parser("serve", help="start the interactive HTTP server")
    common(sp)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--split", default="val")
    sp.add_argument("--host", default="127.0.0.1")
    sp.add_argument("--port", type=int, default=8000)
    return p


def _synth_config(args):
    return SynthConfig(
        size=_merged(args, "size", 64),
        n_pairs=_merged(args, "pairs", 40),
        warp_mag=_merged(args, "warp-mag", 7.0),
        within_subject_frac=_merged(args, "within-subject-frac", 0.0),
        cross_modality_frac=_merged(args, "cross-modality-frac", 0.0))


def _train_config(args):
    subset = _merged(args, "label-subset", None)
    if isinstance(subset, str):
        subset = tuple(int(v) for v in subset.split(","))
    return tr.TrainConfig(
        steps=_merged(args, "steps", 2000),
        batch_size=_merged(args, "batch", 4),
        learning_rate=_merged(args, "lr", 1e-4),
        metric=_merged(args, "metric", "mse"),
        semi_supervised=bool(_merged(args, "semi-supervised", False)),
        label_subset=subset or (),
        seed=_merged(args, "seed", 0),
        reg_config=hs.REG_PRESETS[_merged(args, "preset", "desk")])


def cmd_synth(args):
    ds = synth_generate(_synth_config(args), _merged(args, "seed", 0))
    save_dataset(ds, args.out)
    print(json.dumps({"out": args.out, "pairs": len(ds.records),
                      "seed": ds.seed}))
    return 0


def cmd_train(args, baseline):
    data = load_dataset(args.data)
    cfg = _train_config(args)
    if baseline:
        hp = HyperParams(lam=_merged(args, "lam", 0.5),
                         gamma=_merged(args, "gamma", 0.0),
                         active=("lam", "gamma") if cfg.semi_supervised
                         else ("lam",))
        ckpt, rows = tr.train_baseline(data, cfg, hp)
    else:
        active = _merged(args, "active", None)
        if active is None:
            active = ("lam", "gamma") if cfg.semi_supervised else ("lam",)
        elif isinstance(active, str):
            active = tuple(active.split(","))
        ckpt, rows = tr.train_hypermorph(data, cfg, tr.HyperPrior(active=active))
    save_checkpoint(ckpt, args.out)
    curves = _merged(args, "curves", None)
    if curves:
        tr.write_curve(rows, curves)
    print(json.dumps({"ckpt": args.out, "steps": cfg.steps,
                      "final_loss": rows[-1]["total"]}))
    return 0


def cmd_sweep(args):
    ckpt = load_checkpoint(args.ckpt)
    data = load_dataset(args.data)
    pairs = data.subset(args.split)
    rows = tn.sweep_eval(ckpt, pairs, [{"lam": l}
                                       for l in _parse_grid(args.grid)])
    tn.write_sweep(rows, args.out)
    print(json.dumps({"out": args.out, "points": len(rows)}))
    return 0


def cmd_tune(args):
    ckpt = load_checkpoint(args.ckpt)
    data = load_dataset(args.data)
    cfg = tn.TuneConfig(seed=_merged(args, "seed", 0))
    if args.scope:
        results = tn.tune_scoped(ckpt, data, args.scope, cfg, split=args.split)
        print(json.dumps([json.loads(r.to_json()) for r in results]))
        return 0
    pairs = data.subset(args.split)
    if args.pairs:
        pairs = pairs[:args.pairs]
    res = tn.tune_auto(ckpt, pairs, cfg)
    print(res.to_json())
    return 0


def cmd_eval(args):
    ckpt = load_checkpoint(args.ckpt)
    data = load_dataset(args.data)
    hp = ckpt.hyperparams(
        **{k: v for k, v in (("lam", args.lam), ("gamma", args.gamma))
           if v is not None})
    summary = hs.evaluate(ckpt, data.subset(args.split), hp)
    out = asdict(summary)
    out.pop("dice")  # keep stdout compact; aggregates carry the signal
    print(json.dumps(out, sort_keys=True))
    return 0


def cmd_exp(args):
    seeds = _merged(args, "seeds", None)
    if isinstance(seeds, str):
        seeds = tuple(int(s) for s in seeds.split(","))
    metrics = _merged(args, "metrics", None)
    if isinstance(metrics, str):
        metrics = tuple(metrics.split(","))
    kw = dict(experiment=args.experiment,
              steps=_merged(args, "steps", 1200),
              size=_merged(args, "size", 64),
              seeds=seeds or ((0, 1, 2, 3) if args.experiment == "e2"
                              else (_merged(args, "seed", 0),)),
              reg_preset=_merged(args, "preset", "desk"),
              out_dir=_merged(args, "out", "out"))
    if metrics:
        kw["metrics"] = metrics
    pairs = _merged(args, "pairs", None)
    if pairs:
        kw["n_pairs"] = pairs
    for key in ("lam_grid", "gamma_grid", "split", "batch_size",
                "learning_rate"):
        if key in args._config:
            val = args._config[key]
            kw[key] = tuple(val) if isinstance(val, list) else val
    spec = hs.ExperimentSpec(**kw)
    report = hs.run_experiment(spec)
    print(json.dumps({"experiment": spec.experiment,
                      "run_dir": str(spec.run_dir()),
                      "status": report["status"]}))
    return 0


def cmd_serve(args):
    import uvicorn
    from .server import create_app
    app = create_app(args.ckpt, args.data, split=args.split)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        args._config = _load_config(getattr(args, "config", None))
    except ConfigError as e:
        print(str(e), file=sys.stderr)
        return 2
    try:
        if args.command == "synth":
            return cmd_synth(args)
        if args.command == "train":
            return cmd_train(args, baseline=False)
        if args.command == "train-baseline":
            return cmd_train(args, baseline=True)
        if args.command == "sweep":
            return cmd_sweep(args)
        if args.command == "tune":
            return cmd_tune(args)
        if args.command == "eval":
            return cmd_eval(args)
        if args.command == "exp":
            return cmd_exp(args)
        if args.command == "serve":
            return cmd_serve(args)
        parser.print_usage(sys.stderr)
        return 2
    except (ConfigError, ValueError, FileNotFoundError) as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - CLI boundary
        log.exception("runtime failure")
        print(f"runtime failure: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
