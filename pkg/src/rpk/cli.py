"""Command-line front end: ``rpk <command> [options]``.

Every command prints a JSON summary on stdout.  Exit codes: 0 success,
1 usage or I/O error, 2 property violation (``verify``).

Configuration comes from an optional experiment file (``--config``, the
same JSON dialect as the ``.rpk`` header) with flags applied on top; the
fully resolved configuration is written next to each output.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import container, pipeline
from .data import load_idx
from .distill import DistillConfig
from .errors import RpkError, StageOrderError
from .netgraph import forward, init_weights, model_stats
from .pruning import PruneConfig, prune_channels
from .reparam import (contract_network, expand_network, output_index_map,
                      units_from_meta, units_to_meta)
from .training import MODES, TrainConfig, accuracy, finetune

log = logging.getLogger("rpk")

EXIT_OK, EXIT_USAGE, EXIT_VIOLATION = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 by default; 2 is reserved for property violations
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- configuration ---------------------------------------------------------

def _resolve(args):
    """Experiment spec from ``--config`` plus flag overrides."""
    raw = {}
    if getattr(args, "config", None):
        raw = json.loads(Path(args.config).read_text())
    raw = dict(raw)
    seed = raw.pop("seed", 0)
    spec = pipeline.ExperimentSpec.from_dict(raw)
    if getattr(args, "seed", None) is not None:
        seed = args.seed
    if getattr(args, "ratio", None) is not None:
        spec.ratios = [args.ratio]
    if getattr(args, "rate", None) is not None:
        spec.plan.rate = args.rate
    if getattr(args, "expand_fc", False):
        spec.plan.expand_fc = True
    if getattr(args, "gamma", None) is not None:
        spec.gamma = args.gamma
    if getattr(args, "protected", None) is not None:
        spec.protected_layers = args.protected
    for name in ("epochs", "lr", "batch_size"):
        value = getattr(args, name, None)
        if value is not None:
            stage = spec.pretrain if args.command == "pretrain" else spec.train
            setattr(stage, name, value)
    if getattr(args, "mode", None) is not None:
        spec.train.mode = args.mode
    if getattr(args, "seeds", None) is not None:
        spec.seeds = args.seeds
    spec.plan.seed = seed
    return spec, seed


def _write_config(out, spec, seed, extra=None):
    d = {**spec.to_dict(), "seed": seed, **(extra or {})}
    path = Path(out)
    path = path / "config.json" if path.is_dir() else path.with_suffix(".config.json")
    path.write_text(json.dumps(d, sort_keys=True, indent=2) + "\n")
    return str(path)


def _data_seed(args, seed, meta=None):
    # the synthetic task is fixed when the reference model is trained
    if getattr(args, "data_seed", None) is not None:
        return args.data_seed
    return (meta or {}).get("data_seed", seed)


def _data(args, spec, data_seed):
    """``(train, val)``: IDX files when given, else the seeded synthetic task."""
    if getattr(args, "idx", None):
        if not args.idx_labels:
            raise UsageError("--idx needs --idx-labels")
        data = load_idx(args.idx, args.idx_labels)
        return data, data
    return pipeline.make_data(spec, data_seed)


def _stage_meta(c, stage, **fields):
    meta = dict(c.meta) if c is not None else {}
    meta["stages"] = list(meta.get("stages", [])) + [stage]
    meta.update(fields)
    return meta


# -- commands --------------------------------------------------------------

def cmd_pretrain(args):
    spec, seed = _resolve(args)
    net = pipeline.small_cnn(spec.data.shape, spec.data.classes, spec.width)
    ds = _data_seed(args, seed)
    data, val = _data(args, spec, ds)
    cfg = TrainConfig(**{**spec.pretrain.to_dict(), "seed": seed})
    weights = init_weights(net, np.random.default_rng(seed), np.dtype(cfg.dtype))
    weights, hist = finetune(net, weights, None, data, cfg, val=val)
    meta = _stage_meta(None, "pretrain", seed=seed, data_seed=ds)
    container.save(net, weights, args.out, meta)
    hist.write_epochs_csv(Path(args.out).with_suffix(".epochs.csv"))
    return {"command": "pretrain", "out": args.out, "val_acc": accuracy(net, weights, *val),
            "config": _write_config(args.out, spec, seed)}


def cmd_prune(args):
    spec, seed = _resolve(args)
    c = container.read(args.inp)
    cfg = PruneConfig(spec.ratios[0], protected_layers=spec.protected_layers)
    net, weights, rec = prune_channels(c.network, c.weights, cfg)
    meta = _stage_meta(c, "prune", prune=rec.to_dict(), seed=seed)
    container.save(net, weights, args.out, meta)
    return {"command": "prune", "out": args.out, "ratio": cfg.ratio,
            "removed_fraction": rec.removed_fraction, "params_before": rec.params_before,
            "params_after": rec.params_after, "config": _write_config(args.out, spec, seed)}


def cmd_expand(args):
    spec, seed = _resolve(args)
    c = container.read(args.inp)
    if c.meta.get("units"):
        raise StageOrderError("input is already expanded")
    net, weights, units = expand_network(c.network, c.weights, spec.plan)
    meta = _stage_meta(c, "expand", units=units_to_meta(units), plan=spec.plan.to_dict())
    container.save(net, weights, args.out, meta)
    return {"command": "expand", "out": args.out, "units": len(units),
            "params_before": model_stats(c.network).param_count,
            "params_after": model_stats(net).param_count,
            "config": _write_config(args.out, spec, seed)}


def cmd_finetune(args):
    spec, seed = _resolve(args)
    c = container.read(args.inp)
    cfg = TrainConfig(**{**spec.train.to_dict(), "seed": seed})
    mode = cfg.mode
    units = units_from_meta(c.meta.get("units", []))
    if mode.startswith("overparam") and not units:
        raise StageOrderError(f"mode {mode} needs an expanded model (run `rpk expand` first)")
    weights = c.weights
    if mode == "train_from_scratch":
        weights = init_weights(c.network, np.random.default_rng(seed + 7919), np.dtype(cfg.dtype))
    distill = teacher = None
    if mode == "overparam_finetune_kd":
        if not args.teacher:
            raise UsageError("mode overparam_finetune_kd needs --teacher")
        t = container.read(args.teacher)
        teacher = (t.network, t.weights)
        distill = DistillConfig(pipeline.default_pairs(units), spec.gamma)
    if args.checkpoint_every:
        cfg.checkpoint_every = args.checkpoint_every
        cfg.checkpoint_dir = str(Path(args.out).parent)
    data, val = _data(args, spec, _data_seed(args, seed, c.meta))
    meta = _stage_meta(c, "finetune", train=cfg.to_dict(), gamma=spec.gamma if distill else None)
    weights, hist = finetune(c.network, weights, teacher, data, cfg, distill, val, meta)
    container.save(c.network, weights, args.out, meta)
    out = Path(args.out)
    hist.write_csv(out.with_suffix(".metrics.csv"))
    hist.write_epochs_csv(out.with_suffix(".epochs.csv"))
    last = hist.epochs[-1] if hist.epochs else {}
    return {"command": "finetune", "out": args.out, "mode": mode, "epochs": cfg.epochs,
            "final": last, "config": _write_config(args.out, spec, seed)}


def cmd_contract(args):
    c = container.read(args.inp)
    if not c.meta.get("units"):
        raise StageOrderError("no expansion metadata in input; contract must follow expand")
    units = units_from_meta(c.meta["units"])
    net, weights = contract_network(c.network, c.weights, units)
    meta = _stage_meta(c, "contract")
    meta.pop("units")
    container.save(net, weights, args.out, meta)
    return {"command": "contract", "out": args.out,
            "params_before": model_stats(c.network).param_count,
            "params_after": model_stats(net).param_count}


def cmd_eval(args):
    spec, seed = _resolve(args)
    c = container.read(args.inp)
    _, (x, y) = _data(args, spec, _data_seed(args, seed, c.meta))
    return {"command": "eval", "in": args.inp, "n": int(len(y)),
            "accuracy": accuracy(c.network, c.weights, x, y)}


def _rel(a, b):
    return float(np.abs(a - b).max() / (1 + np.abs(a).max())) if a.size else 0.0


def cmd_verify(args):
    a, b = container.read(args.inp), container.read(args.against)
    tol = args.tol
    summary = {"command": "verify", "in": args.inp, "against": args.against, "tol": tol,
               "inputs": args.n, "seed": args.seed}
    if a.network.input_shape != b.network.input_shape:
        summary.update(ok=False, max_rel_err=None, layers=[],
                       reason=f"input shapes differ: {a.network.input_shape} vs "
                              f"{b.network.input_shape}")
        return summary, EXIT_VIOLATION
    dtype = next(iter(a.weights.values())).dtype if a.weights else np.float64
    x = np.random.default_rng(args.seed).standard_normal((args.n, *a.network.input_shape))
    x = x.astype(dtype)
    acts_a, acts_b = forward(a.network, a.weights, x), forward(b.network, b.weights, x)
    units = units_from_meta(b.meta.get("units", []))
    n = len(a.network.layers)
    if units:
        index = output_index_map(units, n)
    elif len(b.network.layers) == n:
        index = list(range(n))
    else:
        index = [None] * (n - 1) + [len(b.network.layers) - 1]
    rows = []
    for i, j in enumerate(index):
        if j is None:
            continue
        row = {"layer": i, "kind": type(a.network.layers[i]).__name__, "against_layer": j}
        if acts_a[i].shape != acts_b[j].shape:
            row.update(max_abs_err=None, max_rel_err=None, shape_mismatch=True)
        else:
            row.update(max_abs_err=float(np.abs(acts_a[i] - acts_b[j]).max()),
                       max_rel_err=_rel(acts_a[i], acts_b[j]), shape_mismatch=False)
        rows.append(row)
    bad = [r for r in rows if r["shape_mismatch"] or r["max_rel_err"] > tol]
    final = rows[-1] if rows else {"max_rel_err": 0.0}
    summary.update(ok=not bad, max_rel_err=final["max_rel_err"], layers=rows)
    print(_error_table(rows, tol), file=sys.stderr)
    return summary, EXIT_OK if not bad else EXIT_VIOLATION


def _error_table(rows, tol):
    lines = [f"{'layer':>5} {'kind':<10} {'vs':>4} {'max_rel_err':>12}  (tol {tol:g})"]
    for r in rows:
        err = "shape" if r["shape_mismatch"] else f"{r['max_rel_err']:.3e}"
        flag = "" if not r["shape_mismatch"] and r["max_rel_err"] <= tol else "  FAIL"
        lines.append(f"{r['layer']:>5} {r['kind']:<10} {r['against_layer']:>4} {err:>12}{flag}")
    return "\n".join(lines)


def cmd_stats(args):
    c = container.read(args.inp)
    s = model_stats(c.network)
    return {"command": "stats", "in": args.inp, "params": s.param_count, "flops": s.flops,
            "flop_convention": s.convention, "per_layer": s.per_layer}


def cmd_ablation(args):
    spec, seed = _resolve(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows, report = pipeline.run_ablation(spec)
    (out / "report.json").write_text(pipeline.report_json(report))
    (out / "table.txt").write_text(pipeline.format_table(report))
    (out / "rows.json").write_text(json.dumps(rows, sort_keys=True, indent=2) + "\n")
    print(pipeline.format_table(report), file=sys.stderr, end="")
    return {"command": "ablation", "out": str(out), "report": report,
            "config": _write_config(out, spec, seed)}


# -- argument parsing --------------------------------------------------------

def build_parser():
    p = _Parser(prog="rpk", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def command(name, fn, help, inp=True, out=True):
        c = sub.add_parser(name, help=help)
        if inp:
            c.add_argument("--in", dest="inp", required=True, metavar="PATH")
        if out:
            c.add_argument("--out", required=True, metavar="PATH")
        c.add_argument("--config", metavar="JSON")
        c.add_argument("--seed", type=int)
        c.set_defaults(fn=fn)
        return c

    def data_flags(c):
        c.add_argument("--idx", metavar="IMAGES", help="IDX image file instead of synthetic data")
        c.add_argument("--idx-labels", metavar="LABELS")
        c.add_argument("--data-seed", type=int, help="synthetic task seed (default: from the "
                       "input model, else --seed)")

    def train_flags(c):
        c.add_argument("--epochs", type=int)
        c.add_argument("--lr", type=float)
        c.add_argument("--batch-size", type=int)

    c = command("pretrain", cmd_pretrain, "train the reference CNN on the configured data",
                inp=False)
    data_flags(c)
    train_flags(c)

    c = command("prune", cmd_prune, "L1 structured channel pruning")
    c.add_argument("--ratio", type=float)
    c.add_argument("--protected", type=int, nargs="*", metavar="LAYER")

    c = command("expand", cmd_expand, "linear over-parameterization of every conv layer")
    c.add_argument("--rate", type=float)
    c.add_argument("--expand-fc", action="store_true")

    c = command("finetune", cmd_finetune, "fine-tune a (possibly expanded) model")
    c.add_argument("--mode", choices=MODES)
    c.add_argument("--gamma", type=float)
    c.add_argument("--teacher", metavar="PATH")
    c.add_argument("--checkpoint-every", type=int, default=0)
    data_flags(c)
    train_flags(c)

    command("contract", cmd_contract, "collapse expanded factors back to compact layers")

    c = command("eval", cmd_eval, "accuracy on the validation split", out=False)
    data_flags(c)

    c = command("verify", cmd_verify, "forward equivalence of two models", out=False)
    c.add_argument("--against", required=True, metavar="PATH")
    c.add_argument("--tol", type=float, default=1e-5)
    c.add_argument("--n", type=int, default=100, help="number of seeded random inputs")
    c.set_defaults(seed=0)

    command("stats", cmd_stats, "parameter and FLOP counts", out=False)

    c = command("ablation", cmd_ablation, "compare fine-tuning modes over seeds and ratios",
                inp=False)
    c.add_argument("--ratio", type=float)
    c.add_argument("--gamma", type=float)
    c.add_argument("--rate", type=float)
    c.add_argument("--seeds", type=int, nargs="+")
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError("rpk: a command is required (see rpk --help)")
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
        result = args.fn(args)
    except (UsageError, RpkError, OSError, ValueError, TypeError) as exc:
        kind = "usage" if isinstance(exc, UsageError) else type(exc).__name__
        print(json.dumps({"error": str(exc), "kind": kind}, sort_keys=True))
        return EXIT_USAGE
    code = EXIT_OK
    if isinstance(result, tuple):
        result, code = result
    print(json.dumps(result, sort_keys=True))
    return code


if __name__ == "__main__":
    sys.exit(main())
