"""End-to-end workflow: pretrain -> prune -> expand -> fine-tune -> contract.

``run_mode`` executes one fine-tuning strategy from a pruned network and
``run_ablation`` sweeps strategies, prune ratios and seeds.
"""

import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import SyntheticSpec, gen_synthetic
from .distill import DEFAULT_GAMMA, DistillConfig
from .netgraph import (Conv2d, Flatten, Linear, MaxPool2d, Network, ReLU, init_weights)
from .pruning import PruneConfig, prune_channels
from .reparam import ExpansionPlan, contract_network, expand_network
from .training import MODES, TrainConfig, accuracy, finetune

log = logging.getLogger(__name__)


def small_cnn(input_shape=(3, 8, 8), classes=4, width=16):
    """Four parameterized layers: three 3x3 convs and a linear classifier."""
    c, h, w = input_shape
    layers = [Conv2d(c, width, 3, padding=1), ReLU(),
              Conv2d(width, 2 * width, 3, padding=1), ReLU(), MaxPool2d(2),
              Conv2d(2 * width, 2 * width, 3, padding=1), ReLU(), MaxPool2d(2),
              Flatten(), Linear(2 * width * (h // 4) * (w // 4), classes)]
    return Network(layers, input_shape, "cnn4")


def default_pairs(units):
    """One (teacher layer, student last-factor layer) pair per expanded unit."""
    return [(u.original_index, u.factor_indices[-1]) for u in units]


@dataclass
class ExperimentSpec:
    data: SyntheticSpec = field(default_factory=SyntheticSpec)
    n_val: int = 512
    width: int = 16
    pretrain: TrainConfig = field(default_factory=lambda: TrainConfig(
        epochs=30, lr=0.05, mode="train_from_scratch"))
    train: TrainConfig = field(default_factory=TrainConfig)
    plan: ExpansionPlan = field(default_factory=ExpansionPlan)
    gamma: float = DEFAULT_GAMMA
    ratios: list = field(default_factory=lambda: [0.8])
    modes: list = field(default_factory=lambda: list(MODES))
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    protected_layers: list = None

    def to_dict(self):
        d = asdict(self)
        d["data"] = self.data.to_dict()
        d["pretrain"] = self.pretrain.to_dict()
        d["train"] = self.train.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        spec = cls()
        if "data" in d:
            data = dict(d.pop("data"))
            if "shape" in data:
                data["shape"] = tuple(data["shape"])
            spec.data = SyntheticSpec(**data)
        if "pretrain" in d:
            spec.pretrain = TrainConfig(**d.pop("pretrain"))
        if "train" in d:
            spec.train = TrainConfig(**d.pop("train"))
        if "plan" in d:
            spec.plan = ExpansionPlan(**d.pop("plan"))
        for k, v in d.items():
            if not hasattr(spec, k):
                raise ValueError(f"unknown experiment field {k!r}")
            setattr(spec, k, v)
        return spec


def make_data(spec, seed):
    """Train/validation split of one synthetic task."""
    train = gen_synthetic(spec.data, seed=2 * seed, prototypes_seed=seed)
    val = gen_synthetic(spec.data, seed=2 * seed + 1, n=spec.n_val, prototypes_seed=seed)
    return train, val


def pretrain(net, data, cfg, val=None):
    weights = init_weights(net, np.random.default_rng(cfg.seed), np.dtype(cfg.dtype))
    return finetune(net, weights, None, data, cfg, val=val)


def run_mode(mode, teacher, pruned, data, val, cfg, plan, gamma=DEFAULT_GAMMA):
    """Fine-tune a pruned network with one strategy and contract the result.

    ``teacher`` and ``pruned`` are ``(network, weights)`` pairs.  Returns
    ``(network, weights, history)`` of the final compact model.
    """
    net, weights = pruned
    cfg = TrainConfig(**{**cfg.to_dict(), "mode": mode})
    if mode == "vanilla_finetune":
        w, hist = finetune(net, weights, None, data, cfg, val=val)
        return net, w, hist
    if mode == "train_from_scratch":
        fresh = init_weights(net, np.random.default_rng(cfg.seed + 7919), np.dtype(cfg.dtype))
        w, hist = finetune(net, fresh, None, data, cfg, val=val)
        return net, w, hist
    net_exp, w_exp, units = expand_network(net, weights, plan)
    distill = None
    if mode == "overparam_finetune_kd":
        distill = DistillConfig(default_pairs(units), gamma)
    w_exp, hist = finetune(net_exp, w_exp, teacher if distill else None, data, cfg, distill, val)
    slim, w = contract_network(net_exp, w_exp, units)
    return slim, w, hist


def _ablation_seed(args):
    spec, seed = args
    data, val = make_data(spec, seed)
    net = small_cnn(spec.data.shape, spec.data.classes, spec.width)
    pre_cfg = TrainConfig(**{**spec.pretrain.to_dict(), "seed": seed})
    tw, _ = pretrain(net, data, pre_cfg)
    teacher_acc = accuracy(net, tw, *val)
    rows = []
    for ratio in spec.ratios:
        pnet, pw, rec = prune_channels(net, tw, PruneConfig(ratio, protected_layers=spec.protected_layers))
        pruned_acc = accuracy(pnet, pw, *val)
        for mode in spec.modes:
            cfg = TrainConfig(**{**spec.train.to_dict(), "seed": seed})
            plan = ExpansionPlan(**{**spec.plan.to_dict(), "seed": seed})
            slim, w, _ = run_mode(mode, (net, tw), (pnet, pw), data, val, cfg, plan, spec.gamma)
            rows.append({"seed": seed, "ratio": ratio, "mode": mode,
                         "removed_fraction": rec.removed_fraction,
                         "teacher_acc": teacher_acc, "pruned_acc": pruned_acc,
                         "acc": accuracy(slim, w, *val)})
    return rows


def worker_count():
    env = os.environ.get("RPK_THREADS")
    return max(1, int(env)) if env else (os.cpu_count() or 1)


def run_ablation(spec, workers=None):
    """Run every (seed, ratio, mode) cell; returns ``(rows, report)``.

    Seeds run in separate processes when more than one worker is allowed;
    rows are merged in (mode, ratio, seed) order so the report is identical
    whatever the parallelism.
    """
    workers = worker_count() if workers is None else workers
    jobs = [(spec, s) for s in spec.seeds]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(min(workers, len(jobs))) as pool:
            chunks = list(pool.map(_ablation_seed, jobs))
    else:
        chunks = [_ablation_seed(j) for j in jobs]
    rows = [r for chunk in chunks for r in chunk]
    rows.sort(key=lambda r: (spec.modes.index(r["mode"]), r["ratio"], r["seed"]))
    return rows, summarize(rows, spec.modes, spec.ratios)


def summarize(rows, modes, ratios):
    table = {}
    for mode in modes:
        table[mode] = {}
        for ratio in ratios:
            accs = [r["acc"] for r in rows if r["mode"] == mode and r["ratio"] == ratio]
            table[mode][str(ratio)] = {"mean": float(np.mean(accs)), "std": float(np.std(accs)),
                                       "n": len(accs)}
    removed = {str(ratio): float(np.mean([r["removed_fraction"] for r in rows
                                          if r["ratio"] == ratio])) for ratio in ratios}
    return {"modes": list(modes), "ratios": [str(r) for r in ratios],
            "removed_fraction": removed, "accuracy": table}


def format_table(report):
    """Plain-text table: one row per mode, one column per prune ratio."""
    ratios = report["ratios"]
    head = ["mode".ljust(24)] + [
        f"r={r} ({100 * report['removed_fraction'][r]:.1f}% removed)".rjust(26) for r in ratios]
    lines = ["".join(head)]
    for mode in report["modes"]:
        cells = [mode.ljust(24)]
        for r in ratios:
            c = report["accuracy"][mode][r]
            cells.append(f"{100 * c['mean']:.2f} +- {100 * c['std']:.2f}".rjust(26))
        lines.append("".join(cells))
    return "\n".join(lines) + "\n"


def report_json(report):
    return json.dumps(report, sort_keys=True, indent=2) + "\n"
