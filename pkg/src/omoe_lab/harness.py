"""Config-driven experiment runner: training, ablations, overhead accounting.

Reports are plain dicts serialized to JSON with full float round-trip
precision. Wall-clock times live in a separate ``timing`` section so the
numeric payload is byte-reproducible for a given (config, seeds).
"""

from __future__ import annotations

import concurrent.futures
import copy
import math
import os
import time
from dataclasses import dataclass

import numpy as np

from . import __version__
from .errors import ConfigError, SingleExpertError
from .grad import backward, loss as loss_fn
from .linalg import Rng
from .metrics import diversity_report, model_param_variance
from .model import MoEModel, ModelDims, init_model, model_forward
from .optim import (MacCounter, OPTIMIZER_KINDS, average_projector_macs, make_optimizer,
                    new_omoe_state, projection_macs, rls_update_macs, step_dispatch)
from .tasks import BatchPlan, Dataset, batches, gen_piecewise_regression, gen_subspace_clusters

DEFAULT_CONFIG = {
    "task": {"kind": "subspace_clusters", "K": 4, "d_raw": 32, "subspace_dim": 6,
             "n_per_cluster": 500, "noise_std": 0.1},
    "model": {"d": 16, "h": 32, "M": 4, "c": 4, "routing": "top1", "init": "replicate"},
    "optimizer": {"kind": "adamw", "lr": 1e-3},
    "omoe": {"enabled": True, "s": 5, "alpha0": 1.0, "lambda": 0.9,
             "avg_norm": "paper", "o_lr": 2.5},
    "train": {"epochs": 10, "batch_size": 32, "eval_fraction": 0.2, "loss": "ce"},
    "seeds": [0, 1, 2, 3, 4],
}

_ALLOWED_KEYS = {
    "": {"task", "model", "optimizer", "omoe", "train", "seeds"},
    "task": {"kind", "K", "d_raw", "subspace_dim", "n_per_cluster", "noise_std",
             "pieces", "n", "path", "feature_columns", "target_column"},
    "model": {"d", "h", "M", "c", "routing", "init"},
    "optimizer": {"kind", "lr", "beta1", "beta2", "eps", "weight_decay", "rho"},
    "omoe": {"enabled", "s", "alpha0", "lambda", "avg_norm", "o_lr"},
    "train": {"epochs", "batch_size", "eval_fraction", "loss"},
}


def make_config(overrides: dict | None = None) -> dict:
    """Defaults merged with a (possibly partial) user dict; unknown keys rejected."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if overrides:
        _merge(cfg, overrides, "")
    validate_config(cfg)
    return cfg


def _merge(cfg: dict, overrides: dict, path: str) -> None:
    allowed = _ALLOWED_KEYS.get(path)
    for key, value in overrides.items():
        if allowed is not None and key not in allowed:
            where = f"{path}.{key}" if path else key
            raise ConfigError(f"unknown config key: {where}")
        if isinstance(value, dict) and isinstance(cfg.get(key), dict):
            _merge(cfg[key], value, key)
        else:
            cfg[key] = copy.deepcopy(value)


def validate_config(cfg: dict) -> None:
    for section, allowed in _ALLOWED_KEYS.items():
        scope = cfg if section == "" else cfg.get(section, {})
        if not isinstance(scope, dict):
            raise ConfigError(f"config section {section!r} must be a mapping")
        for key in scope:
            if key not in allowed:
                where = f"{section}.{key}" if section else key
                raise ConfigError(f"unknown config key: {where}")
    if cfg["model"]["M"] < 1:
        raise ConfigError("model.M: must be >= 1")
    if cfg["model"]["routing"] not in ("top1", "dense"):
        raise ConfigError(f"model.routing: unknown mode {cfg['model']['routing']!r}")
    if cfg["optimizer"]["kind"] not in OPTIMIZER_KINDS:
        raise ConfigError(f"optimizer.kind: unknown kind {cfg['optimizer']['kind']!r}")
    if cfg["omoe"]["enabled"] and cfg["omoe"]["s"] < 2:
        raise ConfigError("omoe.s: skipping step must be >= 2")
    if cfg["omoe"]["avg_norm"] not in ("paper", "proper"):
        raise ConfigError(f"omoe.avg_norm: unknown mode {cfg['omoe']['avg_norm']!r}")
    if cfg["train"]["epochs"] < 1 or cfg["train"]["batch_size"] < 1:
        raise ConfigError("train.epochs and train.batch_size must be positive")
    if not cfg["seeds"]:
        raise ConfigError("seeds: need at least one seed")


def apply_override(cfg: dict, dotted: str, value) -> None:
    """Set a dotted-path key (e.g. ``omoe.s``) in a config dict."""
    parts = dotted.split(".")
    node = cfg
    for part in parts[:-1]:
        if part not in node or not isinstance(node[part], dict):
            raise ConfigError(f"unknown config path: {dotted}")
        node = node[part]
    section = parts[-2] if len(parts) > 1 else ""
    if parts[-1] not in _ALLOWED_KEYS.get(section, {parts[-1]}):
        raise ConfigError(f"unknown config key: {dotted}")
    node[parts[-1]] = value


def build_dataset(cfg: dict, rng: Rng) -> Dataset:
    task = cfg["task"]
    if task["kind"] == "subspace_clusters":
        return gen_subspace_clusters(rng, task["K"], task["d_raw"],
                                     task["n_per_cluster"], task["subspace_dim"],
                                     task["noise_std"])
    if task["kind"] == "piecewise_regression":
        return gen_piecewise_regression(rng, task["pieces"], task["d_raw"],
                                        task["n"], task.get("noise_std", 0.0))
    if task["kind"] == "csv":
        from .tasks import load_csv
        return load_csv(task["path"], task["feature_columns"], task["target_column"])
    raise ConfigError(f"task.kind: unknown kind {task['kind']!r}")


def _optimizer_from_config(cfg: dict):
    opt = dict(cfg["optimizer"])
    kind = opt.pop("kind")
    lr = opt.pop("lr")
    return make_optimizer(kind, lr, **opt)


def _eval_score(model: MoEModel, X, y, loss_kind: str):
    logits, tape = model_forward(model, X)
    if loss_kind == "ce":
        score = float(np.mean(np.argmax(logits, axis=1) == y))
    else:
        score = -loss_fn(logits, y, "mse")  # higher is better, uniformly
    return score, tape.routing


@dataclass
class SeedResult:
    record: dict
    model: MoEModel
    wall_time_s: float
    state: object = None


def train_single(cfg: dict, seed: int) -> SeedResult:
    """Train one model for one seed; deterministic in (config, seed)."""
    t0 = time.perf_counter()
    data_rng, model_rng = Rng(seed).spawn(2)
    dataset = build_dataset(cfg, data_rng)
    perm = np.random.default_rng([seed, 104729]).permutation(dataset.n)
    n_eval = max(1, int(dataset.n * cfg["train"]["eval_fraction"]))
    eval_idx, train_idx = perm[:n_eval], perm[n_eval:]
    X_train, y_train = dataset.X[train_idx], dataset.y[train_idx]
    X_eval, y_eval = dataset.X[eval_idx], dataset.y[eval_idx]
    train_ds = Dataset(X_train, y_train, dataset.kind, dataset.n_classes)

    mc = cfg["model"]
    loss_kind = cfg["train"]["loss"]
    dims = ModelDims(d_raw=cfg["task"]["d_raw"], d=mc["d"], h=mc["h"], c=mc["c"])
    model = init_model(model_rng, dims, mc["M"], mc["init"])
    model.routing = mc["routing"]

    base = _optimizer_from_config(cfg)
    epochs, bs = cfg["train"]["epochs"], cfg["train"]["batch_size"]
    steps_per_epoch = math.ceil(train_ds.n / bs)
    n_total = epochs * steps_per_epoch
    omoe_cfg = cfg["omoe"]
    state = None
    if omoe_cfg["enabled"]:
        state = new_omoe_state(base, model, omoe_cfg["s"], n_total,
                               omoe_cfg["alpha0"], omoe_cfg["lambda"],
                               omoe_cfg["avg_norm"], omoe_cfg.get("o_lr"))

    plan = BatchPlan(seed=seed, batch_size=bs, epochs=epochs)
    batch_iter = batches(train_ds, plan)
    probe = X_eval[0]
    loss_curve, eval_curve, diversity_curve, entropy_curve = [], [], [], []
    step_counts = {"R": 0, "O": 0}
    for _epoch in range(epochs):
        epoch_losses = []
        for _ in range(steps_per_epoch):
            Xb, yb = next(batch_iter)
            if state is not None:
                outcome = step_dispatch(state, model, Xb, yb, loss_kind)
                step_counts[outcome.kind] += 1
                epoch_losses.append(outcome.loss)
            else:
                _, tape = model_forward(model, Xb)
                grads, _means = backward(model, tape, yb, loss_kind)
                base.step(model.params, grads.grads)
                step_counts["R"] += 1
                epoch_losses.append(grads.loss)
        score, routing = _eval_score(model, X_eval, y_eval, loss_kind)
        report = diversity_report(model, probe, routing)
        loss_curve.append(float(np.mean(epoch_losses)))
        eval_curve.append(score)
        diversity_curve.append(report.to_dict())
        entropy_curve.append(report.load_entropy)

    record = {
        "seed": seed,
        "final_train_loss": loss_curve[-1],
        "final_eval_score": eval_curve[-1],
        "final_param_variance": diversity_curve[-1]["param_variance"],
        "loss_curve": loss_curve,
        "eval_curve": eval_curve,
        "diversity_curve": diversity_curve,
        "load_entropy_curve": entropy_curve,
        "step_counts": step_counts,
        "means_produced": state.means_produced if state else 0,
        "means_consumed": state.means_consumed if state else 0,
    }
    return SeedResult(record, model, time.perf_counter() - t0, state)


def run(cfg: dict, return_models: bool = False):
    """Run every seed, aggregate, and return the RunReport dict.

    With ``return_models=True`` also returns {seed: trained model}.
    """
    validate_config(cfg)
    seeds = cfg["seeds"]
    threads = int(os.environ.get("OMOE_LAB_THREADS", "1"))
    if threads > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda s: train_single(cfg, s), seeds))
    else:
        results = [train_single(cfg, s) for s in seeds]

    scores = [r.record["final_eval_score"] for r in results]
    variances = [r.record["final_param_variance"] for r in results]
    report = {
        "artifact_version": __version__,
        "config": cfg,
        "per_seed": [r.record for r in results],
        "aggregate": {
            "eval_score_mean": float(np.mean(scores)),
            "eval_score_std": float(np.std(scores)),
            "param_variance_mean": float(np.mean(variances)),
            "param_variance_std": float(np.std(variances)),
        },
        "timing": {
            "per_seed_s": [r.wall_time_s for r in results],
            "total_s": float(sum(r.wall_time_s for r in results)),
        },
    }
    if return_models:
        return report, {r.record["seed"]: r.model for r in results}
    return report


def ablate_skip(cfg: dict, s_values: list[int]) -> dict:
    """One run per skipping step; emits raw and normalized variance series."""
    if not s_values:
        raise ConfigError("s_values must be non-empty")
    if len(set(s_values)) != len(s_values):
        raise ConfigError("duplicate s values rejected")
    if not cfg["omoe"]["enabled"]:
        raise ConfigError("omoe must be enabled for the skip-step ablation")
    rows = []
    reports = {}
    for s in s_values:
        variant = copy.deepcopy(cfg)
        variant["omoe"]["s"] = int(s)
        rep = run(variant)
        reports[int(s)] = rep
        rows.append({"s": int(s),
                     "param_variance": rep["aggregate"]["param_variance_mean"],
                     "eval_score": rep["aggregate"]["eval_score_mean"]})
    base_var = rows[int(np.argmin([r["s"] for r in rows]))]["param_variance"]
    normalized = [{"s": r["s"],
                   "normalized_variance": r["param_variance"] / base_var if base_var else 1.0}
                  for r in rows]
    return {"table": rows, "normalized": normalized, "reports": reports}


def ablate_experts(cfg: dict, m_values: list[int]) -> dict:
    """Baseline + OMoE run per expert count; emits the improvement table."""
    if not m_values:
        raise ConfigError("m_values must be non-empty")
    if any(m < 2 for m in m_values):
        raise ConfigError("every expert count must be >= 2")
    rows = []
    reports = {}
    for m in m_values:
        base_cfg = copy.deepcopy(cfg)
        base_cfg["model"]["M"] = int(m)
        base_cfg["omoe"]["enabled"] = False
        omoe_cfg = copy.deepcopy(cfg)
        omoe_cfg["model"]["M"] = int(m)
        omoe_cfg["omoe"]["enabled"] = True
        rep_base = run(base_cfg)
        rep_omoe = run(omoe_cfg)
        reports[int(m)] = {"baseline": rep_base, "omoe": rep_omoe}
        rows.append({
            "M": int(m),
            "baseline_score": rep_base["aggregate"]["eval_score_mean"],
            "omoe_score": rep_omoe["aggregate"]["eval_score_mean"],
            "improvement": rep_omoe["aggregate"]["eval_score_mean"]
            - rep_base["aggregate"]["eval_score_mean"],
        })
    return {"table": rows, "reports": reports}


_LR_DEFAULTS = {"sgd": 0.1, "adam": 1e-3, "adamw": 1e-3, "rmsprop": 1e-3, "adagrad": 0.1}


def compare_optimizers(cfg: dict, kinds: list[str]) -> dict:
    """Paired baseline / OMoE-wrapped scores for each base optimizer kind."""
    if not kinds:
        raise ConfigError("kinds must be non-empty")
    unknown = [k for k in kinds if k not in OPTIMIZER_KINDS]
    if unknown:
        raise ConfigError(f"optimizer.kind: unknown kind {unknown[0]!r}")
    rows = []
    reports = {}
    for kind in kinds:
        variant = copy.deepcopy(cfg)
        variant["optimizer"] = {"kind": kind, "lr": _LR_DEFAULTS[kind]}
        base_cfg = copy.deepcopy(variant)
        base_cfg["omoe"]["enabled"] = False
        omoe_cfg = copy.deepcopy(variant)
        omoe_cfg["omoe"]["enabled"] = True
        rep_base = run(base_cfg)
        rep_omoe = run(omoe_cfg)
        reports[kind] = {"baseline": rep_base, "omoe": rep_omoe}
        rows.append({
            "optimizer": kind,
            "baseline_score": rep_base["aggregate"]["eval_score_mean"],
            "omoe_score": rep_omoe["aggregate"]["eval_score_mean"],
            "per_seed_delta": [
                o["final_eval_score"] - b["final_eval_score"]
                for o, b in zip(rep_omoe["per_seed"], rep_base["per_seed"])],
        })
    return {"table": rows, "reports": reports}


# --- overhead accounting -----------------------------------------------------

@dataclass
class OverheadEstimate:
    macs_rls: int
    macs_average: int
    macs_project: int
    projector_floats: int
    base_state_floats: int
    param_floats: int

    @property
    def macs_total(self) -> int:
        return self.macs_rls + self.macs_average + self.macs_project

    @property
    def optimizer_memory_ratio(self):
        if self.base_state_floats == 0:
            return None
        return (self.base_state_floats + self.projector_floats) / self.base_state_floats

    def to_dict(self) -> dict:
        return {
            "macs_rls": self.macs_rls,
            "macs_average": self.macs_average,
            "macs_project": self.macs_project,
            "macs_total": self.macs_total,
            "projector_floats": self.projector_floats,
            "base_state_floats": self.base_state_floats,
            "param_floats": self.param_floats,
            "optimizer_memory_ratio": self.optimizer_memory_ratio,
        }


def predict_o_step_macs(d: int, h: int, M: int, means_counts: dict) -> MacCounter:
    """Exact extra multiply-accumulate count for one O step.

    ``means_counts`` maps (expert, layer) to the number of buffered means
    that step will consume. Layer 1 has input width d and output width h;
    layer 2 the reverse.
    """
    layer_in = {1: d, 2: h}
    layer_out = {1: h, 2: d}
    counter = MacCounter()
    for (_m, layer), n in means_counts.items():
        counter.rls += n * rls_update_macs(layer_in[layer])
    for _m in range(M):
        for layer in (1, 2):
            counter.average += average_projector_macs(layer_in[layer], M)
            counter.project += projection_macs(layer_out[layer], layer_in[layer])
    return counter


def overhead_report(cfg: dict) -> OverheadEstimate:
    """Closed-form overhead for the configured shapes.

    Assumes every expert accumulates one mean per weight layer on each of the
    s-1 regular steps between O steps (exact for dense routing; an upper
    bound for top1).
    """
    validate_config(cfg)
    mc = cfg["model"]
    d, h, M, c = mc["d"], mc["h"], mc["M"], mc["c"]
    d_raw = cfg["task"]["d_raw"]
    s = cfg["omoe"]["s"]
    means_counts = {(m, layer): s - 1 for m in range(M) for layer in (1, 2)}
    macs = predict_o_step_macs(d, h, M, means_counts)
    param_floats = (d * d_raw + d) + M * d + M * (h * d + h + d * h + d) + (c * d + c)
    per_param = {"sgd": 0, "adam": 2, "adamw": 2, "rmsprop": 1, "adagrad": 1}
    base_state = per_param[cfg["optimizer"]["kind"]] * param_floats
    return OverheadEstimate(
        macs_rls=macs.rls, macs_average=macs.average, macs_project=macs.project,
        projector_floats=M * (d * d + h * h),
        base_state_floats=base_state, param_floats=param_floats)
