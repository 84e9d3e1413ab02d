"""Exact reverse-mode gradients for the MoE model, plus finite-difference checks.

``backward`` differentiates the mean batch loss with respect to every
parameter and also emits, for each expert and each of its two weight layers,
the mean input vector over the tokens that expert processed this batch (the
raw material for projector accumulation).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation
from .model import BatchTape, MoEModel, model_forward, softmax


@dataclass
class Gradients:
    grads: dict[str, np.ndarray]
    loss: float


# ExpertInputMeans: (expert, layer) -> (mean input vector, routed token count);
# entries exist only for experts that received at least one token.
ExpertInputMeans = dict


def loss(logits: np.ndarray, targets, kind: str = "ce") -> float:
    """Mean batch loss: cross-entropy over class indices or 0.5 squared error."""
    logits = np.asarray(logits, dtype=np.float64)
    n = logits.shape[0]
    if kind == "ce":
        targets = np.asarray(targets, dtype=np.int64).ravel()
        if targets.shape[0] != n:
            raise ContractViolation("target count does not match batch size")
        probs = softmax(logits)
        return float(-np.mean(np.log(probs[np.arange(n), targets])))
    if kind == "mse":
        t = np.asarray(targets, dtype=np.float64)
        if t.ndim == 1:
            t = t[:, None]
        if t.shape != logits.shape:
            raise ContractViolation(f"target shape {t.shape} != logits shape {logits.shape}")
        return float(np.mean(0.5 * np.sum((logits - t) ** 2, axis=1)))
    raise ContractViolation(f"unknown loss kind {kind!r}")


def _dlogits(logits: np.ndarray, targets, kind: str) -> np.ndarray:
    n = logits.shape[0]
    if kind == "ce":
        targets = np.asarray(targets, dtype=np.int64).ravel()
        d = softmax(logits)
        d[np.arange(n), targets] -= 1.0
        return d / n
    t = np.asarray(targets, dtype=np.float64)
    if t.ndim == 1:
        t = t[:, None]
    return (logits - t) / n


def backward(model: MoEModel, tape: BatchTape, targets, kind: str = "ce"):
    """Analytic gradients of the mean loss plus per-expert input means."""
    if tape.fingerprint != model.fingerprint():
        raise ContractViolation("stale tape: model parameters changed since forward")
    p = model.params
    logits = tape.y_moe @ p["head.W"].T + p["head.b"]
    loss_value = loss(logits, targets, kind)
    dlog = _dlogits(logits, targets, kind)

    g = {name: np.zeros_like(p[name]) for name in model.param_names()}
    g["head.W"] = dlog.T @ tape.y_moe
    g["head.b"] = dlog.sum(axis=0)
    dY = dlog @ p["head.W"]

    probs = tape.routing.weights
    dZ0 = np.zeros_like(tape.Z0)
    dGl = np.zeros_like(probs)  # gradient w.r.t. gate logits

    if model.routing == "top1":
        for m, idx in tape.expert_tokens.items():
            out = tape.expert_out[m]
            hidden = tape.expert_hidden[m]
            pre1 = tape.expert_pre1[m]
            gm = probs[idx, m]
            dOut = gm[:, None] * dY[idx]
            dp = np.sum(dY[idx] * out, axis=1)  # dL/d(selected probability)
            g[f"expert{m}.W2"] = dOut.T @ hidden
            g[f"expert{m}.b2"] = dOut.sum(axis=0)
            dPre1 = (dOut @ p[f"expert{m}.W2"]) * (pre1 > 0)
            g[f"expert{m}.W1"] = dPre1.T @ tape.Z0[idx]
            g[f"expert{m}.b1"] = dPre1.sum(axis=0)
            dZ0[idx] += dPre1 @ p[f"expert{m}.W1"]
            # softmax jacobian restricted to the selected probability
            coeff = dp * gm
            dGl[idx] -= coeff[:, None] * probs[idx]
            dGl[idx, m] += coeff
    else:
        dp_all = np.zeros_like(probs)
        for m in range(model.M):
            out = tape.expert_out[m]
            hidden = tape.expert_hidden[m]
            pre1 = tape.expert_pre1[m]
            dOut = probs[:, m][:, None] * dY
            dp_all[:, m] = np.sum(dY * out, axis=1)
            g[f"expert{m}.W2"] = dOut.T @ hidden
            g[f"expert{m}.b2"] = dOut.sum(axis=0)
            dPre1 = (dOut @ p[f"expert{m}.W2"]) * (pre1 > 0)
            g[f"expert{m}.W1"] = dPre1.T @ tape.Z0
            g[f"expert{m}.b1"] = dPre1.sum(axis=0)
            dZ0 += dPre1 @ p[f"expert{m}.W1"]
        dGl = probs * (dp_all - np.sum(probs * dp_all, axis=1, keepdims=True))

    g["gate.W"] = dGl.T @ tape.Z0
    dZ0 += dGl @ p["gate.W"]
    g["input_map.W"] = dZ0.T @ tape.X
    g["input_map.b"] = dZ0.sum(axis=0)

    means: ExpertInputMeans = {}
    for m, idx in tape.expert_tokens.items():
        n_m = len(idx)
        means[(m, 1)] = (tape.Z0[idx].mean(axis=0), n_m)
        means[(m, 2)] = (tape.expert_hidden[m].mean(axis=0), n_m)
    return Gradients(g, loss_value), means


@dataclass
class GradCheckResult:
    max_rel_error: float
    checked: int
    excluded: list  # (param name, flat index) coords skipped due to argmax flips


def grad_check(model: MoEModel, X, targets, kind: str = "ce", h: float = 1e-5,
               n_samples: int = 200, rng: np.random.Generator | None = None) -> GradCheckResult:
    """Central-difference check over a random subsample of parameter coords.

    For top1 routing, coordinates whose perturbation flips any token's argmax
    are excluded (the loss is discontinuous there) and reported.
    """
    if not (1e-6 <= h <= 1e-4):
        raise ContractViolation("h must lie in [1e-6, 1e-4]")
    rng = rng or np.random.default_rng(0)
    logits, tape = model_forward(model, X)
    analytic, _ = backward(model, tape, targets, kind)
    base_sel = tape.routing.selected

    coords = []
    for name in model.param_names():
        coords.extend((name, i) for i in range(model.params[name].size))
    if len(coords) > n_samples:
        pick = rng.choice(len(coords), size=n_samples, replace=False)
        coords = [coords[i] for i in sorted(pick)]

    max_err = 0.0
    excluded = []
    for name, i in coords:
        flat = model.params[name].reshape(-1)
        orig = flat[i]
        flat[i] = orig + h
        lp, tp = model_forward(model, X)
        sel_p = tp.routing.selected
        loss_p = loss(lp, targets, kind)
        flat[i] = orig - h
        lm, tm = model_forward(model, X)
        sel_m = tm.routing.selected
        loss_m = loss(lm, targets, kind)
        flat[i] = orig
        if model.routing == "top1" and (
                not np.array_equal(sel_p, base_sel) or not np.array_equal(sel_m, base_sel)):
            excluded.append((name, i))
            continue
        numeric = (loss_p - loss_m) / (2 * h)
        a = analytic.grads[name].reshape(-1)[i]
        max_err = max(max_err, abs(a - numeric) / max(1.0, abs(numeric)))
    return GradCheckResult(max_err, len(coords) - len(excluded), excluded)
