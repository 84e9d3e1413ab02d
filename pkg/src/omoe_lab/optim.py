"""Base optimizers and the OMoE composite optimizer.

OMoE alternates two kinds of steps over mini-batches (counter ``e`` starts at
1 so training opens with a regular step):

* R step (``e mod s != 0``): the base optimizer updates every parameter, and
  each expert's per-layer mean inputs are appended to accumulation buffers.
* O step (``e mod s == 0``): buffered means are drained into the per-expert
  RLS projectors, then each expert's weight matrices take a plain gradient
  step projected by the averaged projector of the *other* experts. Only
  expert parameters move; base-optimizer moments are not advanced.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, SingleExpertError
from .grad import ExpertInputMeans, Gradients, backward
from .model import MoEModel, model_forward
from .projector import OrthoProjector

OPTIMIZER_KINDS = ("sgd", "adam", "adamw", "rmsprop", "adagrad")


class BaseOptimizer:
    """Per-parameter moment buffers keyed by parameter name."""

    kind = "base"

    def __init__(self, lr: float):
        self.lr = lr
        self.t = 0
        self.state: dict[str, dict[str, np.ndarray]] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        for name, p in params.items():
            self._update(name, p, grads[name])

    def _update(self, name, p, g):
        raise NotImplementedError

    def _buf(self, name: str, like: np.ndarray, keys: tuple) -> dict:
        if name not in self.state:
            self.state[name] = {k: np.zeros_like(like) for k in keys}
        return self.state[name]

    def state_floats(self, params: dict[str, np.ndarray]) -> int:
        """Moment-buffer float count for a parameter set (memory accounting)."""
        per_param = {"sgd": 0, "adam": 2, "adamw": 2, "rmsprop": 1, "adagrad": 1}[self.kind]
        return per_param * sum(p.size for p in params.values())


class SGD(BaseOptimizer):
    kind = "sgd"

    def _update(self, name, p, g):
        p -= self.lr * g


class Adam(BaseOptimizer):
    kind = "adam"

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        super().__init__(lr)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps

    def _update(self, name, p, g):
        st = self._buf(name, p, ("m", "v"))
        st["m"] = self.beta1 * st["m"] + (1 - self.beta1) * g
        st["v"] = self.beta2 * st["v"] + (1 - self.beta2) * g * g
        mhat = st["m"] / (1 - self.beta1 ** self.t)
        vhat = st["v"] / (1 - self.beta2 ** self.t)
        p -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


class AdamW(Adam):
    kind = "adamw"

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.01):
        super().__init__(lr, beta1, beta2, eps)
        self.weight_decay = weight_decay

    def _update(self, name, p, g):
        decay = self.lr * self.weight_decay * p.copy()
        super()._update(name, p, g)
        p -= decay


class RMSProp(BaseOptimizer):
    kind = "rmsprop"

    def __init__(self, lr=1e-3, rho=0.99, eps=1e-8):
        super().__init__(lr)
        self.rho, self.eps = rho, eps

    def _update(self, name, p, g):
        st = self._buf(name, p, ("v",))
        st["v"] = self.rho * st["v"] + (1 - self.rho) * g * g
        p -= self.lr * g / (np.sqrt(st["v"]) + self.eps)


class Adagrad(BaseOptimizer):
    kind = "adagrad"

    def __init__(self, lr=1e-2, eps=1e-10):
        super().__init__(lr)
        self.eps = eps

    def _update(self, name, p, g):
        st = self._buf(name, p, ("G",))
        st["G"] += g * g
        p -= self.lr * g / (np.sqrt(st["G"]) + self.eps)


def make_optimizer(kind: str, lr: float, **hyper) -> BaseOptimizer:
    kind = kind.lower()
    table = {"sgd": SGD, "adam": Adam, "adamw": AdamW, "rmsprop": RMSProp, "adagrad": Adagrad}
    if kind not in table:
        raise ContractViolation(f"unknown optimizer kind {kind!r}")
    if kind == "sgd":
        return SGD(lr)
    return table[kind](lr=lr, **hyper)


# --- multiply-accumulate accounting shared by prediction and instrumentation ---

def rls_update_macs(d: int) -> int:
    # P@x and x^T@P are d^2 each, the rank-one subtraction is d^2, plus O(d) scalars
    return 3 * d * d + 2 * d


def average_projector_macs(d: int, M: int) -> int:
    return (M - 1) * d * d


def projection_macs(d_out: int, d_in: int) -> int:
    return d_out * d_in * d_in


@dataclass
class MacCounter:
    rls: int = 0
    average: int = 0
    project: int = 0

    @property
    def total(self) -> int:
        return self.rls + self.average + self.project


@dataclass
class StepOutcome:
    kind: str  # "R" or "O"
    loss: float
    projected_norms: dict = field(default_factory=dict)  # (m, layer) -> |delta|_F, O only


@dataclass
class OMoEState:
    base: BaseOptimizer
    M: int
    s: int
    n_total: int
    alpha0: float = 1e-3
    lam: float = 0.9
    avg_norm: str = "paper"  # "paper": 1/M over M-1 terms; "proper": 1/(M-1)
    o_lr: float | None = None  # O-step learning rate; None -> base.lr
    e: int = 1
    projectors: dict = field(default_factory=dict)  # (m, layer) -> OrthoProjector
    buffers: dict = field(default_factory=dict)     # (m, layer) -> [(batch index, xbar)]
    means_produced: int = 0
    means_consumed: int = 0
    mac_counter: MacCounter | None = None


def new_omoe_state(base: BaseOptimizer, model: MoEModel, s: int, n_total: int,
                   alpha0: float = 1e-3, lam: float = 0.9,
                   avg_norm: str = "paper", o_lr: float | None = None) -> OMoEState:
    if s < 2:
        raise ContractViolation("skipping step s must be >= 2")
    if avg_norm not in ("paper", "proper"):
        raise ContractViolation(f"unknown avg_norm {avg_norm!r}")
    layer_dims = {1: model.dims.d, 2: model.dims.h}
    state = OMoEState(base=base, M=model.M, s=s, n_total=n_total,
                      alpha0=alpha0, lam=lam, avg_norm=avg_norm, o_lr=o_lr)
    for m in range(model.M):
        for layer, dim in layer_dims.items():
            state.projectors[(m, layer)] = OrthoProjector(dim, alpha0, lam, n_total)
            state.buffers[(m, layer)] = []
    return state


def r_step(state: OMoEState, model: MoEModel, grads: Gradients,
           means: ExpertInputMeans) -> StepOutcome:
    """Base-optimizer update of all parameters plus input-mean accumulation."""
    state.base.step(model.params, grads.grads)
    for key, (xbar, _count) in means.items():
        state.buffers[key].append((state.e, xbar))
        state.means_produced += 1
    state.e += 1
    return StepOutcome("R", grads.loss)


def average_projector(state: OMoEState, m: int, layer: int) -> np.ndarray:
    """Combine all projectors except expert m's own for one weight layer."""
    if state.M < 2:
        raise SingleExpertError("average projector needs M >= 2 experts")
    total = sum(state.projectors[(j, layer)].P for j in range(state.M) if j != m)
    norm = state.M if state.avg_norm == "paper" else state.M - 1
    if state.mac_counter is not None:
        state.mac_counter.average += average_projector_macs(state.projectors[(m, layer)].d, state.M)
    return total / norm


def _drain_buffers(state: OMoEState) -> None:
    for key, entries in state.buffers.items():
        proj = state.projectors[key]
        for batch_idx, xbar in entries:
            proj.rls_update(xbar, proj.alpha_at(batch_idx))
            state.means_consumed += 1
            if state.mac_counter is not None:
                state.mac_counter.rls += rls_update_macs(proj.d)
        entries.clear()


def o_step(state: OMoEState, model: MoEModel, grads: Gradients) -> StepOutcome:
    """Orthogonally projected expert update; phi parameters stay untouched.

    Weight matrices move by -lr * (G @ Pbar) with Pbar acting on the input
    dimension; biases have no input dimension and move unprojected. The base
    optimizer's moment buffers are not advanced.
    """
    if state.M < 2:
        raise SingleExpertError(
            "orthogonal step impossible with a single expert; "
            "set omoe.enabled=false or use M >= 2")
    _drain_buffers(state)
    lr = state.o_lr if state.o_lr is not None else state.base.lr
    norms = {}
    for m in range(state.M):
        for layer in (1, 2):
            pbar = average_projector(state, m, layer)
            w_name = f"expert{m}.W{layer}"
            b_name = f"expert{m}.b{layer}"
            G = grads.grads[w_name]
            if state.mac_counter is not None:
                state.mac_counter.project += projection_macs(G.shape[0], G.shape[1])
            delta = G @ pbar
            model.params[w_name] -= lr * delta
            model.params[b_name] -= lr * grads.grads[b_name]
            norms[(m, layer)] = float(np.linalg.norm(lr * delta))
    state.e += 1
    return StepOutcome("O", grads.loss, norms)


def step_dispatch(state: OMoEState, model: MoEModel, X, targets,
                  loss_kind: str = "ce") -> StepOutcome:
    """One training step: forward + backward, then R or O by ``e mod s``.

    O steps use the current batch's gradients but do not accumulate its
    input means.
    """
    _, tape = model_forward(model, X)
    grads, means = backward(model, tape, targets, loss_kind)
    if state.e % state.s == 0:
        return o_step(state, model, grads)
    return r_step(state, model, grads, means)


# --- optimizer checkpoint io (same JSON container idiom as model checkpoints) ---

OPTIMIZER_CHECKPOINT_FORMAT = "omoe-lab-optimizer-v1"


def _base_to_doc(base: BaseOptimizer) -> dict:
    from .model import _encode
    hyper = {k: v for k, v in base.__dict__.items()
             if k not in ("state", "t") and np.isscalar(v)}
    return {
        "kind": base.kind,
        "t": base.t,
        "hyper": hyper,
        "state": {name: {k: _encode(v) for k, v in bufs.items()}
                  for name, bufs in base.state.items()},
    }


def _base_from_doc(doc: dict) -> BaseOptimizer:
    from .model import _decode
    base = make_optimizer(doc["kind"], **doc["hyper"])
    base.t = int(doc["t"])
    base.state = {name: {k: _decode(v) for k, v in bufs.items()}
                  for name, bufs in doc["state"].items()}
    return base


def save_optimizer(state: OMoEState, path) -> None:
    import json

    from .model import _encode
    doc = {
        "format": OPTIMIZER_CHECKPOINT_FORMAT,
        "base": _base_to_doc(state.base),
        "M": state.M, "s": state.s, "n_total": state.n_total,
        "alpha0": state.alpha0, "lam": state.lam, "avg_norm": state.avg_norm,
        "o_lr": state.o_lr, "e": state.e,
        "means_produced": state.means_produced,
        "means_consumed": state.means_consumed,
        "projectors": [
            {"m": m, "layer": layer, "d": proj.d,
             "updates_applied": proj.updates_applied, "P": _encode(proj.P)}
            for (m, layer), proj in state.projectors.items()
        ],
        "buffers": [
            {"m": m, "layer": layer,
             "entries": [{"i": i, "xbar": _encode(x)} for i, x in entries]}
            for (m, layer), entries in state.buffers.items()
        ],
    }
    with open(path, "w") as f:
        json.dump(doc, f)


def load_optimizer(path) -> OMoEState:
    import json

    from .model import _decode
    with open(path) as f:
        doc = json.load(f)
    if doc.get("format") != OPTIMIZER_CHECKPOINT_FORMAT:
        raise ContractViolation(f"unknown checkpoint format {doc.get('format')!r}")
    state = OMoEState(base=_base_from_doc(doc["base"]), M=int(doc["M"]), s=int(doc["s"]),
                      n_total=int(doc["n_total"]), alpha0=doc["alpha0"], lam=doc["lam"],
                      avg_norm=doc["avg_norm"], o_lr=doc.get("o_lr"), e=int(doc["e"]),
                      means_produced=int(doc["means_produced"]),
                      means_consumed=int(doc["means_consumed"]))
    for item in doc["projectors"]:
        proj = OrthoProjector(int(item["d"]), doc["alpha0"], doc["lam"], int(doc["n_total"]),
                              _decode(item["P"]), int(item["updates_applied"]))
        state.projectors[(int(item["m"]), int(item["layer"]))] = proj
    for item in doc["buffers"]:
        state.buffers[(int(item["m"]), int(item["layer"]))] = [
            (int(e["i"]), _decode(e["xbar"]).ravel()) for e in item["entries"]]
    return state
