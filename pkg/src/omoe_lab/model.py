"""Toy mixture-of-experts network: input map -> gated experts -> output head.

The MoE block combines M two-layer ReLU feed-forward experts through a linear
softmax gate. Two routing modes exist: ``top1`` (the selected expert's output
scaled by its gate probability, ties broken toward the lowest index) and
``dense`` (the full weighted sum over all experts).

Parameters live in a flat name -> float64 array dict:

    input_map.W (d, d_raw)   input_map.b (d,)
    gate.W      (M, d)
    expert{m}.W1 (h, d)  expert{m}.b1 (h,)  expert{m}.W2 (d, h)  expert{m}.b2 (d,)
    head.W      (c, d)   head.b (c,)

Expert parameters are "theta"; everything else is "phi".
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation
from .linalg import Rng, gaussian_matrix, require_finite

CHECKPOINT_FORMAT = "omoe-lab-model-v1"

ROUTING_MODES = ("top1", "dense")
INIT_MODES = ("replicate", "independent")


@dataclass
class ModelDims:
    d_raw: int
    d: int
    h: int
    c: int

    def validate(self):
        for name in ("d_raw", "d", "h", "c"):
            if getattr(self, name) < 1:
                raise ContractViolation(f"dimension {name} must be positive")


@dataclass
class RoutingRecord:
    mode: str
    weights: np.ndarray            # (N, M) softmax probabilities
    selected: np.ndarray | None    # (N,) expert indices for top1, else None


@dataclass
class BatchTape:
    """Activations cached by a forward pass, consumed by backward()."""
    X: np.ndarray                  # (N, d_raw) raw inputs
    Z0: np.ndarray                 # (N, d) post-input-map representation
    routing: RoutingRecord
    expert_tokens: dict            # m -> index array of tokens routed to m
    expert_hidden: dict            # m -> (n_m, h) post-ReLU hidden activations
    expert_pre1: dict              # m -> (n_m, h) pre-activation of layer 1
    expert_out: dict               # m -> (n_m, d) expert outputs
    y_moe: np.ndarray              # (N, d) combined MoE output
    fingerprint: float             # stale-tape guard


@dataclass
class MoEModel:
    dims: ModelDims
    M: int
    routing: str
    params: dict[str, np.ndarray] = field(default_factory=dict)

    def expert_names(self, m: int) -> list[str]:
        return [f"expert{m}.W1", f"expert{m}.b1", f"expert{m}.W2", f"expert{m}.b2"]

    def theta_names(self) -> list[str]:
        return [n for m in range(self.M) for n in self.expert_names(m)]

    def phi_names(self) -> list[str]:
        return ["input_map.W", "input_map.b", "gate.W", "head.W", "head.b"]

    def param_names(self) -> list[str]:
        return self.phi_names() + self.theta_names()

    def fingerprint(self) -> float:
        return float(sum(float(np.abs(v).sum()) for v in self.params.values()))

    def clone(self) -> "MoEModel":
        return MoEModel(self.dims, self.M, self.routing,
                        {k: v.copy() for k, v in self.params.items()})


def init_model(rng: Rng, dims: ModelDims, M: int, init_mode: str = "replicate") -> MoEModel:
    """Build a fresh model; ``replicate`` clones one seed expert M times."""
    dims.validate()
    if M < 1:
        raise ContractViolation("expert count M must be >= 1")
    if init_mode not in INIT_MODES:
        raise ContractViolation(f"unknown init mode {init_mode!r}")
    d_raw, d, h, c = dims.d_raw, dims.d, dims.h, dims.c
    p: dict[str, np.ndarray] = {}
    p["input_map.W"] = gaussian_matrix(rng, d, d_raw, 0.0, 1.0 / np.sqrt(d_raw))
    p["input_map.b"] = np.zeros(d)
    p["gate.W"] = gaussian_matrix(rng, M, d, 0.0, 1.0 / np.sqrt(d))

    def sample_expert():
        return {
            "W1": gaussian_matrix(rng, h, d, 0.0, np.sqrt(2.0 / d)),
            "b1": np.zeros(h),
            "W2": gaussian_matrix(rng, d, h, 0.0, np.sqrt(2.0 / h)),
            "b2": np.zeros(d),
        }

    if init_mode == "replicate":
        seed_expert = sample_expert()
        experts = [{k: v.copy() for k, v in seed_expert.items()} for _ in range(M)]
    else:
        experts = [sample_expert() for _ in range(M)]
    for m, ex in enumerate(experts):
        for k, v in ex.items():
            p[f"expert{m}.{k}"] = v

    p["head.W"] = gaussian_matrix(rng, c, d, 0.0, 1.0 / np.sqrt(d))
    p["head.b"] = np.zeros(c)
    for name, arr in p.items():
        require_finite(arr, name)
    return MoEModel(dims, M, "top1", p)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def gate(Wg: np.ndarray, x: np.ndarray, mode: str = "top1") -> RoutingRecord:
    """Route a single d-vector: softmax over Wg @ x."""
    if mode not in ROUTING_MODES:
        raise ContractViolation(f"unknown routing mode {mode!r}")
    x = np.asarray(x, dtype=np.float64).ravel()
    probs = softmax((Wg @ x)[None, :])
    selected = np.argmax(probs, axis=1) if mode == "top1" else None
    return RoutingRecord(mode, probs, selected)


def expert_forward(params: dict, m: int, Z: np.ndarray):
    """Run expert m on rows of Z; returns (pre1, hidden, out)."""
    pre1 = Z @ params[f"expert{m}.W1"].T + params[f"expert{m}.b1"]
    hidden = np.maximum(pre1, 0.0)
    out = hidden @ params[f"expert{m}.W2"].T + params[f"expert{m}.b2"]
    return pre1, hidden, out


def moe_block_forward(model: MoEModel, Z0: np.ndarray):
    """Gate + experts on pre-mapped rows Z0; returns (y_moe, routing, caches)."""
    p = model.params
    probs = softmax(Z0 @ p["gate.W"].T)
    N = Z0.shape[0]
    y_moe = np.zeros((N, model.dims.d))
    expert_tokens, expert_hidden, expert_pre1, expert_out = {}, {}, {}, {}
    if model.routing == "top1":
        selected = np.argmax(probs, axis=1)
        for m in range(model.M):
            idx = np.flatnonzero(selected == m)
            if idx.size == 0:
                continue
            pre1, hidden, out = expert_forward(p, m, Z0[idx])
            y_moe[idx] = probs[idx, m][:, None] * out
            expert_tokens[m] = idx
            expert_pre1[m], expert_hidden[m], expert_out[m] = pre1, hidden, out
        routing = RoutingRecord("top1", probs, selected)
    else:
        all_idx = np.arange(N)
        for m in range(model.M):
            pre1, hidden, out = expert_forward(p, m, Z0)
            y_moe += probs[:, m][:, None] * out
            expert_tokens[m] = all_idx
            expert_pre1[m], expert_hidden[m], expert_out[m] = pre1, hidden, out
        routing = RoutingRecord("dense", probs, None)
    return y_moe, routing, (expert_tokens, expert_pre1, expert_hidden, expert_out)


def moe_forward(model: MoEModel, x: np.ndarray):
    """MoE block on one width-d vector; returns (y, routing, tape entries).

    Tape entries expose, per expert, the layer-1 input (x itself) and the
    layer-2 input (post-activation hidden) for projector accumulation.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    y, routing, (tokens, _, hidden, _) = moe_block_forward(model, x[None, :])
    entries = {m: {"layer1_input": x, "layer2_input": hidden[m][0]} for m in tokens}
    return y[0], routing, entries


def model_forward(model: MoEModel, X: np.ndarray):
    """Full forward over a raw batch; returns (logits, BatchTape)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[0] < 1:
        raise ContractViolation("batch must contain at least one row")
    p = model.params
    Z0 = X @ p["input_map.W"].T + p["input_map.b"]
    y_moe, routing, (tokens, pre1, hidden, out) = moe_block_forward(model, Z0)
    logits = y_moe @ p["head.W"].T + p["head.b"]
    tape = BatchTape(X=X, Z0=Z0, routing=routing, expert_tokens=tokens,
                     expert_hidden=hidden, expert_pre1=pre1, expert_out=out,
                     y_moe=y_moe, fingerprint=model.fingerprint())
    return logits, tape


# --- checkpoint io: JSON with base64 float64 payloads, bit-exact round trip ---

def _encode(arr: np.ndarray) -> dict:
    a = np.ascontiguousarray(arr, dtype=np.float64)
    return {"shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def _decode(obj: dict) -> np.ndarray:
    raw = base64.b64decode(obj["data"])
    return np.frombuffer(raw, dtype=np.float64).reshape(obj["shape"]).copy()


def save_model(model: MoEModel, path) -> None:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "dims": {"d_raw": model.dims.d_raw, "d": model.dims.d,
                 "h": model.dims.h, "c": model.dims.c},
        "M": model.M,
        "routing": model.routing,
        "params": {k: _encode(v) for k, v in model.params.items()},
    }
    with open(path, "w") as f:
        json.dump(doc, f)


def load_model(path) -> MoEModel:
    with open(path) as f:
        doc = json.load(f)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ContractViolation(f"unknown checkpoint format {doc.get('format')!r}")
    dims = ModelDims(**doc["dims"])
    params = {k: _decode(v) for k, v in doc["params"].items()}
    return MoEModel(dims, int(doc["M"]), doc["routing"], params)
