"""Gradient-descent optimizers and checkpoint serialization.

Updates are applied in place and iterate over sorted parameter keys, so a
training step is a pure function of (parameters, gradients, state) — no dict
ordering or threading effects. Checkpoints are single ``.npz`` files that
embed the serialized graph, all weight and gate arrays, optimizer slots, the
RNG state and a JSON metadata block; restoring one resumes training bitwise.
"""
from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError, InvalidConfig, NonFiniteGradient
from .graph import Graph
from .graphio import deserialize, serialize
from .relax import GateSet

ParamKey = tuple
Weights = dict[str, dict[str, np.ndarray]]

CHECKPOINT_VERSION = 1

# Weight decay applies only to multiplicative weight matrices; biases,
# BatchNorm affine terms and gate scores are exempt.
_DECAYED = {"kernel", "weight"}


@dataclass
class OptimConfig:
    kind: str = "adam"  # "adam" | "sgd"
    lr: float = 1e-3
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in ("adam", "sgd"):
            raise InvalidConfig(f"unknown optimizer kind {self.kind!r}")
        if self.lr <= 0:
            raise InvalidConfig("learning rate must be positive")


class Optimizer:
    """SGD-with-momentum or Adam over a flat {key: array} parameter view."""

    def __init__(self, config: OptimConfig):
        self.config = config
        self.t = 0
        self.slots: dict[ParamKey, dict[str, np.ndarray]] = {}

    def step(
        self,
        params: dict[ParamKey, np.ndarray],
        grads: dict[ParamKey, np.ndarray],
        lr: float | None = None,
    ) -> None:
        """Apply one update in place. Parameters without a gradient are left
        untouched; non-finite gradients abort the step."""
        cfg = self.config
        rate = cfg.lr if lr is None else lr
        self.t += 1
        for key in sorted(grads):
            if key not in params:
                continue
            p = params[key]
            g = np.asarray(grads[key], dtype=p.dtype)
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradient(f"gradient for {key!r} contains NaN or Inf")
            if cfg.weight_decay and key[0] == "w" and key[2] in _DECAYED:
                g = g + cfg.weight_decay * p
            slot = self.slots.setdefault(key, {})
            if cfg.kind == "sgd":
                vel = slot.get("vel")
                if vel is None:
                    vel = np.zeros_like(p)
                vel = cfg.momentum * vel + g
                slot["vel"] = vel
                p -= rate * vel
            else:
                m = slot.get("m")
                v = slot.get("v")
                if m is None:
                    m = np.zeros_like(p)
                    v = np.zeros_like(p)
                m = cfg.beta1 * m + (1 - cfg.beta1) * g
                v = cfg.beta2 * v + (1 - cfg.beta2) * np.square(g)
                slot["m"], slot["v"] = m, v
                mhat = m / (1 - cfg.beta1 ** self.t)
                vhat = v / (1 - cfg.beta2 ** self.t)
                p -= rate * mhat / (np.sqrt(vhat) + cfg.eps)

    def state_dict(self) -> dict:
        return {
            "t": self.t,
            "slots": {key: dict(slot) for key, slot in self.slots.items()},
        }

    def load_state_dict(self, state: dict) -> None:
        self.t = int(state["t"])
        self.slots = {
            tuple(key) if not isinstance(key, tuple) else key: {
                name: np.asarray(arr) for name, arr in slot.items()
            }
            for key, slot in state["slots"].items()
        }


# -- checkpoints -----------------------------------------------------------------


@dataclass
class Checkpoint:
    graph: Graph
    weights: Weights
    gates: GateSet | None
    opt_state: dict | None
    rng_state: dict | None
    meta: dict = field(default_factory=dict)


def _encode_key(key: ParamKey) -> list:
    return list(key)


def _decode_key(enc: list) -> ParamKey:
    return tuple(enc)


def save_checkpoint(
    path: str | Path,
    *,
    graph: Graph,
    weights: Weights,
    gates: GateSet | None = None,
    optimizer: Optimizer | None = None,
    rng: np.random.Generator | None = None,
    meta: dict | None = None,
) -> None:
    """Write a self-contained training snapshot.

    Array names in the archive are positional (``w0001`` ...); the JSON
    metadata block carries the index that maps them back to node ids, group
    ids and optimizer slots, so arbitrary node-id strings round-trip safely.
    """
    arrays: dict[str, np.ndarray] = {}
    header: dict = {
        "version": CHECKPOINT_VERSION,
        "graph": serialize(graph),
        "meta": meta or {},
    }

    w_index = []
    for nid in sorted(weights):
        for name in sorted(weights[nid]):
            arrays[f"w{len(w_index):05d}"] = weights[nid][name]
            w_index.append([nid, name])
    header["w_index"] = w_index

    if gates is not None:
        g_index = []
        for gid in sorted(gates.values):
            arrays[f"g{len(g_index):05d}"] = gates.values[gid]
            g_index.append(int(gid))
        header["g_index"] = g_index
        header["gates"] = {
            "steepness": gates.steepness,
            "stiffening_sd": gates.stiffening_sd,
        }

    if optimizer is not None:
        state = optimizer.state_dict()
        o_index = []
        for key in sorted(state["slots"]):
            for slot_name in sorted(state["slots"][key]):
                arrays[f"o{len(o_index):05d}"] = state["slots"][key][slot_name]
                o_index.append([_encode_key(key), slot_name])
        header["o_index"] = o_index
        header["opt_t"] = state["t"]
        header["opt_config"] = vars(optimizer.config)

    if rng is not None:
        header["rng_state"] = rng.bit_generator.state

    arrays["header"] = np.frombuffer(json.dumps(header).encode("utf-8"), dtype=np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # Write through a buffer then rename so an interrupted save never leaves a
    # truncated checkpoint under the final name.
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"no checkpoint at {path}")
    try:
        with np.load(path) as archive:
            arrays = {name: archive[name] for name in archive.files}
    except Exception as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    if "header" not in arrays:
        raise CheckpointError(f"checkpoint {path} has no header block")
    try:
        header = json.loads(bytes(arrays["header"].tobytes()).decode("utf-8"))
    except Exception as exc:
        raise CheckpointError(f"corrupt header in {path}: {exc}") from exc
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('version')!r}")

    graph = deserialize(header["graph"])

    weights: Weights = {}
    for i, (nid, name) in enumerate(header["w_index"]):
        weights.setdefault(nid, {})[name] = arrays[f"w{i:05d}"]

    gates = None
    if "g_index" in header:
        values = {int(gid): arrays[f"g{i:05d}"] for i, gid in enumerate(header["g_index"])}
        gates = GateSet(
            values=values,
            steepness=header["gates"]["steepness"],
            stiffening_sd=header["gates"]["stiffening_sd"],
        )

    opt_state = None
    if "o_index" in header:
        slots: dict[ParamKey, dict[str, np.ndarray]] = {}
        for i, (enc, slot_name) in enumerate(header["o_index"]):
            slots.setdefault(_decode_key(enc), {})[slot_name] = arrays[f"o{i:05d}"]
        opt_state = {"t": header["opt_t"], "slots": slots, "config": header.get("opt_config")}

    return Checkpoint(
        graph=graph,
        weights=weights,
        gates=gates,
        opt_state=opt_state,
        rng_state=header.get("rng_state"),
        meta=header.get("meta", {}),
    )
