"""Continuous channel gates.

Every prunable channel group carries a trainable score vector ``s``; the
effective per-channel gain is the logistic ``sigma(s) = 1 / (1 + exp(-a*s))``
with a fixed steepness ``a``. Gates multiply the producing activation during
training, are thresholded into binary keep/drop masks when pruning, and a
Gaussian "stiffening" penalty pushes scores away from the undecided region
around zero so that thresholding changes the network as little as possible.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidConfig, LengthMismatch
from .subgraph import Coloring

DEFAULT_STEEPNESS = 4.0
DEFAULT_STIFFENING_SD = 1.0


def sigma(s: np.ndarray | float, steepness: float = DEFAULT_STEEPNESS) -> np.ndarray:
    """Numerically stable logistic ``1 / (1 + exp(-steepness * s))``."""
    if steepness <= 0:
        raise InvalidConfig(f"steepness must be positive, got {steepness}")
    x = np.asarray(s, dtype=np.float64) * steepness
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigma_grad(s: np.ndarray | float, steepness: float = DEFAULT_STEEPNESS) -> np.ndarray:
    """Derivative of :func:`sigma` with respect to ``s``."""
    g = sigma(s, steepness)
    return steepness * g * (1.0 - g)


@dataclass
class GateSet:
    """Score vectors for every prunable group of one graph.

    ``values[gid]`` has exactly the group's width; non-prunable groups carry
    no entry at all.
    """

    values: dict[int, np.ndarray]
    steepness: float = DEFAULT_STEEPNESS
    stiffening_sd: float = DEFAULT_STIFFENING_SD

    def __post_init__(self) -> None:
        if self.steepness <= 0:
            raise InvalidConfig(f"steepness must be positive, got {self.steepness}")
        if self.stiffening_sd <= 0:
            raise InvalidConfig(f"stiffening_sd must be positive, got {self.stiffening_sd}")

    def gains(self, group_id: int) -> np.ndarray:
        return sigma(self.values[group_id], self.steepness)

    def total_size(self) -> int:
        return sum(v.size for v in self.values.values())


@dataclass
class MaskSet:
    """Binary keep masks per prunable group, from one threshold."""

    masks: dict[int, np.ndarray]
    threshold: float

    def kept(self, group_id: int) -> np.ndarray:
        return np.flatnonzero(self.masks[group_id])


def init_gates(
    coloring: Coloring,
    steepness: float = DEFAULT_STEEPNESS,
    stiffening_sd: float = DEFAULT_STIFFENING_SD,
    initial_score: float | None = None,
    jitter: float = 0.0,
    rng: np.random.Generator | None = None,
    dtype: np.dtype = np.float32,
) -> GateSet:
    """Fresh gates for every prunable group.

    The default initial score is ``1 / steepness`` so every gate starts at
    ``sigma = 1 / (1 + 1/e) ~ 0.73``: clearly on, but with usable slope.
    ``jitter`` adds zero-mean Gaussian noise to the scores: channels of one
    group feel identical architecture pressure, so without some asymmetry a
    whole group would move in lockstep and die or survive only as a unit.
    """
    s0 = (1.0 / steepness) if initial_score is None else initial_score
    if jitter and rng is None:
        rng = np.random.default_rng(0)
    values: dict[int, np.ndarray] = {}
    for g in coloring.groups:
        if not g.prunable:
            continue
        scores = np.full(g.width, s0, dtype=np.float64)
        if jitter:
            scores += rng.normal(0.0, jitter, size=g.width)
        values[g.id] = scores.astype(dtype)
    return GateSet(values=values, steepness=steepness, stiffening_sd=stiffening_sd)


def gate_apply(activation: np.ndarray, gate: np.ndarray) -> np.ndarray:
    """Multiply a channels-first activation by a per-channel gain vector."""
    if activation.ndim < 2 or gate.ndim != 1 or activation.shape[1] != gate.shape[0]:
        raise LengthMismatch(
            f"gate of length {gate.shape} does not match activation {activation.shape}"
        )
    shape = (1, gate.shape[0]) + (1,) * (activation.ndim - 2)
    return activation * gate.reshape(shape).astype(activation.dtype, copy=False)


def extract_mask(gates: GateSet, threshold: float) -> MaskSet:
    """Binarise gates: keep a channel iff ``sigma(s)`` strictly exceeds the
    threshold, so a gate sitting exactly on the threshold is dropped."""
    if not 0.0 <= threshold < 1.0:
        raise InvalidConfig(f"threshold must lie in [0, 1), got {threshold}")
    masks = {
        gid: (sigma(s, gates.steepness) > threshold).astype(np.int8)
        for gid, s in gates.values.items()
    }
    return MaskSet(masks=masks, threshold=threshold)


def stiffening(gates: GateSet) -> float:
    """Mean Gaussian bump over all gate scores: ``mean(exp(-s^2 / (2 sd^2)))``.

    Maximal (1.0) when every score sits at zero, vanishing as scores
    polarise; adding it to a loss therefore pays for undecided gates. An
    empty gate set has no undecided gates, so its penalty is zero.
    """
    n = gates.total_size()
    if n == 0:
        return 0.0
    sd2 = 2.0 * gates.stiffening_sd ** 2
    total = 0.0
    for s in gates.values.values():
        x = np.asarray(s, dtype=np.float64)
        total += float(np.sum(np.exp(-np.square(x) / sd2)))
    return total / n


def stiffening_grad(gates: GateSet) -> dict[int, np.ndarray]:
    """Per-group gradient of :func:`stiffening` with respect to the scores."""
    n = gates.total_size()
    if n == 0:
        return {}
    sd2 = gates.stiffening_sd ** 2
    out: dict[int, np.ndarray] = {}
    for gid, s in gates.values.items():
        x = np.asarray(s, dtype=np.float64)
        out[gid] = np.exp(-np.square(x) / (2.0 * sd2)) * (-x / sd2) / n
    return out


def snapshot(gates: GateSet) -> dict[int, np.ndarray]:
    """Current gain vector ``sigma(s)`` per group."""
    return {gid: sigma(s, gates.steepness) for gid, s in gates.values.items()}


def export_snapshot(gates: GateSet, extra: dict[int, dict[str, object]] | None = None) -> str:
    """Render gains as structured text, one ``group`` record per line.

    ``extra`` may add per-group fields (e.g. spatial resolution) emitted as
    ``key=value`` tokens after the gains.
    """
    lines = [f"# gate snapshot: steepness={gates.steepness!r} stiffening_sd={gates.stiffening_sd!r}"]
    for gid in sorted(gates.values):
        gains = sigma(gates.values[gid], gates.steepness)
        fields = [f"group {gid}", f"width={gains.size}"]
        for key, value in sorted((extra or {}).get(gid, {}).items()):
            fields.append(f"{key}={value}")
        fields.append("sigma=" + ",".join(f"{v:.6f}" for v in gains))
        lines.append(" ".join(fields))
    return "\n".join(lines) + "\n"
