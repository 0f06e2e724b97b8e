"""Reverse-mode execution engine for operator graphs.

The engine walks a graph in topological order computing numpy activations
(channels-first) and recording one tape entry per operator; ``Run.backward``
replays the tape in reverse, accumulating gradients for weights, gate scores
and (additively, for fan-out) intermediate activations.

Numerics: activations and parameters share the caller's dtype (training uses
float32); statistics and gradient *reductions* (BatchNorm moments, per-channel
sums) accumulate in float64 before being cast back. Execution is pure numpy,
so identical inputs, weights and dtype give bitwise-identical results.

Convolutions carry no bias term: every reference model normalises right after
each convolution, and a bias-free convolution maps an all-zero input to an
all-zero output, which is what lets fully pruned branches collapse without
changing the network function. FullyConnected keeps its bias.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import (
    LengthMismatch,
    MissingWeights,
    NonFiniteTensor,
    ShapeMismatch,
    StaleTape,
)
from .graph import Graph, OpKind, TensorShape
from .relax import GateSet, sigma, sigma_grad
from .subgraph import ROLE_CONV_OUT, ROLE_FC_OUT, Coloring

ParamKey = tuple  # ("w", node_id, param_name) or ("s", group_id)
Weights = dict[str, dict[str, np.ndarray]]

BN_EPS = 1e-5
BN_MOMENTUM = 0.1

# Activations are keyed by node id; when a gate or fixed scale is applied to a
# node's output, the unscaled value is stored under <id> + _RAW and the scale
# becomes its own tape record between the two keys.
_RAW = "\x00raw"


# -- weight initialisation -----------------------------------------------------


def init_weights(
    graph: Graph,
    shapes: dict[str, TensorShape],
    rng: np.random.Generator,
    dtype: np.dtype = np.float32,
) -> Weights:
    """He-initialised weights for every parametric node, drawn in sorted id
    order so initialisation is independent of graph construction order."""
    weights: Weights = {}
    for nid in sorted(graph.nodes):
        node = graph.nodes[nid]
        if node.kind == OpKind.CONV:
            c_i, c_o = int(node.attr("in_channels")), int(node.attr("out_channels"))
            kernel = tuple(int(k) for k in node.attr("kernel"))
            fan_in = max(c_i * int(np.prod(kernel)), 1)
            std = np.sqrt(2.0 / fan_in)
            weights[nid] = {
                "kernel": (rng.standard_normal((c_o, c_i, *kernel)) * std).astype(dtype)
            }
        elif node.kind == OpKind.FULLY_CONNECTED:
            c_i, c_o = int(node.attr("in_channels")), int(node.attr("out_channels"))
            std = np.sqrt(2.0 / max(c_i, 1))
            weights[nid] = {
                "weight": (rng.standard_normal((c_o, c_i)) * std).astype(dtype),
                "bias": np.zeros(c_o, dtype=dtype),
            }
        elif node.kind == OpKind.BATCH_NORM:
            c = shapes[nid].channels
            weights[nid] = {
                "gamma": np.ones(c, dtype=dtype),
                "beta": np.zeros(c, dtype=dtype),
                "running_mean": np.zeros(c, dtype=dtype),
                "running_var": np.ones(c, dtype=dtype),
            }
    return weights


def trainable_params(weights: Weights, gates: GateSet | None = None) -> dict[ParamKey, np.ndarray]:
    """Flat, deterministically ordered view of every trainable array
    (BatchNorm running statistics are state, not parameters)."""
    params: dict[ParamKey, np.ndarray] = {}
    for nid in sorted(weights):
        for name in sorted(weights[nid]):
            if name.startswith("running_"):
                continue
            params[("w", nid, name)] = weights[nid][name]
    if gates is not None:
        for gid in sorted(gates.values):
            params[("s", gid)] = gates.values[gid]
    return params


# -- forward / backward --------------------------------------------------------


@dataclass
class Run:
    """One forward execution: activations plus the tape for backward."""

    graph: Graph
    acts: dict[str, np.ndarray]
    output: np.ndarray
    _tape: list[tuple[str, tuple[str, ...], Callable]] = field(default_factory=list)
    _consumed: bool = False

    def backward(self, output_grad: np.ndarray) -> dict[ParamKey, np.ndarray]:
        """Accumulate gradients of a scalar loss whose gradient with respect
        to the run's output is ``output_grad``. Single use per run."""
        if self._consumed:
            raise StaleTape("this run's tape was already consumed by backward()")
        self._consumed = True
        output_grad = np.asarray(output_grad)
        if output_grad.shape != self.output.shape:
            raise ShapeMismatch(
                f"output grad {output_grad.shape} does not match output {self.output.shape}"
            )
        act_grads: dict[str, np.ndarray] = {self.graph.exit: output_grad}
        param_grads: dict[ParamKey, np.ndarray] = {}
        for out_key, in_keys, fn in reversed(self._tape):
            gy = act_grads.pop(out_key, None)
            if gy is None:
                continue
            in_grads, p_grads = fn(gy)
            for src, g in zip(in_keys, in_grads):
                if g is None:
                    continue
                if src in act_grads:
                    act_grads[src] = act_grads[src] + g
                else:
                    act_grads[src] = g
            for key, g in p_grads.items():
                if key in param_grads:
                    param_grads[key] = param_grads[key] + g
                else:
                    param_grads[key] = g
        return param_grads


def _cshape(v: np.ndarray, ndim: int) -> np.ndarray:
    """Reshape a per-channel vector for broadcasting against (b, c, *d)."""
    return v.reshape((1, v.shape[0]) + (1,) * (ndim - 2))


def _csum(x: np.ndarray, dtype) -> np.ndarray:
    """Sum over every axis except channels, accumulating in float64."""
    axes = (0,) + tuple(range(2, x.ndim))
    return np.sum(x, axis=axes, dtype=np.float64).astype(dtype)


def gate_vectors(
    coloring: Coloring, gates: GateSet, dtype=None
) -> dict[str, tuple[int, np.ndarray]]:
    """Map each producing node of a gated group to ``(group id, gains)``.

    Gains are applied once, at the channel-producing operators (convolution
    and fully-connected outputs); member operators that merely preserve those
    channels see the scaled values through normal data flow.
    """
    plan: dict[str, tuple[int, np.ndarray]] = {}
    for group in coloring.groups:
        if not group.prunable or group.id not in gates.values:
            continue
        gains = sigma(gates.values[group.id], gates.steepness)
        if dtype is not None:
            gains = gains.astype(dtype)
        for member in group.members:
            if member.role in (ROLE_CONV_OUT, ROLE_FC_OUT):
                plan[member.node] = (group.id, gains)
    return plan


def forward(
    graph: Graph,
    weights: Weights,
    x: np.ndarray,
    *,
    coloring: Coloring | None = None,
    gates: GateSet | None = None,
    node_scales: dict[str, np.ndarray] | None = None,
    training: bool = False,
    bn_momentum: float = BN_MOMENTUM,
) -> Run:
    """Execute the graph on a batch.

    With ``gates`` (and the matching ``coloring``), every gated group's
    producing activation is multiplied by its current gains exactly once and
    the tape carries gradients back to the gate scores. ``node_scales``
    instead applies fixed per-channel multipliers after the named nodes (used
    for masked-model evaluation); the two modes are mutually exclusive.
    In training mode BatchNorm uses batch statistics and updates its running
    estimates in place.
    """
    if gates is not None and node_scales is not None:
        raise ShapeMismatch("pass either gates or node_scales, not both")
    if gates is not None and coloring is None:
        raise ShapeMismatch("gates require the matching coloring")
    x = np.asarray(x)
    if not np.all(np.isfinite(x)):
        raise NonFiniteTensor("input tensor contains NaN or Inf")

    gate_plan = gate_vectors(coloring, gates, dtype=x.dtype) if gates is not None else {}
    acts: dict[str, np.ndarray] = {}
    tape: list[tuple[str, tuple[str, ...], Callable]] = []

    for nid in graph.topo_order():
        node = graph.nodes[nid]
        producers = graph.inputs(nid)
        if node.kind in (OpKind.CONV, OpKind.FULLY_CONNECTED, OpKind.BATCH_NORM):
            if nid not in weights:
                raise MissingWeights(f"no weights for node {nid!r}")

        scaling = nid in gate_plan or (node_scales is not None and nid in node_scales)
        raw_key = nid + _RAW if scaling else nid

        xs = [acts[p] for p in producers]
        y, fn = _OP_TABLE[node.kind](node, xs, weights.get(nid), x, training, bn_momentum)
        if fn is not None:
            tape.append((raw_key, producers, fn))

        if nid in gate_plan:
            gid, gains = gate_plan[nid]
            if gains.shape[0] != y.shape[1]:
                raise LengthMismatch(
                    f"gate width {gains.shape[0]} does not match {nid!r} output {y.shape}"
                )
            scores = gates.values[gid]
            steep = gates.steepness
            pre = y
            y = y * _cshape(gains, y.ndim)

            def gate_fn(gy, *, pre=pre, gains=gains, scores=scores, steep=steep, gid=gid):
                ds = sigma_grad(scores, steep) * _csum(gy * pre, np.float64)
                return [gy * _cshape(gains, gy.ndim)], {("s", gid): ds.astype(scores.dtype)}

            tape.append((nid, (raw_key,), gate_fn))
        elif node_scales is not None and nid in node_scales:
            vec = node_scales[nid].astype(y.dtype, copy=False)
            if vec.shape[0] != y.shape[1]:
                raise LengthMismatch(
                    f"scale width {vec.shape[0]} does not match {nid!r} output {y.shape}"
                )
            y = y * _cshape(vec, y.ndim)

            def scale_fn(gy, *, vec=vec):
                return [gy * _cshape(vec, gy.ndim)], {}

            tape.append((nid, (raw_key,), scale_fn))
        acts[nid] = y

    return Run(graph=graph, acts=acts, output=acts[graph.exit], _tape=tape)


# -- per-kind forward implementations -------------------------------------------
# Each returns (output, backward) where backward maps the output gradient to
# ([gradients for each input], {param key: gradient}); None backward means the
# operator is a source.


def _op_input(node, xs, w, x0, training, mom):
    return np.asarray(x0), None


def _op_output(node, xs, w, x0, training, mom):
    def fn(gy):
        return [gy], {}

    return xs[0], fn


def _op_relu(node, xs, w, x0, training, mom):
    x = xs[0]
    y = np.maximum(x, 0)
    mask = x > 0

    def fn(gy):
        return [gy * mask], {}

    return y, fn


def _op_sum(node, xs, w, x0, training, mom):
    y = xs[0].copy()
    for other in xs[1:]:
        y += other

    def fn(gy):
        return [gy] * len(xs), {}

    return y, fn


def _op_product(node, xs, w, x0, training, mom):
    y = xs[0].copy()
    for other in xs[1:]:
        y *= other

    def fn(gy):
        grads = []
        for i in range(len(xs)):
            g = gy
            for j, other in enumerate(xs):
                if j != i:
                    g = g * other
            grads.append(g)
        return grads, {}

    return y, fn


def _op_concat(node, xs, w, x0, training, mom):
    widths = [a.shape[1] for a in xs]
    y = np.concatenate(xs, axis=1)

    def fn(gy):
        grads = []
        offset = 0
        for width in widths:
            grads.append(gy[:, offset:offset + width])
            offset += width
        return grads, {}

    return y, fn


def _op_conv(node, xs, w, x0, training, mom):
    x = xs[0]
    kernel = w["kernel"]
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeMismatch(f"convolution {node.id!r}: engine supports 2-D spatial tensors only")
    if x.shape[1] != kernel.shape[1]:
        raise ShapeMismatch(
            f"convolution {node.id!r} expects {kernel.shape[1]} input channels, got {x.shape[1]}"
        )
    sh, sw = (int(v) for v in node.attr("stride"))
    ph, pw = (int(v) for v in node.attr("padding"))
    co, ci, kh, kw = kernel.shape
    b, _, h, wdt = x.shape
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (wdt + 2 * pw - kw) // sw + 1
    if oh < 1 or ow < 1:
        raise ShapeMismatch(f"convolution {node.id!r} output would be empty for input {x.shape}")

    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x
    if ci == 0:
        cols = np.zeros((b * oh * ow, 0), dtype=x.dtype)
    else:
        win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
        win = win[:, :, ::sh, ::sw, :, :]
        cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
            b * oh * ow, ci * kh * kw
        )
    kmat = kernel.reshape(co, -1)
    y = np.ascontiguousarray((cols @ kmat.T).reshape(b, oh, ow, co).transpose(0, 3, 1, 2))

    def fn(gy):
        gmat = np.ascontiguousarray(gy.transpose(0, 2, 3, 1)).reshape(b * oh * ow, co)
        dkernel = (gmat.T @ cols).reshape(kernel.shape)
        dcols = gmat @ kmat
        dwin = dcols.reshape(b, oh, ow, ci, kh, kw).transpose(0, 3, 4, 5, 1, 2)
        dxp = np.zeros((b, ci, h + 2 * ph, wdt + 2 * pw), dtype=gy.dtype)
        for ki in range(kh):
            for kj in range(kw):
                dxp[:, :, ki:ki + sh * oh:sh, kj:kj + sw * ow:sw] += dwin[:, :, ki, kj]
        dx = dxp[:, :, ph:ph + h, pw:pw + wdt] if (ph or pw) else dxp
        return [dx], {("w", node.id, "kernel"): dkernel}

    return y, fn


def _op_fc(node, xs, w, x0, training, mom):
    x = xs[0]
    weight, bias = w["weight"], w["bias"]
    orig_shape = x.shape
    x2 = x.reshape(orig_shape[0], -1)
    if x2.shape[1] != weight.shape[1]:
        raise ShapeMismatch(
            f"fully-connected {node.id!r} expects {weight.shape[1]} features, got {x2.shape[1]}"
        )
    y = x2 @ weight.T + bias

    def fn(gy):
        dweight = gy.T @ x2
        dbias = np.sum(gy, axis=0, dtype=np.float64).astype(bias.dtype)
        dx = (gy @ weight).reshape(orig_shape)
        return [dx], {("w", node.id, "weight"): dweight, ("w", node.id, "bias"): dbias}

    return y, fn


def _op_batchnorm(node, xs, w, x0, training, mom):
    x = xs[0]
    gamma, beta = w["gamma"], w["beta"]
    if x.shape[1] != gamma.shape[0]:
        raise ShapeMismatch(
            f"batch-norm {node.id!r} expects {gamma.shape[0]} channels, got {x.shape[1]}"
        )
    if training:
        axes = (0,) + tuple(range(2, x.ndim))
        mean64 = np.mean(x, axis=axes, dtype=np.float64)
        var64 = np.var(x, axis=axes, dtype=np.float64)
        mean = mean64.astype(x.dtype)
        inv = (1.0 / np.sqrt(var64 + BN_EPS)).astype(x.dtype)
        w["running_mean"] += (mom * (mean64 - w["running_mean"])).astype(gamma.dtype)
        w["running_var"] += (mom * (var64 - w["running_var"])).astype(gamma.dtype)
    else:
        mean = w["running_mean"].astype(x.dtype)
        inv = (1.0 / np.sqrt(w["running_var"].astype(np.float64) + BN_EPS)).astype(x.dtype)
    xhat = (x - _cshape(mean, x.ndim)) * _cshape(inv, x.ndim)
    y = xhat * _cshape(gamma, x.ndim) + _cshape(beta, x.ndim)
    n = (x.size // x.shape[1]) if x.shape[1] else 0

    def fn(gy):
        dgamma = _csum(gy * xhat, gamma.dtype)
        dbeta = _csum(gy, beta.dtype)
        dxhat = gy * _cshape(gamma, gy.ndim)
        if training:
            sum_dxhat = _cshape(_csum(dxhat, x.dtype), gy.ndim)
            sum_dxhat_xhat = _cshape(_csum(dxhat * xhat, x.dtype), gy.ndim)
            dx = (_cshape(inv, gy.ndim) / n) * (n * dxhat - sum_dxhat - xhat * sum_dxhat_xhat)
        else:
            dx = dxhat * _cshape(inv, gy.ndim)
        return [dx], {("w", node.id, "gamma"): dgamma, ("w", node.id, "beta"): dbeta}

    return y, fn


def _op_maxpool(node, xs, w, x0, training, mom):
    x = xs[0]
    f = int(node.attr("factor"))
    b, c, h, wdt = x.shape
    oh, ow = h // f, wdt // f
    xc = x[:, :, :oh * f, :ow * f]
    win = xc.reshape(b, c, oh, f, ow, f).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, oh, ow, f * f)
    idx = np.argmax(win, axis=-1)
    y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def fn(gy):
        dwin = np.zeros_like(win)
        np.put_along_axis(dwin, idx[..., None], gy[..., None], axis=-1)
        dxc = dwin.reshape(b, c, oh, ow, f, f).transpose(0, 1, 2, 4, 3, 5).reshape(
            b, c, oh * f, ow * f
        )
        if oh * f == h and ow * f == wdt:
            return [dxc], {}
        dx = np.zeros_like(x)
        dx[:, :, :oh * f, :ow * f] = dxc
        return [dx], {}

    return y, fn


def _op_upsample(node, xs, w, x0, training, mom):
    x = xs[0]
    f = int(node.attr("factor"))
    b, c, h, wdt = x.shape
    y = x.repeat(f, axis=2).repeat(f, axis=3)

    def fn(gy):
        dx = gy.reshape(b, c, h, f, wdt, f).sum(axis=(3, 5))
        return [dx], {}

    return y, fn


def _op_unknown(node, xs, w, x0, training, mom):
    # Unknown operators execute as identity on their first input; their
    # groups are non-prunable, so this only needs to keep data flowing.
    def fn(gy):
        return [gy] + [None] * (len(xs) - 1), {}

    return xs[0], fn


_OP_TABLE = {
    OpKind.INPUT: _op_input,
    OpKind.OUTPUT: _op_output,
    OpKind.RELU: _op_relu,
    OpKind.SUM: _op_sum,
    OpKind.PRODUCT: _op_product,
    OpKind.CONCAT: _op_concat,
    OpKind.CONV: _op_conv,
    OpKind.FULLY_CONNECTED: _op_fc,
    OpKind.BATCH_NORM: _op_batchnorm,
    OpKind.MAX_POOL: _op_maxpool,
    OpKind.UPSAMPLE: _op_upsample,
    OpKind.UNKNOWN: _op_unknown,
}
