"""Small numpy network kernel: dense layer, GRU, stacked-GRU sequence model,
MAE loss, Adam and finite-difference checking.

Everything runs in float64.  Sequence inputs are ``(B, T, D)`` arrays; a 2-D
``(T, D)`` input is treated as a batch of one and returned in the same shape.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

GRAD_CLIP_NORM = 5.0
CHECKPOINT_VERSION = 1
_MAGIC = b"TAPK"


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class CheckpointError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Parameter store
# ---------------------------------------------------------------------------


class ParamStore:
    """Named float64 arrays with fixed shapes and a stable iteration order."""

    def __init__(self, arrays=None):
        self._arrays = {}
        for name, value in (arrays or {}).items():
            self._arrays[name] = np.array(value, dtype=np.float64)

    def __getitem__(self, name):
        return self._arrays[name]

    def __setitem__(self, name, value):
        value = np.asarray(value, dtype=np.float64)
        if name not in self._arrays:
            raise KeyError(f"unknown parameter {name!r}; shapes are fixed at construction")
        if value.shape != self._arrays[name].shape:
            raise ShapeError(f"{name}: shape {value.shape} != {self._arrays[name].shape}")
        self._arrays[name] = value.copy()

    def __contains__(self, name):
        return name in self._arrays

    def __iter__(self):
        return iter(self._arrays)

    def __len__(self):
        return len(self._arrays)

    def names(self):
        return list(self._arrays)

    def items(self):
        return self._arrays.items()

    def shapes(self):
        return {k: tuple(v.shape) for k, v in self._arrays.items()}

    def size(self):
        return sum(v.size for v in self._arrays.values())

    def copy(self):
        return ParamStore({k: v.copy() for k, v in self._arrays.items()})

    def zeros_like(self):
        return ParamStore({k: np.zeros_like(v) for k, v in self._arrays.items()})

    def flat(self):
        return np.concatenate([v.ravel() for v in self._arrays.values()])

    def equal(self, other):
        return self.shapes() == other.shapes() and all(
            np.array_equal(v, other[k]) for k, v in self.items())


def uniform_init(shapes: dict, fan_in: dict, seed: int) -> ParamStore:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization in name order."""
    rng = np.random.default_rng(seed)
    out = {}
    for name, shape in shapes.items():
        bound = 1.0 / np.sqrt(fan_in[name])
        out[name] = rng.uniform(-bound, bound, size=shape)
    return ParamStore(out)


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def dense_forward(x, W, b):
    """``y = W x + b`` applied over the last axis of ``x``."""
    x = np.asarray(x, dtype=np.float64)
    if W.ndim != 2 or x.shape[-1] != W.shape[1] or b.shape != (W.shape[0],):
        raise ShapeError(f"dense: x {x.shape}, W {W.shape}, b {b.shape}")
    return x @ W.T + b, (x, W)


def dense_backward(grad_out, cache):
    x, W = cache
    g2 = grad_out.reshape(-1, W.shape[0])
    x2 = x.reshape(-1, W.shape[1])
    return grad_out @ W, g2.T @ x2, g2.sum(axis=0)


def gru_shapes(input_dim, hidden, prefix="gru"):
    return {f"{prefix}.Wx": (3 * hidden, input_dim),
            f"{prefix}.Wh": (3 * hidden, hidden),
            f"{prefix}.b": (3 * hidden,)}


def gru_cell_forward(x, h_prev, params, prefix="gru", xproj=None):
    """One GRU step for a batch.

    Gates are stacked [update, reset, candidate] along the first weight axis::

        z = sigmoid(Wx_z x + Wh_z h + b_z)
        r = sigmoid(Wx_r x + Wh_r h + b_r)
        n = tanh(Wx_n x + b_n + r * (Wh_n h))
        h' = z * h + (1 - z) * n

    ``xproj`` may carry a precomputed ``Wx x + b``.
    """
    Wx, Wh, b = params[f"{prefix}.Wx"], params[f"{prefix}.Wh"], params[f"{prefix}.b"]
    H = Wh.shape[1]
    if h_prev.shape[-1] != H or (xproj is None and x.shape[-1] != Wx.shape[1]):
        raise ShapeError(f"gru: x {x.shape}, h {h_prev.shape}, Wx {Wx.shape}")
    a = x @ Wx.T + b if xproj is None else xproj
    u = h_prev @ Wh.T
    z = sigmoid(a[:, :H] + u[:, :H])
    r = sigmoid(a[:, H:2 * H] + u[:, H:2 * H])
    n = np.tanh(a[:, 2 * H:] + r * u[:, 2 * H:])
    h = z * h_prev + (1.0 - z) * n
    return h, (x, h_prev, z, r, n, u[:, 2 * H:])


def gru_cell_backward(dh, cache, params, prefix="gru"):
    """Returns ``(dx, dh_prev, da, du)`` where ``da``/``du`` are the gradients
    w.r.t. the input and recurrent pre-activations; use :func:`gru_param_grads`
    to turn them into weight gradients."""
    x, h_prev, z, r, n, un = cache
    Wx, Wh = params[f"{prefix}.Wx"], params[f"{prefix}.Wh"]
    dn = dh * (1.0 - z)
    dz = dh * (h_prev - n)
    dan = dn * (1.0 - n * n)
    dr = dan * un
    daz = dz * z * (1.0 - z)
    dar = dr * r * (1.0 - r)
    da = np.concatenate([daz, dar, dan], axis=1)
    du = np.concatenate([daz, dar, dan * r], axis=1)
    dx = da @ Wx
    dh_prev = dh * z + du @ Wh
    return dx, dh_prev, da, du


def gru_param_grads(xs, hs_prev, das, dus, prefix="gru"):
    """Weight gradients from stacked per-step inputs and pre-activation grads."""
    return {f"{prefix}.Wx": das.T @ xs,
            f"{prefix}.Wh": dus.T @ hs_prev,
            f"{prefix}.b": das.sum(axis=0)}


# ---------------------------------------------------------------------------
# Sequence model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SequenceSpec:
    input_dim: int
    hidden: int
    layers: int
    output_dim: int

    def shapes(self):
        shapes = {}
        d = self.input_dim
        for layer in range(self.layers):
            shapes.update(gru_shapes(d, self.hidden, f"gru{layer}"))
            d = self.hidden
        shapes["head.W"] = (self.output_dim, d)
        shapes["head.b"] = (self.output_dim,)
        return shapes

    def fan_in(self):
        head_in = self.hidden if self.layers else self.input_dim
        return {name: self.hidden if name.startswith("gru") else head_in for name in self.shapes()}

    def init(self, seed) -> ParamStore:
        return uniform_init(self.shapes(), self.fan_in(), seed)

    @classmethod
    def from_params(cls, params: ParamStore):
        layers = sum(1 for k in params if k.endswith(".Wh"))
        out_dim, last = params["head.W"].shape
        if layers:
            hidden = params["gru0.Wh"].shape[1]
            input_dim = params["gru0.Wx"].shape[1]
        else:
            hidden, input_dim = last, last
        return cls(input_dim, hidden, layers, out_dim)


@dataclass
class SequenceCache:
    squeeze: bool
    layer_inputs: list = field(default_factory=list)
    layer_caches: list = field(default_factory=list)
    head_cache: tuple = None
    h_final: list = field(default_factory=list)


def sequence_forward(X, params: ParamStore, h0=None):
    """Stacked GRU layers followed by a per-frame dense head.

    Returns ``(Y, cache)``; ``cache.h_final`` holds each layer's last hidden
    state so truncated BPTT can carry state into the next chunk.
    """
    X = np.asarray(X, dtype=np.float64)
    squeeze = X.ndim == 2
    if squeeze:
        X = X[None]
    if X.ndim != 3 or X.shape[1] < 1:
        raise ShapeError(f"sequence input must be (B, T, D) with T >= 1, got {X.shape}")
    spec = SequenceSpec.from_params(params)
    if X.shape[2] != spec.input_dim:
        raise ShapeError(f"sequence input dim {X.shape[2]} != model input dim {spec.input_dim}")
    B, T, _ = X.shape
    cache = SequenceCache(squeeze)
    inp = X
    for layer in range(spec.layers):
        pre = f"gru{layer}"
        h = np.zeros((B, spec.hidden)) if h0 is None else h0[layer]
        xproj = inp @ params[f"{pre}.Wx"].T + params[f"{pre}.b"]
        outs = np.empty((B, T, spec.hidden))
        steps = []
        for t in range(T):
            h, c = gru_cell_forward(inp[:, t], h, params, pre, xproj=xproj[:, t])
            outs[:, t] = h
            steps.append(c)
        cache.layer_inputs.append(inp)
        cache.layer_caches.append(steps)
        cache.h_final.append(h)
        inp = outs
    Y, cache.head_cache = dense_forward(inp, params["head.W"], params["head.b"])
    return (Y[0] if squeeze else Y), cache


def sequence_backward(dY, cache: SequenceCache, params: ParamStore):
    """Backpropagation through time.

    Returns ``(dX, grads)`` with ``grads`` keyed like ``params``.  The
    incoming hidden state of the chunk is treated as a constant.
    """
    dY = np.asarray(dY, dtype=np.float64)
    if cache.squeeze:
        dY = dY[None]
    grads = {}
    dinp, grads["head.W"], grads["head.b"] = dense_backward(dY, cache.head_cache)
    for layer in reversed(range(len(cache.layer_caches))):
        pre = f"gru{layer}"
        steps = cache.layer_caches[layer]
        inp = cache.layer_inputs[layer]
        B, T, D = inp.shape
        H = params[f"{pre}.Wh"].shape[1]
        dx = np.empty((B, T, D))
        das = np.empty((T, B, 3 * H))
        dus = np.empty((T, B, 3 * H))
        hprev = np.empty((T, B, H))
        dh_next = np.zeros((B, H))
        for t in reversed(range(T)):
            dh = dinp[:, t] + dh_next
            dx[:, t], dh_next, das[t], dus[t] = gru_cell_backward(dh, steps[t], params, pre)
            hprev[t] = steps[t][1]
        grads.update(gru_param_grads(inp.transpose(1, 0, 2).reshape(T * B, D),
                                     hprev.reshape(T * B, H), das.reshape(T * B, 3 * H),
                                     dus.reshape(T * B, 3 * H), pre))
        dinp = dx
    ordered = ParamStore({k: grads[k] for k in params.names()})
    return (dinp[0] if cache.squeeze else dinp), ordered


# ---------------------------------------------------------------------------
# Loss and optimizer
# ---------------------------------------------------------------------------


def mae_loss(pred, target):
    """Mean absolute error over all T*P entries, and its gradient.

    The gradient uses sign(0) = 0, so entries are exactly -1/(TP), 0 or
    +1/(TP).
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"mae: {pred.shape} vs {target.shape}")
    diff = pred - target
    n = diff.size
    return float(np.abs(diff).sum() / n), np.sign(diff) / n


@dataclass
class AdamState:
    m: dict
    v: dict
    lr: float
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, params: ParamStore, lr: float, **kw):
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()}, lr, **kw)


def adam_step(params: ParamStore, grads, state: AdamState):
    """Bias-corrected Adam update, in place."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {name}")
        if np.shape(g) != params[name].shape:
            raise ShapeError(f"{name}: grad {np.shape(g)} vs param {params[name].shape}")
    state.t += 1
    if state.lr == 0.0:
        return
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for name, g in grads.items():
        m = state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        v = state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * g * g
        params[name] = params[name] - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def clip_global_norm(grads, max_norm=GRAD_CLIP_NORM):
    """Scale ``grads`` (a ParamStore or dict) so their joint L2 norm is at most ``max_norm``."""
    total = float(np.sqrt(sum(float(np.sum(g * g)) for _, g in grads.items())))
    if total > max_norm:
        scale = max_norm / total
        for k, g in list(grads.items()):
            grads[k] = g * scale
    return total


# ---------------------------------------------------------------------------
# Finite-difference checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst: tuple
    n_checked: int
    tol: float
    per_array: dict

    @property
    def passed(self):
        return self.max_rel_err < self.tol


def rel_err(analytic, numeric, floor=1e-7):
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def grad_check(loss_and_grads, arrays: dict, h=1e-4, tol=1e-4, max_per_array=None,
               seed=0, floor=1e-7) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    ``loss_and_grads(arrays)`` must return ``(loss, grads)`` where ``grads``
    has an entry for every key in ``arrays``.  Arrays are perturbed in place
    and restored.  ``max_per_array`` subsamples large arrays (seeded).
    Relative errors use ``max(|a|, |n|, floor)`` as denominator so that exactly
    zero gradients compare cleanly.
    """
    _, grads = loss_and_grads(arrays)
    grads = {k: np.array(grads[k], dtype=np.float64) for k in arrays}
    rng = np.random.default_rng(seed)
    worst_err, worst = 0.0, None
    n_checked = 0
    per_array = {}
    for name, arr in arrays.items():
        flat = arr.reshape(-1)
        idx = np.arange(flat.size)
        if max_per_array is not None and flat.size > max_per_array:
            idx = np.sort(rng.choice(flat.size, max_per_array, replace=False))
        a_err = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            lp, _ = loss_and_grads(arrays)
            flat[i] = orig - h
            lm, _ = loss_and_grads(arrays)
            flat[i] = orig
            num = (lp - lm) / (2 * h)
            e = rel_err(grads[name].reshape(-1)[i], num, floor)
            a_err = max(a_err, e)
            if e > worst_err or worst is None:
                worst_err, worst = e, (name, int(i))
            n_checked += 1
        per_array[name] = a_err
    return GradCheckReport(worst_err, worst, n_checked, tol, per_array)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, params: ParamStore, header: dict):
    """Write ``TAPK | u32 len | JSON header | f64 arrays | u32 CRC32``.

    The header gains ``format_version`` and the ordered parameter names and
    shapes; arrays follow in that order, little-endian float64.
    """
    head = dict(header)
    head["format_version"] = CHECKPOINT_VERSION
    head["params"] = [[k, list(s)] for k, s in params.shapes().items()]
    hbytes = json.dumps(head, sort_keys=True, separators=(",", ":")).encode()
    body = _MAGIC + struct.pack("<I", len(hbytes)) + hbytes
    body += b"".join(np.ascontiguousarray(v, dtype="<f8").tobytes() for _, v in params.items())
    body += struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)
    Path(path).write_bytes(body)


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns ``(params, header)``."""
    blob = Path(path).read_bytes()
    if len(blob) < 12 or blob[:4] != _MAGIC:
        raise CheckpointError("not a checkpoint file")
    (crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(blob[:-4]) & 0xFFFFFFFF != crc:
        raise CheckpointError("CRC mismatch: checkpoint is corrupt")
    (n,) = struct.unpack("<I", blob[4:8])
    try:
        header = json.loads(blob[8:8 + n])
    except ValueError as exc:
        raise CheckpointError(f"unreadable header: {exc}") from exc
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported format_version {header.get('format_version')}")
    arrays = {}
    pos = 8 + n
    for name, shape in header["params"]:
        size = int(np.prod(shape)) if shape else 1
        chunk = blob[pos:pos + 8 * size]
        if len(chunk) != 8 * size:
            raise CheckpointError("checkpoint payload truncated")
        arrays[name] = np.frombuffer(chunk, dtype="<f8").reshape(shape).copy()
        pos += 8 * size
    if pos != len(blob) - 4:
        raise CheckpointError("trailing bytes in checkpoint payload")
    return ParamStore(arrays), header
