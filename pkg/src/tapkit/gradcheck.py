"""Finite-difference checks of every hand-written backward pass on tiny models.

Each scope builds a seeded fixture, runs :func:`tapkit.nn.grad_check` and
returns a report.  Module-level scopes use a 1e-4 tolerance; the waveform
and parameter chains through the STFT and the frozen estimator use 1e-3.
"""

from __future__ import annotations

import numpy as np

from . import nn
from .enhancer import (EnhancerModel, JointLossConfig, enhance_backward, enhance_forward,
                       joint_loss_grad, tap_loss_grad)
from .estimator import EstimatorModel, INPUT_DIM, predict
from .features import N_PARAMS, TapStats
from .signal import Waveform
from .synthetic import noise_like, speech_like

MODULE_TOL = 1e-4
CHAIN_TOL = 1e-3
SCOPES = ("dense", "gru", "bptt", "mae", "taploss", "joint")


def _dense(seed):
    rng = np.random.default_rng(seed)
    arrays = {"x": rng.standard_normal((3, 5)), "W": rng.standard_normal((4, 5)),
              "b": rng.standard_normal(4)}
    R = rng.standard_normal((3, 4))

    def f(a):
        y, cache = nn.dense_forward(a["x"], a["W"], a["b"])
        dx, dW, db = nn.dense_backward(R, cache)
        return float((R * y).sum()), {"x": dx, "W": dW, "b": db}

    return nn.grad_check(f, arrays, tol=MODULE_TOL)


def _gru(seed):
    rng = np.random.default_rng(seed)
    d, h = 3, 4
    params = nn.ParamStore({k: rng.standard_normal(s) * 0.5 for k, s in nn.gru_shapes(d, h, "g").items()})
    arrays = {"x": rng.standard_normal((2, d)), "h": rng.standard_normal((2, h)),
              **{k: params[k] for k in params.names()}}
    R = rng.standard_normal((2, h))

    def f(a):
        hn, cache = nn.gru_cell_forward(a["x"], a["h"], params, "g")
        dx, dh, da, du = nn.gru_cell_backward(R, cache, params, "g")
        g = {"x": dx, "h": dh, **nn.gru_param_grads(a["x"], a["h"], da, du, "g")}
        return float((R * hn).sum()), g

    return nn.grad_check(f, arrays, tol=MODULE_TOL)


def _bptt(seed):
    rng = np.random.default_rng(seed)
    spec = nn.SequenceSpec(3, 4, 2, 2)
    params = spec.init(seed)
    arrays = {"X": rng.standard_normal((2, 6, 3)), **{k: params[k] for k in params.names()}}
    R = rng.standard_normal((2, 6, 2))

    def f(a):
        Y, cache = nn.sequence_forward(a["X"], params)
        dX, grads = nn.sequence_backward(R, cache, params)
        return float((R * Y).sum()), {"X": dX, **dict(grads.items())}

    return nn.grad_check(f, arrays, tol=MODULE_TOL)


def _mae(seed):
    rng = np.random.default_rng(seed)
    target = rng.standard_normal((5, N_PARAMS))
    arrays = {"pred": target + rng.choice([-1.0, 1.0], target.shape) * rng.uniform(0.1, 1.0, target.shape)}

    def f(a):
        loss, g = nn.mae_loss(a["pred"], target)
        return loss, {"pred": g}

    return nn.grad_check(f, arrays, tol=MODULE_TOL)


def tiny_estimator(seed=0, hidden=8, layers=2):
    spec = nn.SequenceSpec(INPUT_DIM, hidden, layers, N_PARAMS)
    return EstimatorModel(spec.init(seed), TapStats(np.zeros(N_PARAMS), np.ones(N_PARAMS)))


def _clip(seed, duration_s=0.25):
    return speech_like(duration_s, seed=seed).samples + noise_like("white", duration_s, seed=seed + 1).samples * 0.3


def _taploss(seed, max_samples=200):
    est = tiny_estimator(seed)
    y = _clip(seed)
    target = predict(Waveform(_clip(seed + 10)), est).data
    arrays = {"y": y.copy()}

    def f(a):
        loss, g = tap_loss_grad(a["y"], target, est)
        return loss, {"y": g}

    return nn.grad_check(f, arrays, tol=CHAIN_TOL, max_per_array=max_samples, seed=seed)


def _joint(seed, base_loss="l1_waveform", max_per_array=40):
    est = tiny_estimator(seed)
    model = EnhancerModel.init(hidden=4, layers=1, seed=seed)
    noisy = _clip(seed)
    clean = speech_like(0.25, seed=seed).samples
    target = predict(Waveform(clean), est).data
    cfg = JointLossConfig(base_loss=base_loss, lambda_tap=1.0)
    arrays = {k: model.params[k] for k in model.params.names()}

    def f(_a):
        out, cache = enhance_forward(noisy, model)
        total, _, g = joint_loss_grad(out, clean, target, cfg, est)
        return total, dict(enhance_backward(g, cache, model).items())

    return nn.grad_check(f, arrays, tol=CHAIN_TOL, max_per_array=max_per_array, seed=seed)


def run_scope(scope, seed=0):
    """Return ``{name: GradCheckReport}`` for one scope or ``"all"``."""
    table = {"dense": _dense, "gru": _gru, "bptt": _bptt, "mae": _mae, "taploss": _taploss}
    scopes = SCOPES if scope == "all" else (scope,)
    out = {}
    for s in scopes:
        if s == "joint":
            out["joint_l1_waveform"] = _joint(seed, "l1_waveform")
            out["joint_l2_spectral_magnitude"] = _joint(seed, "l2_spectral_magnitude")
        elif s in table:
            out[s] = table[s](seed)
        else:
            raise ValueError(f"unknown scope {s!r}; expected one of {SCOPES + ('all',)}")
    return out
