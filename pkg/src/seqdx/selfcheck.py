"""Oracle suite behind ``seqdx selfcheck``.

Each check builds a small random instance, compares against an independent
reference and returns the worst deviation.  Op checks call through the
``tensor`` and ``layers`` modules by attribute so that a patched backward
rule is picked up and reported under its own name.
"""
from __future__ import annotations

import math
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import layers as L
from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .data import PatientRecord
from .metrics import ClassWeights, weighted_bce
from .model import ModelConfig, forward_sequence, init_model
from .trainer import accumulation_deviation, patient_images

GRAD_RTOL = 1e-3
ACCUM_RTOL = 1e-5
FD_EPS = 1e-6


@dataclass
class CheckResult:
    name: str
    passed: bool
    deviation: float
    seconds: float


def _param(rng, *shape, scale=1.0):
    return T.Tensor(rng.normal(0, scale, shape), requires_grad=True)


def _grad_worst(f, params) -> float:
    return max(T.gradient_check(f, params, eps=FD_EPS).values())


def check_elementwise(rng):
    a, b = _param(rng, 6), _param(rng, 6)
    w = T.Tensor(rng.normal(size=6))
    f = lambda: T.total(T.mul(w, T.mul(T.add(a, b), T.sub(a, b))))  # noqa: E731
    return _grad_worst(f, {"a": a, "b": b})


def _unary(op):
    def check(rng):
        x = _param(rng, 7)
        x.data[np.abs(x.data) < 1e-3] += 0.01  # keep relu away from its kink
        w = T.Tensor(rng.normal(size=7))
        return _grad_worst(lambda: T.total(T.mul(w, getattr(T, op)(x))), {"x": x})
    return check


def check_log(rng):
    x = T.Tensor(rng.uniform(0.2, 2.0, 5), requires_grad=True)
    return _grad_worst(lambda: T.total(T.log(x)), {"x": x})


def check_matmul(rng):
    a, b = _param(rng, 3, 4), _param(rng, 4, 2)
    w = T.Tensor(rng.normal(size=(3, 2)))
    return _grad_worst(lambda: T.total(T.mul(w, T.matmul(a, b))), {"a": a, "b": b})


def check_linear(rng):
    x, wt, bias = _param(rng, 5), _param(rng, 3, 5), _param(rng, 3)
    w = T.Tensor(rng.normal(size=3))
    return _grad_worst(lambda: T.total(T.mul(w, T.linear(x, wt, bias))), {"x": x, "W": wt, "b": bias})


def check_conv2d(rng):
    x, wt, bias = _param(rng, 2, 8, 8), _param(rng, 4, 2, 3, 3, scale=0.5), _param(rng, 4)
    out_w = T.Tensor(rng.normal(size=(4, 8, 8)))
    f = lambda: T.total(T.mul(out_w, L.conv2d(x, wt, bias, 1, 1)))  # noqa: E731
    return _grad_worst(f, {"x": x, "W": wt, "b": bias})


def check_maxpool(rng):
    x = _param(rng, 2, 4, 4)
    out_w = T.Tensor(rng.normal(size=(2, 2, 2)))
    return _grad_worst(lambda: T.total(T.mul(out_w, L.maxpool2d(x, 2))), {"x": x})


def check_lstm(rng):
    lstm = L.LstmParams.init(4, 3, rng=rng)
    xs = [T.Tensor(rng.normal(size=4)) for _ in range(3)]
    w = T.Tensor(rng.normal(size=3))

    def f():
        state = L.LstmState.zeros(3)
        for x in xs:
            state = L.lstm_cell_step(lstm, x, state)
        return T.total(T.mul(w, state.h))

    return _grad_worst(f, lstm.parameters())


def _small_model(seed, **kw):
    cfg = ModelConfig(image_size=8, encoder_channels=[2, 3], fc_sizes=[6, 5], lstm_hidden=4, **kw)
    return init_model(cfg, seed)


def check_model(rng):
    model = _small_model(int(rng.integers(1 << 30)))
    imgs = [T.Tensor(rng.random((3, 8, 8))) for _ in range(3)]
    f = lambda: weighted_bce(forward_sequence(model, imgs).final_probs, [1.0])  # noqa: E731
    return _grad_worst(f, model.trainable_parameters())


def check_bce(rng):
    z = _param(rng, 5)
    y = rng.integers(0, 2, 5).astype(float)
    weights = ClassWeights(rng.uniform(0.2, 1.8, 5), rng.uniform(0.2, 1.8, 5))
    return _grad_worst(lambda: weighted_bce(T.sigmoid(z), y, weights), {"logit": z})


def _patients(rng, k, size=8):
    out = []
    for i in range(k):
        n = int(rng.integers(1, 5))
        out.append(PatientRecord(f"p{i}", [], np.array([int(rng.integers(0, 2))]),
                                 images=[rng.random((size, size)) for _ in range(n)]))
    return out


def check_accumulation(rng):
    worst = 0.0
    for k in (2, 3):
        model = _small_model(int(rng.integers(1 << 30)))
        dev, _, _ = accumulation_deviation(model, _patients(rng, k))
        worst = max(worst, dev)
    return worst


def check_checkpoint(rng):
    with T.precision(np.float32):  # checkpoints store 32-bit values
        model = _small_model(int(rng.integers(1 << 30)))
        imgs = patient_images(_patients(rng, 1)[0], 8)
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "m.sqdx"
        save_checkpoint(model, path)
        loaded = load_checkpoint(path)
    with T.no_grad():
        a = forward_sequence(model, imgs).final_probs.data
        b = forward_sequence(loaded, imgs).final_probs.data
    same_params = all(np.array_equal(p.data, q.data) for p, q in
                      zip(model.named_parameters().values(), loaded.named_parameters().values()))
    return 0.0 if same_params and np.array_equal(a, b) else math.inf


def check_loss_identity(rng):
    loss = weighted_bce(T.Tensor([0.5]), [1.0]).item()
    return abs(loss - math.log(2))


CHECKS = [
    ("elementwise add/sub/mul", check_elementwise, GRAD_RTOL),
    ("relu", _unary("relu"), GRAD_RTOL),
    ("sigmoid", _unary("sigmoid"), GRAD_RTOL),
    ("tanh", _unary("tanh"), GRAD_RTOL),
    ("log", check_log, GRAD_RTOL),
    ("matmul", check_matmul, GRAD_RTOL),
    ("linear", check_linear, GRAD_RTOL),
    ("conv2d", check_conv2d, GRAD_RTOL),
    ("maxpool2d", check_maxpool, GRAD_RTOL),
    ("lstm through time", check_lstm, GRAD_RTOL),
    ("cnn-lstm model", check_model, GRAD_RTOL),
    ("weighted bce", check_bce, GRAD_RTOL),
    ("gradient accumulation", check_accumulation, ACCUM_RTOL),
    ("checkpoint round-trip", check_checkpoint, 0.0),
    ("bce ln2 identity", check_loss_identity, 1e-6),
]


def run_selfcheck(seed: int = 0) -> list:
    results = []
    for name, fn, tol in CHECKS:
        rng = np.random.default_rng([seed, len(results)])
        t0 = time.perf_counter()
        with T.precision(np.float64):
            try:
                dev = float(fn(rng))
            except Exception:  # a broken op is a failed check, not a crash
                dev = math.inf
        results.append(CheckResult(name, dev <= tol, dev, time.perf_counter() - t0))
    return results
