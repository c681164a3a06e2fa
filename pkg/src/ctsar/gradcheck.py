"""Finite-difference checks of the analytic gradients of every layer type."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import functional as F
from .layers import Conv2d, Linear, ResBlock, SelfAttention
from .tensor import Tensor, backward, mul
from .tensor import sum as tsum
from .training import weighted_cross_entropy

TOLERANCE = 1e-5
EPS = 1e-4
SCALE_FLOOR = 1e-12


def numerical_grad(f: Callable[[], float], x: np.ndarray, eps: float = EPS) -> np.ndarray:
    """Central differences of ``f`` with respect to ``x``, perturbed in place."""
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = SCALE_FLOOR) -> float:
    """``max|a - n| / max(max|a|, max|n|, floor)``."""
    scale = max(np.abs(analytic).max(initial=0), np.abs(numeric).max(initial=0), floor)
    return float(np.abs(analytic - numeric).max() / scale)


def check_gradients(fn: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = EPS) -> float:
    """Relative error of the joint gradient over all ``inputs`` of a scalar ``fn``.

    Errors are scaled by the largest gradient entry of the whole case, so a
    block whose true gradient is identically zero (a key bias under softmax)
    is judged against the layer's gradient magnitude, not its own roundoff.
    """
    for t in inputs:
        t.grad = None
    backward(fn(*inputs), inputs)
    analytic, numeric = [], []
    for t in inputs:
        numeric.append(numerical_grad(lambda: float(fn(*inputs).item()), t.data, eps).ravel())
        analytic.append(t.grad.ravel())
    return relative_error(np.concatenate(analytic), np.concatenate(numeric))


def _projected(layer_fn: Callable[..., Tensor], proj: np.ndarray) -> Callable[..., Tensor]:
    """Turn a tensor-valued function into a scalar via a fixed random projection."""
    return lambda *args: tsum(mul(layer_fn(*args), Tensor(proj, dtype=np.float64)))


def _randn(rng, *shape, requires_grad=True) -> Tensor:
    return Tensor(rng.standard_normal(shape), requires_grad=requires_grad, dtype=np.float64)


def _module_case(module, x: Tensor, rng) -> tuple[Callable, list[Tensor]]:
    with_params = [x] + module.parameters()
    out_shape = module(x).shape
    proj = rng.standard_normal(out_shape)
    return _projected(lambda *args: module(args[0]), proj), with_params


def _case_conv2d(rng):
    m = Conv2d(3, 4, 3, 1, 1, rng=rng, dtype=np.float64)
    m.bias.data[:] = rng.standard_normal(4)
    return _module_case(m, _randn(rng, 2, 3, 5, 5), rng)


def _case_resblock(rng):
    m = ResBlock(3, rng=rng, dtype=np.float64)
    for p in (m.conv1.bias, m.conv2.bias):
        p.data[:] = rng.standard_normal(p.shape) * 0.1
    # redraw until both ReLUs see inputs clear of the kink by 100*EPS
    while True:
        x = _randn(rng, 1, 3, 5, 5)
        inner = m.conv1(x).data
        outer = x.data + m.conv2(Tensor(np.maximum(inner, 0), dtype=np.float64)).data
        if min(np.abs(inner).min(), np.abs(outer).min()) > 100 * EPS:
            return _module_case(m, x, rng)


def _case_attention(rng):
    m = SelfAttention(8, rng=rng, dtype=np.float64)
    m.gamma.data[:] = 0.7  # a zero gate would hide the q/k/v gradients
    for p in (m.q.bias, m.k.bias, m.v.bias):
        p.data[:] = rng.standard_normal(p.shape) * 0.1
    return _module_case(m, _randn(rng, 2, 8, 3, 2), rng)


def _case_maxpool(rng):
    # distinct values with gaps well above EPS so no perturbation flips an argmax
    vals = rng.permutation(2 * 3 * 6 * 5).astype(np.float64) * 0.01 + rng.uniform(0, 0.001, 2 * 3 * 6 * 5)
    x = Tensor(vals.reshape(2, 3, 6, 5), requires_grad=True, dtype=np.float64)
    proj = rng.standard_normal((2, 3, 3, 2))
    return _projected(lambda t: F.max_pool2d(t, 2, 2), proj), [x]


def _case_adaptive_avgpool(rng):
    x = _randn(rng, 2, 3, 5, 6)
    proj = rng.standard_normal((2, 3, 3, 3))
    return _projected(lambda t: F.adaptive_avg_pool2d(t, 3), proj), [x]


def _case_linear(rng):
    m = Linear(6, 4, rng=rng, dtype=np.float64)
    m.bias.data[:] = rng.standard_normal(4)
    return _module_case(m, _randn(rng, 3, 6), rng)


def _case_cross_entropy(rng):
    logits = _randn(rng, 2, 4)
    labels = np.array([1, 3])
    weights = np.array([0.6383, 0.5850, 1.5361, 13.6786])
    return (lambda t: weighted_cross_entropy(t, labels, weights)), [logits]


CASES: dict[str, Callable] = {
    "conv2d": _case_conv2d,
    "resblock": _case_resblock,
    "self-attention": _case_attention,
    "maxpool": _case_maxpool,
    "adaptive-avgpool": _case_adaptive_avgpool,
    "linear": _case_linear,
    "weighted-cross-entropy": _case_cross_entropy,
}


def run_all(seed: int = 0, eps: float = EPS) -> dict[str, float]:
    """Max relative gradient error per layer type, in float64."""
    results = {}
    for i, (name, make) in enumerate(CASES.items()):
        fn, inputs = make(np.random.default_rng([seed, i]))
        results[name] = check_gradients(fn, inputs, eps)
    return results
