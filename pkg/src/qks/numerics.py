"""Dense kernels with hand-written backward passes, a finite-difference
gradient checker and the seeded generator every random draw goes through.

Tensors are plain ``numpy.ndarray`` values of dtype float32 or float64.
Kernels operate on the trailing two axes so a leading batch axis passes
through untouched.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Dict, Mapping, Tuple

import numpy as np
from scipy.special import erfc

Tensor = np.ndarray

DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf appeared where only finite values are allowed."""


class NonDeterminismError(RuntimeError):
    """Two evaluations of the same function at the same point disagreed."""


def as_tensor(x, dtype=np.float64) -> Tensor:
    t = np.ascontiguousarray(x, dtype=dtype)
    if t.dtype not in DTYPES:
        raise TypeError(f"unsupported dtype {t.dtype}")
    return t


def check_finite(x: Tensor, what: str = "tensor") -> Tensor:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"non-finite values in {what}")
    return x


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the trailing two axes."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    if a.dtype != b.dtype:
        raise TypeError(f"matmul dtype mismatch: {a.dtype} vs {b.dtype}")
    return a @ b


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` on the last axis of ``x``."""
    y = matmul(x, w)
    if b is not None:
        y = y + b
    return y


def linear_backward(dy: Tensor, x: Tensor, w: Tensor, with_bias: bool = True):
    """Return ``(dx, dw, db)``; batch axes of ``x``/``dy`` are summed into
    ``dw`` and ``db``."""
    dx = dy @ w.T
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    dw = x2.T @ dy2
    db = dy2.sum(axis=0) if with_bias else None
    return dx, dw, db


def softmax_rows(x: Tensor) -> Tensor:
    """Row softmax over the last axis with max subtraction."""
    check_finite(x, "softmax input")
    return softmax_rows_unchecked(x)


def softmax_rows_unchecked(x: Tensor) -> Tensor:
    z = x - x.max(axis=-1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=-1, keepdims=True)
    return z


def softmax_rows_backward(dy: Tensor, y: Tensor) -> Tensor:
    return y * (dy - (dy * y).sum(axis=-1, keepdims=True))


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    return layernorm_forward(x, gain, bias, eps)[0]


def layernorm_forward(x, gain, bias, eps=1e-5):
    if x.shape[-1] < 1:
        raise ShapeError("layernorm needs at least one feature")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gain + bias, (xhat, rstd, gain)


def layernorm_backward(dy, cache):
    """Return ``(dx, dgain, dbias)``."""
    xhat, rstd, gain = cache
    d = xhat.shape[-1]
    dy2 = dy.reshape(-1, d)
    dgain = (dy2 * xhat.reshape(-1, d)).sum(axis=0)
    dbias = dy2.sum(axis=0)
    dxhat = dy * gain
    dx = rstd * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dgain, dbias


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact Gaussian-error linear unit, ``x * Phi(x)``."""
    return gelu_forward(x)[0]


def gelu_forward(x: Tensor):
    """Return ``(gelu(x), cdf)``; pass the cdf back to :func:`gelu_backward`."""
    # erfc keeps full relative precision in the negative tail where
    # 1 + erf(.) would cancel
    cdf = erfc(x * -_INV_SQRT2)
    cdf *= 0.5
    return x * cdf, cdf


def gelu_backward(dy: Tensor, x: Tensor, cdf: Tensor | None = None) -> Tensor:
    if cdf is None:
        cdf = gelu_forward(x)[1]
    pdf = np.exp(-0.5 * x * x)
    pdf *= x
    pdf *= _INV_SQRT2PI
    pdf += cdf
    pdf *= dy
    return pdf


def softplus(x: Tensor) -> Tensor:
    return np.logaddexp(0.0, x).astype(np.result_type(x, np.float32), copy=False)


def sigmoid(x: Tensor) -> Tensor:
    x = np.asarray(x)
    out = np.empty_like(x, dtype=np.result_type(x, np.float32))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckEntry:
    name: str
    max_rel_err: float
    worst_index: Tuple[int, ...]
    analytic: float
    numeric: float
    passed: bool


def rel_err(a, n):
    return np.abs(a - n) / np.maximum(1e-8, np.abs(a) + np.abs(n))


def grad_check(
    f: Callable[[Dict[str, Tensor]], Tuple[float, Mapping[str, Tensor]]],
    params: Dict[str, Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    names=None,
) -> Dict[str, GradCheckEntry]:
    """Compare analytic gradients with central differences.

    ``f(params)`` must return ``(loss, grads)`` where ``grads`` maps every
    checked name to an array shaped like the parameter. Parameters are
    perturbed in place and restored afterwards.
    """
    for k, v in params.items():
        if v.dtype != np.float64:
            raise TypeError(f"grad_check requires float64, {k} is {v.dtype}")
    loss0, grads = f(params)
    loss1, _ = f(params)
    if float(loss0) != float(loss1):
        raise NonDeterminismError(
            f"function is not deterministic: {loss0!r} != {loss1!r}"
        )

    report = {}
    for name in names if names is not None else list(grads):
        p = params[name]
        g = np.asarray(grads[name], dtype=np.float64)
        num = np.zeros_like(p)
        flat = p.reshape(-1)
        nflat = num.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = float(f(params)[0])
            flat[i] = old - h
            fm = float(f(params)[0])
            flat[i] = old
            nflat[i] = (fp - fm) / (2.0 * h)
        err = rel_err(g, num)
        idx = np.unravel_index(int(np.argmax(err)), err.shape) if err.size else ()
        worst = float(err[idx]) if err.size else 0.0
        report[name] = GradCheckEntry(
            name=name,
            max_rel_err=worst,
            worst_index=tuple(int(i) for i in idx),
            analytic=float(g[idx]) if err.size else 0.0,
            numeric=float(num[idx]) if err.size else 0.0,
            passed=worst <= tol,
        )
    return report


# ---------------------------------------------------------------------------
# random numbers
# ---------------------------------------------------------------------------


class Rng:
    """Seeded PCG64 stream.

    Child streams are derived from ``(seed, *keys)`` through
    ``numpy.random.SeedSequence``, so the same seed and key path always give
    the same numbers regardless of call order elsewhere.
    """

    def __init__(self, seed: int, *keys: int):
        self.seed = int(seed)
        self.keys = tuple(int(k) for k in keys)
        ss = np.random.SeedSequence([self.seed & 0xFFFFFFFFFFFFFFFF, *self.keys])
        self._bitgen = np.random.PCG64(ss)
        self._gen = np.random.Generator(self._bitgen)

    def child(self, *keys: int) -> "Rng":
        return Rng(self.seed, *self.keys, *keys)

    def raw(self, n: int) -> np.ndarray:
        """Next ``n`` raw 64-bit outputs."""
        return self._bitgen.random_raw(n)

    def uniform(self, low, high, shape, dtype=np.float64) -> Tensor:
        return self._gen.uniform(low, high, size=shape).astype(dtype)

    def normal(self, std, shape, dtype=np.float64) -> Tensor:
        return (std * self._gen.standard_normal(size=shape)).astype(dtype)

    def integers(self, low, high, size=None):
        """Integers in ``[low, high]`` inclusive."""
        return self._gen.integers(low, high, size=size, endpoint=True)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, k: int) -> np.ndarray:
        return self._gen.choice(n, size=k, replace=False)
