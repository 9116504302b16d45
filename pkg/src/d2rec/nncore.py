"""Dense layers with hand-written backward passes, Adam, and a gradient checker.

Matrices are plain 2-D numpy arrays. Every backward function takes the
forward inputs (or outputs, where cheaper) plus the upstream gradient and
returns the gradient with respect to its inputs.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np


class DimensionError(ValueError):
    pass


def _check_same(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


@dataclass
class AffineLayer:
    weight: np.ndarray  # [in, out]
    bias: np.ndarray  # [out]
    grad_weight: np.ndarray = field(init=False)
    grad_bias: np.ndarray = field(init=False)

    def __post_init__(self):
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise DimensionError(
                f"affine: weight {self.weight.shape} incompatible with bias {self.bias.shape}")
        self.grad_weight = np.zeros_like(self.weight)
        self.grad_bias = np.zeros_like(self.bias)

    @classmethod
    def init(cls, n_in: int, n_out: int, rng: np.random.Generator, dtype=np.float64):
        # He-uniform, suited to the ReLU that follows every head
        bound = np.sqrt(6.0 / n_in)
        w = rng.uniform(-bound, bound, size=(n_in, n_out)).astype(dtype)
        return cls(w, np.zeros(n_out, dtype=dtype))

    @property
    def shape(self) -> tuple[int, int]:
        return self.weight.shape

    def params(self) -> list[np.ndarray]:
        return [self.weight, self.bias]

    def grads(self) -> list[np.ndarray]:
        return [self.grad_weight, self.grad_bias]

    def zero_grad(self) -> None:
        self.grad_weight[...] = 0.0
        self.grad_bias[...] = 0.0

    def astype(self, dtype) -> "AffineLayer":
        return AffineLayer(self.weight.astype(dtype), self.bias.astype(dtype))


def affine_forward(layer: AffineLayer, x: np.ndarray) -> np.ndarray:
    if x.ndim != 2 or x.shape[1] != layer.weight.shape[0]:
        raise DimensionError(
            f"affine: input {x.shape} does not match weight {layer.weight.shape}")
    return x @ layer.weight + layer.bias


def affine_backward(layer: AffineLayer, x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Accumulate weight/bias grads into ``layer`` and return d(loss)/d(x)."""
    if upstream.shape != (x.shape[0], layer.weight.shape[1]):
        raise DimensionError(
            f"affine backward: upstream {upstream.shape} vs expected "
            f"{(x.shape[0], layer.weight.shape[1])}")
    layer.grad_weight += x.T @ upstream
    layer.grad_bias += upstream.sum(axis=0)
    return upstream @ layer.weight.T


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    # derivative at exactly 0 is 0
    _check_same(x, upstream, "relu backward")
    return upstream * (x > 0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    out = np.empty_like(x, dtype=np.result_type(x, np.float32))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(out: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Takes the sigmoid *output*, not its input."""
    _check_same(out, upstream, "sigmoid backward")
    return upstream * out * (1.0 - out)


def hadamard(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _check_same(a, b, "hadamard")
    return a * b


def hadamard_backward(a, b, upstream):
    _check_same(a, upstream, "hadamard backward")
    return upstream * b, upstream * a


def rowdot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise dot product, one scalar per row."""
    _check_same(a, b, "rowdot")
    if a.ndim == 1:
        return np.dot(a, b)
    return np.einsum("ij,ij->i", a, b)


def rowdot_backward(a, b, upstream):
    _check_same(a, b, "rowdot backward")
    g = upstream[:, None]
    return g * b, g * a


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], **kw) -> "AdamState":
        return cls(m=[np.zeros_like(p) for p in params],
                   v=[np.zeros_like(p) for p in params], **kw)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray],
              state: AdamState) -> Sequence[np.ndarray]:
    """In-place bias-corrected Adam update; returns ``params``."""
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    if len(state.m) != len(params) or len(grads) != len(params):
        raise DimensionError("adam: parameter/gradient/state count mismatch")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or m.shape != p.shape:
            raise DimensionError(f"adam: shape mismatch {p.shape} vs {g.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype, copy=False)
    return params


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst: tuple | None  # (param index, flat coordinate)
    passed: bool
    message: str = ""


def grad_check(closure: Callable[[], tuple[float, Sequence[np.ndarray]]],
               params: Sequence[np.ndarray], h: float = 1e-5,
               tolerance: float = 1e-4) -> GradCheckResult:
    """Compare analytic gradients against central differences.

    ``closure`` evaluates the loss and analytic gradients at the current
    contents of ``params`` (which are perturbed in place and restored).
    """
    _, analytic = closure()
    analytic = [np.array(g, dtype=np.float64, copy=True) for g in analytic]
    worst_err, worst = 0.0, None
    for k, p in enumerate(params):
        flat = p.reshape(-1)
        ga = analytic[k].reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            lp, _ = closure()
            flat[j] = orig - h
            lm, _ = closure()
            flat[j] = orig
            if not (np.isfinite(lp) and np.isfinite(lm)):
                return GradCheckResult(float("inf"), (k, j), False,
                                       f"non-finite loss at param {k} coordinate {j}")
            num = (lp - lm) / (2.0 * h)
            err = abs(ga[j] - num) / max(abs(ga[j]), abs(num), 1e-12)
            if err > worst_err:
                worst_err, worst = err, (k, j)
    return GradCheckResult(worst_err, worst, worst_err < tolerance)


# -- binary parameter container ---------------------------------------------

PARAM_MAGIC = b"D2PRM"
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def save_sections(path, sections: dict[str, tuple[np.ndarray, np.ndarray | None]]) -> None:
    """Write named (weight, bias) sections; little-endian, row-major.

    Layout: magic, u32 n_sections, then per section a header
    (u16 name length, name, u32 rows, u32 cols, u8 dtype, u8 has_bias)
    followed immediately by the weight and the optional bias payload.
    """
    out = bytearray(PARAM_MAGIC)
    out += struct.pack("<I", len(sections))
    for name, (w, b) in sections.items():
        w = np.ascontiguousarray(w)
        code = _DTYPE_CODES[w.dtype]
        enc = name.encode("utf-8")
        out += struct.pack("<H", len(enc)) + enc
        out += struct.pack("<IIBB", w.shape[0], w.shape[1], code, b is not None)
        out += w.astype(w.dtype.newbyteorder("<"), copy=False).tobytes()
        if b is not None:
            out += np.ascontiguousarray(b, dtype=w.dtype).astype(
                w.dtype.newbyteorder("<"), copy=False).tobytes()
    Path(path).write_bytes(bytes(out))


def load_sections(path) -> dict[str, tuple[np.ndarray, np.ndarray | None]]:
    data = Path(path).read_bytes()
    if data[:5] != PARAM_MAGIC:
        raise ValueError(f"{path}: not a parameter container (bad magic)")
    (n,) = struct.unpack_from("<I", data, 5)
    off = 9
    sections = {}
    for _ in range(n):
        (ln,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off:off + ln].decode("utf-8")
        off += ln
        rows, cols, code, has_bias = struct.unpack_from("<IIBB", data, off)
        off += 10
        dt = _CODE_DTYPES[code].newbyteorder("<")
        w = np.frombuffer(data, dtype=dt, count=rows * cols, offset=off).reshape(rows, cols)
        off += rows * cols * dt.itemsize
        b = None
        if has_bias:
            b = np.frombuffer(data, dtype=dt, count=cols, offset=off)
            off += cols * dt.itemsize
        sections[name] = (w.astype(_CODE_DTYPES[code]), None if b is None else b.astype(_CODE_DTYPES[code]))
    return sections
