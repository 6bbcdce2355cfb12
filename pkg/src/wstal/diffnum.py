"""Minimal reverse-mode differentiable numerics on numpy arrays.

Just enough machinery for the two small temporal networks here: affine maps,
same-length 1-D convolution, pointwise nonlinearities, softmax-family ops,
reductions, and Adam.  Every primitive carries a hand-derived backward rule;
``grad_check`` verifies any scalar-valued composition against central finite
differences.

Storage is float32; reductions accumulate in float64 and cast back.  Ops
preserve the dtype of their inputs, so a composition can be re-evaluated in
float64 (as ``grad_check`` does) without touching the op implementations.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import ContractViolation, FormatError, TrainingError


def _expit(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class Tensor:
    """Array node in a reverse-mode graph.

    ``data`` holds the value, ``grad`` the accumulated adjoint (allocated on
    first use, reset to None between optimizer steps).  Interior nodes keep
    references to their parents and a closure that pushes the adjoint one
    step backward.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    # keep numpy from hijacking `ndarray <op> Tensor`; we want the reflected dunders
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, dtype=np.float32):
        self.data = np.asarray(data, dtype=dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward = None

    @classmethod
    def _result(cls, data: np.ndarray, parents: tuple, backward) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.grad = None
        t.requires_grad = any(p.requires_grad for p in parents)
        t._parents = parents if t.requires_grad else ()
        t._backward = backward if t.requires_grad else None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Reverse pass from a scalar node, accumulating into ``grad`` fields."""
        if self.data.size != 1:
            raise ContractViolation(f"backward() needs a scalar, got shape {self.data.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward()

    # arithmetic sugar; python scalars and arrays are wrapped as constants
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other, self), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return pow_const(self, exponent)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype), requires_grad=False, dtype=like.data.dtype)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcasted gradient back down to ``shape``."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    out_data = a.data + b.data

    def bw():
        _accum(a, _unbroadcast(out.grad, a.data.shape))
        _accum(b, _unbroadcast(out.grad, b.data.shape))

    out = Tensor._result(out_data, (a, b), bw)
    return out


def sub(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    out_data = a.data - b.data

    def bw():
        _accum(a, _unbroadcast(out.grad, a.data.shape))
        _accum(b, _unbroadcast(-out.grad, b.data.shape))

    out = Tensor._result(out_data, (a, b), bw)
    return out


def mul(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    out_data = a.data * b.data

    def bw():
        _accum(a, _unbroadcast(out.grad * b.data, a.data.shape))
        _accum(b, _unbroadcast(out.grad * a.data, b.data.shape))

    out = Tensor._result(out_data, (a, b), bw)
    return out


def div(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    out_data = a.data / b.data

    def bw():
        _accum(a, _unbroadcast(out.grad / b.data, a.data.shape))
        _accum(b, _unbroadcast(-out.grad * a.data / (b.data * b.data), b.data.shape))

    out = Tensor._result(out_data, (a, b), bw)
    return out


def pow_const(a: Tensor, exponent: float) -> Tensor:
    out_data = a.data**exponent

    def bw():
        _accum(a, out.grad * exponent * a.data ** (exponent - 1))

    out = Tensor._result(out_data, (a,), bw)
    return out


def relu(x: Tensor) -> Tensor:
    out_data = np.maximum(x.data, 0)

    def bw():
        _accum(x, out.grad * (x.data > 0))

    out = Tensor._result(out_data, (x,), bw)
    return out


def sigmoid(x: Tensor) -> Tensor:
    out_data = _expit(x.data)

    def bw():
        _accum(x, out.grad * out_data * (1.0 - out_data))

    out = Tensor._result(out_data, (x,), bw)
    return out


def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)), computed without overflow; derivative is sigmoid."""
    out_data = np.maximum(x.data, 0) + np.log1p(np.exp(-np.abs(x.data)))

    def bw():
        _accum(x, out.grad * _expit(x.data))

    out = Tensor._result(out_data, (x,), bw)
    return out


def exp(x: Tensor) -> Tensor:
    out_data = np.exp(x.data)

    def bw():
        _accum(x, out.grad * out_data)

    out = Tensor._result(out_data, (x,), bw)
    return out


def log(x: Tensor) -> Tensor:
    out_data = np.log(x.data)

    def bw():
        _accum(x, out.grad / x.data)

    out = Tensor._result(out_data, (x,), bw)
    return out


def minimum(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    out_data = np.minimum(a.data, b.data)

    def bw():
        take_a = np.broadcast_to(a.data, out_data.shape) <= np.broadcast_to(b.data, out_data.shape)
        _accum(a, _unbroadcast(out.grad * take_a, a.data.shape))
        _accum(b, _unbroadcast(out.grad * ~take_a, b.data.shape))

    out = Tensor._result(out_data, (a, b), bw)
    return out


def maximum(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    out_data = np.maximum(a.data, b.data)

    def bw():
        take_a = np.broadcast_to(a.data, out_data.shape) >= np.broadcast_to(b.data, out_data.shape)
        _accum(a, _unbroadcast(out.grad * take_a, a.data.shape))
        _accum(b, _unbroadcast(out.grad * ~take_a, b.data.shape))

    out = Tensor._result(out_data, (a, b), bw)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ContractViolation(f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}")
    out_data = a.data @ b.data

    def bw():
        _accum(a, out.grad @ b.data.T)
        _accum(b, a.data.T @ out.grad)

    out = Tensor._result(out_data, (a, b), bw)
    return out


def transpose(x: Tensor) -> Tensor:
    out_data = x.data.T

    def bw():
        _accum(x, out.grad.T)

    out = Tensor._result(out_data, (x,), bw)
    return out


def reshape(x: Tensor, shape) -> Tensor:
    out_data = x.data.reshape(shape)

    def bw():
        _accum(x, out.grad.reshape(x.data.shape))

    out = Tensor._result(out_data, (x,), bw)
    return out


def affine(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """x @ weight + bias for a 2-D batch of row vectors."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.data.shape[1] != weight.data.shape[0]:
        raise ContractViolation(f"affine shape mismatch: x {x.data.shape} vs weight {weight.data.shape}")
    if bias.data.shape != (weight.data.shape[1],):
        raise ContractViolation(f"affine bias shape {bias.data.shape} vs weight {weight.data.shape}")
    out_data = x.data @ weight.data + bias.data

    def bw():
        _accum(x, out.grad @ weight.data.T)
        _accum(weight, x.data.T @ out.grad)
        _accum(bias, out.grad.sum(axis=0))

    out = Tensor._result(out_data, (x, weight, bias), bw)
    return out


def _conv_pads(width: int) -> tuple[int, int]:
    left = (width - 1) // 2
    return left, width - 1 - left


def conv1d(x: Tensor, kernel: Tensor, bias: Tensor, width: int) -> Tensor:
    """Same-length 1-D convolution over the time axis with zero padding.

    ``x`` is T x D_in, ``kernel`` is (width * D_in) x D_out with taps stacked
    along the first axis in window order, ``bias`` is D_out.  Position t sees
    the window [t - floor((w-1)/2), t + ceil((w-1)/2)].
    """
    if x.data.ndim != 2:
        raise ContractViolation(f"conv1d input must be 2-D, got shape {x.data.shape}")
    t_len, d_in = x.data.shape
    if kernel.data.shape[0] != width * d_in:
        raise ContractViolation(
            f"conv1d kernel shape {kernel.data.shape} incompatible with width {width} x D_in {d_in}"
        )
    d_out = kernel.data.shape[1]
    if bias.data.shape != (d_out,):
        raise ContractViolation(f"conv1d bias shape {bias.data.shape} vs D_out {d_out}")
    left, right = _conv_pads(width)
    padded = np.zeros((t_len + left + right, d_in), dtype=x.data.dtype)
    padded[left : left + t_len] = x.data
    windows = np.lib.stride_tricks.sliding_window_view(padded, width, axis=0)  # (T, D_in, w)
    cols = np.ascontiguousarray(windows.transpose(0, 2, 1)).reshape(t_len, width * d_in)
    out_data = cols @ kernel.data + bias.data

    def bw():
        g = out.grad
        _accum(kernel, cols.T @ g)
        _accum(bias, g.sum(axis=0))
        if x.requires_grad:
            gcols = (g @ kernel.data.T).reshape(t_len, width, d_in)
            gpad = np.zeros_like(padded)
            for j in range(width):
                gpad[j : j + t_len] += gcols[:, j, :]
            _accum(x, gpad[left : left + t_len])

    out = Tensor._result(out_data, (x, kernel, bias), bw)
    return out


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def bw():
        g = out.grad
        inner = (g * out_data).sum(axis=axis, keepdims=True)
        _accum(x, out_data * (g - inner))

    out = Tensor._result(out_data, (x,), bw)
    return out


def logsumexp(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    m = x.data.max(axis=axis, keepdims=True)
    out_keep = m + np.log(np.exp(x.data - m).sum(axis=axis, keepdims=True, dtype=np.float64)).astype(x.data.dtype)
    out_data = out_keep if keepdims else np.squeeze(out_keep, axis=axis) if axis is not None else out_keep.reshape(())

    def bw():
        w = np.exp(x.data - out_keep)
        g = out.grad if keepdims or axis is None else np.expand_dims(out.grad, axis)
        _accum(x, w * g)

    out = Tensor._result(out_data, (x,), bw)
    return out


def logaddexp(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    out_data = np.logaddexp(a.data, b.data)

    def bw():
        wa = _expit(np.broadcast_to(a.data, out_data.shape) - np.broadcast_to(b.data, out_data.shape))
        _accum(a, _unbroadcast(out.grad * wa, a.data.shape))
        _accum(b, _unbroadcast(out.grad * (1.0 - wa), b.data.shape))

    out = Tensor._result(out_data, (a, b), bw)
    return out


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = x.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64).astype(x.data.dtype)

    def bw():
        g = out.grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(x, np.broadcast_to(g, x.data.shape).copy())

    out = Tensor._result(out_data, (x,), bw)
    return out


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else x.data.shape[axis]
    out_data = (x.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64) / n).astype(x.data.dtype)

    def bw():
        g = out.grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(x, np.broadcast_to(g, x.data.shape) / n)

    out = Tensor._result(out_data, (x,), bw)
    return out


def topk_mean(x: Tensor, k: int, axis: int = 0) -> Tensor:
    """Mean of the k largest entries along ``axis`` (axis is removed)."""
    if not 1 <= k <= x.data.shape[axis]:
        raise ContractViolation(f"topk_mean needs 1 <= k <= {x.data.shape[axis]}, got k={k}")
    idx = np.argpartition(-x.data, k - 1, axis=axis)
    idx = np.take(idx, np.arange(k), axis=axis)
    vals = np.take_along_axis(x.data, idx, axis=axis)
    out_data = (vals.sum(axis=axis, dtype=np.float64) / k).astype(x.data.dtype)

    def bw():
        gx = np.zeros_like(x.data)
        g = np.expand_dims(out.grad, axis) / k
        # top-k indices are distinct within each slice, so assignment is safe
        np.put_along_axis(gx, idx, np.broadcast_to(g, idx.shape), axis=axis)
        _accum(x, gx)

    out = Tensor._result(out_data, (x,), bw)
    return out


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw():
        for t, start, stop in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * out_data.ndim
            sl[axis] = slice(start, stop)
            _accum(t, out.grad[tuple(sl)])

    out = Tensor._result(out_data, tuple(tensors), bw)
    return out


def gather_rows(x: Tensor, indices) -> Tensor:
    """Select rows of a 2-D tensor; backward scatter-adds."""
    idx = np.asarray(indices, dtype=np.intp)
    out_data = x.data[idx]

    def bw():
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, out.grad)
        _accum(x, gx)

    out = Tensor._result(out_data, (x,), bw)
    return out


def take_column(x: Tensor, col: int) -> Tensor:
    """Column ``col`` of a 2-D tensor as an (n, 1) tensor."""
    out_data = x.data[:, col : col + 1]

    def bw():
        gx = np.zeros_like(x.data)
        gx[:, col : col + 1] = out.grad
        _accum(x, gx)

    out = Tensor._result(out_data, (x,), bw)
    return out


def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    """Rows scaled to unit norm; a tiny floor keeps zero rows finite."""
    ss = (x.data * x.data).sum(axis=axis, keepdims=True)
    norm = np.sqrt(ss + np.asarray(1e-12, dtype=x.data.dtype))
    out_data = x.data / norm

    def bw():
        g = out.grad
        proj = (g * x.data).sum(axis=axis, keepdims=True)
        _accum(x, g / norm - x.data * proj / (norm**3))

    out = Tensor._result(out_data, (x,), bw)
    return out


class ModelParams:
    """Flat named collection of trainable tensors."""

    def __init__(self, tensors: dict[str, Tensor]):
        self._tensors = dict(tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self) -> list[str]:
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.grad = None

    def clone(self) -> "ModelParams":
        return ModelParams({n: Tensor(t.data.copy(), requires_grad=True) for n, t in self.items()})

    def as_arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.items()}


@dataclass
class AdamState:
    """Adam moments and step counter; one entry per parameter name."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: ModelParams, state: AdamState) -> None:
    """Standard bias-corrected Adam update; gradients are consumed (reset to None)."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    for name, t in params.items():
        g = t.grad
        if g is None:
            g = np.zeros_like(t.data)
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
        m = state.m.setdefault(name, np.zeros_like(t.data))
        v = state.v.setdefault(name, np.zeros_like(t.data))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        t.data -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
        t.grad = None


def grad_check(fn, inputs, step: float = 1e-3) -> float:
    """Max relative error between analytic and central-finite-difference gradients.

    ``fn`` maps tensors to a scalar tensor.  Both sides are evaluated in
    float64 so the comparison tests the backward formulas rather than
    float32 rounding.  Relative error per coordinate is
    |analytic - numeric| / max(1e-6, |analytic| + |numeric|).
    """
    arrays = [np.array(t.data if isinstance(t, Tensor) else t, dtype=np.float64) for t in inputs]
    leaves = [Tensor(a.copy(), requires_grad=True, dtype=np.float64) for a in arrays]
    out = fn(*leaves)
    out.backward()
    analytic = [l.grad if l.grad is not None else np.zeros_like(l.data) for l in leaves]

    def value() -> float:
        return float(fn(*[Tensor(a, dtype=np.float64) for a in arrays]).data)

    worst = 0.0
    for a_idx, arr in enumerate(arrays):
        flat = arr.reshape(-1)
        ana = analytic[a_idx].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = value()
            flat[i] = orig - step
            f_minus = value()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            denom = max(1e-6, abs(ana[i]) + abs(numeric))
            worst = max(worst, abs(ana[i] - numeric) / denom)
    return worst


CHECKPOINT_DTYPE = "<f4"


def save_checkpoint(path, params: ModelParams, meta: dict | None = None) -> None:
    """One JSON header line (names, shapes, meta) followed by the raw float32 payload."""
    names = params.names()
    header = {
        "names": names,
        "shapes": [list(params[n].data.shape) for n in names],
        "meta": meta or {},
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for n in names:
            fh.write(np.ascontiguousarray(params[n].data, dtype=CHECKPOINT_DTYPE).tobytes())


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise FormatError(f"{path}: missing checkpoint header line")
    try:
        header = json.loads(raw[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: invalid checkpoint header: {exc}") from exc
    payload = raw[nl + 1 :]
    tensors: dict[str, Tensor] = {}
    offset = 0
    for name, shape in zip(header["names"], header["shapes"]):
        count = int(np.prod(shape)) if shape else 1
        nbytes = 4 * count
        if offset + nbytes > len(payload):
            raise FormatError(f"{path}: truncated payload for parameter {name!r}", offset=nl + 1 + offset)
        arr = np.frombuffer(payload, dtype=CHECKPOINT_DTYPE, count=count, offset=offset).reshape(shape)
        tensors[name] = Tensor(arr.copy(), requires_grad=True)
        offset += nbytes
    if offset != len(payload):
        raise FormatError(f"{path}: {len(payload) - offset} trailing payload bytes", offset=nl + 1 + offset)
    return ModelParams(tensors), header.get("meta", {})
