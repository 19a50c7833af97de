"""Reverse-mode automatic differentiation on numpy arrays.

A ``Tensor`` wraps a contiguous row-major numpy buffer (float32 by default;
float64 is reserved for gradient checking). Operations executed while a
``GradTape`` is active append records in execution order, which is already a
valid topological order, so ``GradTape.backward`` simply walks the records in
reverse and accumulates gradients per tensor identity. Tensors are treated as
immutable once produced; parameter updates happen between tapes.
"""

from __future__ import annotations

import numpy as np

_FLOAT_DTYPES = (np.float32, np.float64)

_TAPES: list["GradTape"] = []


class Tensor:
    """Value node: numpy buffer plus a requires_grad flag."""

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        if arr.dtype not in _FLOAT_DTYPES:
            raise TypeError(f"unsupported dtype {arr.dtype}")
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)

    @property
    def dims(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(dims={self.dims}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) and dtype is None else Tensor(
        x.data if isinstance(x, Tensor) else x, dtype=dtype)


class GradTape:
    """Records ops for one forward pass and replays them backward.

    Records are (output, inputs, backward_fn) triples appended in execution
    order. ``backward_fn(g)`` maps the output gradient to one gradient (or
    None) per input, each matching that input's dims exactly.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], object]] = []
        self._grads: dict[int, np.ndarray] | None = None

    def __enter__(self) -> "GradTape":
        _TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPES.pop()
        if popped is not self:
            raise RuntimeError("tape exited out of order")
        return False

    def _record(self, out: Tensor, inputs: tuple[Tensor, ...], backward) -> None:
        self._records.append((out, inputs, backward))

    def backward(self, output: Tensor, seed=None) -> None:
        """Accumulate gradients of ``output`` w.r.t. every recorded tensor.

        ``seed`` defaults to ones of the output's dims (sum-reduction
        semantics for non-scalar outputs).
        """
        if not isinstance(output, Tensor):
            raise TypeError("backward target must be a Tensor")
        g0 = np.ones_like(output.data) if seed is None else \
            np.broadcast_to(np.asarray(seed, dtype=output.data.dtype), output.data.shape).copy()
        grads: dict[int, np.ndarray] = {id(output): g0}
        for out, inputs, backward in reversed(self._records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            in_grads = backward(g)
            for t, gi in zip(inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if gi.shape != t.data.shape:
                    raise RuntimeError(
                        f"gradient dims {gi.shape} do not match value dims {t.data.shape}")
                prev = grads.get(id(t))
                grads[id(t)] = gi if prev is None else prev + gi
        self._grads = grads

    def grad(self, t: Tensor) -> np.ndarray | None:
        if self._grads is None:
            raise RuntimeError("backward has not run on this tape")
        return self._grads.get(id(t))


def _active_tape() -> GradTape | None:
    return _TAPES[-1] if _TAPES else None


def _emit(out_data: np.ndarray, inputs: tuple[Tensor, ...], backward) -> Tensor:
    tape = _active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=track, dtype=out_data.dtype)
    if track:
        tape._record(out, inputs, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # Reduce a broadcasted gradient back to the operand's dims.
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _emit(out, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.data.shape), -_unbroadcast(g, b.data.shape)

    return _emit(out, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def backward(g):
        ga = _unbroadcast(g * b.data, a.data.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.data.shape) if b.requires_grad else None
        return ga, gb

    return _emit(out, (a, b), backward)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out = a.data * s

    def backward(g):
        return (g * s,)

    return _emit(out, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes follow numpy
    broadcasting."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError("matmul operands must have at least 2 dims")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ValueError(f"matmul inner dims differ: {a.dims} @ {b.dims}")
    out = a.data @ b.data

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape)
        return ga, gb

    return _emit(out, (a, b), backward)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = a.data.reshape(shape)

    def backward(g):
        return (g.reshape(a.data.shape),)

    return _emit(out, (a,), backward)


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    out = a.data.transpose(axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        return (g.transpose(inv),)

    return _emit(out, (a,), backward)


def roll(a: Tensor, shifts: tuple[int, ...], axes: tuple[int, ...]) -> Tensor:
    """Cyclic shift along the given axes (used by shifted-window attention)."""
    out = np.roll(a.data, shifts, axis=axes)
    inv = tuple(-s for s in shifts)

    def backward(g):
        return (np.roll(g, inv, axis=axes),)

    return _emit(out, (a,), backward)


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ValueError("concat of zero tensors")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, offsets, axis=axis))

    return _emit(out, tuple(tensors), backward)


def take_rows(table: Tensor, idx) -> Tensor:
    """Gather rows of ``table`` by integer index; backward scatter-adds."""
    idx = np.asarray(idx)
    if idx.ndim != 1 or not np.issubdtype(idx.dtype, np.integer):
        raise ValueError("take_rows index must be a 1-d integer array")
    if idx.size and (idx.min() < 0 or idx.max() >= table.data.shape[0]):
        raise IndexError("take_rows index out of range")
    out = table.data[idx]

    def backward(g):
        acc = np.zeros_like(table.data)
        np.add.at(acc, idx, g)
        return (acc,)

    return _emit(out, (table,), backward)


def sum_all(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum(), dtype=a.data.dtype)

    def backward(g):
        return (np.broadcast_to(g, a.data.shape).astype(a.data.dtype, copy=True),)

    return _emit(out, (a,), backward)


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    out = np.asarray(a.data.mean(), dtype=a.data.dtype)

    def backward(g):
        return (np.broadcast_to(g / n, a.data.shape).astype(a.data.dtype, copy=True),)

    return _emit(out, (a,), backward)


def absolute(a: Tensor) -> Tensor:
    """Elementwise |x| with subgradient 0 at the kink."""
    out = np.abs(a.data)

    def backward(g):
        return (g * np.sign(a.data),)

    return _emit(out, (a,), backward)


def grad_check(op, point: Tensor, h: float = 1e-5) -> float:
    """Max relative error between taped and central-difference gradients.

    ``op`` maps one Tensor to one Tensor and is evaluated sum-reduced. The
    check runs in 64-bit; each coordinate is stepped by ``h * max(1, |x_i|)``.
    Relative error per coordinate is |a - b| / max(|a|, |b|, 1e-8).
    """
    if point.data.dtype != np.float64:
        raise ValueError("grad_check requires a float64 point")
    x = Tensor(point.data.copy(), requires_grad=True, dtype=np.float64)
    with GradTape() as tape:
        out = op(x)
        if not isinstance(out, Tensor):
            raise TypeError("op must return a Tensor")
        if not np.isfinite(out.data).all():
            raise FloatingPointError("op produced non-finite values at the check point")
        total = sum_all(out)
    tape.backward(total)
    analytic = tape.grad(x)
    if analytic is None:
        analytic = np.zeros_like(x.data)
    analytic = analytic.reshape(-1)

    flat = x.data.reshape(-1)
    numeric = np.empty_like(flat)
    for i in range(flat.size):
        step = h * max(1.0, abs(flat[i]))
        vals = []
        for sign in (1.0, -1.0):
            pert = flat.copy()
            pert[i] += sign * step
            y = op(Tensor(pert.reshape(x.data.shape), dtype=np.float64))
            fy = float(np.sum(y.data))
            if not np.isfinite(fy):
                raise FloatingPointError(f"non-finite op value while perturbing coordinate {i}")
            vals.append(fy)
        numeric[i] = (vals[0] - vals[1]) / (2.0 * step)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
