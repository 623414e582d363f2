"""Dense float64 tensors with define-by-run reverse-mode differentiation.

A Tensor wraps a numpy array. Every operation that consumes tensors records
its inputs and a backward rule on the result, so calling ``backward()`` on a
scalar walks the recorded graph once in reverse topological order and
accumulates d(scalar)/d(tensor) into every tensor with ``requires_grad``.
Accumulation is additive: a second ``backward()`` without zeroing doubles the
gradients.

The module also holds the binary checkpoint format used to persist named
parameter tensors, and ``grad_check``, the central-finite-difference oracle
the test suite runs against every differentiable block.
"""

from __future__ import annotations

import struct
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ShapeError

# Toggled by tests: verify forward results stay finite.
strict_checks = False

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """n-dimensional float64 array node in the autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def backward(self):
        """Accumulate d(self)/d(t) into ``t.grad`` for every reachable tensor.

        ``self`` must be scalar. Gradients of tensors not on a path from
        ``self`` are left untouched (zero by convention).
        """
        if self.data.size != 1:
            raise ShapeError(f"backward requires a scalar, got shape {self.data.shape}")

        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))

        # Flows live in a side table during the sweep so that repeated
        # backward calls add into .grad instead of compounding through it.
        flows: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = flows.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                if node.grad is None:
                    node.grad = g.copy()
                else:
                    np.add(node.grad, g, out=node.grad)
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in flows:
                    flows[key] = flows[key] + pg
                else:
                    flows[key] = pg


def make_op(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    """Wrap an op result, recording the graph edge when grads are enabled."""
    if strict_checks and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite values produced by a forward op")
    requires = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data)
    if requires:
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _check_same_shape(a: Tensor, b: Tensor, op: str):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    return make_op(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")
    return make_op(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    return make_op(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def neg(a: Tensor) -> Tensor:
    return make_op(-a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return make_op(a.data * s, (a,), lambda g: (g * s,))


def absolute(a: Tensor) -> Tensor:
    # subgradient at 0 is 0 (np.sign(0) == 0)
    return make_op(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def square(a: Tensor) -> Tensor:
    return make_op(a.data * a.data, (a,), lambda g: (g * (2.0 * a.data),))


def reduce_sum(a: Tensor) -> Tensor:
    if a.data.size == 0:
        raise ShapeError("reduce_sum of an empty tensor")
    return make_op(
        np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.data.shape).copy(),)
    )


def reduce_mean(a: Tensor) -> Tensor:
    if a.data.size == 0:
        raise ShapeError("reduce_mean of an empty tensor")
    n = a.data.size
    return make_op(
        np.asarray(a.data.mean()),
        (a,),
        lambda g: (np.broadcast_to(g / n, a.data.shape).copy(),),
    )


def grad_of(t: Tensor) -> np.ndarray:
    """Gradient buffer of ``t``, zeros when nothing reached it."""
    if t.grad is None:
        return np.zeros_like(t.data)
    return t.grad


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must be scalar-valued. The relative error at each coordinate is
    |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
    """
    probe = Tensor(x.data.copy(), requires_grad=True)
    out = f(probe)
    if out.data.size != 1:
        raise ShapeError("grad_check requires a scalar-valued function")
    out.backward()
    analytic = grad_of(probe).copy()

    flat = probe.data.ravel()
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(f(probe).data)
        flat[i] = orig - eps
        lo = float(f(probe).data)
        flat[i] = orig
        numeric[i] = (hi - lo) / (2.0 * eps)
    numeric = numeric.reshape(analytic.shape)

    denom = np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))


# ---------------------------------------------------------------------------
# Checkpoint serialization
#
# Layout (all little-endian): magic "DFCK", u32 version, u32 tensor count,
# then per tensor: u32 name length, UTF-8 name, u32 rank, u64 extents,
# f64 payload.
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"DFCK"
CHECKPOINT_VERSION = 1


def write_checkpoint_bytes(tensors: dict[str, "Tensor | np.ndarray"]) -> bytes:
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(tensors))]
    for name, t in tensors.items():
        arr = np.asarray(t.data if isinstance(t, Tensor) else t, dtype=np.float64)
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.astype("<f8").tobytes())
    return b"".join(chunks)


def read_checkpoint_bytes(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError("not a parameter checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    offset = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        name = blob[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (rank,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        shape = struct.unpack_from(f"<{rank}Q", blob, offset)
        offset += 8 * rank
        n = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=offset).reshape(shape)
        offset += 8 * n
        out[name] = arr.astype(np.float64)
    return out


def write_checkpoint(path, tensors: dict[str, "Tensor | np.ndarray"]):
    with open(path, "wb") as fh:
        fh.write(write_checkpoint_bytes(tensors))


def read_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return read_checkpoint_bytes(fh.read())
