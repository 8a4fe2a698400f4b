"""Dense-tensor arithmetic with reverse-mode differentiation, plus verification tools.

All primitives operate on :class:`Tensor` (a thin wrapper over a numpy array)
and record enough structure for :func:`backward` to accumulate gradients.
Precision is carried by the array dtype: float64 for verification, float32
for training. Primitives are deterministic; identical inputs give
bit-identical outputs within one precision mode.
"""

from __future__ import annotations

import json
from typing import Callable, Sequence

import numpy as np

_FLOAT_DTYPES = {"float64": np.float64, "float32": np.float32}

# Finite additive mask value: exp() underflows to exactly 0.0 for both dtypes,
# so masked attention slots contribute exactly nothing.
MASK_FILL = -1e30

_check_finite = True


class NonFiniteError(ArithmeticError):
    pass


class ShapeError(ValueError):
    pass


class CheckpointError(Exception):
    pass


def set_check_finite(flag: bool) -> bool:
    """Toggle the per-primitive NaN/Inf guard; returns the previous setting."""
    global _check_finite
    prev = _check_finite
    _check_finite = flag
    return prev


def _guard(arr: np.ndarray, op: str) -> None:
    if _check_finite:
        # one cheap reduction: any NaN/Inf poisons the sum
        if not np.isfinite(arr.sum()):
            raise NonFiniteError(f"non-finite values produced by {op}")


class Tensor:
    """Numpy array plus reverse-mode bookkeeping."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bw")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype)
        if not np.issubdtype(self.data.dtype, np.floating):
            self.data = self.data.astype(np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._bw: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return self.data.item()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)


def constant(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=False, dtype=dtype)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], bw, op: str) -> Tensor:
    _guard(data, op)
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._bw = bw
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _make(data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data - b.data

    def bw(g):
        return _unbroadcast(g, a.data.shape), -_unbroadcast(g, b.data.shape)

    return _make(data, (a, b), bw, "sub")


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data * b.data

    def bw(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return _make(data, (a, b), bw, "mul")


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def matmul(a, b) -> Tensor:
    """Matrix product with numpy batch-dimension broadcasting."""
    a, b = _as_tensor(a), _as_tensor(b)
    data = np.matmul(a.data, b.data)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        if ga.shape != a.data.shape:
            ga = _unbroadcast(ga, a.data.shape)
        if b.data.ndim == 2 and g.ndim > 2:
            # batched input, shared 2-D weight: one flat product
            gb = a.data.reshape(-1, a.data.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            if gb.shape != b.data.shape:
                gb = _unbroadcast(gb, b.data.shape)
        return ga, gb

    return _make(data, (a, b), bw, "matmul")


def transpose(a, axes: tuple[int, ...]) -> Tensor:
    a = _as_tensor(a)
    inverse = tuple(np.argsort(axes))
    return _make(
        np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose"
    )


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.data.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(data, tuple(parts), bw, "concat")


def gather_rows(a, idx) -> Tensor:
    """Select rows along axis 0; gradients scatter-add back."""
    a = _as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    data = a.data[idx]

    def bw(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return _make(data, (a,), bw, "gather_rows")


def scatter_rows(a, idx, rows) -> Tensor:
    """Functional row update: result equals ``a`` with ``a[idx] = rows``.

    ``idx`` entries must be unique.
    """
    a, rows = _as_tensor(a), _as_tensor(rows)
    idx = np.asarray(idx, dtype=np.intp)
    data = a.data.copy()
    data[idx] = rows.data

    def bw(g):
        ga = g.copy()
        ga[idx] = 0.0
        return ga, g[idx]

    return _make(data, (a, rows), bw, "scatter_rows")


def select_columns(a, idx) -> Tensor:
    """out[i] = a[i, idx[i]] for a 2-D input; returns a 1-D tensor."""
    a = _as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    rows = np.arange(a.data.shape[0])
    data = a.data[rows, idx]

    def bw(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, (rows, idx), g)
        return (ga,)

    return _make(data, (a,), bw, "select_columns")


def sum_all(a) -> Tensor:
    a = _as_tensor(a)
    shape = a.data.shape
    return _make(
        np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum_all"
    )


def relu(a) -> Tensor:
    a = _as_tensor(a)
    keep = a.data > 0
    return _make(a.data * keep, (a,), lambda g: (g * keep,), "relu")


def softmax(a, axis: int = -1) -> Tensor:
    """Exponential normalization with max-subtraction; rows sum to one."""
    a = _as_tensor(a)
    if not np.isfinite(a.data.sum()):
        raise NonFiniteError("softmax input contains NaN/Inf")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _make(y, (a,), bw, "softmax")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    if not np.isfinite(a.data.sum()):
        raise NonFiniteError("log_softmax input contains NaN/Inf")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    y = np.exp(out)

    def bw(g):
        return (g - y * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), bw, "log_softmax")


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit population variance, then affine."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    d = x.data.shape[-1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise ShapeError(
            f"layer_norm expects gamma/beta of shape ({d},), got "
            f"{gamma.data.shape} and {beta.data.shape}"
        )
    if eps <= 0:
        raise ValueError("eps must be positive")
    mean = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mean
    var = (centered**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    data = xhat * gamma.data + beta.data

    def bw(g):
        ghat = g * gamma.data
        gx = inv * (
            ghat
            - ghat.mean(axis=-1, keepdims=True)
            - xhat * (ghat * xhat).mean(axis=-1, keepdims=True)
        )
        flat_g = g.reshape(-1, d)
        flat_hat = xhat.reshape(-1, d)
        return gx, (flat_g * flat_hat).sum(axis=0), flat_g.sum(axis=0)

    return _make(data, (x, gamma, beta), bw, "layer_norm")


def linear(x, w, b=None) -> Tensor:
    out = matmul(x, w)
    return out if b is None else add(out, b)


def broadcast_add_row(m, v) -> Tensor:
    """Add one row vector to every row of a matrix (or batch of matrices)."""
    m, v = _as_tensor(m), _as_tensor(v)
    if m.data.shape[-1] != v.data.shape[-1]:
        raise ShapeError(
            f"row width {v.data.shape[-1]} does not match matrix width {m.data.shape[-1]}"
        )
    return add(m, v)


def backward(out: Tensor, seed_grad: np.ndarray | None = None) -> None:
    """Accumulate gradients of ``out`` into every tensor in its graph."""
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(out, False)]
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

    if seed_grad is None:
        if out.data.size != 1:
            raise ShapeError("backward() without seed gradient needs a scalar output")
        seed_grad = np.ones_like(out.data)
    out.grad = np.asarray(seed_grad, dtype=out.data.dtype)

    for node in reversed(topo):
        if node._bw is None or node.grad is None:
            continue
        for parent, g in zip(node._parents, node._bw(node.grad)):
            if g is None:
                continue
            if parent.grad is None:
                parent.grad = np.zeros_like(parent.data)
            parent.grad += g


class ParamStore:
    """Named tensors: learnable parameters plus fixed buffers.

    Name paths are unique across both sets; iteration is sorted by name so
    every consumer sees one deterministic order.
    """

    def __init__(self, dtype: str = "float64"):
        if dtype not in _FLOAT_DTYPES:
            raise ValueError(f"unsupported dtype {dtype!r}")
        self.dtype = dtype
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, Tensor] = {}

    def _check_name(self, name: str) -> None:
        if name in self.params or name in self.buffers:
            raise ValueError(f"duplicate tensor name {name!r}")

    def add_param(self, name: str, data) -> Tensor:
        self._check_name(name)
        t = Tensor(np.asarray(data, dtype=_FLOAT_DTYPES[self.dtype]), requires_grad=True)
        self.params[name] = t
        return t

    def add_buffer(self, name: str, data) -> Tensor:
        self._check_name(name)
        t = Tensor(np.asarray(data, dtype=_FLOAT_DTYPES[self.dtype]))
        self.buffers[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        if name in self.params:
            return self.params[name]
        if name in self.buffers:
            return self.buffers[name]
        raise KeyError(name)

    def __contains__(self, name: str) -> bool:
        return name in self.params or name in self.buffers

    def names(self) -> list[str]:
        return sorted(self.params)

    def buffer_names(self) -> list[str]:
        return sorted(self.buffers)

    def zero_grads(self) -> None:
        for name in self.names():
            self.params[name].grad = None

    def n_parameters(self) -> int:
        return sum(t.data.size for t in self.params.values())


def save_checkpoint(store: ParamStore, manifest_path, blob_path=None, extra: dict | None = None):
    """Write a JSON manifest plus one raw little-endian blob; round-trip is bit-exact."""
    manifest_path = str(manifest_path)
    blob_path = str(blob_path) if blob_path else manifest_path + ".bin"
    entries = []
    offset = 0
    chunks = []
    for name, learnable in [(n, True) for n in store.names()] + [
        (n, False) for n in store.buffer_names()
    ]:
        t = store[name]
        raw = t.data.astype("<" + t.data.dtype.str[1:], copy=False).tobytes()
        entries.append(
            {
                "name": name,
                "shape": list(t.data.shape),
                "dtype": str(t.data.dtype),
                "offset": offset,
                "learnable": learnable,
            }
        )
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "format_version": 1,
        "dtype": store.dtype,
        "blob": blob_path.rsplit("/", 1)[-1],
        "tensors": entries,
        "extra": extra or {},
    }
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    with open(blob_path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_checkpoint(manifest_path, blob_path=None) -> tuple[ParamStore, dict]:
    manifest_path = str(manifest_path)
    with open(manifest_path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("format_version") != 1:
        raise CheckpointError(
            f"unsupported checkpoint format_version {manifest.get('format_version')!r}"
        )
    if blob_path is None:
        prefix = manifest_path.rsplit("/", 1)[0] if "/" in manifest_path else "."
        blob_path = prefix + "/" + manifest["blob"]
    with open(blob_path, "rb") as fh:
        blob = fh.read()
    store = ParamStore(dtype=manifest["dtype"])
    for entry in manifest["tensors"]:
        dtype = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        start = entry["offset"]
        arr = np.frombuffer(
            blob, dtype=dtype.newbyteorder("<"), count=count, offset=start
        ).astype(dtype).reshape(entry["shape"])
        if entry["learnable"]:
            store.add_param(entry["name"], arr)
        else:
            store.add_buffer(entry["name"], arr)
    return store, manifest.get("extra", {})


def grad_check(
    f: Callable[[ParamStore], Tensor], params: ParamStore, eps: float = 1e-5
) -> float:
    """Max relative error between analytic gradients of ``f`` and central differences.

    Relative error per coordinate is |analytic - cd| / max(|analytic|, |cd|, 1e-8).
    Probes every coordinate of every learnable tensor.
    """
    params.zero_grads()
    out = f(params)
    backward(out)
    analytic = {
        name: (
            params.params[name].grad.copy()
            if params.params[name].grad is not None
            else np.zeros_like(params.params[name].data)
        )
        for name in params.names()
    }

    worst = 0.0
    for name in params.names():
        flat = params.params[name].data.reshape(-1)
        ga = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f(params).data.item()
            flat[i] = orig - eps
            fm = f(params).data.item()
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFiniteError(f"non-finite loss while probing {name}[{i}]")
            cd = (fp - fm) / (2.0 * eps)
            err = abs(ga[i] - cd) / max(abs(ga[i]), abs(cd), 1e-8)
            if err > worst:
                worst = err
    return worst
