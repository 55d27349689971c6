"""Minimal dense-tensor reverse-mode autodiff over numpy arrays.

Only the primitives the policy architecture needs: batched matmul, elementwise
arithmetic, concat/slice/transpose/reshape, 1-D convolution, table lookups,
row softmax, layer norm, GELU, interpolation, and MSE loss. Broadcasting is
restricted to a trailing-shape operand against leading batch axes; anything
else must be reshaped explicitly. float32 is the training dtype; build graphs
in float64 when checking gradients against finite differences.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

_DEBUG_FINITE = False
_GRAD_ENABLED = True


def set_debug_checks(enabled: bool) -> None:
    """Assert finiteness of every op output (slow; for tests)."""
    global _DEBUG_FINITE
    _DEBUG_FINITE = enabled


class no_grad:
    """Context manager that skips graph construction (inference paths)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class ShapeError(ValueError):
    pass


class ContractError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def backward(self):
        if self.data.shape != ():
            raise ContractError(f"backward requires a scalar, got shape {self.data.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones((), dtype=self.data.dtype)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        return self

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scale(other, -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_tensor(self, key)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, axes):
        return transpose(self, axes)


def parameter(data, dtype=np.float32) -> Tensor:
    return Tensor(np.asarray(data), requires_grad=True, dtype=dtype)


def constant(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=False, dtype=dtype)


def _wrap(out_data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    if _DEBUG_FINITE and not np.all(np.isfinite(out_data)):
        raise FloatingPointError("non-finite values produced by an op")
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.requires_grad = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out._parents = parents if out.requires_grad else ()
    out._backward = backward if out.requires_grad else None
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


def add(a: Tensor, b: Tensor) -> Tensor:
    """a + b; b may be a trailing-shape bias broadcast over leading axes."""
    a, b = _coerce(a), _coerce(b)
    if a.shape != b.shape:
        if b.data.ndim > a.data.ndim or a.shape[a.data.ndim - b.data.ndim:] != b.shape:
            raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")
    out_data = a.data + b.data

    def backward(g):
        _accumulate(a, g)
        if b.requires_grad:
            extra = g.ndim - b.data.ndim
            gb = g.sum(axis=tuple(range(extra))) if extra else g
            _accumulate(b, gb)

    return _wrap(out_data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of same-shape tensors."""
    a, b = _coerce(a), _coerce(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes must match, got {a.shape} and {b.shape}")
    out_data = a.data * b.data

    def backward(g):
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    return _wrap(out_data, (a, b), backward)


def scale(a: Tensor, s: float) -> Tensor:
    a = _coerce(a)
    s = float(s)
    out_data = a.data * np.array(s, dtype=a.dtype)

    def backward(g):
        _accumulate(a, g * np.array(s, dtype=a.dtype))

    return _wrap(out_data, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(..., n, k) @ (k, m), or (..., n, k) @ (..., k, m) with equal leading axes.

    A 2-D right operand (a weight matrix) is shared across the batch and its
    gradient summed over it.
    """
    a, b = _coerce(a), _coerce(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul requires >= 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    shared_weight = b.data.ndim == 2
    if not shared_weight and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: leading axes differ, {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            if shared_weight:
                k, m = b.shape
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, m)
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
            _accumulate(b, gb)

    return _wrap(out_data, (a, b), backward)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = [_coerce(t) for t in tensors]
    out_data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]

    def backward(g):
        offset = 0
        for t, size in zip(ts, sizes):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offset, offset + size)
            _accumulate(t, g[tuple(sl)])
            offset += size

    return _wrap(out_data, tuple(ts), backward)


def slice_tensor(a: Tensor, key) -> Tensor:
    """Basic (non-repeating) slicing; gradients scatter back into place."""
    a = _coerce(a)
    out_data = a.data[key]

    def backward(g):
        if a.requires_grad:
            ga = np.zeros_like(a.data)
            ga[key] = g
            _accumulate(a, ga)

    return _wrap(out_data, (a,), backward)


def transpose(a: Tensor, axes) -> Tensor:
    a = _coerce(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out_data = a.data.transpose(axes)

    def backward(g):
        _accumulate(a, g.transpose(inv))

    return _wrap(out_data, (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    a = _coerce(a)
    out_data = a.data.reshape(shape)

    def backward(g):
        _accumulate(a, g.reshape(a.shape))

    return _wrap(out_data, (a,), backward)


def conv1d(x: Tensor, w: Tensor, b: Tensor | None, stride: int = 1, padding: int = 0) -> Tensor:
    """1-D convolution: x (B, C_in, L), w (C_out, C_in, K) -> (B, C_out, L_out)."""
    x, w = _coerce(x), _coerce(w)
    if x.data.ndim != 3 or w.data.ndim != 3:
        raise ShapeError(f"conv1d: expected (B,C,L) and (O,C,K), got {x.shape} and {w.shape}")
    B, c_in, L = x.shape
    c_out, c_in_w, K = w.shape
    if c_in != c_in_w:
        raise ShapeError(f"conv1d: channel mismatch, x has {c_in}, w expects {c_in_w}")
    Lp = L + 2 * padding
    if Lp < K:
        raise ShapeError(f"conv1d: padded length {Lp} shorter than kernel {K}")
    L_out = (Lp - K) // stride + 1
    xp = np.zeros((B, c_in, Lp), dtype=x.dtype)
    xp[:, :, padding:padding + L] = x.data
    out_data = np.zeros((B, c_out, L_out), dtype=x.dtype)
    for k in range(K):
        seg = xp[:, :, k:k + stride * (L_out - 1) + 1:stride]
        out_data += np.einsum("oc,bcl->bol", w.data[:, :, k], seg, optimize=True)
    if b is not None:
        b = _coerce(b)
        out_data += b.data[None, :, None]

    def backward(g):
        if w.requires_grad:
            gw = np.zeros_like(w.data)
            for k in range(K):
                seg = xp[:, :, k:k + stride * (L_out - 1) + 1:stride]
                gw[:, :, k] = np.einsum("bol,bcl->oc", g, seg, optimize=True)
            _accumulate(w, gw)
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for k in range(K):
                gxp[:, :, k:k + stride * (L_out - 1) + 1:stride] += np.einsum(
                    "oc,bol->bcl", w.data[:, :, k], g, optimize=True
                )
            _accumulate(x, gxp[:, :, padding:padding + L])
        if b is not None and b.requires_grad:
            _accumulate(b, g.sum(axis=(0, 2)))

    parents = (x, w) if b is None else (x, w, b)
    return _wrap(out_data, parents, backward)


def embedding_add(x: Tensor, table: Tensor, indices: np.ndarray) -> Tensor:
    """x + table[indices] along the token axis; x is (..., N, d), indices (N,)."""
    x, table = _coerce(x), _coerce(table)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1 or x.shape[-2] != idx.size:
        raise ShapeError(f"embedding_add: need one table row per token, x {x.shape}, idx {idx.shape}")
    if table.data.ndim != 2 or table.shape[1] != x.shape[-1]:
        raise ShapeError(f"embedding_add: table {table.shape} incompatible with x {x.shape}")
    if idx.min() < 0 or idx.max() >= table.shape[0]:
        raise ShapeError("embedding_add: index out of table range")
    out_data = x.data + table.data[idx]

    def backward(g):
        _accumulate(x, g)
        if table.requires_grad:
            gt = np.zeros_like(table.data)
            g2 = g.reshape(-1, idx.size, g.shape[-1]).sum(axis=0)
            np.add.at(gt, idx, g2)
            _accumulate(table, gt)

    return _wrap(out_data, (x, table), backward)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    x = _coerce(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        if x.requires_grad:
            dot = (g * y).sum(axis=-1, keepdims=True)
            _accumulate(x, y * (g - dot))

    return _wrap(y, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then apply affine."""
    x, gain, bias = _coerce(x), _coerce(gain), _coerce(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: affine params must be ({d},), got {gain.shape}, {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    out_data = gain.data * xhat + bias.data

    def backward(g):
        if gain.requires_grad:
            _accumulate(gain, (g * xhat).reshape(-1, d).sum(axis=0))
        if bias.requires_grad:
            _accumulate(bias, g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gh = g * gain.data
            term = gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
            _accumulate(x, term * inv_std)

    return _wrap(out_data, (x, gain, bias), backward)


_GELU_C = np.sqrt(2.0 / np.pi)
_GELU_A = 0.044715


def gelu(x: Tensor) -> Tensor:
    """tanh-approximation GELU (smooth, so finite differences stay honest)."""
    x = _coerce(x)
    xd = x.data
    u = _GELU_C * (xd + _GELU_A * xd**3)
    t = np.tanh(u)
    out_data = 0.5 * xd * (1.0 + t)

    def backward(g):
        if x.requires_grad:
            du = _GELU_C * (1.0 + 3.0 * _GELU_A * xd**2)
            _accumulate(x, g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t**2) * du))

    return _wrap(out_data, (x,), backward)


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean over all elements of the squared difference; returns a scalar."""
    pred, target = _coerce(pred), _coerce(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss: shapes differ, {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size
    out_data = np.asarray((diff**2).sum() / n, dtype=pred.dtype)

    def backward(g):
        coeff = g * (2.0 / n)
        _accumulate(pred, coeff * diff)
        _accumulate(target, -coeff * diff)

    return _wrap(out_data, (pred, target), backward)


def sum_all(x: Tensor) -> Tensor:
    x = _coerce(x)
    out_data = np.asarray(x.data.sum(), dtype=x.dtype)

    def backward(g):
        _accumulate(x, np.broadcast_to(g, x.shape).astype(x.dtype))

    return _wrap(out_data, (x,), backward)


def linear_interpolate_rows(table: Tensor, count: int) -> Tensor:
    """Sample `count` rows at evenly spaced positions over [0, N-1].

    Endpoints hit rows 0 and N-1 exactly; interior samples are convex
    combinations of the two neighboring rows, differentiable in the table.
    """
    table = _coerce(table)
    if table.data.ndim != 2 or table.shape[0] < 1:
        raise ShapeError(f"linear_interpolate_rows: need a non-empty (N, d) table, got {table.shape}")
    if count < 1:
        raise ShapeError("linear_interpolate_rows: count must be >= 1")
    n = table.shape[0]
    pos = np.linspace(0.0, float(n - 1), count)
    lo = np.floor(pos).astype(np.int64)
    lo = np.minimum(lo, n - 1)
    hi = np.minimum(lo + 1, n - 1)
    w = (pos - lo).astype(table.dtype)[:, None]
    out_data = (1.0 - w) * table.data[lo] + w * table.data[hi]

    def backward(g):
        if table.requires_grad:
            gt = np.zeros_like(table.data)
            np.add.at(gt, lo, (1.0 - w) * g)
            np.add.at(gt, hi, w * g)
            _accumulate(table, gt)

    return _wrap(out_data, (table,), backward)


# ---------------------------------------------------------------------------
# initialization and parameter registry helpers


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None, dtype=np.float32) -> Tensor:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    data = rng.uniform(-limit, limit, size=shape if shape is not None else (fan_in, fan_out))
    return parameter(data, dtype=dtype)


def normal_embedding(rng: np.random.Generator, shape, std: float = 0.02, dtype=np.float32) -> Tensor:
    return parameter(rng.normal(0.0, std, size=shape), dtype=dtype)


def zeros_param(shape, dtype=np.float32) -> Tensor:
    return parameter(np.zeros(shape), dtype=dtype)


def ones_param(shape, dtype=np.float32) -> Tensor:
    return parameter(np.ones(shape), dtype=dtype)


def zero_grads(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.zero_grad()


def save_params(directory: str | Path, params: dict[str, Tensor], extra: dict | None = None) -> None:
    """Checkpoint: JSON manifest plus one raw little-endian blob per parameter."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for name, p in sorted(params.items()):
        dtype = "f64le" if p.data.dtype == np.float64 else "f32le"
        fname = name.replace("/", ".") + ".bin"
        blob = p.data.astype("<f8" if dtype == "f64le" else "<f4").tobytes(order="C")
        (directory / fname).write_bytes(blob)
        entries.append({"name": name, "shape": list(p.shape), "dtype": dtype, "file": fname})
    manifest = {"schema_version": 1, "params": entries}
    if extra:
        manifest["extra"] = extra
    (directory / "params.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def load_params(directory: str | Path, params: dict[str, Tensor]) -> dict:
    """Load a checkpoint into an existing parameter registry (shapes must match)."""
    directory = Path(directory)
    manifest = json.loads((directory / "params.json").read_text(encoding="utf-8"))
    by_name = {e["name"]: e for e in manifest["params"]}
    missing = sorted(set(params) - set(by_name))
    unexpected = sorted(set(by_name) - set(params))
    if missing or unexpected:
        raise ContractError(f"checkpoint mismatch: missing {missing}, unexpected {unexpected}")
    for name, p in params.items():
        e = by_name[name]
        np_dtype = "<f8" if e["dtype"] == "f64le" else "<f4"
        blob = (directory / e["file"]).read_bytes()
        arr = np.frombuffer(blob, dtype=np_dtype).reshape(e["shape"])
        if tuple(e["shape"]) != p.shape:
            raise ContractError(f"param {name}: checkpoint shape {e['shape']} != model shape {p.shape}")
        p.data = arr.astype(p.data.dtype)
    return manifest.get("extra", {})


# ---------------------------------------------------------------------------
# finite-difference verification


def grad_check(
    f: Callable[[], Tensor],
    params: dict[str, Tensor],
    h: float = 1e-5,
    samples_per_tensor: int = 6,
    rng: np.random.Generator | None = None,
) -> float:
    """Worst relative error between reverse-mode and central-difference gradients.

    `f` must rebuild the graph from the current parameter values and return a
    scalar. Parameters should be float64; float32 finite differences are noise.
    """
    if not (1e-6 <= h <= 1e-4):
        raise ContractError(f"step size h={h} outside [1e-6, 1e-4]")
    rng = rng or np.random.default_rng(0)
    zero_grads(params)
    out = f()
    if not isinstance(out, Tensor) or out.data.shape != ():
        raise ContractError("grad_check target must return a scalar Tensor")
    out.backward()
    grads = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}

    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        n = flat.size
        if n <= samples_per_tensor:
            coords = np.arange(n)
        else:
            coords = rng.choice(n, size=samples_per_tensor, replace=False)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            f_plus = float(f().data)
            flat[c] = orig - h
            f_minus = float(f().data)
            flat[c] = orig
            fd = (f_plus - f_minus) / (2.0 * h)
            g = float(grads[name].reshape(-1)[c])
            err = abs(fd - g) / max(abs(fd), abs(g), 1.0)
            worst = max(worst, err)
    return worst
