"""Dense float tensors with a tape-based reverse-mode gradient graph.

Small by design: exactly the operations the fusion operators, BEV encoder
and detection head need, recorded on a forward tape and replayed backward.
Training data is float32 throughout; the graph also runs in float64 so the
finite-difference checker can resolve tight tolerances.
"""

from __future__ import annotations

import struct
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class GraphError(RuntimeError):
    """The autodiff graph was used incorrectly (non-scalar loss, etc.)."""


class NonFiniteError(FloatingPointError):
    """A tensor contains NaN or Inf where finite values are required."""


_FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """A dense array node in the reverse-mode graph.

    ``data`` is contiguous row-major float32 (or float64 inside gradient
    checks). ``grad`` is lazily allocated with the same shape and dtype.
    Interior nodes carry a backward closure; leaves do not.
    """

    __slots__ = ("data", "grad", "requires_grad", "parents", "_backward")

    def __init__(self, data, requires_grad: bool = False,
                 parents: Sequence["Tensor"] = (),
                 backward: Callable[["Tensor"], None] | None = None):
        arr = np.ascontiguousarray(data)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.parents = tuple(parents)
        self.requires_grad = bool(requires_grad) or any(
            p.requires_grad for p in self.parents)
        self._backward = backward
        self.grad = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise GraphError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def assert_finite(t: Tensor, context: str = "") -> None:
    if not np.all(np.isfinite(t.data)):
        where = f" in {context}" if context else ""
        raise NonFiniteError(f"non-finite values{where}")


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def backward(loss: Tensor) -> None:
    """Accumulate dLoss/dTensor into every reachable requires_grad tensor.

    Repeated calls keep accumulating into leaf grads until they are zeroed.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward() requires a scalar loss, got shape {loss.shape}")

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            stack.append((p, False))

    # Interior grads are per-call scratch; leaf grads persist and accumulate.
    leaf_grads: dict[int, np.ndarray] = {}
    for node in topo:
        if node._backward is not None:
            node.grad = None

    loss.accumulate_grad(np.ones_like(loss.data))
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node)
    for node in topo:
        if node._backward is not None:
            node.grad = None


# ---------------------------------------------------------------------------
# element-wise operations


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")

    def bwd(out: Tensor) -> None:
        if a.requires_grad:
            a.accumulate_grad(out.grad)
        if b.requires_grad:
            b.accumulate_grad(out.grad)

    return Tensor(a.data + b.data, parents=(a, b), backward=bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")

    def bwd(out: Tensor) -> None:
        if a.requires_grad:
            a.accumulate_grad(out.grad)
        if b.requires_grad:
            b.accumulate_grad(-out.grad)

    return Tensor(a.data - b.data, parents=(a, b), backward=bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")

    def bwd(out: Tensor) -> None:
        if a.requires_grad:
            a.accumulate_grad(out.grad * b.data)
        if b.requires_grad:
            b.accumulate_grad(out.grad * a.data)

    return Tensor(a.data * b.data, parents=(a, b), backward=bwd)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def bwd(out: Tensor) -> None:
        if a.requires_grad:
            a.accumulate_grad(out.grad * s)

    return Tensor(a.data * np.asarray(s, dtype=a.data.dtype),
                  parents=(a,), backward=bwd)


def scale_by(a: Tensor, s: Tensor) -> Tensor:
    """Multiply a tensor by a scalar tensor (the one broadcasting we allow)."""
    if s.data.size != 1:
        raise ShapeError(f"scale_by: scalar operand has shape {s.shape}")

    def bwd(out: Tensor) -> None:
        if a.requires_grad:
            a.accumulate_grad(out.grad * s.data.reshape(()))
        if s.requires_grad:
            s.accumulate_grad(np.sum(out.grad * a.data).reshape(s.shape))

    return Tensor(a.data * s.data.reshape(()), parents=(a, s), backward=bwd)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def bwd(out: Tensor) -> None:
        if a.requires_grad:
            a.accumulate_grad(out.grad * mask)

    return Tensor(np.where(mask, a.data, 0), parents=(a,), backward=bwd)


def sigmoid(a: Tensor) -> Tensor:
    y = _stable_sigmoid(a.data)

    def bwd(out: Tensor) -> None:
        if a.requires_grad:
            a.accumulate_grad(out.grad * y * (1 - y))

    return Tensor(y, parents=(a,), backward=bwd)


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def max_pair(a: Tensor, b: Tensor) -> Tensor:
    """Element-wise max; gradient routes to the argmax, ties to `a`."""
    _check_same_shape(a, b, "max_pair")
    take_a = a.data >= b.data

    def bwd(out: Tensor) -> None:
        if a.requires_grad:
            a.accumulate_grad(out.grad * take_a)
        if b.requires_grad:
            b.accumulate_grad(out.grad * ~take_a)

    return Tensor(np.where(take_a, a.data, b.data), parents=(a, b), backward=bwd)


def sum_all(a: Tensor) -> Tensor:
    def bwd(out: Tensor) -> None:
        if a.requires_grad:
            a.accumulate_grad(np.full_like(a.data, out.grad.reshape(())))

    return Tensor(np.sum(a.data).reshape(()), parents=(a,), backward=bwd)


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size

    def bwd(out: Tensor) -> None:
        if a.requires_grad:
            a.accumulate_grad(np.full_like(a.data, out.grad.reshape(()) / n))

    return Tensor(np.mean(a.data).reshape(()), parents=(a,), backward=bwd)


# ---------------------------------------------------------------------------
# token / matrix operations


def linear_tokens(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Per-token affine map: [T, D_in] @ [D_in, D_out] + [D_out]."""
    if x.data.ndim != 2 or w.data.ndim != 2:
        raise ShapeError("linear_tokens expects 2-D input and weight")
    if x.shape[1] != w.shape[0]:
        raise ShapeError(
            f"linear_tokens: inner dims {x.shape[1]} vs {w.shape[0]}")
    if b.shape != (w.shape[1],):
        raise ShapeError(f"linear_tokens: bias shape {b.shape}")

    def bwd(out: Tensor) -> None:
        g = out.grad
        if x.requires_grad:
            x.accumulate_grad(g @ w.data.T)
        if w.requires_grad:
            w.accumulate_grad(x.data.T @ g)
        if b.requires_grad:
            b.accumulate_grad(g.sum(axis=0))

    return Tensor(x.data @ w.data + b.data, parents=(x, w, b), backward=bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")

    def bwd(out: Tensor) -> None:
        g = out.grad
        if a.requires_grad:
            a.accumulate_grad(g @ b.data.T)
        if b.requires_grad:
            b.accumulate_grad(a.data.T @ g)

    return Tensor(a.data @ b.data, parents=(a, b), backward=bwd)


def transpose2d(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError("transpose2d expects a 2-D tensor")

    def bwd(out: Tensor) -> None:
        if a.requires_grad:
            a.accumulate_grad(np.ascontiguousarray(out.grad.T))

    return Tensor(np.ascontiguousarray(a.data.T), parents=(a,), backward=bwd)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError("slice_cols expects a 2-D tensor")

    def bwd(out: Tensor) -> None:
        if a.requires_grad:
            g = np.zeros_like(a.data)
            g[:, start:stop] = out.grad
            a.accumulate_grad(g)

    return Tensor(np.ascontiguousarray(a.data[:, start:stop]),
                  parents=(a,), backward=bwd)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_cols of nothing")
    widths = [p.shape[1] for p in parts]
    offsets = np.concatenate([[0], np.cumsum(widths)])

    def bwd(out: Tensor) -> None:
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                p.accumulate_grad(np.ascontiguousarray(out.grad[:, lo:hi]))

    return Tensor(np.concatenate([p.data for p in parts], axis=1),
                  parents=tuple(parts), backward=bwd)


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    """Stack [C_i, H, W] tensors along the channel axis."""
    if not parts:
        raise ShapeError("concat_channels of nothing")
    chans = [p.shape[0] for p in parts]
    offsets = np.concatenate([[0], np.cumsum(chans)])

    def bwd(out: Tensor) -> None:
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                p.accumulate_grad(np.ascontiguousarray(out.grad[lo:hi]))

    return Tensor(np.concatenate([p.data for p in parts], axis=0),
                  parents=tuple(parts), backward=bwd)


def grid_to_tokens(a: Tensor) -> Tensor:
    """[C, H, W] -> [H*W, C] token matrix."""
    if a.data.ndim != 3:
        raise ShapeError("grid_to_tokens expects [C, H, W]")
    c, h, w = a.shape

    def bwd(out: Tensor) -> None:
        if a.requires_grad:
            a.accumulate_grad(
                np.ascontiguousarray(out.grad.T).reshape(c, h, w))

    return Tensor(np.ascontiguousarray(a.data.reshape(c, h * w).T),
                  parents=(a,), backward=bwd)


def tokens_to_grid(a: Tensor, h: int, w: int) -> Tensor:
    """[H*W, C] -> [C, H, W], inverse of grid_to_tokens."""
    if a.data.ndim != 2 or a.shape[0] != h * w:
        raise ShapeError(f"tokens_to_grid: {a.shape} vs H*W={h * w}")
    c = a.shape[1]

    def bwd(out: Tensor) -> None:
        if a.requires_grad:
            a.accumulate_grad(
                np.ascontiguousarray(out.grad.reshape(c, h * w).T))

    return Tensor(np.ascontiguousarray(a.data.T).reshape(c, h, w),
                  parents=(a,), backward=bwd)


def softmax_rows(a: Tensor) -> Tensor:
    """Row-wise softmax with max-subtraction for stability."""
    if a.data.ndim != 2:
        raise ShapeError("softmax_rows expects a 2-D tensor")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)

    def bwd(out: Tensor) -> None:
        if a.requires_grad:
            g = out.grad
            dot = np.sum(g * y, axis=1, keepdims=True)
            a.accumulate_grad((g - dot) * y)

    return Tensor(y, parents=(a,), backward=bwd)


# ---------------------------------------------------------------------------
# convolution


def _im2col(xp: np.ndarray, k: int, h: int, w: int) -> np.ndarray:
    c = xp.shape[0]
    s0, s1, s2 = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp, shape=(c, k, k, h, w), strides=(s0, s1, s2, s1, s2))
    return np.ascontiguousarray(windows.reshape(c * k * k, h * w))


def conv2d(x: Tensor, w: Tensor, b: Tensor, padding: int) -> Tensor:
    """Same-size 2-D cross-correlation: [C_in,H,W] -> [C_out,H,W]."""
    if x.data.ndim != 3 or w.data.ndim != 4:
        raise ShapeError("conv2d expects input [C,H,W] and weight [O,C,k,k]")
    c_out, c_in, k, k2 = w.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be square and odd, got {k}x{k2}")
    if padding != (k - 1) // 2:
        raise ShapeError(f"conv2d: padding {padding} != (k-1)/2 for k={k}")
    if x.shape[0] != c_in:
        raise ShapeError(f"conv2d: input channels {x.shape[0]} != {c_in}")
    if b.shape != (c_out,):
        raise ShapeError(f"conv2d: bias shape {b.shape}")

    _, h, wd = x.shape
    p = padding
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p)))
    cols = _im2col(xp, k, h, wd)
    wm = w.data.reshape(c_out, c_in * k * k)
    out = (wm @ cols + b.data[:, None]).reshape(c_out, h, wd)

    def bwd(o: Tensor) -> None:
        g = o.grad.reshape(c_out, h * wd)
        if b.requires_grad:
            b.accumulate_grad(g.sum(axis=1))
        if w.requires_grad:
            w.accumulate_grad((g @ cols.T).reshape(w.shape))
        if x.requires_grad:
            gcols = (wm.T @ g).reshape(c_in, k, k, h, wd)
            gx = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gx[:, i:i + h, j:j + wd] += gcols[:, i, j]
            x.accumulate_grad(np.ascontiguousarray(gx[:, p:p + h, p:p + wd]))

    return Tensor(out, parents=(x, w, b), backward=bwd)


# ---------------------------------------------------------------------------
# fused loss terms (constant targets, hand-derived backward)


def bce_logits_sum(logits: Tensor, targets: np.ndarray,
                   pos_weight: float = 1.0) -> Tensor:
    """Sum of binary cross-entropy with logits against a constant target map.

    pos_weight scales the loss (and gradient) on cells whose target is
    positive, countering heavy foreground/background imbalance.
    """
    if logits.shape != targets.shape:
        raise ShapeError(f"bce_logits_sum: {logits.shape} vs {targets.shape}")
    if pos_weight <= 0:
        raise ValueError(f"pos_weight {pos_weight} must be positive")
    x = logits.data
    t = targets.astype(x.dtype)
    w = np.where(t > 0, x.dtype.type(pos_weight), x.dtype.type(1.0))
    per = w * (np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x))))

    def bwd(out: Tensor) -> None:
        if logits.requires_grad:
            logits.accumulate_grad(
                out.grad.reshape(()) * w * (_stable_sigmoid(x) - t))

    return Tensor(np.sum(per).reshape(()), parents=(logits,), backward=bwd)


def l1_sum_masked(pred: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Sum of |pred - target| over cells where mask is set.

    pred is [K, H, W]; targets matches; mask is [H, W] and broadcast over K.
    """
    if pred.shape != targets.shape:
        raise ShapeError(f"l1_sum_masked: {pred.shape} vs {targets.shape}")
    diff = pred.data - targets.astype(pred.data.dtype)
    m = mask.astype(pred.data.dtype)
    per = np.abs(diff) * m

    def bwd(out: Tensor) -> None:
        if pred.requires_grad:
            pred.accumulate_grad(out.grad.reshape(()) * np.sign(diff) * m)

    return Tensor(np.sum(per).reshape(()), parents=(pred,), backward=bwd)


def ce_softmax_sum_masked(logits: Tensor, class_ids: np.ndarray,
                          mask: np.ndarray) -> Tensor:
    """Per-cell softmax cross-entropy, summed over masked cells.

    logits is [num_classes, H, W]; class_ids and mask are [H, W].
    """
    nc, h, w = logits.shape
    x = logits.data
    shifted = x - x.max(axis=0, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=0)) + x.max(axis=0)
    rows, cols = np.indices((h, w))
    true_logit = x[class_ids, rows, cols]
    m = mask.astype(x.dtype)
    per = (lse - true_logit) * m

    def bwd(out: Tensor) -> None:
        if logits.requires_grad:
            soft = np.exp(shifted) / np.sum(np.exp(shifted), axis=0,
                                            keepdims=True)
            onehot = np.zeros_like(x)
            onehot[class_ids, rows, cols] = 1
            logits.accumulate_grad(out.grad.reshape(()) * (soft - onehot) * m)

    return Tensor(np.sum(per).reshape(()), parents=(logits,), backward=bwd)


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray],
               epsilon: float = 1e-3, max_coords: int = 10_000,
               seed: int = 0) -> float:
    """Central-difference check of fn's analytic gradient.

    fn maps leaf Tensors to a scalar Tensor. Returns the max relative error
    over every input coordinate (a seeded random subsample beyond
    ``max_coords``). Runs in float64 so the difference quotient resolves the
    tolerances the float32 training path is held to.
    """
    if not 0 < epsilon <= 1e-1:
        raise ValueError(f"epsilon {epsilon} outside (0, 1e-1]")

    leaves = [Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)
              for a in inputs]
    out = fn(*leaves)
    if out.data.size != 1:
        raise GraphError("grad_check target must be scalar")
    backward(out)
    analytic = [np.zeros_like(l.data) if l.grad is None else l.grad.copy()
                for l in leaves]

    flat = [(i, j) for i, l in enumerate(leaves) for j in range(l.data.size)]
    if len(flat) > max_coords:
        rng = np.random.default_rng(seed)
        picks = rng.choice(len(flat), size=max_coords, replace=False)
        flat = [flat[int(p)] for p in picks]

    def eval_at(arrays: list[np.ndarray]) -> float:
        return fn(*[Tensor(a) for a in arrays]).item()

    base = [l.data.copy() for l in leaves]
    worst = 0.0
    for i, j in flat:
        saved = base[i].flat[j]
        base[i].flat[j] = saved + epsilon
        up = eval_at(base)
        base[i].flat[j] = saved - epsilon
        down = eval_at(base)
        base[i].flat[j] = saved
        numeric = (up - down) / (2 * epsilon)
        a = analytic[i].flat[j]
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
        worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# parameter storage


class ParamStore:
    """Named trainable tensors with a bit-exact binary file format."""

    MAGIC = b"BFL1"

    def __init__(self):
        self.entries: dict[str, Tensor] = {}
        self.step_count = 0

    def add(self, name: str, array: np.ndarray) -> Tensor:
        if name in self.entries:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.asarray(array, dtype=np.float32), requires_grad=True)
        self.entries[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def names(self) -> list[str]:
        return list(self.entries)

    def zero_grads(self) -> None:
        for t in self.entries.values():
            t.zero_grad()

    def save(self, path) -> None:
        with open(path, "wb") as f:
            f.write(self.MAGIC)
            f.write(struct.pack("<I", len(self.entries)))
            for name, t in self.entries.items():
                nb = name.encode("utf-8")
                f.write(struct.pack("<I", len(nb)))
                f.write(nb)
                dims = t.data.shape
                f.write(struct.pack("<I", len(dims)))
                f.write(struct.pack(f"<{len(dims)}I", *dims))
                f.write(np.ascontiguousarray(
                    t.data, dtype="<f4").tobytes())

    @classmethod
    def load(cls, path) -> "ParamStore":
        store = cls()
        with open(path, "rb") as f:
            blob = f.read()
        if blob[:4] != cls.MAGIC:
            raise ValueError(f"{path}: bad magic {blob[:4]!r}")
        off = 4
        (count,) = struct.unpack_from("<I", blob, off)
        off += 4
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", blob, off)
            off += 4
            name = blob[off:off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<I", blob, off)
            off += 4
            dims = struct.unpack_from(f"<{rank}I", blob, off)
            off += 4 * rank
            n = int(np.prod(dims)) if dims else 1
            arr = np.frombuffer(blob, dtype="<f4", count=n, offset=off)
            off += 4 * n
            store.add(name, arr.reshape(dims).copy())
        if off != len(blob):
            raise ValueError(f"{path}: trailing bytes at offset {off}")
        return store
