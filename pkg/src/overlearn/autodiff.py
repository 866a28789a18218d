"""Minimal reverse-mode autodiff over numpy arrays.

Carries exactly the operator set the trainers need: dense and conv
layers, 2x2 max-pooling, relu, dropout, softmax cross-entropy, scalar
arithmetic, and a gradient-reversal node whose forward is the identity
and whose backward flips the incoming gradient scaled by -alpha.

Tensors hold float32 data by default; float64 inputs are kept as-is so
numerical checks can run the same code paths at higher precision.
Reductions inside the loss accumulate in float64 regardless.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "no_grad",
    "add",
    "mul",
    "neg",
    "matmul",
    "relu",
    "clamp_max",
    "flatten",
    "conv2d",
    "maxpool2",
    "dropout",
    "grad_reverse",
    "softmax_cross_entropy",
    "Adam",
]


def _as_array(data) -> np.ndarray:
    arr = np.asarray(data)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float32)
    if not arr.flags.c_contiguous:
        arr = np.ascontiguousarray(arr)
    return arr


_GRAD_ENABLED = [True]


class no_grad:
    """Within this context, ops compute values but build no graph.

    Backward closures capture large forward intermediates (im2col
    buffers and the like) and node<->closure references form cycles that
    only the generational GC can reclaim, so pure-evaluation passes must
    not create them.
    """

    def __enter__(self):
        self._saved = _GRAD_ENABLED[0]
        _GRAD_ENABLED[0] = False

    def __exit__(self, *exc):
        _GRAD_ENABLED[0] = self._saved
        return False


def _noop() -> None:
    return None


class Tensor:
    """A node in the computation graph: value, grad, and a backward rule."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_prev", "op")

    def __init__(self, data, requires_grad: bool = False, _prev=(), op: str = ""):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        if not _GRAD_ENABLED[0]:
            _prev = ()
        self.requires_grad = bool(requires_grad) or any(
            p.requires_grad for p in _prev
        )
        self._backward = _noop
        self._prev = tuple(_prev)
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        g = np.asarray(g, dtype=self.data.dtype)
        if g.shape != self.data.shape:
            raise ValueError(
                f"shape mismatch in grad accumulation: {g.shape} vs {self.data.shape}"
            )
        if self.grad is None:
            self.grad = np.array(g, copy=True)
        else:
            self.grad = self.grad + g

    def backward(self) -> None:
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar loss")
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
            for p in node._prev:
                if id(p) not in visited and p.requires_grad:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            node._backward()
        # Graphs are single-use: drop the structure so the node<->closure
        # cycles (and the arrays they capture) free by refcount alone.
        for node in topo:
            node._prev = ()
            node._backward = _noop

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op!r})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, c):
        return mul(self, c)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return add(self, neg(_ensure_tensor(other, self.dtype)))

    def __matmul__(self, other):
        return matmul(self, other)


def _ensure_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a: Tensor, b) -> Tensor:
    b = _ensure_tensor(b, a.dtype)
    try:
        data = a.data + b.data
    except ValueError as e:
        raise ValueError(f"shape mismatch in add: {a.shape} + {b.shape}") from e
    out = Tensor(data, _prev=(a, b), op="add")
    if out.requires_grad:

        def _backward():
            a.accumulate(_unbroadcast(out.grad, a.data.shape))
            b.accumulate(_unbroadcast(out.grad, b.data.shape))

        out._backward = _backward
    return out


def mul(a: Tensor, c: float) -> Tensor:
    """Multiply a tensor by a python scalar."""
    c = float(c)
    out = Tensor(a.data * c, _prev=(a,), op="mul")
    if out.requires_grad:

        def _backward():
            a.accumulate(out.grad * c)

        out._backward = _backward
    return out


def neg(a: Tensor) -> Tensor:
    return mul(a, -1.0)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"shape mismatch in matmul: {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data, _prev=(a, b), op="matmul")
    if out.requires_grad:

        def _backward():
            if a.requires_grad:
                a.accumulate(out.grad @ b.data.T)
            if b.requires_grad:
                b.accumulate(a.data.T @ out.grad)

        out._backward = _backward
    return out


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0), _prev=(a,), op="relu")
    if out.requires_grad:

        def _backward():
            a.accumulate(out.grad * (a.data > 0))

        out._backward = _backward
    return out


def clamp_max(a: Tensor, cap: float) -> Tensor:
    """min(a, cap), composed from the primitive set: cap - relu(cap - a)."""
    cap = float(cap)
    return add(neg(relu(add(neg(a), cap))), cap)


def flatten(a: Tensor) -> Tensor:
    n = a.shape[0]
    out = Tensor(a.data.reshape(n, -1), _prev=(a,), op="flatten")
    if out.requires_grad:

        def _backward():
            a.accumulate(out.grad.reshape(a.data.shape))

        out._backward = _backward
    return out


def _pad_amounts(k: int) -> tuple[int, int]:
    before = (k - 1) // 2
    return before, k - 1 - before


def conv2d(x: Tensor, w: Tensor, b: Tensor, padding: str = "same") -> Tensor:
    """NCHW convolution, stride 1, 'same' or 'valid' zero padding."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ValueError(f"conv2d expects 4-d input/kernel, got {x.shape}, {w.shape}")
    n, c, h, wd = x.shape
    f, ck, kh, kw = w.shape
    if ck != c:
        raise ValueError(f"shape mismatch in conv2d: {c} input channels, kernel has {ck}")
    if b.data.shape != (f,):
        raise ValueError(f"shape mismatch in conv2d bias: {b.data.shape} vs ({f},)")
    if padding == "same":
        ph, pw = _pad_amounts(kh), _pad_amounts(kw)
    elif padding == "valid":
        ph = pw = (0, 0)
    else:
        raise ValueError(f"unknown padding {padding!r}")
    xp = np.pad(x.data, ((0, 0), (0, 0), ph, pw)) if ph != (0, 0) or pw != (0, 0) else x.data
    oh = xp.shape[2] - kh + 1
    ow = xp.shape[3] - kw + 1
    if oh <= 0 or ow <= 0:
        raise ValueError(f"shape mismatch in conv2d: kernel {kh}x{kw} larger than input")

    cols = np.empty((n, c, kh, kw, oh, ow), dtype=x.data.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + oh, j : j + ow]
    cols2 = cols.reshape(n, c * kh * kw, oh * ow)
    w2 = w.data.reshape(f, c * kh * kw)
    val = np.matmul(w2, cols2).reshape(n, f, oh, ow) + b.data[:, None, None]
    out = Tensor(val, _prev=(x, w, b), op="conv2d")
    if out.requires_grad:

        def _backward():
            g2 = out.grad.reshape(n, f, oh * ow)
            if w.requires_grad:
                dw = np.matmul(g2, cols2.transpose(0, 2, 1)).sum(axis=0)
                w.accumulate(dw.reshape(w.data.shape))
            if b.requires_grad:
                b.accumulate(out.grad.sum(axis=(0, 2, 3)))
            if x.requires_grad:
                dcols = np.matmul(w2.T, g2).reshape(n, c, kh, kw, oh, ow)
                dxp = np.zeros_like(xp)
                for i in range(kh):
                    for j in range(kw):
                        dxp[:, :, i : i + oh, j : j + ow] += dcols[:, :, i, j]
                if ph != (0, 0) or pw != (0, 0):
                    dx = dxp[:, :, ph[0] : ph[0] + h, pw[0] : pw[0] + wd]
                else:
                    dx = dxp
                x.accumulate(dx)

        out._backward = _backward
    return out


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2; trailing odd rows/cols are dropped."""
    if x.data.ndim != 4:
        raise ValueError(f"maxpool2 expects 4-d input, got {x.shape}")
    n, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    if h2 == 0 or w2 == 0:
        raise ValueError(f"maxpool2 input too small: {x.shape}")
    xc = x.data[:, :, : h2 * 2, : w2 * 2]
    win = (
        xc.reshape(n, c, h2, 2, w2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, h2, w2, 4)
    )
    idx = win.argmax(axis=-1)
    val = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    out = Tensor(val, _prev=(x,), op="maxpool2")
    if out.requires_grad:

        def _backward():
            dwin = np.zeros_like(win)
            np.put_along_axis(dwin, idx[..., None], out.grad[..., None], axis=-1)
            dx = np.zeros_like(x.data)
            dx[:, :, : h2 * 2, : w2 * 2] = (
                dwin.reshape(n, c, h2, w2, 2, 2)
                .transpose(0, 1, 2, 4, 3, 5)
                .reshape(n, c, h2 * 2, w2 * 2)
            )
            x.accumulate(dx)

        out._backward = _backward
    return out


def dropout(x: Tensor, p: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Inverted dropout: scales kept units by 1/(1-p); identity in eval mode."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    keep = rng.random(x.data.shape) >= p
    scale = np.asarray(1.0 / (1.0 - p), dtype=x.data.dtype)
    mask = keep.astype(x.data.dtype) * scale
    out = Tensor(x.data * mask, _prev=(x,), op="dropout")
    if out.requires_grad:

        def _backward():
            x.accumulate(out.grad * mask)

        out._backward = _backward
    return out


def grad_reverse(x: Tensor, alpha: float) -> Tensor:
    """Identity in the forward pass; backward passes -alpha times the gradient."""
    alpha = float(alpha)
    if alpha < 0:
        raise ValueError(f"grad_reverse alpha must be non-negative, got {alpha}")
    out = Tensor(x.data, _prev=(x,), op="grad_reverse")
    if out.requires_grad:

        def _backward():
            x.accumulate(-alpha * out.grad)

        out._backward = _backward
    return out


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean softmax cross-entropy over the batch.

    ``targets`` is either an int class-index vector of length N or an
    (N, K) one-hot / soft-label array. Log-sum-exp and the mean reduce
    in float64.
    """
    if logits.data.ndim != 2:
        raise ValueError(f"logits must be 2-d, got {logits.shape}")
    n, k = logits.shape
    t = np.asarray(targets)
    if t.ndim == 1:
        if t.shape[0] != n:
            raise ValueError(f"shape mismatch: {n} rows, {t.shape[0]} targets")
        if t.min() < 0 or t.max() >= k:
            raise ValueError("class index out of range")
        onehot = np.zeros((n, k), dtype=np.float64)
        onehot[np.arange(n), t.astype(np.int64)] = 1.0
    elif t.shape == (n, k):
        onehot = t.astype(np.float64)
    else:
        raise ValueError(f"shape mismatch: logits {logits.shape}, targets {t.shape}")

    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    nll = lse - (z * onehot).sum(axis=1)
    loss = Tensor(
        np.asarray(nll.mean(), dtype=logits.dtype), _prev=(logits,), op="softmax_ce"
    )
    if loss.requires_grad:
        probs = np.exp(z - lse[:, None])

        def _backward():
            g = loss.grad.item()
            d = ((probs - onehot) * (g / n)).astype(logits.dtype)
            logits.accumulate(d)

        loss._backward = _backward
    return loss


class Adam:
    """Adam with bias correction, epsilon outside the sqrt, no amsgrad."""

    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            mhat = m / bc1
            vhat = v / bc2
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def state_dict(self) -> dict:
        return {
            "t": self.t,
            "m": [m.copy() for m in self.m],
            "v": [v.copy() for v in self.v],
        }

    def load_state_dict(self, state: dict) -> None:
        if len(state["m"]) != len(self.params):
            raise ValueError("optimizer state does not match parameter list")
        self.t = int(state["t"])
        self.m = [np.array(m, copy=True) for m in state["m"]]
        self.v = [np.array(v, copy=True) for v in state["v"]]
