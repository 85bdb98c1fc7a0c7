"""Reverse-mode automatic differentiation on dense float64 arrays.

A :class:`Tensor` wraps a numpy array. Operations build an implicit
computation graph: each result remembers its parent tensors and a
closure that routes the upstream gradient to them. ``backward()`` on a
scalar walks that recorded graph once, in reverse topological order.
All arithmetic is double precision; graphs are confined to one logical
task and tensors themselves are value-like and safe to share read-only.

Supported operations are exactly what the style-transfer engine and the
small classifiers need: conv2d, 2x2 max pooling, relu, dense layers,
mse, matmul/reshape/transpose (for Gram matrices), channel concat,
softmax cross-entropy, and elementwise +,-,* with scalars or same-shape
tensors. No general broadcasting.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError

Array = np.ndarray


def _as_array(data) -> Array:
    return np.asarray(data, dtype=np.float64)


class Tensor:
    """Dense multi-dimensional array node with optional gradient support."""

    __slots__ = ("data", "requires_grad", "_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self._grad: Array | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def grad(self) -> Array | None:
        """Accumulated gradient; zeros for grad-tracking tensors backward never reached."""
        if self._grad is not None:
            return self._grad
        if self.requires_grad:
            return np.zeros_like(self.data)
        return None

    def zero_grad(self) -> None:
        self._grad = None

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- graph construction -------------------------------------------------

    def _accumulate(self, grad_piece: Array) -> None:
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        self._grad += grad_piece

    def backward(self) -> None:
        """Backpropagate from this scalar through the recorded graph.

        Each node is visited exactly once; tensors the loss does not
        depend on keep a zero gradient (see :attr:`grad`).
        """
        if self.data.shape != ():
            raise ShapeError(
                f"backward() requires a scalar loss, got shape {self.data.shape}"
            )
        order = topological_order(self)
        self._grad = np.ones((), dtype=np.float64)
        for node in reversed(order):
            if node._backward_fn is not None and node._grad is not None:
                node._backward_fn(node._grad)

    # -- elementwise arithmetic ---------------------------------------------

    def __add__(self, other):
        if isinstance(other, Tensor):
            if other.data.shape != self.data.shape:
                raise ShapeError(
                    f"add: shapes {self.data.shape} and {other.data.shape} differ"
                )
            out = _node(self.data + other.data, (self, other))
            if out.requires_grad:
                def backward(g, a=self, b=other):
                    if a.requires_grad:
                        a._accumulate(g)
                    if b.requires_grad:
                        b._accumulate(g)
                out._backward_fn = backward
            return out
        return self._add_scalar(float(other))

    def _add_scalar(self, scalar: float) -> "Tensor":
        out = _node(self.data + scalar, (self,))
        if out.requires_grad:
            def backward(g, a=self):
                a._accumulate(g)
            out._backward_fn = backward
        return out

    __radd__ = __add__

    def __neg__(self):
        return self * -1.0

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return self + (other * -1.0)
        return self._add_scalar(-float(other))

    def __rsub__(self, other):
        return (self * -1.0)._add_scalar(float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            if other.data.shape != self.data.shape:
                raise ShapeError(
                    f"mul: shapes {self.data.shape} and {other.data.shape} differ"
                )
            out = _node(self.data * other.data, (self, other))
            if out.requires_grad:
                def backward(g, a=self, b=other):
                    if a.requires_grad:
                        a._accumulate(g * b.data)
                    if b.requires_grad:
                        b._accumulate(g * a.data)
                out._backward_fn = backward
            return out
        scalar = float(other)
        out = _node(self.data * scalar, (self,))
        if out.requires_grad:
            def backward(g, a=self, s=scalar):
                a._accumulate(g * s)
            out._backward_fn = backward
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        return self * (1.0 / float(other))


def _node(data: Array, parents: tuple[Tensor, ...]) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
    return out


def topological_order(root: Tensor) -> list[Tensor]:
    """Operation nodes in topological order (inputs first, root last)."""
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Module-level alias for :meth:`Tensor.backward`."""
    loss.backward()


# ---------------------------------------------------------------------------
# shape helpers
# ---------------------------------------------------------------------------


def _with_batch(x: Array, what: str) -> tuple[Array, bool]:
    """Promote H,W,C to 1,H,W,C; reject other ranks."""
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"{what}: expected HxWxC or NxHxWxC input, got shape {x.shape}")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, padding: str = "same") -> Tensor:
    """2-D cross-correlation, stride 1, NHWC layout, odd square-window kernels.

    ``x`` may be a single image (H,W,Cin) or a batch (N,H,W,Cin);
    ``kernel`` is (Kh,Kw,Cin,Cout) and ``bias`` is (Cout,). ``padding``
    is ``"same"`` (zero pad, output keeps the spatial size) or
    ``"valid"``. Differentiable in all three tensor arguments.
    """
    xd, squeeze = _with_batch(x.data, "conv2d")
    kd, bd = kernel.data, bias.data
    if kd.ndim != 4:
        raise ShapeError(f"conv2d: kernel must be KhxKwxCinxCout, got {kd.shape}")
    kh, kw, cin, cout = kd.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel window must be odd, got {kh}x{kw}")
    if xd.shape[3] != cin:
        raise ShapeError(
            f"conv2d: input has {xd.shape[3]} channels, kernel expects {cin}"
        )
    if bd.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bd.shape} != ({cout},)")
    if padding not in ("same", "valid"):
        raise ShapeError(f"conv2d: unknown padding {padding!r}")

    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    if padding == "same":
        xp = np.pad(xd, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    else:
        xp = xd
        if xp.shape[1] < kh or xp.shape[2] < kw:
            raise ShapeError(
                f"conv2d: input {xd.shape} smaller than valid-mode kernel {kh}x{kw}"
            )

    # windows: (N, Ho, Wo, Cin, Kh, Kw)
    windows = sliding_window_view(xp, (kh, kw), axis=(1, 2))
    out_data = np.tensordot(windows, kd, axes=((4, 5, 3), (0, 1, 2))) + bd
    out_data = np.ascontiguousarray(out_data)

    out = _node(out_data[0] if squeeze else out_data, (x, kernel, bias))
    if out.requires_grad:
        def backward_fn(g, x=x, kernel=kernel, bias=bias, windows=windows,
                        kd=kd, squeeze=squeeze, padding=padding,
                        ph=ph, pw=pw, kh=kh, kw=kw, in_shape=xd.shape):
            gb = g[None] if squeeze else g
            if bias.requires_grad:
                bias._accumulate(gb.sum(axis=(0, 1, 2)))
            if kernel.requires_grad:
                dk = np.tensordot(windows, gb, axes=((0, 1, 2), (0, 1, 2)))
                kernel._accumulate(dk.transpose(1, 2, 0, 3))
            if x.requires_grad:
                gp = np.pad(gb, ((0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1), (0, 0)))
                gwin = sliding_window_view(gp, (kh, kw), axis=(1, 2))
                kflip = kd[::-1, ::-1]
                dx = np.tensordot(gwin, kflip, axes=((4, 5, 3), (0, 1, 3)))
                if padding == "same":
                    dx = dx[:, ph:ph + in_shape[1], pw:pw + in_shape[2], :]
                x._accumulate(dx[0] if squeeze else dx)
        out._backward_fn = backward_fn
    return out


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------


def max_pool2d(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2 over (N,)H,W,C input.

    Odd spatial sizes are padded on the right/bottom by edge replication.
    The gradient routes to the argmax cell of each window; ties resolve
    to the lowest row-major index, so replicated border cells (which
    always duplicate an earlier cell in the same window) never receive
    gradient and gradient mass is conserved.
    """
    xd, squeeze = _with_batch(x.data, "max_pool2d")
    n, h, w, c = xd.shape
    if h == 0 or w == 0 or c == 0:
        raise ShapeError(f"max_pool2d: empty input of shape {x.data.shape}")
    pad_h, pad_w = h % 2, w % 2
    if pad_h or pad_w:
        xd = np.pad(xd, ((0, 0), (0, pad_h), (0, pad_w), (0, 0)), mode="edge")
    hp, wp = xd.shape[1], xd.shape[2]
    ho, wo = hp // 2, wp // 2

    # (N, Ho, Wo, 4, C) with window cells in row-major order
    win = xd.reshape(n, ho, 2, wo, 2, c).transpose(0, 1, 3, 2, 4, 5).reshape(n, ho, wo, 4, c)
    idx = win.argmax(axis=3)
    out_data = np.take_along_axis(win, idx[:, :, :, None, :], axis=3)[:, :, :, 0, :]

    out = _node(out_data[0] if squeeze else out_data, (x,))
    if out.requires_grad:
        def backward_fn(g, x=x, idx=idx, squeeze=squeeze, n=n, h=h, w=w, c=c,
                        hp=hp, wp=wp, ho=ho, wo=wo):
            gb = g[None] if squeeze else g
            scatter = np.zeros((n, ho, wo, 4, c), dtype=np.float64)
            np.put_along_axis(scatter, idx[:, :, :, None, :], gb[:, :, :, None, :], axis=3)
            dxp = scatter.reshape(n, ho, wo, 2, 2, c).transpose(0, 1, 3, 2, 4, 5)
            dxp = dxp.reshape(n, hp, wp, c)[:, :h, :w, :]
            x._accumulate(dxp[0] if squeeze else dxp)
        out._backward_fn = backward_fn
    return out


# ---------------------------------------------------------------------------
# pointwise / affine ops
# ---------------------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, v); subgradient at exactly zero is zero."""
    mask = x.data > 0
    out = _node(np.where(mask, x.data, 0.0), (x,))
    if out.requires_grad:
        def backward_fn(g, x=x, mask=mask):
            x._accumulate(g * mask)
        out._backward_fn = backward_fn
    return out


def dense(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """Affine map x @ W + b for x of shape (N,) or (B,N); W is (N,M), b is (M,)."""
    xd, wd, bd = x.data, weights.data, bias.data
    if wd.ndim != 2:
        raise ShapeError(f"dense: weights must be NxM, got {wd.shape}")
    n_in, m = wd.shape
    if bd.shape != (m,):
        raise ShapeError(f"dense: bias shape {bd.shape} != ({m},)")
    if xd.ndim == 1:
        if xd.shape[0] != n_in:
            raise ShapeError(f"dense: input {xd.shape} incompatible with weights {wd.shape}")
    elif xd.ndim == 2:
        if xd.shape[1] != n_in:
            raise ShapeError(f"dense: input {xd.shape} incompatible with weights {wd.shape}")
    else:
        raise ShapeError(f"dense: input must be rank 1 or 2, got {xd.shape}")

    out = _node(xd @ wd + bd, (x, weights, bias))
    if out.requires_grad:
        def backward_fn(g, x=x, weights=weights, bias=bias, xd=xd, wd=wd):
            if x.requires_grad:
                x._accumulate(g @ wd.T)
            if xd.ndim == 1:
                if weights.requires_grad:
                    weights._accumulate(np.outer(xd, g))
                if bias.requires_grad:
                    bias._accumulate(g)
            else:
                if weights.requires_grad:
                    weights._accumulate(xd.T @ g)
                if bias.requires_grad:
                    bias._accumulate(g.sum(axis=0))
        out._backward_fn = backward_fn
    return out


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared elementwise difference of two same-shape tensors (scalar)."""
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mse: shapes {a.data.shape} and {b.data.shape} differ")
    diff = a.data - b.data
    n = diff.size
    out = _node(np.asarray((diff * diff).sum() / n), (a, b))
    if out.requires_grad:
        def backward_fn(g, a=a, b=b, diff=diff, n=n):
            scaled = (2.0 / n) * float(g) * diff
            if a.requires_grad:
                a._accumulate(scaled)
            if b.requires_grad:
                b._accumulate(-scaled)
        out._backward_fn = backward_fn
    return out


# ---------------------------------------------------------------------------
# structural ops
# ---------------------------------------------------------------------------


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = _node(x.data.reshape(shape), (x,))
    if out.requires_grad:
        def backward_fn(g, x=x):
            x._accumulate(g.reshape(x.data.shape))
        out._backward_fn = backward_fn
    return out


def transpose2d(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"transpose2d: expected a matrix, got shape {x.data.shape}")
    out = _node(np.ascontiguousarray(x.data.T), (x,))
    if out.requires_grad:
        def backward_fn(g, x=x):
            x._accumulate(g.T)
        out._backward_fn = backward_fn
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.data.shape} @ {b.data.shape}")
    out = _node(a.data @ b.data, (a, b))
    if out.requires_grad:
        def backward_fn(g, a=a, b=b):
            if a.requires_grad:
                a._accumulate(g @ b.data.T)
            if b.requires_grad:
                b._accumulate(a.data.T @ g)
        out._backward_fn = backward_fn
    return out


def concat_channels(parts: list[Tensor]) -> Tensor:
    """Concatenate along the last (channel) axis; used by the dense-block net."""
    if not parts:
        raise ShapeError("concat_channels: need at least one tensor")
    lead = parts[0].data.shape[:-1]
    for p in parts[1:]:
        if p.data.shape[:-1] != lead:
            raise ShapeError(
                f"concat_channels: leading shapes differ: {lead} vs {p.data.shape[:-1]}"
            )
    out = _node(np.concatenate([p.data for p in parts], axis=-1), tuple(parts))
    if out.requires_grad:
        widths = [p.data.shape[-1] for p in parts]
        def backward_fn(g, parts=tuple(parts), widths=widths):
            offset = 0
            for p, width in zip(parts, widths):
                if p.requires_grad:
                    p._accumulate(g[..., offset:offset + width])
                offset += width
        out._backward_fn = backward_fn
    return out


def cross_entropy_logits(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy; logits (B,C) or (C,), labels int class ids."""
    zd = logits.data
    if zd.ndim == 1:
        zd2 = zd[None]
        labels2 = np.asarray([labels] if np.ndim(labels) == 0 else labels, dtype=np.int64)
    elif zd.ndim == 2:
        zd2 = zd
        labels2 = np.asarray(labels, dtype=np.int64)
    else:
        raise ShapeError(f"cross_entropy_logits: logits must be (B,C) or (C,), got {zd.shape}")
    if labels2.shape != (zd2.shape[0],):
        raise ShapeError(
            f"cross_entropy_logits: {zd2.shape[0]} rows but {labels2.shape} labels"
        )
    shifted = zd2 - zd2.max(axis=1, keepdims=True)
    exps = np.exp(shifted)
    probs = exps / exps.sum(axis=1, keepdims=True)
    rows = np.arange(zd2.shape[0])
    losses = np.log(probs[rows, labels2].clip(1e-300))
    out = _node(np.asarray(-losses.mean()), (logits,))
    if out.requires_grad:
        def backward_fn(g, logits=logits, probs=probs, labels2=labels2, rows=rows):
            d = probs.copy()
            d[rows, labels2] -= 1.0
            d *= float(g) / probs.shape[0]
            logits._accumulate(d[0] if logits.data.ndim == 1 else d)
        out._backward_fn = backward_fn
    return out


def softmax_probs(logits: np.ndarray) -> np.ndarray:
    """Plain-array softmax over the last axis (prediction path, no graph)."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    exps = np.exp(shifted)
    return exps / exps.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    """Bias-corrected moment accumulators for one parameter tensor."""

    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: Array = field(default=None)  # type: ignore[assignment]
    v: Array = field(default=None)  # type: ignore[assignment]

    @classmethod
    def for_param(cls, param: Array, lr=0.01, beta1=0.9, beta2=0.999, eps=1e-8):
        return cls(lr=lr, beta1=beta1, beta2=beta2, eps=eps, t=0,
                   m=np.zeros_like(param), v=np.zeros_like(param))


def adam_step(params: Array, grads: Array, state: AdamState):
    """One Adam update, in place: p -= lr * m_hat / (sqrt(v_hat) + eps)."""
    if params.shape != grads.shape:
        raise ShapeError(f"adam_step: params {params.shape} vs grads {grads.shape}")
    if state.m.shape != params.shape or state.v.shape != params.shape:
        raise ShapeError(
            f"adam_step: state accumulators {state.m.shape} do not belong to params {params.shape}"
        )
    state.t += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * (grads * grads)
    m_hat = state.m / (1.0 - state.beta1 ** state.t)
    v_hat = state.v / (1.0 - state.beta2 ** state.t)
    params -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params, state


class Adam:
    """Adam over a list of parameter tensors (reads each tensor's .grad)."""

    def __init__(self, params: list[Tensor], lr=0.01, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.states = [
            AdamState.for_param(p.data, lr=lr, beta1=beta1, beta2=beta2, eps=eps)
            for p in self.params
        ]

    def step(self) -> None:
        for p, state in zip(self.params, self.states):
            adam_step(p.data, p.grad, state)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()
