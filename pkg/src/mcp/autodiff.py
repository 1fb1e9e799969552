"""Dense tensors with reverse-mode automatic differentiation.

The op set is closed: exactly what a small 3D-conv video encoder, two
projection heads, and the speed/instance contrastive losses need. Tensors
hold flat row-major numpy buffers (float32 for training, float64 when
checking gradients against finite differences). A forward op records its
parents and a backward closure on the output; `Tensor.backward()` walks the
implicit graph in reverse topological order, summing gradients over fan-out.

Activations use a channels-last (N, T, H, W, C) layout so convolution
reduces to one im2col GEMM per layer; the public `conv3d` keeps the
conventional (N, C, T, H, W) interface and permutes around the core.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Input rejected because a dimension does not fit the operation."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf appeared where the contract requires finite values."""


_CHECK_FINITE = False


def set_finite_checks(enabled: bool) -> None:
    """Globally verify op outputs are finite (slow; used by grad_check/verify)."""
    global _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)


def _as_array(value, like: np.ndarray | None = None) -> np.ndarray:
    arr = np.asarray(value)
    if arr.dtype not in (np.float32, np.float64):
        return arr.astype(like.dtype if like is not None else np.float64)
    if like is not None and arr.ndim == 0 and arr.dtype != like.dtype:
        # scalars adopt the tensor's precision instead of promoting the graph
        return arr.astype(like.dtype)
    return arr


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn", "_op")

    def __init__(self, data, requires_grad: bool = False):
        arr = _as_array(data)
        if arr.size == 0:
            raise ShapeError("tensors must be non-empty")
        # leaves own their buffer: tensors are immutable after creation
        self.data = arr.copy() if (arr is data or arr.base is not None) else arr
        self.requires_grad = requires_grad
        self.grad = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn = None
        self._op = "leaf"

    # ---- basics -------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __float__(self) -> float:
        return self.item()

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op}, grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # ---- graph plumbing -------------------------------------------------

    def _child(self, data: np.ndarray, parents, op: str) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out._backward_fn = None
        out._op = op
        needy = tuple(p for p in parents if p.requires_grad)
        out.requires_grad = bool(needy)
        out._parents = needy
        if _CHECK_FINITE and not np.all(np.isfinite(data)):
            raise NonFiniteError(f"non-finite output from op '{op}'")
        return out

    def backward(self) -> None:
        """Backpropagate from a scalar loss; gradients sum over fan-out."""
        if self.data.size != 1:
            raise ShapeError(f"backward requires a scalar loss, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, emitted = stack.pop()
            if emitted:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward_fn is not None:
                node._backward_fn(node.grad)

    # ---- elementwise arithmetic ----------------------------------------

    def __add__(self, other):
        a, b = self, _wrap(other, self)
        out = a._child(a.data + b.data, (a, b), "add")
        if out.requires_grad:
            def back(g):
                if a.requires_grad:
                    _accum(a, _unbroadcast(g, a.data.shape))
                if b.requires_grad:
                    _accum(b, _unbroadcast(g, b.data.shape))
            out._backward_fn = back
        return out

    __radd__ = __add__

    def __neg__(self):
        out = self._child(-self.data, (self,), "neg")
        if out.requires_grad:
            out._backward_fn = lambda g: _accum(self, -g)
        return out

    def __sub__(self, other):
        return self + (-_wrap(other, self))

    def __rsub__(self, other):
        return _wrap(other, self) + (-self)

    def __mul__(self, other):
        a, b = self, _wrap(other, self)
        out = a._child(a.data * b.data, (a, b), "mul")
        if out.requires_grad:
            def back(g):
                if a.requires_grad:
                    _accum(a, _unbroadcast(g * b.data, a.data.shape))
                if b.requires_grad:
                    _accum(b, _unbroadcast(g * a.data, b.data.shape))
            out._backward_fn = back
        return out

    __rmul__ = __mul__

    def __truediv__(self, scalar):
        if isinstance(scalar, Tensor) or np.ndim(scalar) != 0:
            raise ShapeError("division is supported by scalars only")
        return self * (1.0 / float(scalar))

    # ---- nonlinearities --------------------------------------------------

    def relu(self):
        out = self._child(np.maximum(self.data, 0), (self,), "relu")
        if out.requires_grad:
            mask = self.data > 0
            out._backward_fn = lambda g: _accum(self, g * mask)
        return out

    def exp(self):
        with np.errstate(over="ignore"):
            out = self._child(np.exp(self.data), (self,), "exp")
        if out.requires_grad:
            out._backward_fn = lambda g: _accum(self, g * out.data)
        return out

    def log(self):
        with np.errstate(divide="ignore", invalid="ignore"):
            out = self._child(np.log(self.data), (self,), "log")
        if out.requires_grad:
            out._backward_fn = lambda g: _accum(self, g / self.data)
        return out

    # ---- reductions ------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        out = self._child(self.data.sum(axis=axis, keepdims=keepdims), (self,), "sum")
        if out.requires_grad:
            shape = self.data.shape

            def back(g):
                if axis is not None and not keepdims:
                    g = np.expand_dims(g, axis)
                _accum(self, np.broadcast_to(g, shape))
            out._backward_fn = back
        return out

    def mean(self, axis=None, keepdims: bool = False):
        count = self.data.size if axis is None else np.prod(
            [self.data.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(count))

    def max(self, axis=None, keepdims: bool = False):
        """Max reduction; the gradient routes to the first argmax only."""
        if axis is None:
            flat_idx = int(np.argmax(self.data))
            data = self.data.max(keepdims=keepdims)
            out = self._child(data, (self,), "max")
            if out.requires_grad:
                def back(g):
                    z = np.zeros_like(self.data)
                    z.reshape(-1)[flat_idx] = np.asarray(g).reshape(-1)[0]
                    _accum(self, z)
                out._backward_fn = back
            return out
        idx = np.argmax(self.data, axis=axis)
        picked = np.take_along_axis(self.data, np.expand_dims(idx, axis), axis)
        data = picked if keepdims else np.squeeze(picked, axis=axis)
        out = self._child(data, (self,), "max")
        if out.requires_grad:
            def back(g):
                if not keepdims:
                    g = np.expand_dims(g, axis)
                z = np.zeros_like(self.data)
                np.put_along_axis(z, np.expand_dims(idx, axis), g, axis)
                _accum(self, z)
            out._backward_fn = back
        return out

    # ---- shape ops --------------------------------------------------------

    def reshape(self, *shape):
        out = self._child(self.data.reshape(*shape), (self,), "reshape")
        if out.requires_grad:
            orig = self.data.shape
            out._backward_fn = lambda g: _accum(self, g.reshape(orig))
        return out

    def permute(self, *axes):
        out = self._child(np.transpose(self.data, axes), (self,), "permute")
        if out.requires_grad:
            inverse = tuple(np.argsort(axes))
            out._backward_fn = lambda g: _accum(self, np.transpose(g, inverse))
        return out

    def t(self):
        if self.data.ndim != 2:
            raise ShapeError("t() expects a matrix")
        return self.permute(1, 0)

    def rows(self, start: int, stop: int):
        """Contiguous slice along axis 0 (used to split a batched forward)."""
        out = self._child(self.data[start:stop], (self,), "rows")
        if out.requires_grad:
            def back(g):
                z = np.zeros_like(self.data)
                z[start:stop] = g
                _accum(self, z)
            out._backward_fn = back
        return out

    # ---- linear algebra -----------------------------------------------------

    def matmul(self, other: "Tensor"):
        a, b = self, other
        if a.data.ndim != 2 or b.data.ndim != 2:
            raise ShapeError("matmul expects matrices")
        if a.data.shape[1] != b.data.shape[0]:
            raise ShapeError(
                f"matmul inner dims differ: {a.data.shape[1]} vs {b.data.shape[0]}")
        out = a._child(a.data @ b.data, (a, b), "matmul")
        if out.requires_grad:
            def back(g):
                if a.requires_grad:
                    _accum(a, g @ b.data.T)
                if b.requires_grad:
                    _accum(b, a.data.T @ g)
            out._backward_fn = back
        return out

    def __matmul__(self, other):
        return self.matmul(other)


def _wrap(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(_as_array(value, like.data))


def _accum(t: Tensor, g: np.ndarray) -> None:
    t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, dim in enumerate(shape):
        if dim == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---- composite layers ------------------------------------------------------


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Fully-connected layer: x @ w + b."""
    return x.matmul(w) + b


def dot_similarity(a, b) -> Tensor:
    """Dot product of two equal-length vectors."""
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = b if isinstance(b, Tensor) else Tensor(b)
    if a.data.ndim != 1 or b.data.ndim != 1:
        raise ShapeError("dot_similarity expects vectors")
    if a.data.shape[0] != b.data.shape[0]:
        raise ShapeError(
            f"length mismatch: {a.data.shape[0]} vs {b.data.shape[0]}")
    return (a * b).sum()


def l2_normalize(x: Tensor) -> Tensor:
    """Scale rows (last axis) to unit Euclidean norm. Zero vectors are rejected."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    norms = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    if np.any(norms == 0):
        raise ValueError("cannot normalize a zero vector (degenerate embedding)")
    y = x.data / norms
    out = x._child(y, (x,), "l2_normalize")
    if out.requires_grad:
        def back(g):
            proj = (g * y).sum(axis=-1, keepdims=True)
            _accum(x, (g - y * proj) / norms)
        out._backward_fn = back
    return out


# ---- convolution / pooling / normalization ---------------------------------


def _conv_geometry(name: str, size: int, k: int, stride: int, pad: int) -> int:
    if stride < 1:
        raise ShapeError(f"stride along {name} must be >= 1, got {stride}")
    out = (size + 2 * pad - k) // stride + 1
    if out < 1:
        raise ShapeError(
            f"kernel {k} exceeds padded input {size + 2 * pad} along {name}")
    return out


def conv3d_cl(x: Tensor, w: Tensor, stride=(1, 1, 1), padding=(0, 0, 0)) -> Tensor:
    """3D cross-correlation, channels-last.

    x: (N, T, H, W, C); w: (kt, kh, kw, C, K) -> (N, To, Ho, Wo, K).
    Forward is an im2col GEMM; backward reuses the column matrix for the
    weight gradient and scatter-adds per kernel offset for the input gradient.
    """
    if x.data.ndim != 5 or w.data.ndim != 5:
        raise ShapeError("conv3d expects a 5-d input and a 5-d kernel")
    N, T, H, W, C = x.data.shape
    kt, kh, kw, wc, K = w.data.shape
    if wc != C:
        raise ShapeError(f"channel mismatch: input has {C}, kernel expects {wc}")
    st, sh, sw = stride
    pt, ph, pw = padding
    To = _conv_geometry("time", T, kt, st, pt)
    Ho = _conv_geometry("height", H, kh, sh, ph)
    Wo = _conv_geometry("width", W, kw, sw, pw)

    xp = np.pad(x.data, ((0, 0), (pt, pt), (ph, ph), (pw, pw), (0, 0)))
    cols = np.empty((N, To, Ho, Wo, kt, kh, kw, C), x.data.dtype)
    for dt in range(kt):
        for dh in range(kh):
            for dw in range(kw):
                cols[:, :, :, :, dt, dh, dw, :] = xp[
                    :, dt:dt + st * To:st, dh:dh + sh * Ho:sh, dw:dw + sw * Wo:sw, :]
    cols2 = cols.reshape(N * To * Ho * Wo, kt * kh * kw * C)
    wmat = w.data.reshape(kt * kh * kw * C, K)
    out_data = (cols2 @ wmat).reshape(N, To, Ho, Wo, K)
    out = x._child(out_data, (x, w), "conv3d")
    if out.requires_grad:
        def back(g):
            g2 = g.reshape(N * To * Ho * Wo, K)
            if w.requires_grad:
                _accum(w, (cols2.T @ g2).reshape(w.data.shape))
            if x.requires_grad:
                gcols = (g2 @ wmat.T).reshape(N, To, Ho, Wo, kt, kh, kw, C)
                gxp = np.zeros_like(xp)
                for dt in range(kt):
                    for dh in range(kh):
                        for dw in range(kw):
                            gxp[:, dt:dt + st * To:st, dh:dh + sh * Ho:sh,
                                dw:dw + sw * Wo:sw, :] += gcols[:, :, :, :, dt, dh, dw, :]
                _accum(x, gxp[:, pt:pt + T, ph:ph + H, pw:pw + W, :])
        out._backward_fn = back
    return out


def conv3d(x, w, stride=(1, 1, 1), padding=(0, 0, 0)) -> Tensor:
    """3D cross-correlation with the conventional layout.

    x: (N, C, T, H, W); w: (K, C, kt, kh, kw) -> (N, K, To, Ho, Wo).
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    w = w if isinstance(w, Tensor) else Tensor(w)
    if x.data.ndim != 5 or w.data.ndim != 5:
        raise ShapeError("conv3d expects a 5-d input and a 5-d kernel")
    xl = x.permute(0, 2, 3, 4, 1)
    wl = w.permute(2, 3, 4, 1, 0)
    return conv3d_cl(xl, wl, stride, padding).permute(0, 4, 1, 2, 3)


def maxpool3d_cl(x: Tensor, kernel=(2, 2, 2)) -> Tensor:
    """Non-overlapping max pool, channels-last; kernel clamps to the input size.

    Output dims follow floor((in - k) / k) + 1; trailing remainders are
    dropped and receive zero gradient.
    """
    N, T, H, W, C = x.data.shape
    kt, kh, kw = (min(k, d) for k, d in zip(kernel, (T, H, W)))
    To, Ho, Wo = T // kt, H // kh, W // kw
    cropped = x.data[:, :To * kt, :Ho * kh, :Wo * kw, :]
    blocks = cropped.reshape(N, To, kt, Ho, kh, Wo, kw, C)
    blocks = blocks.transpose(0, 1, 3, 5, 7, 2, 4, 6).reshape(N, To, Ho, Wo, C, kt * kh * kw)
    idx = np.argmax(blocks, axis=-1)
    out_data = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    out = x._child(out_data, (x,), "maxpool3d")
    if out.requires_grad:
        def back(g):
            gb = np.zeros((N, To, Ho, Wo, C, kt * kh * kw), x.data.dtype)
            np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
            gb = gb.reshape(N, To, Ho, Wo, C, kt, kh, kw).transpose(0, 1, 5, 2, 6, 3, 7, 4)
            gx = np.zeros_like(x.data)
            gx[:, :To * kt, :Ho * kh, :Wo * kw, :] = gb.reshape(
                N, To * kt, Ho * kh, Wo * kw, C)
            _accum(x, gx)
        out._backward_fn = back
    return out


def global_avg_pool_cl(x: Tensor) -> Tensor:
    """(N, T, H, W, C) -> (N, C) by averaging over space-time."""
    return x.mean(axis=(1, 2, 3))


def batchnorm_cl(x: Tensor, gamma: Tensor, beta: Tensor, running_mean, running_var,
                 training: bool, eps: float = 1e-5):
    """Per-channel normalization over (N, T, H, W), channels-last.

    Training mode normalizes with batch statistics (biased variance) and
    returns them so the caller can update running averages; eval mode uses
    the provided running statistics. Returns (out, batch_mean, batch_var).
    """
    axes = tuple(range(x.data.ndim - 1))
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
    else:
        mu, var = running_mean, running_var
    istd = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * istd
    out_data = gamma.data * xhat + beta.data
    out = x._child(out_data, (x, gamma, beta), "batchnorm")
    if out.requires_grad:
        def back(g):
            if gamma.requires_grad:
                _accum(gamma, (g * xhat).sum(axis=axes))
            if beta.requires_grad:
                _accum(beta, g.sum(axis=axes))
            if x.requires_grad:
                gxhat = g * gamma.data
                if training:
                    _accum(x, istd * (gxhat - gxhat.mean(axis=axes)
                                      - xhat * (gxhat * xhat).mean(axis=axes)))
                else:
                    _accum(x, gxhat * istd)
        out._backward_fn = back
    return out, (None if not training else mu), (None if not training else var)


# ---- gradient verification ---------------------------------------------------


def grad_check(build, params, eps: float = 1e-5, max_entries: int = 0, seed: int = 0,
               ) -> float:
    """Max relative error between analytic and central-difference gradients.

    `build` must rebuild the scalar loss from the current contents of
    `params` on every call. When `max_entries` > 0, at most that many
    coordinates per parameter are perturbed (seeded choice); 0 checks all.
    Relative error is |analytic - numeric| / max(1, |analytic|, |numeric|).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    params = list(params)
    for p in params:
        p.grad = None
    was_checking = _CHECK_FINITE
    set_finite_checks(True)
    try:
        loss = build()
        loss.backward()
        analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy()
                    for p in params]
        rng = np.random.Generator(np.random.Philox(key=seed))
        worst = 0.0
        for p, ana in zip(params, analytic):
            flat = p.data.reshape(-1)
            n = flat.size
            if max_entries and n > max_entries:
                idxs = rng.choice(n, size=max_entries, replace=False)
            else:
                idxs = range(n)
            ana_flat = ana.reshape(-1)
            for i in idxs:
                keep = flat[i]
                flat[i] = keep + eps
                f_plus = float(build().data)
                flat[i] = keep - eps
                f_minus = float(build().data)
                flat[i] = keep
                numeric = (f_plus - f_minus) / (2.0 * eps)
                err = abs(float(ana_flat[i]) - numeric) / max(
                    1.0, abs(float(ana_flat[i])), abs(numeric))
                worst = max(worst, err)
        return worst
    finally:
        set_finite_checks(was_checking)
