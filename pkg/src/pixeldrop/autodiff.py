"""Dense tensors with reverse-mode automatic differentiation.

Just enough machinery to express small residual convnets, their losses and
input gradients: each operation computes its forward value eagerly with numpy
and registers a closure that accumulates gradients into its parents. Compute
is float32 by default; building tensors from float64 arrays switches the
whole downstream graph to float64 (used by gradient checks).

Broadcasting is deliberately restricted to a leading batch dimension (one
operand may have size 1 there) so that every backward rule stays obviously
correct. Non-finite values anywhere abort the operation with
``FloatingPointError`` instead of propagating.
"""

import numpy as np

DEFAULT_DTYPE = np.float32
_BN_EPS = 1e-5


class GraphError(RuntimeError):
    """Raised when a consumed graph is traversed again."""


_grad_enabled = True


class no_grad:
    """Context manager that disables graph construction (eval-only forwards)."""

    def __enter__(self):
        global _grad_enabled
        self._prev, _grad_enabled = _grad_enabled, False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _check_finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values produced by {what}")


def _as_array(data, dtype=None):
    if dtype is not None:
        return np.asarray(data).astype(dtype, copy=False)
    # Only arrays that already carry float64 keep it; lists, scalars and
    # every other dtype land on the float32 compute default.
    if isinstance(data, np.ndarray) and data.dtype == np.float64:
        return data
    return np.asarray(data).astype(DEFAULT_DTYPE, copy=False)


class Tensor:
    """A dense array plus an optional position in a backward graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_grad_fn", "_op", "_consumed")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = _as_array(data, dtype)
        _check_finite(self.data, "tensor creation")
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._grad_fn = None
        self._op = "leaf"
        self._consumed = False

    @classmethod
    def _from_op(cls, data, parents, grad_fn, op):
        out = cls.__new__(cls)
        out.data = data
        _check_finite(out.data, op)
        out.grad = None
        out.requires_grad = _grad_enabled and any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = parents
            out._grad_fn = grad_fn
        else:
            out._parents = ()
            out._grad_fn = None
        out._op = op
        out._consumed = False
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def _accum(self, contribution):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += contribution

    def backward(self):
        """Populate ``grad`` on every reachable tensor with ``requires_grad``.

        Only scalar roots are accepted and a graph can be traversed once.
        """
        if self.data.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {self.data.shape}")
        if not self.requires_grad:
            raise GraphError("loss does not require grad; nothing to backpropagate")
        if self._consumed:
            raise GraphError("backward already ran on this graph; rebuild the forward pass")
        self._consumed = True

        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._grad_fn is None:
                continue
            _check_finite(node.grad, f"gradient flowing into {node._op}")
            node._grad_fn(node.grad)
        for node in topo:
            if node.grad is not None and not node._parents:
                _check_finite(node.grad, "leaf gradient")

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return add(self, neg(_wrap(other)))

    def __rsub__(self, other):
        return add(_wrap(other), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self):
        return scale(tsum(self), 1.0 / self.data.size)

    def max(self, axis):
        return tmax(self, axis)


def _wrap(value):
    return value if isinstance(value, Tensor) else Tensor(value)


def _broadcast_axis(a_shape, b_shape, op):
    """Validate the restricted broadcast and say which side is expanded."""
    if a_shape == b_shape:
        return None
    if len(a_shape) == len(b_shape) and a_shape[1:] == b_shape[1:]:
        if a_shape[0] == 1:
            return "a"
        if b_shape[0] == 1:
            return "b"
    raise ValueError(
        f"{op}: shapes {a_shape} and {b_shape} differ; only a leading "
        "batch dimension of size 1 may broadcast"
    )


def add(a, b):
    side = _broadcast_axis(a.data.shape, b.data.shape, "add")
    out_data = a.data + b.data

    def grad_fn(g):
        if a.requires_grad:
            a._accum(g.sum(axis=0, keepdims=True) if side == "a" else g)
        if b.requires_grad:
            b._accum(g.sum(axis=0, keepdims=True) if side == "b" else g)

    return Tensor._from_op(out_data, (a, b), grad_fn, "add")


def neg(a):
    def grad_fn(g):
        if a.requires_grad:
            a._accum(-g)

    return Tensor._from_op(-a.data, (a,), grad_fn, "neg")


def scale(a, factor):
    def grad_fn(g):
        if a.requires_grad:
            a._accum(g * factor)

    return Tensor._from_op(a.data * factor, (a,), grad_fn, "scale")


def mul(a, b):
    side = _broadcast_axis(a.data.shape, b.data.shape, "mul")
    out_data = a.data * b.data

    def grad_fn(g):
        if a.requires_grad:
            ga = g * b.data
            a._accum(ga.sum(axis=0, keepdims=True) if side == "a" else ga)
        if b.requires_grad:
            gb = g * a.data
            b._accum(gb.sum(axis=0, keepdims=True) if side == "b" else gb)

    return Tensor._from_op(out_data, (a, b), grad_fn, "mul")


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul: inner dimensions differ, {a.data.shape} @ {b.data.shape}")

    def grad_fn(g):
        if a.requires_grad:
            a._accum(g @ b.data.T)
        if b.requires_grad:
            b._accum(a.data.T @ g)

    return Tensor._from_op(a.data @ b.data, (a, b), grad_fn, "matmul")


def relu(a):
    keep = a.data > 0

    def grad_fn(g):
        if a.requires_grad:
            a._accum(g * keep)

    return Tensor._from_op(a.data * keep, (a,), grad_fn, "relu")


def tsum(a, axis=None):
    out_data = np.asarray(a.data.sum(axis=axis))

    def grad_fn(g):
        if not a.requires_grad:
            return
        if axis is None:
            a._accum(np.broadcast_to(g, a.data.shape).copy())
        else:
            a._accum(np.broadcast_to(np.expand_dims(g, axis), a.data.shape).copy())

    return Tensor._from_op(out_data, (a,), grad_fn, "sum")


def tmax(a, axis):
    out_data = a.data.max(axis=axis)
    # Ties share the incoming gradient equally; with continuous inputs ties
    # effectively never happen.
    hit = (a.data == np.expand_dims(out_data, axis))
    counts = hit.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        if a.requires_grad:
            a._accum(np.expand_dims(g, axis) * hit / counts)

    return Tensor._from_op(out_data, (a,), grad_fn, "max")


def softmax(a):
    """Row-wise softmax of 2-D logits."""
    if a.data.ndim != 2:
        raise ValueError(f"softmax expects [N, C] logits, got shape {a.data.shape}")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=1, keepdims=True)

    def grad_fn(g):
        if a.requires_grad:
            # dL/dz = p * (g - sum(g * p)) per row
            a._accum(p * (g - (g * p).sum(axis=1, keepdims=True)))

    return Tensor._from_op(p, (a,), grad_fn, "softmax")


def cross_entropy(logits, target, reduction="mean"):
    """Cross-entropy of logits against class indices or distributions.

    ``target`` is either an integer array of shape [N] or a probability
    matrix of shape [N, C] whose rows sum to 1 (used for uniform-target
    objectives). Returns a scalar with the default "mean" reduction, or the
    per-example [N] loss vector with reduction="none".
    """
    if reduction not in ("mean", "none"):
        raise ValueError(f"unknown reduction {reduction!r}")
    z = logits.data
    if z.ndim != 2 or z.shape[1] < 2:
        raise ValueError(f"cross_entropy expects [N, C] logits with C >= 2, got {z.shape}")
    n, c = z.shape

    target = target.data if isinstance(target, Tensor) else np.asarray(target)
    if target.ndim == 1:
        if target.shape[0] != n:
            raise ValueError(f"target batch {target.shape[0]} != logits batch {n}")
        idx = target.astype(np.int64)
        if idx.min() < 0 or idx.max() >= c:
            raise ValueError(f"class index out of range for {c} classes: {idx.min()}..{idx.max()}")
        dist = np.zeros_like(z)
        dist[np.arange(n), idx] = 1.0
    elif target.ndim == 2:
        if target.shape != z.shape:
            raise ValueError(f"distribution target shape {target.shape} != logits shape {z.shape}")
        sums = target.sum(axis=1)
        if np.abs(sums - 1.0).max() > 1e-4:
            raise ValueError("distribution target rows must sum to 1")
        dist = target.astype(z.dtype, copy=False)
    else:
        raise ValueError(f"unsupported target ndim {target.ndim}")

    shifted = z - z.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True)) - shifted
    p = np.exp(-logz)

    if reduction == "mean":
        loss = np.asarray((dist * logz).sum() / n)

        def grad_fn(g):
            if logits.requires_grad:
                logits._accum(g * (p - dist) / n)
    else:
        loss = (dist * logz).sum(axis=1)

        def grad_fn(g):
            if logits.requires_grad:
                logits._accum(g[:, None] * (p - dist))

    return Tensor._from_op(loss, (logits,), grad_fn, "cross_entropy")


def _im2col(x, kh, kw, stride, padding):
    """[N,C,H,W] -> patch matrix [N, OH*OW, C*kh*kw] plus output spatial dims."""
    n, c, h, w = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    windows = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]  # [N, C, OH, OW, kh, kw]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n, oh * ow, c * kh * kw)
    return np.ascontiguousarray(cols), oh, ow


def conv2d(x, weight, stride=1, padding=0):
    """2-D cross-correlation of [N,C,H,W] with filters [K,C,kh,kw]."""
    xd, wd = x.data, weight.data
    if xd.ndim != 4 or wd.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and weight, got {xd.shape} and {wd.shape}")
    n, c, h, w = xd.shape
    k, wc, kh, kw = wd.shape
    if wc != c:
        raise ValueError(f"conv2d channel mismatch: input {xd.shape} vs weight {wd.shape}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ValueError(f"conv2d kernel {wd.shape} larger than padded input {xd.shape}")

    cols, oh, ow = _im2col(xd, kh, kw, stride, padding)
    wmat = wd.reshape(k, c * kh * kw)
    out = (cols @ wmat.T).transpose(0, 2, 1).reshape(n, k, oh, ow)

    def grad_fn(g):
        gmat = g.reshape(n, k, oh * ow).transpose(0, 2, 1)  # [N, OH*OW, K]
        if weight.requires_grad:
            # Recompute patches instead of keeping them alive in the closure;
            # the extra im2col is much cheaper than holding the memory.
            cols_b, _, _ = _im2col(xd, kh, kw, stride, padding)
            dw = np.einsum("nlk,nlp->kp", gmat, cols_b, optimize=True)
            weight._accum(dw.reshape(wd.shape))
        if x.requires_grad:
            dcols = (gmat @ wmat).reshape(n, oh, ow, c, kh, kw)
            ph, pw = h + 2 * padding, w + 2 * padding
            dxp = np.zeros((n, c, ph, pw), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += \
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            if padding:
                dxp = dxp[:, :, padding:ph - padding, padding:pw - padding]
            x._accum(dxp)

    return Tensor._from_op(out, (x, weight), grad_fn, "conv2d")


def global_avg_pool(x):
    """[N,C,H,W] -> [N,C] spatial mean."""
    if x.data.ndim != 4:
        raise ValueError(f"global_avg_pool expects 4-D input, got {x.data.shape}")
    n, c, h, w = x.data.shape
    out = x.data.mean(axis=(2, 3))

    def grad_fn(g):
        if x.requires_grad:
            x._accum(np.broadcast_to(g[:, :, None, None] / (h * w), x.data.shape).copy())

    return Tensor._from_op(out, (x,), grad_fn, "global_avg_pool")


def batch_stat_norm(x, gamma, beta, running_mean, running_var, training,
                    momentum=0.1, eps=_BN_EPS, update_running=None):
    """Per-channel statistic normalization with learned scale/shift.

    Training mode normalizes by the batch statistics over (N, H, W) and
    updates the running buffers in place; eval mode uses the frozen running
    statistics (and has the correspondingly simple per-channel gradient).
    ``update_running`` (default: same as ``training``) can be cleared to run
    an auxiliary training-mode pass whose input distribution must not leak
    into the buffers.
    """
    xd = x.data
    if xd.ndim != 4:
        raise ValueError(f"batch_stat_norm expects [N,C,H,W], got {xd.shape}")
    n, c, h, w = xd.shape
    m = n * h * w
    if m == 0:
        raise ValueError("batch_stat_norm over an empty batch/spatial axis")
    if update_running is None:
        update_running = training

    if training:
        mean = xd.mean(axis=(0, 2, 3), keepdims=True)
        var = xd.var(axis=(0, 2, 3), keepdims=True)
        if update_running:
            running_mean += momentum * (mean.reshape(-1).astype(running_mean.dtype)
                                        - running_mean)
            running_var += momentum * (var.reshape(-1).astype(running_var.dtype)
                                       - running_var)
    else:
        mean = running_mean.reshape(1, c, 1, 1).astype(xd.dtype)
        var = running_var.reshape(1, c, 1, 1).astype(xd.dtype)

    istd = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mean) * istd
    out = gamma.data * xhat + beta.data

    def grad_fn(g):
        if gamma.requires_grad:
            gamma._accum((g * xhat).sum(axis=(0, 2, 3), keepdims=True))
        if beta.requires_grad:
            beta._accum(g.sum(axis=(0, 2, 3), keepdims=True))
        if x.requires_grad:
            if training:
                dxhat = g * gamma.data
                s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
                s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                x._accum(istd / m * (m * dxhat - s1 - xhat * s2))
            else:
                x._accum(g * gamma.data * istd)

    return Tensor._from_op(out, (x, gamma, beta), grad_fn, "batch_stat_norm")


def sgd_momentum_step(params, grads, velocities, lr, momentum, weight_decay):
    """In-place SGD update: v <- momentum*v + g + wd*p; p <- p - lr*v."""
    for p, g, v in zip(params, grads, velocities, strict=True):
        if p.shape != g.shape or p.shape != v.shape:
            raise ValueError(f"sgd_momentum_step shape mismatch: {p.shape}, {g.shape}, {v.shape}")
        v *= momentum
        v += g
        if weight_decay:
            v += weight_decay * p
        p -= lr * v


def finite_diff_check(f, x, h=1e-4):
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps a tensor to a scalar tensor and must be deterministic; run it
    on float64 data. Every coordinate of ``x`` is probed.
    """
    x.grad = None
    loss = f(x)
    loss.backward()
    analytic = x.grad.copy()

    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = float(f(x).data)
        flat[i] = orig - h
        lo = float(f(x).data)
        flat[i] = orig
        num_flat[i] = (hi - lo) / (2 * h)

    rel = np.abs(analytic - numeric) / (np.abs(analytic) + 1e-8)
    return float(rel.max())
