"""Dense float64 tensors with tape-based reverse-mode autodiff.

Just enough machinery for small convolutional density regressors: tensors
wrap numpy arrays, every primitive op records a backward closure, and
``backward()`` replays the tape in exact reverse execution order.
"""

import itertools

import numpy as np

# When enabled, every op asserts its output is finite. Cheap at desk scale;
# tests switch it on, long runs leave it off.
CHECK_FINITE = False

_op_counter = itertools.count()


class Tensor:
    """N-d float64 array with an optional gradient buffer.

    Tensors produced by primitive ops carry a context linking them to their
    inputs; leaf tensors with ``requires_grad=True`` receive gradients when
    ``backward()`` is called on a downstream scalar.
    """

    __slots__ = ("data", "grad", "requires_grad", "_ctx", "_seq", "_backward_done")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._ctx = None
        self._seq = next(_op_counter)
        self._backward_done = False

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def sum(self):
        return tsum(self)

    def backward(self):
        """Populate ``grad`` on every reachable requires_grad leaf.

        Only valid on scalars. A second call without re-running the forward
        pass is an error: the saved activations describe one forward
        execution and silently accumulating twice is a debugging trap.
        """
        if self.data.ndim != 0:
            raise ValueError(f"backward() requires a scalar, got shape {self.data.shape}")
        if self._backward_done:
            raise RuntimeError("backward() already called on this graph; re-run the forward pass")
        self._backward_done = True

        nodes = _reachable(self)
        # Decreasing creation sequence == exact reverse of forward execution.
        nodes.sort(key=lambda t: -t._seq)

        self.grad = np.ones_like(self.data)
        for node in nodes:
            ctx = node._ctx
            if ctx is None or node.grad is None:
                continue
            grads = ctx.backward(node.grad)
            for parent, g in zip(ctx.parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.data)
                parent.grad += g


def _reachable(root):
    seen = set()
    out = []
    stack = [root]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        out.append(t)
        if t._ctx is not None:
            stack.extend(t._ctx.parents)
    return out


class _Ctx:
    """Saved inputs plus a backward rule for one executed op."""

    __slots__ = ("parents", "backward")

    def __init__(self, parents, backward):
        self.parents = parents
        self.backward = backward


def _make(data, parents, backward):
    """Wrap an op result, attaching the tape record if any input needs grad."""
    if CHECK_FINITE and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite value produced by a forward op")
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._ctx = _Ctx(parents, backward)
    return out


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# primitives


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ValueError(f"add: shape mismatch {a.data.shape} vs {b.data.shape}")

    def backward(up):
        return up, up

    return _make(a.data + b.data, (a, b), backward)


def scale(a, s):
    """Multiply by a python scalar (no gradient w.r.t. the scalar)."""
    a = as_tensor(a)
    s = float(s)

    def backward(up):
        return (up * s,)

    return _make(a.data * s, (a,), backward)


def tsum(a):
    a = as_tensor(a)

    def backward(up):
        return (np.full_like(a.data, float(up)),)

    return _make(np.sum(a.data), (a,), backward)


def relu(a):
    """Elementwise max(0, x); gradient passes only where x > 0."""
    a = as_tensor(a)
    mask = a.data > 0

    def backward(up):
        return (up * mask,)

    return _make(np.where(mask, a.data, 0.0), (a,), backward)


def conv2d(x, weight, bias=None, stride=1, pad=0, dilation=1):
    """Cross-correlation of NCHW input with OIHW weight, zero padding.

    Direct summation over kernel taps, vectorized across batch and space.
    Output extent: floor((H + 2*pad - dilation*(kh-1) - 1) / stride) + 1.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if bias is not None:
        bias = as_tensor(bias)
    if stride < 1 or pad < 0 or dilation < 1:
        raise ValueError(f"conv2d: invalid stride={stride} pad={pad} dilation={dilation}")
    B, Cin, H, W = x.data.shape
    Cout, Cin_w, kh, kw = weight.data.shape
    if Cin != Cin_w:
        raise ValueError(
            f"conv2d: input has {Cin} channels (shape {x.data.shape}) but weight "
            f"expects {Cin_w} (shape {weight.data.shape})"
        )
    Hout = (H + 2 * pad - dilation * (kh - 1) - 1) // stride + 1
    Wout = (W + 2 * pad - dilation * (kw - 1) - 1) // stride + 1
    if Hout < 1 or Wout < 1:
        raise ValueError(f"conv2d: spatial extents {(H, W)} too small for one output position")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data

    out = np.zeros((B, Cout, Hout, Wout))
    for i in range(kh):
        for j in range(kw):
            sl = xp[
                :,
                :,
                i * dilation : i * dilation + stride * Hout : stride,
                j * dilation : j * dilation + stride * Wout : stride,
            ]
            out += np.einsum("bchw,oc->bohw", sl, weight.data[:, :, i, j])
    if bias is not None:
        out += bias.data.reshape(1, Cout, 1, 1)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(up):
        gx = np.zeros_like(xp) if x.requires_grad else None
        gw = np.zeros_like(weight.data) if weight.requires_grad else None
        for i in range(kh):
            for j in range(kw):
                rows = slice(i * dilation, i * dilation + stride * Hout, stride)
                cols = slice(j * dilation, j * dilation + stride * Wout, stride)
                if gw is not None:
                    gw[:, :, i, j] = np.einsum("bchw,bohw->oc", xp[:, :, rows, cols], up)
                if gx is not None:
                    gx[:, :, rows, cols] += np.einsum("bohw,oc->bchw", up, weight.data[:, :, i, j])
        if gx is not None and pad:
            gx = gx[:, :, pad : pad + H, pad : pad + W]
        if bias is None:
            return gx, gw
        return gx, gw, up.sum(axis=(0, 2, 3))

    return _make(out, parents, backward)


def max_pool2(x):
    """2x2 max pooling, stride 2; ties route the gradient to the first
    window element in row-major order."""
    x = as_tensor(x)
    B, C, H, W = x.data.shape
    if H % 2 or W % 2:
        raise ValueError(f"max_pool2: spatial extents must be even, got {(H, W)}")
    # Window axis ordered (0,0),(0,1),(1,0),(1,1) so argmax breaks ties row-major.
    windows = (
        x.data.reshape(B, C, H // 2, 2, W // 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(B, C, H // 2, W // 2, 4)
    )
    arg = np.argmax(windows, axis=-1)
    out = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]

    def backward(up):
        gwin = np.zeros_like(windows)
        np.put_along_axis(gwin, arg[..., None], up[..., None], axis=-1)
        g = (
            gwin.reshape(B, C, H // 2, W // 2, 2, 2)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(B, C, H, W)
        )
        return (g,)

    return _make(out, (x,), backward)


def l1_loss(pred, target):
    """Mean absolute difference over all elements.

    For batched maps of uniform shape this equals the per-sample mean
    averaged over the batch. The subgradient at zero difference is 0.
    """
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.data.shape != target.data.shape:
        raise ValueError(f"l1_loss: shape mismatch {pred.data.shape} vs {target.data.shape}")
    diff = pred.data - target.data
    n = diff.size

    def backward(up):
        g = np.sign(diff) * (float(up) / n)
        return g, -g

    return _make(np.abs(diff).mean(), (pred, target), backward)


def finite_diff_grad(f, x, h=1e-5):
    """Central-difference gradient of a scalar-valued function of one array.

    Testing oracle; ``f`` takes and must not mutate a float64 ndarray.
    """
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return g
