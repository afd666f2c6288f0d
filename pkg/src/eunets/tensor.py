"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op takes :class:`Tensor` inputs and returns a new, immutable
:class:`Tensor`. When any input requires a gradient the output keeps a
reference to its inputs and a backward rule; :func:`backward` replays those
rules in reverse creation order.

Example
-------
>>> x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
>>> grads = backward(sum(x * x))
>>> grads[x].tolist()
[2.0, 4.0, 6.0]
"""

import itertools
from dataclasses import dataclass

import numpy as np

from .exceptions import ContractViolation, NonFiniteError

__all__ = [
    "Tensor",
    "GradTape",
    "Gradients",
    "backward",
    "finite_diff_check",
    "finite_diff_report",
    "branch_signature",
    "add",
    "mul",
    "sum",
    "mean",
    "relu",
    "sigmoid",
    "softmax",
    "conv2d",
    "maxpool2d",
    "upsample_nearest",
    "concat",
    "channel_fold",
    "pixel_ce",
    "softmax_ce",
    "dice_loss",
    "one_hot",
]

# Monotonic ids make "created before" a total order, so reverse id order is a
# valid topological order for backward replay.
_node_ids = itertools.count()


class Tensor:
    """An immutable N-d array of float64 values with autodiff identity."""

    __slots__ = ("data", "requires_grad", "node_id", "name", "_parents", "_backward", "_branch")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.array(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite values in tensor {name or ''}".strip())
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_node_ids)
        self.name = name
        self._parents = ()
        self._backward = None
        self._branch = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dims(self):
        return list(self.data.shape)

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def detach(self):
        return Tensor(self.data, name=self.name)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other), mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, rule, name=None):
    """Wrap an op output; attach the backward rule only if some parent needs it."""
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{name or 'op'} produced non-finite values")
    out = Tensor.__new__(Tensor)
    data = np.asarray(data, dtype=np.float64, order="C")
    data.setflags(write=False)
    out.data = data
    out.node_id = next(_node_ids)
    out.name = name
    out._branch = None
    live = tuple(p for p in parents if p.requires_grad)
    out.requires_grad = bool(live)
    if live:
        out._parents = parents
        out._backward = rule
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Tape and backward pass
# ---------------------------------------------------------------------------


class GradTape:
    """Operations reachable from a root, ordered so inputs precede outputs."""

    def __init__(self, records):
        self.records = records

    @classmethod
    def from_root(cls, root):
        seen = {root.node_id: root}
        stack = [root]
        while stack:
            node = stack.pop()
            for parent in node._parents:
                if parent.node_id not in seen:
                    seen[parent.node_id] = parent
                    stack.append(parent)
        return cls([seen[k] for k in sorted(seen)])

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)


class Gradients(dict):
    """Map of ``node_id -> ndarray``; also indexable by the tensor itself."""

    def __getitem__(self, key):
        if isinstance(key, Tensor):
            key = key.node_id
        return super().__getitem__(key)

    def __contains__(self, key):
        if isinstance(key, Tensor):
            key = key.node_id
        return super().__contains__(key)

    def get(self, key, default=None):
        if isinstance(key, Tensor):
            key = key.node_id
        return super().get(key, default)


def backward(loss, seed=None):
    """Reverse-mode sweep from ``loss``.

    Returns gradients for every ``requires_grad`` tensor that ``loss`` depends
    on, intermediates included. ``seed`` replaces the implicit ``1.0`` and
    allows non-scalar roots (a vector-Jacobian product).
    """
    if seed is None:
        if loss.data.size != 1:
            raise ContractViolation(f"backward needs a scalar loss, got shape {loss.shape}")
        seed = np.ones_like(loss.data)
    else:
        seed = np.asarray(seed, dtype=np.float64)
        if seed.shape != loss.shape:
            raise ContractViolation("seed shape must match the root shape")
    grads = Gradients()
    if not loss.requires_grad:
        return grads
    tape = GradTape.from_root(loss)
    acc = {loss.node_id: seed}
    for node in reversed(tape.records):
        g = acc.get(node.node_id)
        if g is None:
            continue
        if node.requires_grad:
            grads[node.node_id] = g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = acc.get(parent.node_id)
            acc[parent.node_id] = pg if prev is None else prev + pg
    return grads


def branch_signature(root):
    """Bytes identifying which side of every kink (ReLU sign, max-pool winner) ``root`` took."""
    return b"".join(np.packbits(n._branch).tobytes() if n._branch.dtype == bool else n._branch.tobytes() for n in GradTape.from_root(root) if n._branch is not None)


@dataclass
class FiniteDiffReport:
    worst: float
    checked: int
    skipped: int


def finite_diff_report(f, x, eps=1e-5, skip_kinks=False):
    """Compare autodiff against central differences, coordinate by coordinate.

    ``f`` maps a :class:`Tensor` to a scalar :class:`Tensor`. The step actually
    taken is the representable difference ``(x + eps) - (x - eps)``. The error
    per coordinate is ``|a - c| / (|a| + |c| + 1e-12)``. With ``skip_kinks``,
    coordinates whose two probes take different ReLU/max-pool branches are
    left out (the difference quotient there spans a kink) and counted.
    """
    if eps <= 0:
        raise ContractViolation("eps must be positive")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(base, requires_grad=True)
    try:
        out = f(xt)
    except NonFiniteError as exc:
        raise ContractViolation(f"f(x) is not finite: {exc}") from exc
    if out.data.size != 1:
        raise ContractViolation("f must be scalar-valued")
    analytic = backward(out).get(xt, np.zeros_like(base)).reshape(-1)
    flat = base.reshape(-1)
    worst, skipped = 0.0, 0
    for i in range(flat.size):
        hi = flat.copy()
        lo = flat.copy()
        hi[i] += eps
        lo[i] -= eps
        try:
            up = f(Tensor(hi.reshape(base.shape), requires_grad=skip_kinks))
            down = f(Tensor(lo.reshape(base.shape), requires_grad=skip_kinks))
        except NonFiniteError as exc:
            raise ContractViolation(f"f is not finite near x: {exc}") from exc
        if skip_kinks and branch_signature(up) != branch_signature(down):
            skipped += 1
            continue
        central = (up.item() - down.item()) / (hi[i] - lo[i])
        err = abs(analytic[i] - central) / (abs(analytic[i]) + abs(central) + 1e-12)
        worst = max(worst, err)
    return FiniteDiffReport(worst, flat.size - skipped, skipped)


def finite_diff_check(f, x, eps=1e-5, skip_kinks=False):
    """Worst relative error from :func:`finite_diff_report`."""
    return finite_diff_report(f, x, eps, skip_kinks).worst


# ---------------------------------------------------------------------------
# Elementwise and reductions
# ---------------------------------------------------------------------------


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape

    def rule(g):
        return (
            _unbroadcast(g, sa) if a.requires_grad else None,
            _unbroadcast(g, sb) if b.requires_grad else None,
        )

    return _result(a.data + b.data, (a, b), rule, "add")


def mul(a, b):
    """Elementwise product; ``b`` may be a plain float or array constant."""
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        c = np.asarray(b, dtype=np.float64)
        sa = a.shape

        def rule_const(g):
            return (_unbroadcast(g * c, sa),)

        return _result(a.data * c, (a,), rule_const, "mul")

    sa, sb = a.shape, b.shape

    def rule(g):
        return (
            _unbroadcast(g * b.data, sa) if a.requires_grad else None,
            _unbroadcast(g * a.data, sb) if b.requires_grad else None,
        )

    return _result(a.data * b.data, (a, b), rule, "mul")


def sum(x):  # noqa: A001 - mirrors numpy naming
    shape = x.shape

    def rule(g):
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.asarray(x.data.sum()), (x,), rule, "sum")


def mean(x):
    n = x.data.size
    shape = x.shape

    def rule(g):
        return (np.full(shape, float(g) / n),)

    return _result(np.asarray(x.data.mean()), (x,), rule, "mean")


def relu(x):
    mask = x.data > 0

    def rule(g):
        return (g * mask,)

    out = _result(np.where(mask, x.data, 0.0), (x,), rule, "relu")
    out._branch = mask
    return out


def _sigmoid(v):
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def sigmoid(x):
    s = _sigmoid(x.data)

    def rule(g):
        return (g * s * (1.0 - s),)

    return _result(s, (x,), rule, "sigmoid")


def _softmax(v, axis=1):
    z = v - v.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(x, axis=1):
    p = _softmax(x.data, axis)

    def rule(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _result(p, (x,), rule, "softmax")


# ---------------------------------------------------------------------------
# Spatial ops (NCHW)
# ---------------------------------------------------------------------------


def conv2d(x, w, b=None, stride=1, pad=0):
    """2-D cross-correlation of ``x[N,Cin,H,W]`` with ``w[Cout,Cin,kh,kw]``."""
    if x.ndim != 4 or w.ndim != 4:
        raise ContractViolation("conv2d expects 4-d input and kernel")
    n, cin, h, wd = x.shape
    cout, kcin, kh, kw = w.shape
    if kcin != cin:
        raise ContractViolation(f"conv2d channel mismatch: input {cin}, kernel {kcin}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ContractViolation("conv2d kernel extents must be odd")
    if pad < 0 or stride < 1:
        raise ContractViolation("conv2d needs pad >= 0 and stride >= 1")
    if b is not None and b.shape != (cout,):
        raise ContractViolation("conv2d bias must have shape (Cout,)")
    span_h, span_w = h + 2 * pad - kh, wd + 2 * pad - kw
    if span_h < 0 or span_w < 0 or span_h % stride or span_w % stride:
        raise ContractViolation("conv2d output extent is not integral")
    ho, wo = span_h // stride + 1, span_w // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    kern = w.data

    def window(arr, i, j):
        return arr[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride]

    # accumulate as [Cout, N, Ho, Wo] to avoid a transpose per tap
    acc = np.zeros((cout, n, ho, wo))
    for i in range(kh):
        for j in range(kw):
            acc += np.tensordot(kern[:, :, i, j], window(xp, i, j), axes=([1], [1]))
    out = acc.transpose(1, 0, 2, 3)
    if b is not None:
        out = out + b.data[None, :, None, None]

    parents = (x, w) if b is None else (x, w, b)

    def rule(g):
        gx = gw = gb = None
        if w.requires_grad:
            gw = np.empty_like(kern)
            for i in range(kh):
                for j in range(kw):
                    gw[:, :, i, j] = np.tensordot(g, window(xp, i, j), axes=([0, 2, 3], [0, 2, 3]))
        if x.requires_grad:
            gxp = np.zeros((cin, n) + xp.shape[2:])
            gt = g.transpose(1, 0, 2, 3)
            for i in range(kh):
                for j in range(kw):
                    view = gxp[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride]
                    view += np.tensordot(kern[:, :, i, j], gt, axes=([0], [0]))
            gxp = gxp.transpose(1, 0, 2, 3)
            gx = gxp[:, :, pad : pad + h, pad : pad + wd] if pad else gxp
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw) if b is None else (gx, gw, gb)

    return _result(out, parents, rule, "conv2d")


def maxpool2d(x, size=2):
    """Non-overlapping max pooling; ties route the gradient to the first maximum."""
    n, c, h, w = x.shape
    if h % size or w % size:
        raise ContractViolation("maxpool2d needs spatial dims divisible by the window")
    ho, wo = h // size, w // size
    win = x.data.reshape(n, c, ho, size, wo, size).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, size * size)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def rule(g):
        gw = np.zeros_like(win)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gw = gw.reshape(n, c, ho, wo, size, size).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gw,)

    res = _result(out, (x,), rule, "maxpool2d")
    res._branch = idx
    return res


def upsample_nearest(x, factor):
    if int(factor) != factor or factor < 1:
        raise ContractViolation("upsample factor must be an integer >= 1")
    factor = int(factor)
    if factor == 1:
        return x
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def rule(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return _result(out, (x,), rule, "upsample")


def concat(tensors, axis=1):
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def rule(g):
        out = []
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                out.append(g[tuple(sl)])
            else:
                out.append(None)
        return tuple(out)

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), rule, "concat")


def channel_fold(x, width):
    """Parameter-free channel resize: input channel ``j`` lands on ``j % width``.

    Narrower inputs are zero-padded, wider ones are summed cyclically.
    """
    n, c = x.shape[:2]
    if c == width:
        return x
    groups = -(-c // width)
    padded = np.zeros((n, groups * width) + x.shape[2:])
    padded[:, :c] = x.data
    out = padded.reshape((n, groups, width) + x.shape[2:]).sum(axis=1)

    def rule(g):
        return (np.tile(g, (1, groups) + (1,) * (g.ndim - 2))[:, :c],)

    return _result(out, (x,), rule, "channel_fold")


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def _check_target(target, n_classes, spatial):
    t = np.asarray(target.data if isinstance(target, Tensor) else target)
    if t.shape != spatial:
        raise ContractViolation(f"target shape {t.shape} does not match logits {spatial}")
    ti = t.astype(np.int64)
    if np.any(ti != t) or ti.min(initial=0) < 0 or ti.max(initial=0) >= n_classes:
        raise ContractViolation(f"target class ids must be integers in [0, {n_classes})")
    return ti


def pixel_ce(logits, target):
    """Per-pixel cross-entropy ``[N,H,W]`` of ``logits[N,K,H,W]`` against class ids."""
    n, k, h, w = logits.shape
    t = _check_target(target, k, (n, h, w))
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
    picked = np.take_along_axis(z, t[:, None], axis=1)[:, 0]
    onehot = np.moveaxis(np.eye(k)[t], -1, 1)

    def rule(g):
        return ((_softmax(z) - onehot) * g[:, None],)

    return _result(lse - picked, (logits,), rule, "pixel_ce")


def softmax_ce(logits, target):
    """Mean over pixels of ``-log softmax(logits)[target]``."""
    return mean(pixel_ce(logits, target))


def one_hot(target, n_classes):
    """``[N,H,W]`` class ids to a float ``[N,K,H,W]`` indicator array."""
    t = np.asarray(target, dtype=np.int64)
    if t.min(initial=0) < 0 or t.max(initial=0) >= n_classes:
        raise ContractViolation(f"class ids must lie in [0, {n_classes})")
    return np.moveaxis(np.eye(n_classes)[t], -1, 1)


def dice_loss(probs, target, smooth=1.0):
    """Soft Dice loss averaged over batch and class channels.

    ``target`` is a one-hot array with the same shape as ``probs``.
    """
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if t.shape != probs.shape:
        raise ContractViolation("dice_loss target must be one-hot with the shape of probs")
    p = probs.data
    axes = tuple(range(2, p.ndim))
    inter = (p * t).sum(axis=axes)
    denom = p.sum(axis=axes) + t.sum(axis=axes) + smooth
    numer = 2.0 * inter + smooth
    count = inter.size
    expand = (slice(None), slice(None)) + (None,) * len(axes)

    def rule(g):
        # d/dp of -(numer/denom), averaged
        dp = -(2.0 * t / denom[expand] - numer[expand] / denom[expand] ** 2)
        return (dp * (float(g) / count),)

    return _result(np.asarray(1.0 - (numer / denom).mean()), (probs,), rule, "dice_loss")
