"""Dense NCHW tensors with tape-based reverse-mode differentiation.

Every differentiable operation executed while recording is enabled appends an
entry ``(output, inputs, backward_rule)`` to the active :class:`Tape`.  Because
entries are appended as the forward pass runs, the tape is already in
topological order and :func:`backward` simply replays it in reverse.

Network math runs in float32.  Arrays created explicitly as float64 stay
float64, which is what the finite-difference checker relies on.
"""

import contextlib

import numpy as np
from scipy import special

from .errors import DimensionError, ContractError, NumericError

__all__ = [
    "Tensor",
    "Tape",
    "no_grad",
    "is_recording",
    "get_tape",
    "backward",
    "grad_check",
    "conv2d",
    "conv2d_transposed",
    "leaky_relu",
    "softplus",
    "softmax",
    "concat",
    "where",
    "gaussian_interval",
    "lower_bound",
]


class Tape:
    """Ordered record of differentiable operations."""

    def __init__(self):
        self.entries = []

    def __len__(self):
        return len(self.entries)

    def record(self, output, inputs, rule):
        self.entries.append((output, inputs, rule))

    def clear(self):
        self.entries = []

    def backward(self, loss, retain=False):
        """Propagate d(loss)/d(node) backwards; returns ``{leaf: grad}``."""
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads = {id(loss): np.ones_like(loss.data)}
        seen = {id(loss): loss}
        produced = set()
        for output, inputs, rule in reversed(self.entries):
            produced.add(id(output))
            g = grads.pop(id(output), None)
            if g is None:
                continue
            for node, gi in zip(inputs, rule(g)):
                if gi is None or not node.requires_grad:
                    continue
                key = id(node)
                seen[key] = node
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        leaves = {}
        for key, g in grads.items():
            if key in produced:
                continue
            node = seen[key]
            g = np.asarray(g, dtype=node.data.dtype).reshape(node.shape)
            node.grad = g if node.grad is None else node.grad + g
            leaves[node] = node.grad
        if not retain:
            self.clear()
        return leaves


_tape = Tape()
_recording = True


def get_tape():
    return _tape


def is_recording():
    return _recording


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _recording
    previous = _recording
    _recording = False
    try:
        yield
    finally:
        _recording = previous


def _as_array(value, dtype=None):
    if isinstance(value, Tensor):
        return value.data
    arr = np.asarray(value)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype.kind != "f":
        arr = arr.astype(np.float32)
    return arr


def _lift(value, like=None):
    if isinstance(value, Tensor):
        return value
    dtype = like.data.dtype if like is not None else np.float32
    return Tensor(np.asarray(value, dtype=dtype))


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _result(data, inputs, rule):
    needs = _recording and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(data, needs)
    if needs:
        _tape.record(out, inputs, rule)
    return out


class Tensor:
    """A dense array plus an optional gradient.

    Args:
        data: array-like values.  Converted to float32 unless ``dtype`` is given
            or ``data`` is already a float64 ndarray.
        requires_grad: whether this tensor is a differentiable leaf.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = np.float64 if getattr(data, "dtype", None) == np.float64 else np.float32
        self.data = np.array(data, dtype=dtype, copy=True)
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @classmethod
    def _wrap(cls, data, requires_grad):
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = requires_grad
        t.grad = None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor._wrap(self.data, False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # arithmetic -----------------------------------------------------------

    def __add__(self, other):
        other = _lift(other, self)
        a_shape, b_shape = self.shape, other.shape
        return _result(
            self.data + other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape)),
        )

    __radd__ = __add__

    def __sub__(self, other):
        other = _lift(other, self)
        a_shape, b_shape = self.shape, other.shape
        return _result(
            self.data - other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(-g, b_shape)),
        )

    def __rsub__(self, other):
        return _lift(other, self) - self

    def __mul__(self, other):
        other = _lift(other, self)
        a, b = self.data, other.data
        return _result(
            a * b,
            (self, other),
            lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _lift(other, self)
        a, b = self.data, other.data
        return _result(
            a / b,
            (self, other),
            lambda g: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)),
        )

    def __rtruediv__(self, other):
        return _lift(other, self) / self

    def __neg__(self):
        return _result(-self.data, (self,), lambda g: (-g,))

    def __getitem__(self, index):
        shape, dtype = self.shape, self.dtype

        def rule(g):
            full = np.zeros(shape, dtype=dtype)
            full[index] = g
            return (full,)

        return _result(self.data[index], (self,), rule)

    # reductions and shape ---------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        shape = self.shape

        def rule(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return _result(np.asarray(self.data.sum(axis=axis, keepdims=keepdims)), (self,), rule)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(n))

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        old = self.shape
        return _result(self.data.reshape(shape), (self,), lambda g: (g.reshape(old),))

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], tuple):
            axes = axes[0]
        inverse = np.argsort(axes)
        return _result(
            np.ascontiguousarray(self.data.transpose(axes)),
            (self,),
            lambda g: (g.transpose(inverse),),
        )

    # elementwise ----------------------------------------------------------

    def exp(self):
        out = np.exp(self.data)
        return _result(out, (self,), lambda g: (g * out,))

    def log(self):
        x = self.data
        return _result(np.log(x), (self,), lambda g: (g / x,))

    def square(self):
        x = self.data
        return _result(x * x, (self,), lambda g: (2.0 * g * x,))

    def abs(self):
        x = self.data
        return _result(np.abs(x), (self,), lambda g: (g * np.sign(x),))


def backward(loss, retain=False):
    """Run reverse mode from a scalar ``loss``; returns ``{leaf: grad}``."""
    return _tape.backward(loss, retain=retain)


# activations ----------------------------------------------------------------


def leaky_relu(x, slope=0.01):
    if not 0.0 <= slope < 1.0:
        raise ContractError(f"slope must lie in [0, 1), got {slope}")
    data = x.data
    out = np.maximum(data, data * data.dtype.type(slope))
    return _result(out, (x,), lambda g: (np.where(data > 0, g, g * g.dtype.type(slope)),))


def softplus(x):
    data = x.data
    out = np.logaddexp(data.dtype.type(0), data)
    return _result(out, (x,), lambda g: (g * special.expit(data),))


def softmax(x, axis):
    data = x.data
    e = np.exp(data - data.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)
    return _result(out, (x,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def concat(tensors, axis=1):
    tensors = [_lift(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def rule(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), rule)


def where(condition, a, b):
    """Select ``a`` where ``condition`` holds, else ``b`` (condition is constant)."""
    a = _lift(a)
    b = _lift(b, a)
    cond = np.asarray(condition, dtype=bool)
    a_shape, b_shape = a.shape, b.shape

    def rule(g):
        zero = np.zeros((), dtype=g.dtype)
        return (
            _unbroadcast(np.where(cond, g, zero), a_shape),
            _unbroadcast(np.where(cond, zero, g), b_shape),
        )

    return _result(np.where(cond, a.data, b.data), (a, b), rule)


def lower_bound(x, bound):
    """``max(x, bound)`` whose gradient still flows when it pushes ``x`` upward."""
    data = x.data
    out = np.maximum(data, data.dtype.type(bound))

    def rule(g):
        passthrough = (data >= bound) | (g < 0)
        return (np.where(passthrough, g, np.zeros((), dtype=g.dtype)),)

    return _result(out, (x,), rule)


_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gaussian_interval(y, mu, sigma):
    """Probability mass of N(mu, sigma^2) on the unit bin centred at ``y``.

    Computed as ``Phi((0.5 - v)/sigma) - Phi((-0.5 - v)/sigma)`` with
    ``v = |y - mu|``, which keeps precision in the upper tail.
    """
    y, mu, sigma = _lift(y), _lift(mu), _lift(sigma)
    dtype = np.result_type(y.data, mu.data, sigma.data)
    d = y.data.astype(np.float64) - mu.data
    s = np.asarray(sigma.data, dtype=np.float64)
    v = np.abs(d)
    upper = (0.5 - v) / s
    lower = (-0.5 - v) / s
    p = special.ndtr(upper) - special.ndtr(lower)
    shapes = (y.shape, mu.shape, sigma.shape)

    def rule(g):
        pu = np.exp(-0.5 * upper * upper) * _INV_SQRT_2PI
        pl = np.exp(-0.5 * lower * lower) * _INV_SQRT_2PI
        dp_dv = (pl - pu) / s
        dp_ds = (lower * pl - upper * pu) / s
        gy = g * dp_dv * np.sign(d)
        return (
            _unbroadcast(gy.astype(dtype), shapes[0]),
            _unbroadcast((-gy).astype(dtype), shapes[1]),
            _unbroadcast((g * dp_ds).astype(dtype), shapes[2]),
        )

    return _result(p.astype(dtype), (y, mu, sigma), rule)


# convolutions ---------------------------------------------------------------


def _im2col(xp, k, stride, ho, wo):
    b, c = xp.shape[:2]
    cols = np.empty((b, c, k, k, ho, wo), dtype=xp.dtype)
    hspan = stride * (ho - 1) + 1
    wspan = stride * (wo - 1) + 1
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i : i + hspan : stride, j : j + wspan : stride]
    return cols.reshape(b, c * k * k, ho * wo)


def _col2im(cols, out_shape, k, stride, ho, wo):
    b, c = out_shape[:2]
    out = np.zeros(out_shape, dtype=cols.dtype)
    cols = cols.reshape(b, c, k, k, ho, wo)
    hspan = stride * (ho - 1) + 1
    wspan = stride * (wo - 1) + 1
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + hspan : stride, j : j + wspan : stride] += cols[:, :, i, j]
    return out


def _scatter_taps(x2, weight, full_shape, stride, h, w):
    """Transposed-conv accumulation, grouped by output phase for contiguous adds."""
    b, cout, full_h, full_w = full_shape
    cin, _, k, _ = weight.shape
    wt = weight.transpose(2, 3, 1, 0).reshape(k * k * cout, cin)
    taps = np.matmul(wt, x2).reshape(b, k, k, cout, h, w)
    hq, wq = -(-full_h // stride), -(-full_w // stride)
    phased = np.zeros((b, stride, stride, cout, hq, wq), dtype=taps.dtype)
    for i in range(k):
        qy, py = divmod(i, stride)
        for j in range(k):
            qx, px = divmod(j, stride)
            phased[:, py, px, :, qy : qy + h, qx : qx + w] += taps[:, i, j]
    full = phased.transpose(0, 3, 4, 1, 5, 2).reshape(b, cout, hq * stride, wq * stride)
    return full[:, :, :full_h, :full_w]


def _check_conv_args(x, w, stride, padding):
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv expects 4-D input and weight, got {x.shape} and {w.shape}")
    if w.shape[2] != w.shape[3] or w.shape[2] % 2 == 0:
        raise ContractError(f"kernel must be square with odd size, got weight {w.shape}")
    if stride < 1 or padding < 0:
        raise ContractError(f"invalid stride={stride} / padding={padding}")


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """2-D cross-correlation, NCHW input and (outC, inC, k, k) weight."""
    weight = _lift(weight)
    _check_conv_args(x, weight, stride, padding)
    b, cin, h, w = x.shape
    cout, wcin, k, _ = weight.shape
    if cin != wcin:
        raise DimensionError(f"input {x.shape} has {cin} channels but weight {weight.shape} expects {wcin}")
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    if ho < 1 or wo < 1:
        raise DimensionError(f"input {x.shape} too small for weight {weight.shape} with padding {padding}")
    inputs = [x, weight]
    if bias is not None:
        bias = _lift(bias, weight)
        if bias.shape != (cout,):
            raise DimensionError(f"bias shape {bias.shape} does not match weight {weight.shape}")
        inputs.append(bias)

    xd = x.data
    if k == 1 and stride == 1 and padding == 0:
        xp = xd
        cols = xd.reshape(b, cin, h * w)
    else:
        xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
        cols = _im2col(xp, k, stride, ho, wo)
    w2 = weight.data.reshape(cout, -1)
    out = np.matmul(w2, cols)
    if bias is not None:
        out += bias.data[None, :, None]
    out = out.reshape(b, cout, ho, wo)
    need_x = x.requires_grad

    def rule(g):
        g2 = g.reshape(b, cout, ho * wo)
        gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        gx = None
        if need_x:
            gcols = np.matmul(w2.T, g2)
            if k == 1 and stride == 1 and padding == 0:
                gx = gcols.reshape(xd.shape)
            else:
                gxp = _col2im(gcols, xp.shape, k, stride, ho, wo)
                gx = gxp[:, :, padding : padding + h, padding : padding + w]
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=(0, 2))

    return _result(out, tuple(inputs), rule)


def conv2d_transposed(x, weight, bias=None, stride=1, padding=0, output_padding=0):
    """Adjoint of :func:`conv2d`; weight layout is (inC, outC, k, k).

    Output size is ``(H - 1) * stride - 2 * padding + k + output_padding``; the
    extra ``output_padding`` rows/columns are appended at the bottom/right.
    """
    weight = _lift(weight)
    _check_conv_args(x, weight, stride, padding)
    if output_padding < 0 or (output_padding and output_padding >= stride):
        raise ContractError(f"output_padding must be smaller than stride, got {output_padding}")
    b, cin, h, w = x.shape
    wcin, cout, k, _ = weight.shape
    if cin != wcin:
        raise DimensionError(f"input {x.shape} has {cin} channels but weight {weight.shape} expects {wcin}")
    ho = (h - 1) * stride - 2 * padding + k + output_padding
    wo = (w - 1) * stride - 2 * padding + k + output_padding
    if ho < 1 or wo < 1:
        raise DimensionError(f"transposed conv output would be empty for input {x.shape}")
    inputs = [x, weight]
    if bias is not None:
        bias = _lift(bias, weight)
        if bias.shape != (cout,):
            raise DimensionError(f"bias shape {bias.shape} does not match weight {weight.shape}")
        inputs.append(bias)

    full_h = (h - 1) * stride + k + output_padding
    full_w = (w - 1) * stride + k + output_padding
    w2 = weight.data.reshape(cin, cout * k * k)
    x2 = x.data.reshape(b, cin, h * w)
    full = _scatter_taps(x2, weight.data, (b, cout, full_h, full_w), stride, h, w)
    out = full[:, :, padding : padding + ho, padding : padding + wo]
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    else:
        out = np.ascontiguousarray(out)
    need_x = x.requires_grad

    def rule(g):
        gfull = np.zeros((b, cout, full_h, full_w), dtype=g.dtype)
        gfull[:, :, padding : padding + ho, padding : padding + wo] = g
        gcols = _im2col(gfull, k, stride, h, w)
        gw = np.matmul(x2, gcols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        gx = np.matmul(w2, gcols).reshape(b, cin, h, w) if need_x else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _result(out, tuple(inputs), rule)


# gradient checking ----------------------------------------------------------


def grad_check(f, point, eps=1e-3, indices=None):
    """Compare reverse-mode gradients of scalar ``f`` against central differences.

    ``f`` receives a float64 tensor.  Returns the largest
    ``|analytic - numeric| / max(1e-8, |numeric|)`` over the checked coordinates
    (all coordinates unless ``indices`` selects flat positions).

    ``eps`` may be a sequence of step sizes; each coordinate then scores its
    best agreement over them.  A step that straddles a kink of a piecewise
    linear activation gives a wrong difference quotient, whereas a wrong
    backward rule disagrees at every step size.
    """
    steps = [float(e) for e in np.atleast_1d(eps)]
    base = np.array(_as_array(point), dtype=np.float64)
    x = Tensor(base, requires_grad=True, dtype=np.float64)
    _tape.clear()
    value = f(x)
    if not np.all(np.isfinite(value.data)):
        raise NumericError("function value is not finite at the check point")
    backward(value)
    analytic = np.zeros_like(base) if x.grad is None else x.grad.reshape(base.shape)
    flat = base.reshape(-1)
    coords = range(flat.size) if indices is None else indices
    worst = 0.0
    with no_grad():
        for i in coords:
            best = np.inf
            for h in steps:
                saved = flat[i]
                flat[i] = saved + h
                fp = float(f(Tensor(base, dtype=np.float64)).data)
                flat[i] = saved - h
                fm = float(f(Tensor(base, dtype=np.float64)).data)
                flat[i] = saved
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise NumericError(f"non-finite value while perturbing coordinate {i}")
                numeric = (fp - fm) / (2.0 * h)
                best = min(best, abs(analytic.reshape(-1)[i] - numeric) / max(1e-8, abs(numeric)))
            worst = max(worst, best)
    return worst
