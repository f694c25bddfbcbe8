"""Model configuration, weights and the six sub-networks of the codec.

Layout (``t`` = transform kernel, every stride-2 stage halves H and W)::

    g_a : 4 x conv t/2                       image -> y   (M channels, H/16)
    h_a : conv 3/1, 2 x conv t/2             y -> z       (N channels, H/64)
    h_s : 2 x conv_T t/2, conv 3/1           z -> hyper   (2M channels, H/16)
    g_cm: masked conv k/1                    y -> context (2M channels)
    g_ep: three 1x1 convs                    [hyper, context] -> entropy params
    g_s : 4 x conv_T t/2                     y -> image

Leaky ReLU sits between consecutive layers of every stack.
"""

import collections
import io
import json
import struct
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import ops
from .entropy import FactorizedPrior
from .errors import ContractError, DimensionError
from .rangecoder import njit
from .tensor import Tensor, concat, conv2d, conv2d_transposed, leaky_relu, softmax, softplus

CONTEXT_KINDS = ("none", "serial", "checkerboard", "random")
SIGMA_FLOOR = 0.11
TOTAL_STRIDE = 64
LATENT_STRIDE = 16

WEIGHTS_MAGIC = b"CKWT"
WEIGHTS_VERSION = 1

# Invocation counters for the context model and parameter network.
counters = collections.Counter()


@dataclass(frozen=True)
class ModelConfig:
    n_channels: int = 32
    latent_channels: int = 48
    gmm_components: int = 1
    context_kernel: int = 5
    context_kind: str = "checkerboard"
    parity: int = ops.ANCHOR_PARITY
    slope: float = 0.01
    image_channels: int = 1
    transform_kernel: int = 3

    def __post_init__(self):
        if self.context_kind not in CONTEXT_KINDS:
            raise ContractError(f"context_kind must be one of {CONTEXT_KINDS}, got {self.context_kind!r}")
        if self.context_kernel % 2 == 0 or self.transform_kernel % 2 == 0:
            raise ContractError("kernel sizes must be odd")
        if not 1 <= self.gmm_components <= 15 or not 1 <= self.context_kernel <= 15:
            raise ContractError("gmm_components and context_kernel must fit in 4 bits")
        if self.image_channels not in (1, 3):
            raise ContractError(f"image_channels must be 1 or 3, got {self.image_channels}")
        if self.parity not in (0, 1):
            raise ContractError("parity must be 0 or 1")
        if not 0 <= self.slope < 1:
            raise ContractError("slope must be in [0, 1)")

    @property
    def has_context(self):
        return self.context_kind != "none"

    @property
    def hyper_channels(self):
        return 2 * self.latent_channels

    @property
    def param_channels(self):
        m, k = self.latent_channels, self.gmm_components
        return 2 * m if k == 1 else 3 * m * k

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})

    def replace(self, **changes):
        d = self.to_dict()
        d.update(changes)
        return ModelConfig(**d)


def _layer_shapes(cfg):
    """Ordered ``(name, shape)`` for every parameter tensor."""
    n, m, c, t, k = cfg.n_channels, cfg.latent_channels, cfg.image_channels, cfg.transform_kernel, cfg.context_kernel
    shapes = []

    def conv(name, cout, cin, ks):
        shapes.append((f"{name}.weight", (cout, cin, ks, ks)))
        shapes.append((f"{name}.bias", (cout,)))

    def convt(name, cin, cout, ks):
        shapes.append((f"{name}.weight", (cin, cout, ks, ks)))
        shapes.append((f"{name}.bias", (cout,)))

    for i, (cin, cout) in enumerate([(c, n), (n, n), (n, n), (n, m)]):
        conv(f"g_a.{i}", cout, cin, t)
    for i, (cin, cout) in enumerate([(m, n), (n, n), (n, n), (n, c)]):
        convt(f"g_s.{i}", cin, cout, t)
    conv("h_a.0", n, m, 3)
    conv("h_a.1", n, n, t)
    conv("h_a.2", n, n, t)
    convt("h_s.0", n, n, t)
    convt("h_s.1", n, n, t)
    conv("h_s.2", cfg.hyper_channels, n, 3)
    if cfg.has_context:
        conv("g_cm", 2 * m, m, k)
    ep_in = cfg.hyper_channels + (2 * m if cfg.has_context else 0)
    widths = [ep_in, max(1, 10 * m // 3), max(1, 8 * m // 3), cfg.param_channels]
    for i in range(3):
        conv(f"g_ep.{i}", widths[i + 1], widths[i], 1)
    shapes.append(("prior.mu", (n,)))
    shapes.append(("prior.sigma", (n,)))
    return shapes


def _inverse_softplus(v):
    return float(np.log(np.expm1(v)))


class ModelWeights:
    """Named parameter tensors plus the config they were built for."""

    def __init__(self, config, params):
        self.config = config
        self.params = collections.OrderedDict(params)
        expected = dict(_layer_shapes(config))
        if set(expected) != set(self.params):
            missing = sorted(set(expected) - set(self.params))
            extra = sorted(set(self.params) - set(expected))
            raise ContractError(f"weights do not match config (missing {missing}, unexpected {extra})")
        for name, shape in expected.items():
            if self.params[name].shape != tuple(shape):
                raise DimensionError(f"{name}: shape {self.params[name].shape}, config expects {tuple(shape)}")

    @classmethod
    def init(cls, config, seed=0, scale=1.0):
        """He-normal weights, zero biases; the prior starts at N(0, 1)."""
        rng = np.random.default_rng(seed)
        params = collections.OrderedDict()
        for name, shape in _layer_shapes(config):
            if name.endswith(".bias"):
                arr = np.zeros(shape, dtype=np.float32)
            elif name == "prior.mu":
                arr = np.zeros(shape, dtype=np.float32)
            elif name == "prior.sigma":
                arr = np.full(shape, _inverse_softplus(1.0 - SIGMA_FLOOR), dtype=np.float32)
            else:
                fan_in = shape[1] * shape[2] * shape[3] if not name.startswith(("g_s", "h_s.0", "h_s.1")) else (
                    shape[0] * shape[2] * shape[3] / 4.0
                )
                std = scale * np.sqrt(2.0 / fan_in)
                arr = (rng.standard_normal(shape) * std).astype(np.float32)
            params[name] = Tensor(arr, requires_grad=True)
        # start the parameter network near unit scales
        params["g_ep.2.weight"].data *= 0.1
        return cls(config, params)

    @classmethod
    def zeros(cls, config):
        return cls(config, {name: Tensor(np.zeros(shape, np.float32), requires_grad=True)
                            for name, shape in _layer_shapes(config)})

    def __getitem__(self, name):
        return self.params[name]

    def __iter__(self):
        return iter(self.params.items())

    def names(self):
        return list(self.params)

    def copy(self, dtype=None):
        return ModelWeights(
            self.config,
            {n: Tensor(t.data, requires_grad=True, dtype=dtype or t.data.dtype) for n, t in self.params.items()},
        )

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def num_parameters(self):
        return int(sum(t.data.size for t in self.params.values()))

    def is_finite(self):
        return all(np.all(np.isfinite(t.data)) for t in self.params.values())

    def prior(self):
        return FactorizedPrior(
            self.params["prior.mu"].data,
            SIGMA_FLOOR + np.logaddexp(0.0, self.params["prior.sigma"].data.astype(np.float64)).astype(np.float32),
        )

    # serialization ----------------------------------------------------------

    def payload(self):
        buf = io.BytesIO()
        cfg = json.dumps(self.config.to_dict(), sort_keys=True).encode()
        buf.write(struct.pack("<I", len(cfg)))
        buf.write(cfg)
        buf.write(struct.pack("<I", len(self.params)))
        for name, t in self.params.items():
            raw = name.encode()
            arr = np.ascontiguousarray(t.data, dtype="<f4")
            buf.write(struct.pack("<H", len(raw)))
            buf.write(raw)
            buf.write(struct.pack("<B", arr.ndim))
            buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            buf.write(arr.tobytes())
        return buf.getvalue()

    def digest(self):
        return fnv1a64(self.payload())

    def to_bytes(self):
        return WEIGHTS_MAGIC + struct.pack("<B", WEIGHTS_VERSION) + self.payload()

    @classmethod
    def from_bytes(cls, blob):
        if blob[:4] != WEIGHTS_MAGIC:
            raise ContractError("not a weights file (bad magic)")
        if len(blob) < 5 or blob[4] != WEIGHTS_VERSION:
            raise ContractError("unsupported weights file version")
        pos = 5

        def take(n):
            nonlocal pos
            if pos + n > len(blob):
                raise ContractError("weights file is truncated")
            out = blob[pos : pos + n]
            pos += n
            return out

        try:
            (cfg_len,) = struct.unpack("<I", take(4))
            config = ModelConfig.from_dict(json.loads(take(cfg_len)))
            (count,) = struct.unpack("<I", take(4))
            params = collections.OrderedDict()
            for _ in range(count):
                (name_len,) = struct.unpack("<H", take(2))
                name = take(name_len).decode()
                (ndim,) = struct.unpack("<B", take(1))
                shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
                n = int(np.prod(shape)) if ndim else 1
                arr = np.frombuffer(take(4 * n), dtype="<f4").reshape(shape)
                params[name] = Tensor(arr.astype(np.float32), requires_grad=True)
        except (UnicodeDecodeError, json.JSONDecodeError, TypeError, struct.error) as exc:
            raise ContractError(f"malformed weights file: {exc}") from exc
        if pos != len(blob):
            raise ContractError("trailing bytes after weights payload")
        return cls(config, params)

    def save(self, path):
        with open(path, "wb") as f:
            f.write(self.to_bytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as f:
            return cls.from_bytes(f.read())


@njit(cache=True)
def _fnv1a_kernel(data):
    h = np.uint64(0xCBF29CE484222325)
    prime = np.uint64(0x100000001B3)
    for b in data:
        h = (h ^ np.uint64(b)) * prime
    return h


def fnv1a64(data):
    """64-bit FNV-1a hash of a bytes-like object."""
    return int(_fnv1a_kernel(np.frombuffer(bytes(data), dtype=np.uint8)))


# transforms -------------------------------------------------------------------


def _check_divisible(x, factor, what):
    h, w = x.shape[-2:]
    if h % factor or w % factor:
        raise ContractError(f"{what} needs spatial dims divisible by {factor}, got {h}x{w}")


def _conv(w, name, x, stride):
    weight = w[f"{name}.weight"]
    return conv2d(x, weight, w[f"{name}.bias"], stride=stride, padding=weight.shape[-1] // 2)


def _convt(w, name, x):
    weight = w[f"{name}.weight"]
    return conv2d_transposed(x, weight, w[f"{name}.bias"], stride=2, padding=weight.shape[-1] // 2, output_padding=1)


def analyze(w, x):
    """g_a: image (B, C, H, W) -> y (B, M, H/16, W/16)."""
    _check_divisible(x, LATENT_STRIDE, "analyze")
    slope = w.config.slope
    for i in range(4):
        x = _conv(w, f"g_a.{i}", x, 2)
        if i < 3:
            x = leaky_relu(x, slope)
    return x


def synthesize(w, y):
    """g_s: latent -> reconstruction (unclipped)."""
    slope = w.config.slope
    for i in range(4):
        y = _convt(w, f"g_s.{i}", y)
        if i < 3:
            y = leaky_relu(y, slope)
    return y


def hyper_analyze(w, y):
    _check_divisible(y, 4, "hyper_analyze")
    slope = w.config.slope
    z = leaky_relu(_conv(w, "h_a.0", y, 1), slope)
    z = leaky_relu(_conv(w, "h_a.1", z, 2), slope)
    return _conv(w, "h_a.2", z, 2)


def hyper_synthesize(w, z_hat):
    slope = w.config.slope
    h = leaky_relu(_convt(w, "h_s.0", z_hat), slope)
    h = leaky_relu(_convt(w, "h_s.1", h), slope)
    return _conv(w, "h_s.2", h, 1)


# context model and parameter network -----------------------------------------


def context_model(w, y_visible, mask):
    """g_cm: masked convolution over the visible latents."""
    counters["g_cm"] += 1
    return ops.masked_conv2d(y_visible, w["g_cm.weight"], mask, w["g_cm.bias"])


def param_net(w, features):
    """g_ep: stack of 1x1 convolutions."""
    counters["g_ep"] += 1
    slope = w.config.slope
    h = leaky_relu(_conv(w, "g_ep.0", features, 1), slope)
    h = leaky_relu(_conv(w, "g_ep.1", h, 1), slope)
    return _conv(w, "g_ep.2", h, 1)


def context_mask(config, mask=None):
    """The fixed mask of a codec config, or an explicit override."""
    if mask is not None:
        return mask
    if config.context_kind == "serial":
        return ops.make_mask("serial", config.context_kernel)
    if config.context_kind == "checkerboard":
        return ops.make_mask("checkerboard", config.context_kernel)
    raise ContractError(f"context_kind {config.context_kind!r} has no fixed mask")


def split_params(config, raw):
    """Map g_ep output to ``(mu, sigma)`` or ``(weights, mu, sigma)``.

    For K = 1 the tensors are (B, M, H, W).  For mixtures they are
    (B, M, K, H, W) with the weights softmax-normalised over K.
    """
    m, k = config.latent_channels, config.gmm_components
    if k == 1:
        return raw[:, :m], SIGMA_FLOOR + softplus(raw[:, m:])
    b, _, h, wd = raw.shape
    r = raw.reshape(b, 3, m, k, h, wd)
    return softmax(r[:, 0], axis=2), r[:, 1], SIGMA_FLOOR + softplus(r[:, 2])


def _b_half(w, shape):
    """Differentiable ``mux(b_map, 0)``: the g_cm bias at anchors, zero elsewhere."""
    anchors = ops.anchor_mask(shape[-2], shape[-1], w.config.parity).astype(w["g_cm.bias"].data.dtype)
    return w["g_cm.bias"].reshape(1, -1, 1, 1) * anchors


def entropy_params_one_pass(w, hyper, y_hat):
    """All positions at once: ``g_ep(hyper, g_cm(mux(y, 0)) - b_half)``."""
    cfg = w.config
    if cfg.context_kind != "checkerboard":
        raise ContractError(f"one-pass parameters need a checkerboard model, got {cfg.context_kind!r}")
    y_hat = y_hat if isinstance(y_hat, Tensor) else Tensor(y_hat)
    y_half = ops.mux(y_hat, y_hat * 0.0, cfg.parity)
    ctx = context_model(w, y_half, context_mask(cfg)) - _b_half(w, y_hat.shape)
    return param_net(w, concat([hyper, ctx], axis=1))


def entropy_params_anchor(w, hyper):
    """Pass 1: anchors see an all-zero context.

    The context branch is still evaluated (on an all-zero latent map) so that
    the parameter network sees the same tensor layout as in pass 2.
    """
    cfg = w.config
    b, _, h, wd = hyper.shape
    zeros = Tensor(np.zeros((b, cfg.latent_channels, h, wd), dtype=hyper.data.dtype))
    ctx = context_model(w, zeros, context_mask(cfg)) - _b_half(w, zeros.shape)
    return param_net(w, concat([hyper, ctx], axis=1))


def entropy_params_nonanchor(w, hyper, y_anchor):
    """Pass 2: ``y_anchor`` holds decoded anchors (non-anchor values are ignored)."""
    cfg = w.config
    y_anchor = y_anchor if isinstance(y_anchor, Tensor) else Tensor(y_anchor)
    y_half = ops.mux(y_anchor, y_anchor * 0.0, cfg.parity)
    ctx = context_model(w, y_half, context_mask(cfg)) - _b_half(w, y_half.shape)
    return param_net(w, concat([hyper, ctx], axis=1))


def entropy_params_hyper_only(w, hyper):
    """Parameters of the context-free variant."""
    return param_net(w, hyper)


def entropy_params_masked(w, hyper, y, mask=None):
    """Full-map masked context, used for training serial/random-mask models."""
    ctx = context_model(w, y, context_mask(w.config, mask))
    return param_net(w, concat([hyper, ctx], axis=1))


def entropy_params_train(w, hyper, y, mask=None):
    """Parameters used by the training loss for any context kind."""
    kind = w.config.context_kind
    if kind == "none":
        return entropy_params_hyper_only(w, hyper)
    if kind == "checkerboard" and mask is None:
        return entropy_params_one_pass(w, hyper, y)
    if kind == "random" and mask is None:
        raise ContractError("random-mask models need an explicit mask")
    return entropy_params_masked(w, hyper, y, mask)


# serial context: cropped-window fast path --------------------------------------


class SerialKernel:
    """Flattened masked weights for per-position parameter evaluation.

    Both the serial encoder and decoder compute each position's parameters
    from a k x k crop of the (partially) decoded latent map, which makes the
    two sides agree bit for bit.
    """

    def __init__(self, w):
        cfg = w.config
        if cfg.context_kind != "serial":
            raise ContractError("SerialKernel needs a serial-context model")
        mask = context_mask(cfg)
        self.k = cfg.context_kernel
        self.m = cfg.latent_channels
        self.slope = np.float32(cfg.slope)
        cm = w["g_cm.weight"].data * mask.bits
        # only taps that the mask keeps contribute
        self.taps = np.flatnonzero(mask.bits.reshape(-1))
        self.cm_w = np.ascontiguousarray(cm.reshape(cm.shape[0], self.m, -1)[:, :, self.taps].reshape(cm.shape[0], -1))
        self.cm_b = w["g_cm.bias"].data
        self.ep = [(w[f"g_ep.{i}.weight"].data[:, :, 0, 0], w[f"g_ep.{i}.bias"].data) for i in range(3)]
        self.config = cfg

    def params_at(self, y_pad, hyper_vec, row, col):
        """Raw g_ep output at one position; ``y_pad`` is (M, H + k - 1, W + k - 1)."""
        counters["g_cm"] += 1
        counters["g_ep"] += 1
        window = y_pad[:, row : row + self.k, col : col + self.k].reshape(self.m, -1)[:, self.taps].reshape(-1)
        ctx = self.cm_w @ window + self.cm_b
        h = np.concatenate([hyper_vec, ctx])
        for i, (wt, bias) in enumerate(self.ep):
            h = wt @ h + bias
            if i < 2:
                h = np.where(h >= 0, h, h * self.slope)
        return h


def raw_to_numpy_params(config, raw):
    """Numpy ``(mu, sigma)`` or ``(weights, mu, sigma)`` from raw g_ep output, per element.

    Works on (P, H, W) per-image maps or on single (P,) vectors.
    """
    raw = np.asarray(raw)
    m, k = config.latent_channels, config.gmm_components
    if k == 1:
        mu = raw[:m]
        sigma = (SIGMA_FLOOR + np.logaddexp(np.float32(0), raw[m:])).astype(raw.dtype)
        return mu, sigma
    r = raw.reshape((3, m, k) + raw.shape[1:])
    logits = r[0] - r[0].max(axis=1, keepdims=True)
    e = np.exp(logits)
    weights = e / e.sum(axis=1, keepdims=True)
    sigma = (SIGMA_FLOOR + np.logaddexp(np.float32(0), r[2])).astype(raw.dtype)
    return weights, r[1], sigma
