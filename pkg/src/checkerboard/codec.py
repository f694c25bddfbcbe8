"""Image encoder/decoder built on the hyperprior + spatial context model.

Checkerboard models encode with a single context pass (all entropy
parameters from ``g_cm(mux(y, 0)) - b_half``) and decode in two passes:
anchors from the hyperprior alone, then non-anchors from the decoded
anchors.  Serial models code one latent position at a time from a cropped
context window.  Context-free models need a single parameter pass.
"""

import contextlib
import logging
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from . import network as net
from . import ops
from .entropy import (
    PRECISION,
    SYMBOL_MAX,
    SYMBOL_MIN,
    GaussianParams,
    GmmParams,
    gaussian_tables,
    gmm_tables,
    quantize_params,
    quantize_weights,
)
from .errors import ContractError, DecodeError
from .rangecoder import RangeDecoder, RangeEncoder, ideal_bits
from .tensor import Tensor, gaussian_interval, lower_bound, no_grad, softplus

log = logging.getLogger(__name__)

MAGIC = b"CKBD"
VERSION = 1
_HEADER = struct.Struct("<4sBBBHIIBQ")
_KIND_CODES = {"none": 0, "serial": 1, "checkerboard": 2}
_KIND_NAMES = {v: k for k, v in _KIND_CODES.items()}
PROB_FLOOR = 1e-9


class DigestMismatchError(DecodeError):
    """The container was produced by a different set of weights."""


# quantization and padding -----------------------------------------------------


def round_half_away(v):
    v = np.asarray(v)
    return np.sign(v) * np.floor(np.abs(v) + 0.5)


def quantize_latents(y, mode="round", rng=None):
    """Quantize a latent array.

    Args:
        y: numpy array or Tensor.
        mode: ``"round"`` (half away from zero, saturated to the symbol range)
            or ``"noise"`` (adds Uniform(-1/2, 1/2) drawn from ``rng``).
        rng: ``numpy.random.Generator`` or integer seed; noise mode only.
    """
    data = y.data if isinstance(y, Tensor) else np.asarray(y)
    if mode == "round":
        q = round_half_away(data)
        clipped = np.clip(q, SYMBOL_MIN, SYMBOL_MAX)
        n_sat = int(np.count_nonzero(clipped != q))
        if n_sat:
            log.warning("%d latent values saturated to [%d, %d]", n_sat, SYMBOL_MIN, SYMBOL_MAX)
        return clipped.astype(data.dtype)
    if mode == "noise":
        rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        u = rng.uniform(-0.5, 0.5, size=data.shape).astype(data.dtype)
        return y + u if isinstance(y, Tensor) else data + u
    raise ContractError(f"unknown quantization mode {mode!r}")


def pad_image(x, multiple=net.TOTAL_STRIDE):
    """Replicate-pad a (C, H, W) image so H and W are multiples of ``multiple``."""
    c, h, w = x.shape
    ph, pw = -h % multiple, -w % multiple
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, ph), (0, pw)), mode="edge")
    return x


def _as_chw(x, channels):
    x = np.asarray(x, dtype=np.float32)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[0] != channels:
        raise ContractError(f"expected a ({channels}, H, W) image, got shape {x.shape}")
    if x.shape[1] < 1 or x.shape[2] < 1:
        raise ContractError("image has a zero dimension")
    return x


# container --------------------------------------------------------------------


@dataclass
class Container:
    width: int
    height: int
    channels: int
    digest: int
    context_kind: str
    context_kernel: int
    gmm_components: int
    parity: int = ops.ANCHOR_PARITY
    precision: int = PRECISION
    version: int = VERSION
    z_stream: bytes = b""
    anchor_stream: bytes = b""
    nonanchor_stream: bytes = b""

    @property
    def payload_bytes(self):
        return len(self.z_stream) + len(self.anchor_stream) + len(self.nonanchor_stream)

    def to_bytes(self):
        packed = self.gmm_components | (self.context_kernel << 4) | (_KIND_CODES[self.context_kind] << 8)
        head = _HEADER.pack(
            MAGIC, self.version, self.parity, self.precision, packed,
            self.width, self.height, self.channels, self.digest,
        )
        body = b"".join(struct.pack("<Q", len(s)) + s for s in (self.z_stream, self.anchor_stream, self.nonanchor_stream))
        return head + body

    @classmethod
    def from_bytes(cls, blob):
        blob = bytes(blob)
        if len(blob) < _HEADER.size:
            raise DecodeError("container shorter than its header")
        magic, version, parity, precision, packed, width, height, channels, digest = _HEADER.unpack_from(blob)
        if magic != MAGIC:
            raise DecodeError("not a compressed image (bad magic)")
        if version != VERSION:
            raise DecodeError(f"unsupported container version {version}")
        kind = _KIND_NAMES.get((packed >> 8) & 0x3)
        if kind is None or packed >> 10:
            raise DecodeError("invalid model descriptor in header")
        if parity not in (0, 1) or precision != PRECISION or width < 1 or height < 1 or channels not in (1, 3):
            raise DecodeError("invalid header fields")
        pos = _HEADER.size
        streams = []
        for _ in range(3):
            if pos + 8 > len(blob):
                raise DecodeError("container truncated in substream table")
            (n,) = struct.unpack_from("<Q", blob, pos)
            pos += 8
            if pos + n > len(blob):
                raise DecodeError("container truncated inside a substream")
            streams.append(blob[pos : pos + n])
            pos += n
        if pos != len(blob):
            raise DecodeError("trailing bytes after the last substream")
        return cls(
            width, height, channels, digest, kind, (packed >> 4) & 0xF, packed & 0xF,
            parity, precision, version, *streams,
        )


def container_for(weights, width, height):
    cfg = weights.config
    if cfg.context_kind not in _KIND_CODES:
        raise ContractError(f"{cfg.context_kind!r} models cannot produce bitstreams")
    return Container(
        width, height, cfg.image_channels, weights.digest(), cfg.context_kind,
        cfg.context_kernel, cfg.gmm_components, cfg.parity,
    )


def check_container(container, weights):
    cfg = weights.config
    if container.digest != weights.digest():
        raise DigestMismatchError(
            f"bitstream was encoded with weights {container.digest:016x}, loaded weights are {weights.digest():016x}"
        )
    if (container.context_kind, container.context_kernel, container.gmm_components, container.parity,
            container.channels) != (cfg.context_kind, cfg.context_kernel, cfg.gmm_components, cfg.parity,
                                    cfg.image_channels):
        raise DecodeError("container header disagrees with the model configuration")


# phase timing -----------------------------------------------------------------


class PhaseClock:
    """Accumulates wall-clock seconds per named phase."""

    def __init__(self):
        self.seconds = {}

    def add(self, name, dt):
        self.seconds[name] = self.seconds.get(name, 0.0) + dt

    @contextlib.contextmanager
    def phase(self, name):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.add(name, time.perf_counter() - t0)


# entropy tables ---------------------------------------------------------------


def element_tables(config, raw):
    """CDF rows and a per-latent row index (M, H, W) from raw g_ep output (P, H, W)."""
    params = net.raw_to_numpy_params(config, raw)
    if config.gmm_components == 1:
        return gaussian_tables(*params)
    weights, mu, sigma = params
    gp = GmmParams(np.moveaxis(weights, 1, -1), np.moveaxis(mu, 1, -1), np.moveaxis(sigma, 1, -1))
    return gmm_tables(gp)


def quantized_params(config, raw):
    """Parameters exactly as the coder sees them (after grid snapping)."""
    params = net.raw_to_numpy_params(config, raw)
    if config.gmm_components == 1:
        return GaussianParams(*quantize_params(*params))
    weights, mu, sigma = (np.moveaxis(p, 1, -1) for p in params)
    mu_q, sigma_q = quantize_params(mu, sigma)
    return GmmParams(quantize_weights(weights), mu_q, sigma_q)


def _prior_tables(weights, shape):
    prior = weights.prior()
    n, h, w = shape
    mu = np.broadcast_to(prior.mu[:, None, None], (n, h, w))
    sigma = np.broadcast_to(prior.sigma[:, None, None], (n, h, w))
    return gaussian_tables(mu, sigma)


def _table_bits(symbols, rows, index):
    """Ideal code length under the integer tables the coder actually uses.

    Every table gives each symbol at least one count, so this stays finite
    where the continuous Gaussian mass of a far-tail symbol underflows.
    """
    return ideal_bits(symbols, rows, index, SYMBOL_MIN)


def _encode_stream(symbols, rows, index):
    enc = RangeEncoder()
    enc.encode_batch(symbols.reshape(-1).astype(np.int64), rows, index.reshape(-1), SYMBOL_MIN)
    return enc.finalize()


def _decode_stream(data, rows, index, what):
    dec = RangeDecoder(data)
    try:
        out = dec.decode_batch(rows, index.reshape(-1), SYMBOL_MIN)
        dec.finish()
    except DecodeError as exc:
        raise DecodeError(f"{what} substream: {exc}") from exc
    return out.reshape(index.shape)


def _demux_np(a):
    """Anchor / non-anchor chunks of a (C, H, W) array, in coding order."""
    anchors, others = ops.demux(Tensor(np.asarray(a, dtype=np.float64)[None]))
    return anchors.data[0], others.data[0]


def _merge_np(anchors, others, dtype=np.float32):
    out = ops.merge(Tensor(np.asarray(anchors, dtype=np.float64)[None]), Tensor(np.asarray(others, dtype=np.float64)[None]))
    return out.data[0].astype(dtype)


# encode -----------------------------------------------------------------------


@dataclass
class EncodeResult:
    container: Container
    y_hat: np.ndarray
    z_hat: np.ndarray
    x_hat: np.ndarray
    # {"y", "z"}: ideal bits under the coder's own integer tables
    estimated_bits: dict = field(default_factory=dict)
    seconds: dict = field(default_factory=dict)

    @property
    def payload_bits(self):
        return 8 * self.container.payload_bytes

    @property
    def estimated_total_bits(self):
        return float(sum(self.estimated_bits.values()))


def _reconstruct(weights, y_hat, height, width):
    x_hat = net.synthesize(weights, Tensor(y_hat[None])).data[0]
    return np.clip(x_hat[:, :height, :width], 0.0, 1.0)


def encode_image(x, weights, details=False):
    """Compress a (C, H, W) or (H, W) image with values in [0, 1].

    Returns the :class:`Container`, or an :class:`EncodeResult` carrying the
    quantized latents, the encoder-side reconstruction and entropy estimates
    when ``details`` is true.
    """
    cfg = weights.config
    x = _as_chw(x, cfg.image_channels)
    _, height, width = x.shape
    container = container_for(weights, width, height)
    clock = PhaseClock()
    with no_grad():
        with clock.phase("analysis"):
            xp = Tensor(pad_image(x)[None])
            y = net.analyze(weights, xp)
            y_hat = quantize_latents(y.data[0])
            z_hat = quantize_latents(net.hyper_analyze(weights, y).data[0])
        with clock.phase("hyper"):
            rows, index = _prior_tables(weights, z_hat.shape)
            container.z_stream = _encode_stream(z_hat, rows, index)
            est = {"z": _table_bits(z_hat, rows, index)}
            hyper = net.hyper_synthesize(weights, Tensor(z_hat[None]))
        with clock.phase("latents"):
            if cfg.context_kind == "checkerboard":
                raw = net.entropy_params_one_pass(weights, hyper, Tensor(y_hat[None])).data[0]
                rows, index = element_tables(cfg, raw)
                a_idx, n_idx = _demux_np(index)
                a_sym, n_sym = _demux_np(y_hat)
                container.anchor_stream = _encode_stream(a_sym, rows, a_idx.astype(np.int64))
                container.nonanchor_stream = _encode_stream(n_sym, rows, n_idx.astype(np.int64))
                est["y"] = _table_bits(y_hat, rows, index)
            elif cfg.context_kind == "none":
                raw = net.entropy_params_hyper_only(weights, hyper).data[0]
                rows, index = element_tables(cfg, raw)
                container.anchor_stream = _encode_stream(y_hat, rows, index)
                est["y"] = _table_bits(y_hat, rows, index)
            else:
                container.anchor_stream, est["y"] = _serial_encode(weights, y_hat, hyper.data[0])
        with clock.phase("synthesis"):
            x_hat = _reconstruct(weights, y_hat, height, width)
    if not details:
        return container
    return EncodeResult(container, y_hat, z_hat, x_hat, est, clock.seconds)


def _serial_positions(h, w):
    for r in range(h):
        for c in range(w):
            yield r, c


def _serial_encode(weights, y_hat, hyper):
    cfg = weights.config
    kernel = net.SerialKernel(weights)
    m, h, w = y_hat.shape
    p = cfg.context_kernel // 2
    y_pad = np.zeros((m, h + 2 * p, w + 2 * p), dtype=np.float32)
    y_pad[:, p : p + h, p : p + w] = y_hat
    enc = RangeEncoder()
    bits = 0.0
    for r, c in _serial_positions(h, w):
        raw = kernel.params_at(y_pad, hyper[:, r, c], r, c)
        rows, index = element_tables(cfg, raw)
        enc.encode_batch(y_hat[:, r, c].astype(np.int64), rows, index, SYMBOL_MIN)
        bits += _table_bits(y_hat[:, r, c], rows, index)
    return enc.finalize(), bits


def serial_params(weights, y_hat, hyper):
    """Raw per-position parameters (P, H, W) of a serial model from full latents.

    Uses the same cropped-window evaluation as the coder.
    """
    kernel = net.SerialKernel(weights)
    m, h, w = y_hat.shape
    p = weights.config.context_kernel // 2
    y_pad = np.zeros((m, h + 2 * p, w + 2 * p), dtype=np.float32)
    y_pad[:, p : p + h, p : p + w] = y_hat
    out = np.zeros((weights.config.param_channels, h, w), dtype=np.float32)
    for r, c in _serial_positions(h, w):
        out[:, r, c] = kernel.params_at(y_pad, hyper[:, r, c], r, c)
    return out


# decode -----------------------------------------------------------------------


@dataclass
class DecodeResult:
    x_hat: np.ndarray
    y_hat: np.ndarray
    z_hat: np.ndarray
    seconds: dict
    calls: dict


def decode_image(container, weights, details=False, clock=None):
    """Reconstruct an image from a :class:`Container` (or its bytes).

    Raises:
        DigestMismatchError: the container was made with other weights.
        DecodeError: a substream is corrupt or truncated.
    """
    if isinstance(container, (bytes, bytearray, memoryview)):
        container = Container.from_bytes(container)
    check_container(container, weights)
    cfg = weights.config
    clock = clock if clock is not None else PhaseClock()
    net.counters.clear()
    t_start = time.perf_counter()
    hp = container.height + (-container.height % net.TOTAL_STRIDE)
    wp = container.width + (-container.width % net.TOTAL_STRIDE)
    m, n = cfg.latent_channels, cfg.n_channels
    lh, lw = hp // net.LATENT_STRIDE, wp // net.LATENT_STRIDE
    with no_grad():
        with clock.phase("hyper_synthesis"):
            rows, index = _prior_tables(weights, (n, hp // net.TOTAL_STRIDE, wp // net.TOTAL_STRIDE))
            z_hat = _decode_stream(container.z_stream, rows, index, "hyper-latent").astype(np.float32)
            hyper = net.hyper_synthesize(weights, Tensor(z_hat[None]))
        if cfg.context_kind == "checkerboard":
            y_hat = _decode_checkerboard(weights, container, hyper, clock)
        elif cfg.context_kind == "none":
            with clock.phase("parameter_calculation"):
                raw = net.entropy_params_hyper_only(weights, hyper).data[0]
                rows, index = element_tables(cfg, raw)
            with clock.phase("entropy_coding"):
                y_hat = _decode_stream(container.anchor_stream, rows, index, "latent").astype(np.float32)
        else:
            y_hat = _serial_decode(weights, container.anchor_stream, hyper.data[0], (m, lh, lw), clock)
        if cfg.context_kind != "checkerboard" and container.nonanchor_stream:
            raise DecodeError("unexpected data in the non-anchor substream")
        with clock.phase("latent_synthesis"):
            x_hat = _reconstruct(weights, y_hat, container.height, container.width)
    clock.add("total", time.perf_counter() - t_start)
    if not details:
        return x_hat
    return DecodeResult(x_hat, y_hat, z_hat, dict(clock.seconds), dict(net.counters))


def _decode_checkerboard(weights, container, hyper, clock):
    cfg = weights.config
    with clock.phase("parameter_calculation"):
        raw = net.entropy_params_anchor(weights, hyper).data[0]
        rows, index = element_tables(cfg, raw)
        a_idx, _ = _demux_np(index)
    with clock.phase("entropy_coding"):
        anchors = _decode_stream(container.anchor_stream, rows, a_idx.astype(np.int64), "anchor")
    with clock.phase("parameter_calculation"):
        y_half = _merge_np(anchors, np.zeros_like(anchors))
        raw = net.entropy_params_nonanchor(weights, hyper, Tensor(y_half[None])).data[0]
        rows, index = element_tables(cfg, raw)
        _, n_idx = _demux_np(index)
    with clock.phase("entropy_coding"):
        others = _decode_stream(container.nonanchor_stream, rows, n_idx.astype(np.int64), "non-anchor")
    return _merge_np(anchors, others)


def _serial_decode(weights, data, hyper, shape, clock):
    cfg = weights.config
    kernel = net.SerialKernel(weights)
    m, h, w = shape
    p = cfg.context_kernel // 2
    y_pad = np.zeros((m, h + 2 * p, w + 2 * p), dtype=np.float32)
    dec = RangeDecoder(data)
    t_param = t_code = 0.0
    perf = time.perf_counter
    try:
        for r, c in _serial_positions(h, w):
            t0 = perf()
            raw = kernel.params_at(y_pad, hyper[:, r, c], r, c)
            rows, index = element_tables(cfg, raw)
            t1 = perf()
            y_pad[:, r + p, c + p] = dec.decode_batch(rows, index, SYMBOL_MIN)
            t_code += perf() - t1
            t_param += t1 - t0
        dec.finish()
    except DecodeError as exc:
        raise DecodeError(f"latent substream: {exc}") from exc
    clock.add("parameter_calculation", t_param)
    clock.add("entropy_coding", t_code)
    return y_pad[:, p : p + h, p : p + w].copy()


def serial_codec(x_or_container, weights, details=False):
    """Encode an image or decode a container with a serial-context model."""
    if weights.config.context_kind != "serial":
        raise ContractError("serial_codec needs a serial-context model")
    if isinstance(x_or_container, (Container, bytes, bytearray)):
        return decode_image(x_or_container, weights, details)
    return encode_image(x_or_container, weights, details)


# training-time forward pass ----------------------------------------------------


def rd_loss(x, x_hat, bits_y, bits_z, lam, distortion_scale=1.0):
    """``(bits_y + bits_z) / pixels + lam * distortion_scale * MSE``.

    ``x`` and ``x_hat`` are NCHW (or CHW) with intensities in [0, 1]; the
    pixel count excludes the channel axis.
    """
    x_hat = x_hat if isinstance(x_hat, Tensor) else Tensor(x_hat)
    x = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=x_hat.data.dtype)
    if x.shape != x_hat.shape:
        raise ContractError(f"shape mismatch {x.shape} vs {x_hat.shape}")
    pixels = x.shape[-1] * x.shape[-2] * (x.shape[0] if x.ndim == 4 else 1)
    mse = (x_hat - x).square().mean()
    return (bits_y + bits_z) * (1.0 / pixels) + mse * (lam * distortion_scale)


@dataclass
class Forward:
    y: Tensor
    y_tilde: Tensor
    z_tilde: Tensor
    raw: Tensor
    x_hat: Tensor
    bits_y: Tensor
    bits_z: Tensor


def _bits(p):
    return lower_bound(p, PROB_FLOOR).log().sum() * (-1.0 / np.log(2.0))


def likelihoods_y(config, raw, y_tilde):
    """Per-element bin probabilities of ``y_tilde`` under raw g_ep output."""
    if config.gmm_components == 1:
        mu, sigma = net.split_params(config, raw)
        return gaussian_interval(y_tilde, mu, sigma)
    weights, mu, sigma = net.split_params(config, raw)
    b, m, h, w = y_tilde.shape
    per = gaussian_interval(y_tilde.reshape(b, m, 1, h, w), mu, sigma)
    return (weights * per).sum(axis=2)


def model_forward(weights, x, noise_y=None, noise_z=None, mask=None):
    """Differentiable forward pass.

    ``noise_y`` / ``noise_z`` are additive uniform-noise arrays (training);
    when omitted the latents are rounded instead (evaluation).
    """
    cfg = weights.config
    x = x if isinstance(x, Tensor) else Tensor(x)
    y = net.analyze(weights, x)
    z = net.hyper_analyze(weights, y)
    if noise_y is None:
        y_t = Tensor(quantize_latents(y.data), dtype=y.data.dtype)
        z_t = Tensor(quantize_latents(z.data), dtype=z.data.dtype)
    else:
        y_t = y + noise_y.astype(y.data.dtype)
        z_t = z + noise_z.astype(z.data.dtype)
    hyper = net.hyper_synthesize(weights, z_t)
    raw = net.entropy_params_train(weights, hyper, y_t, mask)
    bits_y = _bits(likelihoods_y(cfg, raw, y_t))
    prior_mu = weights["prior.mu"].reshape(1, -1, 1, 1)
    prior_sigma = (softplus(weights["prior.sigma"]) + net.SIGMA_FLOOR).reshape(1, -1, 1, 1)
    bits_z = _bits(gaussian_interval(z_t, prior_mu, prior_sigma))
    x_hat = net.synthesize(weights, y_t)
    return Forward(y, y_t, z_t, raw, x_hat, bits_y, bits_z)


def sample_noise(weights, x_shape, rng):
    """Uniform noise arrays matching the latent and hyper-latent shapes."""
    b, _, h, w = x_shape
    cfg = weights.config
    ny = rng.uniform(-0.5, 0.5, size=(b, cfg.latent_channels, h // 16, w // 16))
    nz = rng.uniform(-0.5, 0.5, size=(b, cfg.n_channels, h // 64, w // 64))
    return ny, nz
