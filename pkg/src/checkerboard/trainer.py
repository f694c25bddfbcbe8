"""Rate-distortion training with Adam, plus gradient verification.

The loss is ``bpp + lambda * distortion_scale * MSE`` with intensities in
[0, 1].  ``distortion_scale`` defaults to 255**2 so that the usual lambda
values (0.0016 ... 0.045) weigh distortion as they do for 8-bit MSE.
"""

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import codec
from . import network as net
from .data import sample_batch
from .entropy import GaussianParams, estimate_bits, factorized_bits
from .errors import ContractError, TrainingError
from .tensor import Tensor, backward, get_tape, grad_check, no_grad

DEFAULT_DISTORTION_SCALE = 255.0**2


@dataclass
class TrainConfig:
    lam: float = 0.01
    steps: int = 1000
    batch: int = 8
    patch_size: int = 64
    learning_rate: float = 1e-4
    lr_decay_step: int = 0
    seed: int = 0
    model: net.ModelConfig = field(default_factory=net.ModelConfig)
    distortion_scale: float = DEFAULT_DISTORTION_SCALE
    clip_norm: float = 1.0
    log_every: int = 50

    def __post_init__(self):
        if self.lam <= 0 or self.learning_rate <= 0:
            raise ContractError("lambda and learning rate must be positive")
        if self.patch_size % net.TOTAL_STRIDE:
            raise ContractError(f"patch size must be a multiple of {net.TOTAL_STRIDE}")
        if self.steps < 0 or self.batch < 1:
            raise ContractError("steps must be >= 0 and batch >= 1")

    def lr_at(self, step):
        """Learning rate halves once ``lr_decay_step`` is reached (0 disables decay)."""
        if self.lr_decay_step and step >= self.lr_decay_step:
            return self.learning_rate * 0.5
        return self.learning_rate


class OptimizerState:
    """Adam moments per parameter name."""

    def __init__(self, weights, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {n: np.zeros_like(t.data) for n, t in weights}
        self.v = {n: np.zeros_like(t.data) for n, t in weights}
        self.step = 0

    def save(self, path):
        arrays = {f"m/{k}": v for k, v in self.m.items()}
        arrays.update({f"v/{k}": v for k, v in self.v.items()})
        np.savez(path, step=self.step, **arrays)

    @classmethod
    def load(cls, path, weights):
        state = cls(weights)
        with np.load(path) as f:
            state.step = int(f["step"])
            for k in state.m:
                state.m[k] = f[f"m/{k}"]
                state.v[k] = f[f"v/{k}"]
        return state


def adam_update(state, params, grads, lr):
    """In-place bias-corrected Adam step on ``params`` (name -> Tensor)."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.data.dtype)


def clip_by_global_norm(grads, max_norm):
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if max_norm and total > max_norm:
        scale = max_norm / total
        grads = {k: g * scale for k, g in grads.items()}
    return grads, total


def mse(x, x_hat):
    x, x_hat = np.asarray(x, dtype=np.float64), np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise ContractError(f"shape mismatch {x.shape} vs {x_hat.shape}")
    return float(np.mean((x - x_hat) ** 2))


def psnr(x, x_hat):
    """PSNR in dB for [0, 1] images; ``inf`` when identical."""
    e = mse(x, x_hat)
    return math.inf if e == 0 else -10.0 * math.log10(e)


@dataclass
class StepMetrics:
    step: int
    loss: float
    bpp: float
    mse: float


def step_rng(seed, step):
    return np.random.default_rng([seed, step])


def loss_terms(weights, batch, config, noise, mask=None):
    """Differentiable ``(loss, bpp, mse)`` tensors for one batch."""
    fwd = codec.model_forward(weights, batch, noise[0], noise[1], mask)
    b, _, h, w = batch.shape
    bpp = (fwd.bits_y + fwd.bits_z) * (1.0 / (b * h * w))
    err = (fwd.x_hat - batch).square().mean()
    loss = codec.rd_loss(batch, fwd.x_hat, fwd.bits_y, fwd.bits_z, config.lam, config.distortion_scale)
    return loss, bpp, err


def train_step(weights, batch, config, opt_state, step=None, mask=None):
    """One noisy forward/backward pass and Adam update; returns :class:`StepMetrics`."""
    step = opt_state.step if step is None else step
    rng = step_rng(config.seed, step)
    noise = codec.sample_noise(weights, batch.shape, rng)
    tape = get_tape()
    tape.clear()
    weights.zero_grad()
    loss, bpp, err = loss_terms(weights, batch, config, noise, mask)
    value = loss.item()
    if not math.isfinite(value):
        tape.clear()
        raise TrainingError("loss is not finite", step)
    backward(loss)
    grads = {n: t.grad for n, t in weights if t.grad is not None}
    grads, norm = clip_by_global_norm(grads, config.clip_norm)
    if not math.isfinite(norm):
        raise TrainingError("gradient is not finite", step)
    adam_update(opt_state, weights.params, grads, config.lr_at(step))
    weights.zero_grad()
    return StepMetrics(step, value, bpp.item(), err.item())


def train(config, images, weights=None, opt_state=None, log_path=None, mask_sampler=None, progress=None):
    """Run ``config.steps`` steps on random crops of ``images``.

    Args:
        images: sequence of (C, H, W) arrays.
        mask_sampler: optional ``step -> Mask`` used by random-mask training.
        progress: optional callable receiving each logged :class:`StepMetrics`.

    Returns:
        ``(weights, opt_state, history)`` where history holds logged metrics.
    """
    if weights is None:
        weights = net.ModelWeights.init(config.model, seed=config.seed)
    if opt_state is None:
        opt_state = OptimizerState(weights)
    data_rng = np.random.default_rng([config.seed, 0x5EED])
    history = []
    log_file = open(log_path, "w", newline="") if log_path else None
    writer = csv.writer(log_file) if log_file else None
    if writer:
        writer.writerow(["step", "loss", "bpp", "mse"])
    try:
        for _ in range(config.steps):
            step = opt_state.step
            batch = sample_batch(images, config.batch, config.patch_size, data_rng)
            mask = mask_sampler(step) if mask_sampler else None
            metrics = train_step(weights, batch, config, opt_state, step, mask)
            history.append(metrics)
            if writer and (step % config.log_every == 0 or step == config.steps - 1):
                writer.writerow([step, f"{metrics.loss:.6f}", f"{metrics.bpp:.6f}", f"{metrics.mse:.8f}"])
            if progress and step % config.log_every == 0:
                progress(metrics)
    finally:
        if log_file:
            log_file.close()
    return weights, opt_state, history


@dataclass
class EvalResult:
    bpp: float
    mse: float
    psnr: float


def evaluate(weights, images, mask=None):
    """Estimated BPP (rounded latents) and MSE over a list of images."""
    bits = 0.0
    pixels = 0
    sq = 0.0
    with no_grad():
        for img in images:
            x = img[None] if img.ndim == 3 else img
            fwd = codec.model_forward(weights, x, mask=mask)
            bits += fwd.bits_y.item() + fwd.bits_z.item()
            pixels += x.shape[-1] * x.shape[-2] * x.shape[0]
            sq += mse(x, np.clip(fwd.x_hat.data, 0, 1)) * x.size
    e = sq / sum(np.asarray(i).size for i in images)
    return EvalResult(bits / pixels, e, -10 * math.log10(e) if e > 0 else math.inf)


def rate_identity_gap(weights, images):
    """|training-loss rate - estimate_bits| on rounded latents, in bits.

    The training rate sums ``-log2`` of Gaussian bin masses; ``estimate_bits``
    evaluates the same masses through the entropy module.
    """
    cfg = weights.config
    if cfg.gmm_components != 1:
        raise ContractError("rate identity check is defined for single-Gaussian models")
    gaps = []
    with no_grad():
        for img in images:
            x = img[None]
            fwd = codec.model_forward(weights, x)
            mu, sigma = (t.data for t in net.split_params(cfg, fwd.raw))
            est = estimate_bits(GaussianParams(mu, sigma), fwd.y_tilde.data, prob_floor=codec.PROB_FLOOR)
            est_z = factorized_bits(fwd.z_tilde.data, weights.prior(), codec.PROB_FLOOR)
            gaps.append(abs(est - fwd.bits_y.item()) + abs(est_z - fwd.bits_z.item()))
    return max(gaps)


@dataclass
class GradReport:
    max_error: float
    per_tensor: dict
    threshold: float

    @property
    def passed(self):
        return self.max_error < self.threshold

    @property
    def failures(self):
        return sorted(n for n, e in self.per_tensor.items() if not e < self.threshold)


def tiny_config(context_kind="checkerboard", **kw):
    """Smallest model shape used for finite-difference checks."""
    base = dict(n_channels=4, latent_channels=4, context_kernel=3, context_kind=context_kind)
    base.update(kw)
    return net.ModelConfig(**base)


def verify_gradients(weights=None, config=None, seed=0, coords=32, eps=(1e-4, 1e-5), threshold=1e-2, lam=0.01, mask=None):
    """Finite-difference check of the full rate-distortion loss.

    Every parameter tensor contributes ``coords`` randomly chosen coordinates.
    The quantization noise is drawn once from ``seed`` so the loss is a fixed
    deterministic function of the weights.  Computations run in float64 on a
    64 x 64 input, the smallest size the four stride-2 stages plus the two
    hyper stages accept.
    """
    config = config or tiny_config()
    base = weights if weights is not None else net.ModelWeights.init(config, seed=seed)
    w64 = base.copy(dtype=np.float64)
    rng = np.random.default_rng(seed)
    x = rng.random((1, w64.config.image_channels, net.TOTAL_STRIDE, net.TOTAL_STRIDE))
    noise = codec.sample_noise(w64, x.shape, rng)
    tcfg = TrainConfig(lam=lam, model=w64.config)
    # Normalise the loss to O(1) so the 1e-8 denominator floor of grad_check
    # sits above the round-off level of the difference quotients.
    with no_grad():
        scale = 1.0 / abs(loss_terms(w64, x, tcfg, noise, mask)[0].item())
    per_tensor = {}
    for name, tensor in w64:
        flat_n = tensor.data.size
        idx = rng.choice(flat_n, size=min(coords, flat_n), replace=False)
        original = tensor

        def f(p, name=name):
            w64.params[name] = p
            try:
                return loss_terms(w64, x, tcfg, noise, mask)[0] * scale
            finally:
                w64.params[name] = original

        per_tensor[name] = grad_check(f, tensor.data, eps=eps, indices=idx)
    return GradReport(max(per_tensor.values()), per_tensor, threshold)
