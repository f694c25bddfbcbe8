"""Random-mask context supernet and rate-saving-ratio evaluation.

One model is trained while every step multiplies its 5x5 context kernel by a
freshly drawn random binary mask, so the weights serve all masks at once.
Any fixed mask M can then be scored by the bits it saves relative to the
all-zero mask on the same weights::

    eta(M) = (R_0 - R_M) / R_0

Rates are entropy estimates on rounded latents with the same probability
floor as the training loss; no bitstream is produced (masks need not be
causal here).  Sparse masks lie far from the ~50% density seen in training,
so the floor matters for them: without it a single underflowing bin makes
the rate infinite.
"""

import csv
from dataclasses import dataclass, replace

import numpy as np

from . import codec
from . import network as net
from . import ops
from . import trainer
from .entropy import GaussianParams, GmmParams, estimate_bits, factorized_bits
from .errors import ContractError
from .tensor import Tensor, no_grad

SUPERNET_KERNEL = 5

TABLE1_MASKS = (
    ("non-reference", "zero", 5),
    ("serial 3x3", "serial", 3),
    ("serial 5x5", "serial", 5),
    ("checkerboard 3x3", "checkerboard", 3),
    ("checkerboard 5x5", "checkerboard", 5),
    ("all neighbours 3x3", "all_neighbors3", 3),
)


def step_mask(seed, step, k=SUPERNET_KERNEL):
    """The random mask used at a given training step (pure function of seed and step)."""
    mixed = ops.SplitMix64((int(seed) << 32) ^ int(step)).next()
    return ops.make_mask("random", k, seed=mixed)


def mask_statistics(seed, steps, k=SUPERNET_KERNEL):
    """Fraction of steps in which each mask bit is on."""
    counts = np.zeros((k, k))
    for s in range(steps):
        counts += step_mask(seed, s, k).bits
    return counts / max(steps, 1)


def supernet_config(**overrides):
    base = dict(context_kind="random", context_kernel=SUPERNET_KERNEL)
    base.update(overrides)
    return net.ModelConfig(**base)


def desk_train_config(steps=20000, lam=0.01, seed=0, model=None, **kw):
    """Desk defaults for the supernet: batch 8 of 64 x 64 crops, lr 1e-3 halved at 75%."""
    model = model or supernet_config()
    kw.setdefault("learning_rate", 1e-3)
    kw.setdefault("lr_decay_step", int(steps * 0.75))
    return trainer.TrainConfig(lam=lam, steps=steps, batch=8, patch_size=64, seed=seed, model=model, **kw)


def train_random_mask_model(config, dataset, steps=None, seed=None, log_path=None, progress=None):
    """Train the weight-sharing supernet; each step draws a fresh random 5x5 mask.

    Args:
        config: :class:`trainer.TrainConfig` whose model has ``context_kind="random"``.
        dataset: sequence of (C, H, W) images.
        steps, seed: override the values in ``config``.
    """
    if config.model.context_kind != "random" or config.model.context_kernel != SUPERNET_KERNEL:
        raise ContractError("the supernet needs context_kind='random' with a 5x5 context kernel")
    if steps is not None:
        config = replace(config, steps=steps)
    if seed is not None:
        config = replace(config, seed=seed)
    weights, _, history = trainer.train(
        config, dataset, log_path=log_path, mask_sampler=lambda s: step_mask(config.seed, s), progress=progress
    )
    return weights, history


@dataclass
class MaskEvalReport:
    description: str
    k_ref: int
    bpp: float
    r0: float
    dataset: str = "synthetic"

    @property
    def eta(self):
        return (self.r0 - self.bpp) / self.r0

    @property
    def eta_percent(self):
        return 100.0 * self.eta


class MaskEvaluator:
    """Caches everything that does not depend on the mask.

    ``y_hat``, ``z_hat``, the hyper features, the hyper-latent bits and the
    reconstruction are computed once; each mask only re-runs g_cm and g_ep.
    """

    def __init__(self, weights, dataset, dataset_id="synthetic"):
        self.weights = weights
        self.dataset_id = dataset_id
        self.items = []
        pixels = 0
        z_bits = 0.0
        with no_grad():
            for img in dataset:
                x = Tensor(np.asarray(img, dtype=np.float32)[None])
                y = net.analyze(weights, x)
                y_hat = codec.quantize_latents(y.data)
                z_hat = codec.quantize_latents(net.hyper_analyze(weights, y).data)
                hyper = net.hyper_synthesize(weights, Tensor(z_hat))
                x_hat = np.clip(net.synthesize(weights, Tensor(y_hat)).data, 0, 1)
                self.items.append((y_hat, hyper, x_hat))
                z_bits += factorized_bits(z_hat, weights.prior(), codec.PROB_FLOOR)
                pixels += x.shape[-1] * x.shape[-2]
        self.pixels = pixels
        self.z_bits = z_bits
        self._r0 = None

    def rate(self, mask):
        """Mean BPP (latent + hyper-latent bits over all pixels) under ``mask``."""
        if mask.size != SUPERNET_KERNEL:
            mask = mask.padded(SUPERNET_KERNEL)
        cfg = self.weights.config
        bits = self.z_bits
        with no_grad():
            for y_hat, hyper, _ in self.items:
                raw = net.entropy_params_masked(self.weights, hyper, Tensor(y_hat), mask)
                bits += _latent_bits(cfg, raw, y_hat)
        return bits / self.pixels

    @property
    def r0(self):
        if self._r0 is None:
            self._r0 = self.rate(ops.make_mask("zero", SUPERNET_KERNEL))
        return self._r0

    def report(self, mask, description=None):
        return MaskEvalReport(description or mask.describe(), mask.k_ref, self.rate(mask), self.r0, self.dataset_id)

    def reconstructions(self):
        return [x for _, _, x in self.items]


def _latent_bits(cfg, raw, y_hat):
    if cfg.gmm_components == 1:
        mu, sigma = (t.data for t in net.split_params(cfg, raw))
        return estimate_bits(GaussianParams(mu, sigma), y_hat, prob_floor=codec.PROB_FLOOR)
    w, mu, sigma = (np.moveaxis(t.data, 2, -1) for t in net.split_params(cfg, raw))
    return estimate_bits(GmmParams(w, mu, sigma), y_hat, prob_floor=codec.PROB_FLOOR)


def eval_mask(weights, mask, dataset, dataset_id="synthetic"):
    return MaskEvaluator(weights, dataset, dataset_id).report(mask)


def table1_protocol(weights, dataset, evaluator=None):
    """The six reference patterns: zero, serial 3/5, checkerboard 3/5, all neighbours 3x3."""
    ev = evaluator or MaskEvaluator(weights, dataset)
    return [ev.report(ops.make_mask(kind, k), name) for name, kind, k in TABLE1_MASKS]


def single_ref_offsets(k=SUPERNET_KERNEL):
    c = k // 2
    return [(dy, dx) for dy in range(-c, c + 1) for dx in range(-c, c + 1) if (dy, dx) != (0, 0)]


def single_reference_sweep(weights, dataset, evaluator=None):
    """One report per non-centre position of the 5x5 window (24 masks)."""
    ev = evaluator or MaskEvaluator(weights, dataset)
    return [ev.report(ops.make_mask("single_ref", SUPERNET_KERNEL, offset=o)) for o in single_ref_offsets()]


def chebyshev_distance(report_or_offset):
    o = report_or_offset
    return max(abs(o[0]), abs(o[1]))


def distance_groups(k=SUPERNET_KERNEL):
    """Split single-reference offsets into near (the four 4-neighbours) and far (Chebyshev >= 2)."""
    offsets = single_ref_offsets(k)
    near = [o for o in offsets if abs(o[0]) + abs(o[1]) == 1]
    far = [o for o in offsets if chebyshev_distance(o) >= 2]
    return near, far


def mean_eta_by_distance(sweep_reports, k=SUPERNET_KERNEL):
    """``(mean eta near, mean eta far)`` for a sweep in :func:`single_ref_offsets` order."""
    by_offset = dict(zip(single_ref_offsets(k), sweep_reports))
    near, far = distance_groups(k)
    return (float(np.mean([by_offset[o].eta for o in near])), float(np.mean([by_offset[o].eta for o in far])))


def write_csv(reports, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["description", "k_ref", "bpp", "eta_percent"])
        for r in reports:
            w.writerow([r.description, r.k_ref, f"{r.bpp:.6f}", f"{r.eta_percent:.3f}"])


def read_csv(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))
