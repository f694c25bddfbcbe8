"""Discretized Gaussian / GMM entropy models and integer CDF tables.

Latent symbols live in ``[SYMBOL_MIN, SYMBOL_MAX]``.  A PMF over that range
is the Gaussian mass on each unit bin, with the two edge symbols absorbing
the tails so that the PMF sums to one.  Before a PMF reaches the range
coder its parameters are snapped to a fixed grid (``quantize_params``) so
that encoder and decoder build byte-identical tables.
"""

from dataclasses import dataclass

import numpy as np
from scipy import special

from .errors import ContractError

SYMBOL_MIN = -128
SYMBOL_MAX = 127
PRECISION = 16
SIGMA_MIN = 1e-6
MU_STEPS = 16

SCALE_TABLE = np.geomspace(0.01, 64.0, 64)


@dataclass
class GaussianParams:
    """Per-element location/scale."""

    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.sigma = np.maximum(np.asarray(self.sigma, dtype=np.float64), SIGMA_MIN)


@dataclass
class GmmParams:
    """K-component mixture; arrays carry the component axis last."""

    weights: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.sigma = np.maximum(np.asarray(self.sigma, dtype=np.float64), SIGMA_MIN)
        if np.any(self.weights < 0) or not np.allclose(self.weights.sum(-1), 1.0, atol=1e-6):
            raise ContractError("mixture weights must be non-negative and sum to 1")

    @property
    def components(self):
        return self.weights.shape[-1]


@dataclass
class FactorizedPrior:
    """Per-channel Gaussian prior for the hyper-latent."""

    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64).reshape(-1)
        self.sigma = np.maximum(np.asarray(self.sigma, dtype=np.float64).reshape(-1), SIGMA_MIN)


@dataclass(frozen=True)
class CdfTable:
    """Cumulative frequencies: ``cdf[0] == 0`` and ``cdf[-1] == 2**precision``."""

    cdf: np.ndarray
    s_min: int = SYMBOL_MIN
    precision_bits: int = PRECISION

    @property
    def s_max(self):
        return self.s_min + len(self.cdf) - 2

    def frequency(self, symbol):
        i = symbol - self.s_min
        return int(self.cdf[i + 1] - self.cdf[i])


# PMFs -----------------------------------------------------------------------


def _bin_mass(lo, hi):
    """Standard-normal mass on [lo, hi], using the upper tail when both are positive."""
    upper_side = lo > 0
    direct = special.ndtr(hi) - special.ndtr(lo)
    mirrored = special.ndtr(-lo) - special.ndtr(-hi)
    return np.where(upper_side, mirrored, direct)


def discretized_gaussian_pmf(mu, sigma, s_min=SYMBOL_MIN, s_max=SYMBOL_MAX):
    """PMF over ``s_min..s_max`` (last axis) for each (mu, sigma) pair."""
    if s_min > s_max:
        raise ContractError(f"empty symbol range [{s_min}, {s_max}]")
    mu = np.asarray(mu, dtype=np.float64)[..., None]
    sigma = np.maximum(np.asarray(sigma, dtype=np.float64), SIGMA_MIN)[..., None]
    edges = np.arange(s_min, s_max + 2, dtype=np.float64) - 0.5
    lo = (edges[:-1] - mu) / sigma
    hi = (edges[1:] - mu) / sigma
    lo[..., 0] = -np.inf
    hi[..., -1] = np.inf
    return _bin_mass(lo, hi)


def discretized_gmm_pmf(params, s_min=SYMBOL_MIN, s_max=SYMBOL_MAX):
    """Mixture PMF: sum_k weight_k * discretized_gaussian_pmf(mu_k, sigma_k)."""
    per_component = discretized_gaussian_pmf(params.mu, params.sigma, s_min, s_max)
    return np.einsum("...k,...ks->...s", params.weights, per_component)


def _element_mass(symbols, mu, sigma, s_min, s_max):
    s = np.asarray(symbols, dtype=np.float64)
    lo = np.where(s <= s_min, -np.inf, (s - 0.5 - mu) / sigma)
    hi = np.where(s >= s_max, np.inf, (s + 0.5 - mu) / sigma)
    return _bin_mass(lo, hi)


# parameter quantization -----------------------------------------------------


def scale_index(sigma):
    """Index of the smallest scale-table entry not below ``sigma`` (clamped)."""
    idx = np.searchsorted(SCALE_TABLE, np.asarray(sigma, dtype=np.float64), side="left")
    return np.minimum(idx, len(SCALE_TABLE) - 1)


def mean_index(mu):
    """``mu`` on the 1/16 grid as an integer, clamped to the symbol range."""
    q = np.floor(np.asarray(mu, dtype=np.float64) * MU_STEPS + 0.5)
    return np.clip(q, SYMBOL_MIN * MU_STEPS, SYMBOL_MAX * MU_STEPS).astype(np.int64)


def quantize_params(mu, sigma):
    """Snap (mu, sigma) to the shared grid; identical on encode and decode."""
    return mean_index(mu) / MU_STEPS, SCALE_TABLE[scale_index(sigma)]


def quantize_weights(weights):
    """Snap mixture weights to multiples of 2**-16 and renormalize."""
    q = np.floor(np.asarray(weights, dtype=np.float64) * 65536.0 + 0.5)
    return q / q.sum(axis=-1, keepdims=True)


# CDF tables -----------------------------------------------------------------


def build_cdf_rows(pmfs, precision_bits=PRECISION):
    """Vectorized largest-remainder apportionment; one CDF row per PMF row."""
    pmfs = np.atleast_2d(np.asarray(pmfs, dtype=np.float64))
    if np.any(pmfs < 0):
        raise ContractError("pmf has negative entries")
    sums = pmfs.sum(axis=1, keepdims=True)
    if np.any(np.abs(sums - 1.0) > 1e-6):
        raise ContractError("pmf must sum to 1 within 1e-6")
    n_rows, n = pmfs.shape
    total = 1 << precision_bits
    if n > total:
        raise ContractError(f"{n} symbols do not fit in {precision_bits}-bit precision")
    spare = total - n
    raw = pmfs / sums * spare
    base = np.floor(raw)
    leftover = (spare - base.sum(axis=1)).astype(np.int64)
    order = np.argsort(-(raw - base), axis=1, kind="stable")
    rank = np.empty_like(order)
    rank[np.arange(n_rows)[:, None], order] = np.arange(n)[None, :]
    freq = base.astype(np.int64) + 1 + (rank < leftover[:, None])
    cdf = np.zeros((n_rows, n + 1), dtype=np.int64)
    np.cumsum(freq, axis=1, out=cdf[:, 1:])
    return cdf


def build_cdf(pmf, precision_bits=PRECISION, s_min=SYMBOL_MIN):
    """Integer table with every frequency >= 1 and total exactly 2**precision."""
    pmf = np.asarray(pmf, dtype=np.float64)
    if pmf.ndim != 1:
        raise ContractError("build_cdf takes a single pmf vector; use build_cdf_rows for batches")
    return CdfTable(build_cdf_rows(pmf, precision_bits)[0], s_min, precision_bits)


class TableCache:
    """Memoised CDF rows for quantized Gaussian parameters.

    Rows are pure functions of ``(mean_index, scale_index)``, so the cache
    can be dropped at any time without affecting the produced tables.
    """

    N_KEYS = (SYMBOL_MAX - SYMBOL_MIN) * MU_STEPS * len(SCALE_TABLE) + len(SCALE_TABLE)

    def __init__(self, max_rows=1 << 16):
        self.max_rows = max_rows
        self._slot = np.full(self.N_KEYS, -1, dtype=np.int64)
        self._rows = np.zeros((256, SYMBOL_MAX - SYMBOL_MIN + 2), dtype=np.int64)
        self._count = 0

    @property
    def rows(self):
        return self._rows

    def __len__(self):
        """Number of live rows (the backing array may be larger)."""
        return self._count

    def clear(self):
        self._slot.fill(-1)
        self._count = 0

    def lookup(self, mu, sigma):
        """Row indices (shape of ``mu``) into :attr:`rows` for raw parameters."""
        mi = mean_index(mu).reshape(-1)
        si = scale_index(sigma).reshape(-1)
        keys = (mi - SYMBOL_MIN * MU_STEPS) * len(SCALE_TABLE) + si
        found = self._slot[keys]
        if np.any(found < 0):
            missing = np.unique(keys[found < 0])
            if self._count and self._count + len(missing) > self.max_rows:
                self.clear()
                return self.lookup(mu, sigma)
            m_idx = missing // len(SCALE_TABLE) + SYMBOL_MIN * MU_STEPS
            s_idx = missing % len(SCALE_TABLE)
            new_rows = build_cdf_rows(discretized_gaussian_pmf(m_idx / MU_STEPS, SCALE_TABLE[s_idx]))
            need = self._count + len(missing)
            if need > len(self._rows):
                grown = np.zeros((max(need, 2 * len(self._rows)), self._rows.shape[1]), dtype=np.int64)
                grown[: self._count] = self._rows[: self._count]
                self._rows = grown
            self._rows[self._count : need] = new_rows
            self._slot[missing] = np.arange(self._count, need)
            self._count = need
            found = self._slot[keys]
        return found.reshape(np.shape(mu))


_default_cache = TableCache()


def gaussian_tables(mu, sigma, cache=None):
    """``(rows, index)`` so that ``rows[index[i]]`` is element i's CDF."""
    cache = _default_cache if cache is None else cache
    index = cache.lookup(mu, sigma)
    return cache.rows, index


def gmm_tables(params):
    """Per-element CDF rows for quantized mixture parameters."""
    mu_q, sigma_q = quantize_params(params.mu, params.sigma)
    w_q = quantize_weights(params.weights)
    pmf = discretized_gmm_pmf(GmmParams(w_q, mu_q, sigma_q))
    flat = pmf.reshape(-1, pmf.shape[-1])
    rows = build_cdf_rows(flat)
    return rows, np.arange(len(rows)).reshape(pmf.shape[:-1])


# bit estimates ----------------------------------------------------------------


def _check_range(symbols, s_min, s_max):
    if symbols.size and (symbols.min() < s_min or symbols.max() > s_max):
        raise ContractError(f"symbols outside [{s_min}, {s_max}]")


def estimate_bits(model, symbols, s_min=SYMBOL_MIN, s_max=SYMBOL_MAX, prob_floor=0.0):
    """Ideal code length ``sum(-log2 p(symbol))`` in bits.

    ``model`` may be a PMF vector (shared by all symbols), a stack of PMF
    rows (one per symbol), a :class:`CdfTable`, or Gaussian/GMM parameters
    broadcastable against ``symbols``.  For Gaussian/GMM parameters,
    ``prob_floor`` lower-bounds each bin mass the way the training rate does.
    """
    symbols = np.asarray(symbols)
    if isinstance(model, CdfTable):
        s_min, s_max = model.s_min, model.s_max
        _check_range(symbols, s_min, s_max)
        idx = symbols.astype(np.int64).reshape(-1) - s_min
        freq = model.cdf[idx + 1] - model.cdf[idx]
        return float(-np.log2(freq / float(1 << model.precision_bits)).sum())
    if isinstance(model, GaussianParams):
        _check_range(symbols, s_min, s_max)
        p = _element_mass(symbols, model.mu, model.sigma, s_min, s_max)
        return float(-np.log2(np.maximum(p, prob_floor)).sum())
    if isinstance(model, GmmParams):
        _check_range(symbols, s_min, s_max)
        s = symbols[..., None]
        p = (model.weights * _element_mass(s, model.mu, model.sigma, s_min, s_max)).sum(-1)
        return float(-np.log2(np.maximum(p, prob_floor)).sum())
    pmf = np.asarray(model, dtype=np.float64)
    s_max = s_min + pmf.shape[-1] - 1
    _check_range(symbols, s_min, s_max)
    idx = symbols.astype(np.int64).reshape(-1) - s_min
    if pmf.ndim == 1:
        p = pmf[idx]
    else:
        p = pmf.reshape(-1, pmf.shape[-1])[np.arange(idx.size), idx]
    return float(-np.log2(p).sum())


def factorized_bits(z_hat, prior, prob_floor=0.0):
    """Bits for an NCHW hyper-latent under a per-channel Gaussian prior."""
    z_hat = np.asarray(z_hat)
    if z_hat.size == 0:
        return 0.0
    shape = (1, -1) + (1,) * (z_hat.ndim - 2)
    params = GaussianParams(prior.mu.reshape(shape), prior.sigma.reshape(shape))
    return estimate_bits(params, z_hat, prob_floor=prob_floor)
