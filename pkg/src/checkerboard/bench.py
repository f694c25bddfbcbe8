"""Per-phase decode timing for checkerboard, serial and context-free models.

Each variant encodes the image once, then decodes it ``warmup + repeats``
times; the reported figure for every phase is the median over repeats.
Absolute milliseconds depend on the machine; ratios and call counts do not.
"""

import csv
import statistics
from dataclasses import asdict, dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from . import codec
from .errors import ContractError

PHASES = ("hyper_synthesis", "parameter_calculation", "entropy_coding", "latent_synthesis", "total")

# Full-scale Kodak decode times (ms), printed next to desk measurements for scale.
REFERENCE_KODAK_MS = {"serial": 1323.66, "checkerboard": 29.66}

REPORT_COLUMNS = (
    "variant",
    "image",
    "width",
    "height",
    "hyper_synthesis_ms",
    "parameter_calculation_ms",
    "entropy_coding_ms",
    "latent_synthesis_ms",
    "total_ms",
    "percent_param",
    "param_calls",
    "speedup",
    "mpps",
)


@dataclass
class PhaseTiming:
    variant: str
    width: int
    height: int
    hyper_synthesis_ms: float
    parameter_calculation_ms: float
    entropy_coding_ms: float
    latent_synthesis_ms: float
    total_ms: float
    calls: dict = field(default_factory=dict)
    image: str = "image"
    threads: int = 1

    @property
    def percent_param(self):
        return 100.0 * self.parameter_calculation_ms / self.total_ms

    @property
    def throughput_pps(self):
        return self.width * self.height / (self.total_ms / 1000.0)

    @property
    def mpps(self):
        return self.throughput_pps / 1e6

    @property
    def param_calls(self):
        return self.calls.get("g_ep", 0)

    def phase_sum_ms(self):
        return self.hyper_synthesis_ms + self.parameter_calculation_ms + self.entropy_coding_ms + self.latent_synthesis_ms


def bench_decode(weights, image, repeats=5, warmup=2, threads=1, name="image"):
    """Time ``decode_image`` phase by phase.

    Args:
        weights: model to benchmark; its context kind names the variant.
        image: (C, H, W) array in [0, 1].
        repeats: timed decodes (median taken), at least 5.
        warmup: untimed decodes first, at least 2.
        threads: BLAS thread cap applied for the whole measurement.

    Raises:
        ContractError: too few repeats, or decoding did not reproduce the
            encoder's latents (timings of a wrong decode are meaningless).
    """
    if repeats < 5 or warmup < 2:
        raise ContractError("bench_decode needs repeats >= 5 and warmup >= 2")
    image = np.asarray(image)
    with threadpool_limits(limits=threads):
        enc = codec.encode_image(image, weights, details=True)
        blob = enc.container.to_bytes()
        samples = {p: [] for p in PHASES}
        calls = {}
        for i in range(warmup + repeats):
            res = codec.decode_image(blob, weights, details=True)
            if i == 0 and not np.array_equal(res.y_hat, enc.y_hat):
                raise ContractError("decoder disagrees with encoder; refusing to time a wrong decode")
            calls = res.calls
            if i >= warmup:
                for p in PHASES:
                    samples[p].append(res.seconds.get(p, 0.0))
    ms = {p: 1000.0 * statistics.median(v) for p, v in samples.items()}
    return PhaseTiming(
        variant=weights.config.context_kind,
        width=image.shape[-1],
        height=image.shape[-2],
        hyper_synthesis_ms=ms["hyper_synthesis"],
        parameter_calculation_ms=ms["parameter_calculation"],
        entropy_coding_ms=ms["entropy_coding"],
        latent_synthesis_ms=ms["latent_synthesis"],
        total_ms=ms["total"],
        calls=dict(calls),
        image=name,
        threads=threads,
    )


def speedup(slow, fast):
    return slow.total_ms / fast.total_ms


def report_rows(timings, baseline="serial"):
    """Dict rows; ``speedup`` is relative to the ``baseline`` variant of the same image."""
    base = {t.image: t for t in timings if t.variant == baseline}
    rows = []
    for t in timings:
        ref = base.get(t.image)
        rows.append(
            {
                "variant": t.variant,
                "image": t.image,
                "width": t.width,
                "height": t.height,
                "hyper_synthesis_ms": round(t.hyper_synthesis_ms, 3),
                "parameter_calculation_ms": round(t.parameter_calculation_ms, 3),
                "entropy_coding_ms": round(t.entropy_coding_ms, 3),
                "latent_synthesis_ms": round(t.latent_synthesis_ms, 3),
                "total_ms": round(t.total_ms, 3),
                "percent_param": round(t.percent_param, 2),
                "param_calls": t.param_calls,
                "speedup": round(speedup(ref, t), 3) if ref else "",
                "mpps": round(t.mpps, 4),
            }
        )
    return rows


def emit_report(timings, path, fmt="csv"):
    """Write one row per (variant, image) as CSV or a markdown table."""
    rows = report_rows(timings)
    if fmt == "csv":
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=REPORT_COLUMNS)
            w.writeheader()
            w.writerows(rows)
    elif fmt == "markdown":
        with open(path, "w") as f:
            f.write(markdown_table(rows))
    else:
        raise ContractError(f"unknown report format {fmt!r}")
    return path


def markdown_table(rows):
    lines = ["| " + " | ".join(REPORT_COLUMNS) + " |", "|" + "---|" * len(REPORT_COLUMNS)]
    for r in rows:
        lines.append("| " + " | ".join(str(r[c]) for c in REPORT_COLUMNS) + " |")
    ref = REFERENCE_KODAK_MS
    lines.append("")
    lines.append(
        f"Reference (full-scale Kodak decode): serial {ref['serial']} ms, "
        f"checkerboard {ref['checkerboard']} ms, speedup {ref['serial'] / ref['checkerboard']:.1f}x."
    )
    return "\n".join(lines) + "\n"


def timing_dict(t):
    d = asdict(t)
    d.update(percent_param=t.percent_param, throughput_pps=t.throughput_pps)
    return d
