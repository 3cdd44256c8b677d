"""Receiver-side estimation: carrier frequency offset and flat-fading CSI.

CFO is estimated from the known packet preamble in two stages. The first
quarter (short preamble) gives a coarse estimate from the angle of summed
lag products y(t - dt) y*(t); the remaining three quarters are de-rotated by
the coarse estimate and the residual is measured the same way, so the fine
estimate is coarse + residual. The lag is one chip period, which keeps
|2*pi*df*dt| < pi for every offset up to a quarter of the subcarrier
spacing (no phase wrapping).

Each lag product is weighted by the conjugate lag product of the known
preamble, which strips the BPSK sign flips (and OOK gaps) of the modulated
preamble; for an unmodulated training tone the weights are all 1 and the
textbook formula is recovered.

CSI is the scalar least-squares fit h = sum(y p*) / sum(|p|^2) over the
preamble segments of a flat-fading subcarrier.
"""

from __future__ import annotations

from dataclasses import dataclass
import math
from typing import Optional, Sequence, Union

import numpy as np

from .phy import BasebandBuffer

__all__ = [
    "EstimationError", "CfoEstimate", "CsiEstimate",
    "estimate_cfo", "scale_cfo", "estimate_csi", "compensate_cfo",
    "circular_motion_theta",
]


class EstimationError(ValueError):
    pass


@dataclass(frozen=True)
class CfoEstimate:
    coarse_hz: float
    fine_hz: float
    ppm: Optional[float] = None     # 1e6 * fine_hz / join frequency


@dataclass(frozen=True)
class CsiEstimate:
    h_hat: complex


def _as_samples(x) -> tuple[np.ndarray, Optional[float]]:
    if isinstance(x, BasebandBuffer):
        return x.samples, x.sample_rate_hz
    return np.asarray(x, dtype=np.complex128), None


def _lag_offset_hz(y: np.ndarray, p: np.ndarray, lag: int, fs: float) -> float:
    """-angle(sum of known-weighted lag products) / (2*pi*lag/fs)."""
    prods = y[:-lag] * np.conj(y[lag:])
    weights = np.conj(p[:-lag]) * p[lag:]
    s = np.sum(prods * weights)
    if abs(s) == 0:
        raise EstimationError("degenerate preamble: no usable lag products")
    return -float(np.angle(s)) * fs / (2.0 * math.pi * lag)


def estimate_cfo(rx_preamble: Union[BasebandBuffer, np.ndarray],
                 known_preamble: Union[BasebandBuffer, np.ndarray],
                 chip_period_s: float,
                 split: float = 0.25,
                 sample_rate_hz: Optional[float] = None,
                 join_freq_hz: Optional[float] = None) -> CfoEstimate:
    """Two-stage preamble CFO estimate (short = first `split` of the preamble)."""
    y, fs = _as_samples(rx_preamble)
    p, _ = _as_samples(known_preamble)
    fs = sample_rate_hz or fs
    if fs is None:
        raise EstimationError("sample rate unknown: pass sample_rate_hz")
    if y.size != p.size:
        raise EstimationError("rx and known preamble lengths differ")
    if not np.any(y) or not np.any(p):
        raise EstimationError("degenerate preamble: all zero")

    lag = max(1, round(chip_period_s * fs))
    q = int(round(y.size * split))
    if q <= lag or y.size - q <= lag:
        raise EstimationError("preamble too short for the chip-period lag")

    coarse = _lag_offset_hz(y[:q], p[:q], lag, fs)

    a = np.arange(1, y.size - q + 1)
    y_long = y[q:] * np.exp(-2j * np.pi * coarse * a / fs)
    residual = _lag_offset_hz(y_long, p[q:], lag, fs)
    fine = coarse + residual

    ppm = 1e6 * fine / join_freq_hz if join_freq_hz else None
    return CfoEstimate(coarse, fine, ppm)


def scale_cfo(estimate: Union[CfoEstimate, float], join_freq_hz: float,
              assigned_freq_hz: float) -> float:
    """Offset on the assigned subcarrier: df * f_assigned / f_join.

    Same crystal, different carrier: the ppm is what carries over.
    """
    if join_freq_hz <= 0 or assigned_freq_hz <= 0:
        raise EstimationError("frequencies must be positive")
    df = estimate.fine_hz if isinstance(estimate, CfoEstimate) else float(estimate)
    return df * assigned_freq_hz / join_freq_hz


def estimate_csi(rx_segments: Sequence[np.ndarray],
                 known_segments: Sequence[np.ndarray]) -> CsiEstimate:
    """Scalar least-squares channel gain over preamble segments.

    h_hat = sum_i y_i . p_i* / sum_i |p_i|^2, the minimizer of
    sum_i |y_i - h p_i|^2 for the flat-fading model y = h p + w.
    """
    if len(rx_segments) == 0 or len(rx_segments) != len(known_segments):
        raise EstimationError("need equally many rx and known segments")
    num = 0j
    den = 0.0
    for y, p in zip(rx_segments, known_segments):
        y = np.asarray(y, dtype=np.complex128)
        p = np.asarray(p, dtype=np.complex128)
        if y.size != p.size:
            raise EstimationError("segment length mismatch")
        num += np.sum(y * np.conj(p))
        den += float(np.sum(np.abs(p) ** 2))
    if den == 0:
        raise EstimationError("zero-energy known preamble")
    return CsiEstimate(complex(num / den))


def circular_motion_theta(delta_s_m: float, line_of_sight_m: float) -> float:
    """Node-side arrival-angle approximation for Doppler pre-compensation.

    A node that treats its displacement delta-s during one packet as motion
    on a circle of radius r (its line-of-sight distance to the BS) may
    approximate theta = delta-s / r. The simulator normally supplies the
    ground-truth angle instead; this is the on-device fallback.
    """
    if line_of_sight_m <= 0:
        raise EstimationError("line-of-sight distance must be positive")
    return delta_s_m / line_of_sight_m


def compensate_cfo(buffer: Union[BasebandBuffer, np.ndarray], cfo_hz: float,
                   sample_rate_hz: Optional[float] = None) -> BasebandBuffer:
    """Counter-rotate: sample t multiplied by e^(-j*2*pi*df*t/fs)."""
    x, fs = _as_samples(buffer)
    fs = sample_rate_hz or fs
    if fs is None:
        raise EstimationError("sample rate unknown: pass sample_rate_hz")
    t = np.arange(x.size)
    return BasebandBuffer(x * np.exp(-2j * np.pi * cfo_hz * t / fs), fs)
