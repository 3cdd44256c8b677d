"""Synthetic RF channel between nodes and the BS front end.

Log-distance path loss, slow flat fading (one complex gain per link),
oscillator CFO plus Doppler as a continuous phase ramp, and receiver-side
AWGN. Concurrent asynchronous transmitters are summed sample-wise, so
near-far effects and inter-carrier leakage fall out of the arithmetic.

Noise is injected once at the receiver, not per link; its power is set
against the strongest concurrent contribution.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import math

import numpy as np

from .phy import BasebandBuffer

__all__ = [
    "ChannelError", "LinkModel", "Superposition",
    "path_loss_db", "doppler_shift_hz", "propagate", "SPEED_OF_LIGHT",
]

SPEED_OF_LIGHT = 299_792_458.0


class ChannelError(ValueError):
    pass


@dataclass
class LinkModel:
    """One transmitter -> BS link."""

    distance_m: float = 1.0
    path_loss_exponent: float = 3.2
    reference_loss_db: float = 0.0      # loss at 1 m
    fading_h: complex = 1.0 + 0j       # slow flat fading gain H
    cfo_hz: float = 0.0                # oscillator offset delta-f
    doppler_hz: float = 0.0            # delta-f_d
    snr_db: float = math.inf           # receiver SNR target; inf = noiseless

    def __post_init__(self):
        if self.distance_m <= 0:
            raise ChannelError("distance must be positive")
        if not 1.6 <= self.path_loss_exponent <= 6.0:
            raise ChannelError("path loss exponent outside [1.6, 6]")

    @property
    def linear_gain(self) -> float:
        return 10.0 ** (-path_loss_db(self.distance_m, self) / 20.0)


@dataclass
class Superposition:
    """Asynchronous contributions arriving at the BS Rx radio."""

    contributions: list[tuple[BasebandBuffer, int, LinkModel]] = field(
        default_factory=list)

    def add(self, buffer: BasebandBuffer, start_offset_samples: int,
            link: LinkModel) -> None:
        if start_offset_samples < 0:
            raise ChannelError("start offset must be >= 0")
        self.contributions.append((buffer, int(start_offset_samples), link))


def path_loss_db(distance_m: float, model: LinkModel) -> float:
    """Log-distance loss: L(1m) + 10 * n * log10(d)."""
    if distance_m <= 0:
        raise ChannelError("distance must be positive")
    return model.reference_loss_db + \
        10.0 * model.path_loss_exponent * math.log10(distance_m)


def doppler_shift_hz(carrier_hz: float, speed_mps: float,
                     theta_rad: float) -> float:
    """f_c * (v/c) * cos(theta); theta is the angle between motion and the BS."""
    if abs(speed_mps) >= SPEED_OF_LIGHT:
        raise ChannelError("speed must be below c")
    return carrier_hz * (speed_mps / SPEED_OF_LIGHT) * math.cos(theta_rad)


def propagate(sup: Superposition, rng_seed, out_len: int,
              sample_rate_hz: float) -> BasebandBuffer:
    """Sum faded, shifted, CFO-rotated contributions and add receiver noise.

    out[t] = sum_k h_k * g_k * x_k[t - o_k] * e^(j*2*pi*(df_k + dfd_k)*(t-o_k)/fs) + w[t]

    The phase ramp of each contribution starts at its own first sample
    (transmitter-side oscillator). Deterministic for a given seed; snr = inf
    on the strongest link disables noise entirely.
    """
    out = np.zeros(out_len, dtype=np.complex128)
    strongest_power = 0.0
    strongest_snr = math.inf
    for buffer, offset, link in sup.contributions:
        x = buffer.samples
        if offset + x.size > out_len:
            raise ChannelError("offset overflow: contribution exceeds output")
        g = link.linear_gain
        df = link.cfo_hz + link.doppler_hz
        if df:
            tau = np.arange(x.size)
            x = x * np.exp(2j * np.pi * df * tau / sample_rate_hz)
        contrib = link.fading_h * g * x
        out[offset:offset + x.size] += contrib
        power = float(np.mean(np.abs(contrib) ** 2)) if x.size else 0.0
        if power > strongest_power:
            strongest_power = power
            strongest_snr = link.snr_db
    if strongest_power > 0 and math.isfinite(strongest_snr):
        noise_power = strongest_power * 10.0 ** (-strongest_snr / 10.0)
        rng = np.random.default_rng(rng_seed)
        sigma = math.sqrt(noise_power / 2.0)
        out += sigma * (rng.standard_normal(out_len)
                        + 1j * rng.standard_normal(out_len))
    return BasebandBuffer(out, sample_rate_hz)
