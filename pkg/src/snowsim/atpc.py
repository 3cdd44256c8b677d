"""Adaptive transmission power control.

Each node keeps a linear model of delivery ratio versus Tx power,

    pdr(tp) = a * tp + b,

fits (a, b) once by least squares over a probe burst, then picks the lowest
power whose predicted PDR clears the threshold. At runtime only the
intercept b is re-estimated from delivery feedback; the slope is treated as
time-invariant. Raising power when PDR sags therefore relies on a > 0, which
holds for physical links; a non-positive fitted slope falls back to maximum
power and is flagged.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

__all__ = ["AtpcError", "PowerModel", "fit_initial", "select_power", "update_model"]


class AtpcError(ValueError):
    pass


@dataclass(frozen=True)
class PowerModel:
    a_hat: float                     # PDR per dBm, fixed after the fit
    b_hat: float                     # PDR intercept, updated by feedback
    tp_levels: tuple[float, ...]     # selectable powers, strictly increasing
    pdr_threshold: float = 90.0
    slope_valid: bool = True         # False -> non-physical fit, use max power

    def __post_init__(self):
        if len(self.tp_levels) == 0:
            raise AtpcError("empty power level list")
        if any(b <= a for a, b in zip(self.tp_levels, self.tp_levels[1:])):
            raise AtpcError("power levels must be strictly increasing")


def fit_initial(tp: Sequence[float], pdr: Sequence[float],
                tp_levels: Sequence[float] | None = None,
                pdr_threshold: float = 90.0) -> PowerModel:
    """Closed-form least squares for pdr = a*tp + b over the probe samples."""
    m = len(tp)
    if m < 2 or len(pdr) != m:
        raise AtpcError("need >= 2 equally many power/PDR samples")
    s_tp = sum(tp)
    s_tp2 = sum(x * x for x in tp)
    s_l = sum(pdr)
    s_ltp = sum(l * x for l, x in zip(pdr, tp))
    den = m * s_tp2 - s_tp * s_tp
    if abs(den) < 1e-12:
        raise AtpcError("collinear power samples")
    a = (m * s_ltp - s_l * s_tp) / den
    b = (s_l * s_tp2 - s_ltp * s_tp) / den
    levels = tuple(tp_levels) if tp_levels is not None else tuple(sorted(set(tp)))
    return PowerModel(a, b, levels, pdr_threshold, slope_valid=a > 0)


def select_power(model: PowerModel) -> float:
    """(threshold - b)/a, rounded to the nearest selectable level.

    Nearest-element rounding over a finite level list clamps out-of-range
    values to the ends automatically.
    """
    if not model.slope_valid:
        return model.tp_levels[-1]
    raw = (model.pdr_threshold - model.b_hat) / model.a_hat
    return min(model.tp_levels, key=lambda level: (abs(level - raw), level))


def update_model(model: PowerModel, pdr_readings: Sequence[float]) -> PowerModel:
    """Feedback step: b <- b - (threshold - mean(readings)); slope untouched."""
    if len(pdr_readings) < 1:
        raise AtpcError("need at least one PDR reading")
    mean = sum(pdr_readings) / len(pdr_readings)
    delta_b = model.pdr_threshold - mean
    return replace(model, b_hat=model.b_hat - delta_b)
