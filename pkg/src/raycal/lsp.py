"""Large-scale parameters of the specular components and the error statistics
used to compare measured and predicted links.

Azimuth statistics use circular definitions: the mean azimuth is the argument
of the power-weighted resultant, and the spread is sqrt(-2 ln |R|) of the
normalized resultant (a linear power-weighted standard deviation is available
behind a switch).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class LspSet:
    total_specular_power_dbm: float
    mean_delay_ns: float
    delay_spread_ns: float
    mean_azimuth_deg: float
    azimuth_spread_deg: float
    diffuse_percent: float
    empty: bool = False

    FIELDS = ("total_specular_power_dbm", "mean_delay_ns", "delay_spread_ns",
              "mean_azimuth_deg", "azimuth_spread_deg", "diffuse_percent")

    def as_tuple(self):
        return tuple(getattr(self, f) for f in self.FIELDS)


@dataclass
class ErrorStats:
    mean_error: float
    std_dev: float
    rmse: float
    correlation: float
    constant_series: bool = False    # correlation undefined when flagged


def _empty_lsp():
    return LspSet(*(float("nan"),) * 6, empty=True)


def compute_lsps(powers_mw, delays_s, azimuths_deg, total_power_mw=None,
                 circular_spread=True) -> LspSet:
    """Power-weighted link statistics from specular component arrays.

    ``total_power_mw`` is the channel total including diffuse energy; when
    omitted the specular sum is used (0% diffuse).
    """
    p = np.asarray(powers_mw, dtype=float)
    if p.size == 0 or p.sum() <= 0:
        return _empty_lsp()
    tau = np.asarray(delays_s, dtype=float) * 1e9
    az = np.deg2rad(np.asarray(azimuths_deg, dtype=float))
    w = p / p.sum()

    mean_delay = float(w @ tau)
    delay_spread = float(np.sqrt(max(w @ tau ** 2 - mean_delay ** 2, 0.0)))

    resultant = np.sum(w * np.exp(1j * az))
    mean_az = float(np.degrees(np.angle(resultant))) % 360.0
    if mean_az >= 360.0:       # guard the float wrap of tiny negative angles
        mean_az = 0.0
    if circular_spread:
        r = min(abs(resultant), 1.0)
        az_spread = float(np.degrees(np.sqrt(max(-2.0 * np.log(max(r, 1e-300)), 0.0))))
    else:
        centered = np.angle(np.exp(1j * (az - np.angle(resultant))))
        az_spread = float(np.degrees(np.sqrt(w @ centered ** 2)))

    p_spec = float(p.sum())
    total = p_spec if total_power_mw is None else float(total_power_mw)
    return LspSet(
        total_specular_power_dbm=10.0 * np.log10(p_spec),
        mean_delay_ns=mean_delay,
        delay_spread_ns=delay_spread,
        mean_azimuth_deg=mean_az,
        azimuth_spread_deg=az_spread,
        diffuse_percent=diffuse_percentage(total, p_spec),
    )


def lsps_from_mpcs(mpcs, total_power_mw=None, circular_spread=True) -> LspSet:
    return compute_lsps([abs(m.amplitude) ** 2 for m in mpcs],
                        [m.delay_s for m in mpcs],
                        [m.az_deg for m in mpcs],
                        total_power_mw=total_power_mw,
                        circular_spread=circular_spread)


def lsps_from_paths(paths, f_ghz, tx_power_dbm=0.0, tx_antenna="monopole",
                    rx_antenna="monopole", circular_spread=True) -> LspSet:
    """Predicted-side statistics: specular paths carry the summary, the
    diffuse paths only contribute to the total for the diffuse share."""
    from .tracer import path_gain
    spec_p, spec_tau, spec_az = [], [], []
    total = 0.0
    scale = 10.0 ** (tx_power_dbm / 10.0)
    for p in paths:
        a = abs(path_gain(p, f_ghz, tx_antenna, rx_antenna)) ** 2 * scale
        total += a
        if not p.is_diffuse:
            spec_p.append(a)
            spec_tau.append(p.delay)
            spec_az.append(p.aod[0])
    return compute_lsps(spec_p, spec_tau, spec_az, total_power_mw=total,
                        circular_spread=circular_spread)


def diffuse_percentage(p_total_mw: float, p_spec_mw: float) -> float:
    """Share of the channel power not captured by the specular components."""
    if p_total_mw <= 0 or not np.isfinite(p_total_mw):
        return float("nan")
    return 100.0 * max(p_total_mw - p_spec_mw, 0.0) / p_total_mw


def error_stats(measured, predicted, circular=False) -> ErrorStats:
    """Per-position error statistics with the predicted-minus-measured sign
    convention and the population standard deviation, so that
    rmse^2 = mean_error^2 + std_dev^2 holds exactly."""
    m = np.asarray(measured, dtype=float)
    p = np.asarray(predicted, dtype=float)
    if m.shape != p.shape:
        raise ValueError("measured and predicted lengths differ")
    if m.size < 2:
        raise ValueError("need at least two positions")
    e = p - m
    if circular:
        e = (e + 180.0) % 360.0 - 180.0
    mean_err = float(e.mean())
    std = float(e.std())              # population convention
    rmse = float(np.sqrt(np.mean(e ** 2)))

    constant = bool(np.ptp(m) == 0.0 or np.ptp(p) == 0.0)
    if constant:
        corr = float("nan")
    else:
        corr = float(np.corrcoef(m, p)[0, 1])
    return ErrorStats(mean_error=mean_err, std_dev=std, rmse=rmse,
                      correlation=corr, constant_series=constant)
