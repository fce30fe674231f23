"""Antenna field patterns.

A pattern maps a direction (azimuth, elevation in degrees) to the complex
field amplitudes on the (V, H) polarization basis of that direction.  The
amplitudes are normalized so that |e|^2 is the antenna gain (isotropic = 1).
"""

from __future__ import annotations

import numpy as np

DIPOLE_PEAK_GAIN = 1.64  # half-wave dipole, 2.15 dBi


def isotropic(az_deg, el_deg):
    return np.array([1.0, 0.0])


def vertical_monopole(az_deg, el_deg):
    """Vertically polarized half-wave element: donut pattern, V-pol only."""
    el = np.deg2rad(el_deg)
    ce = np.cos(el)
    if abs(ce) < 1e-9:
        return np.array([0.0, 0.0])
    f = np.cos(0.5 * np.pi * np.sin(el)) / ce
    return np.array([np.sqrt(DIPOLE_PEAK_GAIN) * f, 0.0])


_PATTERNS = {
    "isotropic": isotropic,
    "monopole": vertical_monopole,
}


def pattern(name: str):
    try:
        return _PATTERNS[name]
    except KeyError:
        raise KeyError(f"unknown antenna pattern {name!r}; known: {sorted(_PATTERNS)}")
