"""Synthetic channel-sounder front end.

Builds the complex transfer function observed over a frequency grid and a
virtual cubic array from traced paths (far-field plane-wave model across the
small aperture), injects reproducible circular Gaussian noise, and derives
power-versus-distance and power-angular-delay products.

Tensor values are in sqrt(mW): |H|^2 is received power per frequency bin,
including transmit power and any receive amplifier gain.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import antenna, geom
from .tracer import PropPath, path_gain

C = geom.C_VACUUM


@dataclass(frozen=True)
class FrequencyGrid:
    f_start_ghz: float = 26.0
    f_stop_ghz: float = 30.0
    n_points: int = 801

    def __post_init__(self):
        if self.n_points < 2:
            raise ValueError("need at least two frequency points")

    @property
    def spacing_hz(self) -> float:
        return (self.f_stop_ghz - self.f_start_ghz) * 1e9 / (self.n_points - 1)

    @property
    def bandwidth_hz(self) -> float:
        return (self.f_stop_ghz - self.f_start_ghz) * 1e9

    @property
    def center_ghz(self) -> float:
        return 0.5 * (self.f_start_ghz + self.f_stop_ghz)

    def frequencies_hz(self) -> np.ndarray:
        return np.linspace(self.f_start_ghz * 1e9, self.f_stop_ghz * 1e9, self.n_points)


@dataclass(frozen=True)
class VirtualArray:
    dims: tuple = (5, 5, 5)
    spacing_m: float = 0.005
    origin: tuple = (0.0, 0.0, 0.0)

    @property
    def n_elements(self) -> int:
        return int(np.prod(self.dims))

    def positions(self) -> np.ndarray:
        """Element offsets from the phase center, x index slowest."""
        nx, ny, nz = self.dims
        ax = (np.arange(nx) - (nx - 1) / 2) * self.spacing_m
        ay = (np.arange(ny) - (ny - 1) / 2) * self.spacing_m
        az = (np.arange(nz) - (nz - 1) / 2) * self.spacing_m
        gx, gy, gz = np.meshgrid(ax, ay, az, indexing="ij")
        return np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1) + np.asarray(self.origin)


@dataclass
class SounderConfig:
    tx_power_dbm: float = 10.0
    lna_db: float = 0.0
    noise_floor_dbm: float | None = -105.0   # None disables noise injection
    noise_seed: int = 0
    tx_antenna: str = "monopole"
    rx_antenna: str = "monopole"


@dataclass
class ChannelTensor:
    data: np.ndarray            # (n_elements, n_points) complex
    grid: FrequencyGrid
    array: VirtualArray
    rx_id: str
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        expect = (self.array.n_elements, self.grid.n_points)
        if self.data.shape != expect:
            raise ValueError(f"tensor shape {self.data.shape} != {expect}")

    def mean_power_mw(self) -> float:
        return float(np.mean(np.abs(self.data) ** 2))


def steering_phase(element_pos, direction, f_ghz):
    """Unit phasor e^{+j 2 pi f (p . u) / c} for one element and direction."""
    u = np.asarray(direction, dtype=float)
    if abs(np.linalg.norm(u) - 1.0) > 1e-9:
        raise ValueError("direction must be a unit vector")
    phase = 2.0 * np.pi * f_ghz * 1e9 * float(np.dot(element_pos, u)) / C
    return complex(np.cos(phase), np.sin(phase))


def synthesize_ctf(paths, grid: FrequencyGrid, array: VirtualArray,
                   cfg: SounderConfig, rx_id="RX") -> ChannelTensor:
    """Transfer function of the traced paths over (element, frequency).

    Per-path amplitudes are evaluated at every grid frequency; the array is
    modeled as plane waves along each departure direction across the aperture.
    """
    f_hz = grid.frequencies_hz()
    pos = array.positions()
    h = np.zeros((array.n_elements, grid.n_points), dtype=complex)
    scale = 10.0 ** ((cfg.tx_power_dbm + cfg.lna_db) / 20.0)
    tx_pat = antenna.pattern(cfg.tx_antenna)
    rx_pat = antenna.pattern(cfg.rx_antenna)

    if paths:
        amps = np.zeros((len(paths), grid.n_points), dtype=complex)
        dirs = np.zeros((len(paths), 3))
        for li, p in enumerate(paths):
            coupling = rx_pat(*p.aoa) @ (p.jones @ tx_pat(*p.aod))
            lam = C / f_hz
            amps[li] = (scale * coupling * 10.0 ** (-p.env_db / 20.0)
                        * lam / (4.0 * np.pi * p.length)
                        * np.exp(-2j * np.pi * f_hz * p.delay))
            dirs[li] = geom.direction_from_angles(*p.aod)
        proj = pos @ dirs.T / C                        # (m, l) seconds
        chunk = 24
        for lo in range(0, len(paths), chunk):
            sl = slice(lo, lo + chunk)
            steer = np.exp(2j * np.pi * proj[:, sl, None] * f_hz[None, None, :])
            h += np.einsum("mlk,lk->mk", steer, amps[sl])

    meta = {"tx_power_dbm": cfg.tx_power_dbm, "lna_db": cfg.lna_db,
            "n_paths": len(paths)}
    return ChannelTensor(data=h, grid=grid, array=array, rx_id=rx_id, metadata=meta)


def ctf_from_components(components, grid: FrequencyGrid, array: VirtualArray) -> ChannelTensor:
    """Ideal constant-amplitude synthesis: components are (amplitude, delay_s,
    az_deg, el_deg) tuples.  Useful as a ground-truth generator."""
    f_hz = grid.frequencies_hz()
    pos = array.positions()
    h = np.zeros((array.n_elements, grid.n_points), dtype=complex)
    for amp, delay, az, el in components:
        u = geom.direction_from_angles(az, el)
        tau_m = delay - (pos @ u) / C
        h += amp * np.exp(-2j * np.pi * f_hz[None, :] * tau_m[:, None])
    return ChannelTensor(data=h, grid=grid, array=array, rx_id="synthetic",
                         metadata={"n_paths": len(components)})


def _stable_hash64(text: str) -> int:
    return int.from_bytes(hashlib.blake2s(text.encode(), digest_size=8).digest(), "little")


def add_noise(t: ChannelTensor, cfg: SounderConfig) -> ChannelTensor:
    """Adds i.i.d. circular complex Gaussian noise at the configured per-bin
    floor; keyed by (seed, rx id) so results are schedule independent."""
    if cfg.noise_floor_dbm is None or cfg.noise_floor_dbm == -np.inf:
        return t
    sigma2 = 10.0 ** (cfg.noise_floor_dbm / 10.0)
    bitgen = np.random.Philox(key=(int(cfg.noise_seed) << 64) | _stable_hash64(t.rx_id))
    rng = np.random.Generator(bitgen)
    shape = t.data.shape
    noise = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    noise *= np.sqrt(sigma2 / 2.0)
    meta = dict(t.metadata)
    meta.update({"noise_floor_dbm": cfg.noise_floor_dbm, "noise_seed": cfg.noise_seed})
    return ChannelTensor(data=t.data + noise, grid=t.grid, array=t.array,
                         rx_id=t.rx_id, metadata=meta)


def pdp(t: ChannelTensor, window="hann", zero_pad=4):
    """Power versus propagation distance: windowed inverse FFT over frequency
    per element, power averaged over elements.

    Returns (distance_m, power_mw) arrays over one unambiguous delay span
    (delay resolution 1/bandwidth before windowing).
    """
    n = t.grid.n_points
    if window == "hann":
        w = np.hanning(n)
    elif window in (None, "rect"):
        w = np.ones(n)
    else:
        raise ValueError(f"unknown window {window!r}")
    w = w / w.mean()            # keep single-path peak amplitude
    nfft = int(zero_pad * n)
    h = np.fft.ifft(t.data * w[None, :], n=nfft, axis=1) * (nfft / n)
    power = np.mean(np.abs(h) ** 2, axis=0)
    delays = np.arange(nfft) / (nfft * t.grid.spacing_hz)
    return delays * C, power


def padp(entries, az_edges_deg, delay_edges_ns):
    """Accumulate (az_deg, delay_ns, power_dbm) triples onto an
    azimuth x delay grid; powers add in mW."""
    az_edges = np.asarray(az_edges_deg, dtype=float)
    d_edges = np.asarray(delay_edges_ns, dtype=float)
    grid = np.zeros((len(az_edges) - 1, len(d_edges) - 1))
    for az, delay_ns, p_dbm in entries:
        i = np.searchsorted(az_edges, az % 360.0, side="right") - 1
        j = np.searchsorted(d_edges, delay_ns, side="right") - 1
        if 0 <= i < grid.shape[0] and 0 <= j < grid.shape[1]:
            grid[i, j] += 10.0 ** (p_dbm / 10.0)
    return grid


# -- tensor files ---------------------------------------------------------------

def write_tensor(path, t: ChannelTensor):
    """Binary payload (element-major complex128 little endian) plus a JSON
    sidecar with the grid, array and provenance metadata."""
    path = Path(path)
    t.data.astype("<c16").tofile(path)
    sidecar = {
        "grid": {"f_start_ghz": t.grid.f_start_ghz, "f_stop_ghz": t.grid.f_stop_ghz,
                 "n_points": t.grid.n_points},
        "array": {"dims": list(t.array.dims), "spacing_m": t.array.spacing_m,
                  "origin": list(t.array.origin)},
        "rx_id": t.rx_id,
        "metadata": t.metadata,
    }
    with open(path.with_suffix(path.suffix + ".json"), "w") as fh:
        json.dump(sidecar, fh, indent=1, sort_keys=True)
        fh.write("\n")


def read_tensor(path) -> ChannelTensor:
    path = Path(path)
    with open(path.with_suffix(path.suffix + ".json")) as fh:
        side = json.load(fh)
    grid = FrequencyGrid(**side["grid"])
    arr = VirtualArray(dims=tuple(side["array"]["dims"]),
                       spacing_m=side["array"]["spacing_m"],
                       origin=tuple(side["array"]["origin"]))
    data = np.fromfile(path, dtype="<c16").reshape(arr.n_elements, grid.n_points)
    return ChannelTensor(data=data, grid=grid, array=arr, rx_id=side["rx_id"],
                         metadata=side.get("metadata", {}))
