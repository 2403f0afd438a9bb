"""Joint angle/ToF MUSIC on a subcarrier-smoothed CSI matrix.

A two-antenna frame has too few rows for subspace methods, so the CSI is
rearranged: each column stacks a window of ``W`` consecutive subcarriers from
every antenna (antenna-major order), and successive columns slide the window
by one subcarrier. With 56 subcarriers and ``W = 19`` this gives a square
38 x 38 matrix whose steering vectors are ``kron([1, Phi], [1, Psi, ..., Psi**18])``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .array_model import (
    ArrayConfig,
    AoaPeak,
    NodePose,
    grating_lobe_family,
    phase_shift_aoa,
    phase_shift_distance,
)
from .channel_sim import CsiFrame, tof_phasor

DEFAULT_ANGLE_GRID = np.deg2rad(np.arange(-90.0, 90.0 + 1e-9, 0.5))
DEFAULT_TOF_GRID = np.arange(0.0, 200e-9 + 1e-15, 2.5e-9)
PEAK_FLOOR = 0.05
SIGNAL_DIM_THRESHOLD = 10.0


class EstimationFailed(RuntimeError):
    pass


def default_window(subcarrier_count: int, antenna_count: int = 2) -> int:
    """Window length that makes the smoothed matrix square (19 for 2 x 56)."""
    return max(1, int(round((subcarrier_count + 1) / (antenna_count + 1))))


@dataclass
class SmoothedMatrix:
    matrix: np.ndarray
    antenna_count: int
    window: int

    @property
    def shape(self):
        return self.matrix.shape


@dataclass
class GratingFamily:
    """One physical path hypothesis: every local angle it could have come from."""

    angles: list[float]
    power: float
    tof: float
    peaks: list[AoaPeak] = field(default_factory=list)

    @property
    def strongest_angle(self) -> float:
        if self.peaks:
            return self.peaks[0].angle
        return self.angles[len(self.angles) // 2]


@dataclass
class AoaProfile:
    angle_grid: np.ndarray
    tof_grid: np.ndarray
    spectrum: np.ndarray
    peaks: list[AoaPeak]
    error_range: float = np.deg2rad(8.0)
    signal_dim: int = 1


def _frames(frame_or_frames) -> list[np.ndarray]:
    if isinstance(frame_or_frames, CsiFrame):
        return [frame_or_frames.matrix]
    if isinstance(frame_or_frames, np.ndarray):
        return [frame_or_frames]
    return [f.matrix if isinstance(f, CsiFrame) else np.asarray(f) for f in frame_or_frames]


def build_smoothed_matrix(frame, window: int | None = None) -> SmoothedMatrix:
    """Rearrange a ``(M, N)`` CSI frame into a ``(M*W, N-W+1)`` Hankel-style matrix.

    Column ``c`` is ``[csi[0, c:c+W], csi[1, c:c+W], ...]``.
    """
    x = _frames(frame)[0] if not isinstance(frame, np.ndarray) else frame
    m_count, n_count = x.shape
    if m_count < 2:
        raise ValueError("need at least two antennas")
    if window is None:
        window = default_window(n_count, m_count)
    if n_count < 20 or window >= n_count:
        raise ValueError(f"need at least 20 subcarriers and window < subcarriers (got {n_count})")
    cols = n_count - window + 1
    idx = np.arange(window)[:, None] + np.arange(cols)[None, :]
    blocks = [x[m][idx] for m in range(m_count)]
    return SmoothedMatrix(np.vstack(blocks), m_count, window)


def extended_steering(theta, tof, config: ArrayConfig, window: int | None = None) -> np.ndarray:
    """Steering vector of the smoothed matrix, ordered like its rows."""
    if window is None:
        window = default_window(config.subcarrier_count, config.antenna_count)
    ant = phase_shift_aoa(theta, config) ** np.arange(config.antenna_count)
    sub = tof_phasor(tof, config) ** np.arange(window)
    return np.kron(ant, sub)


def covariance(frames, window: int | None = None) -> tuple[np.ndarray, int, int]:
    """Smoothed autocorrelation averaged over one or more frames."""
    mats = _frames(frames)
    acc = None
    for x in mats:
        sm = build_smoothed_matrix(x, window)
        r = sm.matrix @ sm.matrix.conj().T
        acc = r if acc is None else acc + r
    return acc / len(mats), sm.antenna_count, sm.window


def choose_signal_dim(eigvals: np.ndarray, threshold: float = SIGNAL_DIM_THRESHOLD) -> int:
    """Count eigenvalues standing above the noise floor by ``threshold``.

    The floor is the median eigenvalue, bounded below by numerical precision.
    """
    ev = np.sort(np.abs(eigvals))[::-1]
    floor = max(np.median(ev), ev[0] * 1e-12)
    dim = int(np.sum(ev > threshold * floor))
    return int(np.clip(dim, 1, len(ev) - 1))


def noise_subspace(r: np.ndarray, signal_dim="auto") -> tuple[np.ndarray, int]:
    w, v = np.linalg.eigh(r)
    if not np.all(np.isfinite(w)) or w[-1] <= 0:
        raise EstimationFailed("covariance has no signal energy")
    if signal_dim == "auto":
        signal_dim = choose_signal_dim(w)
    signal_dim = int(signal_dim)
    if not 1 <= signal_dim < r.shape[0]:
        raise ValueError("signal_dim must be in [1, rows)")
    # eigh sorts ascending; the smallest rows-signal_dim span the noise space
    return v[:, : r.shape[0] - signal_dim], signal_dim


def _noise_projection(e_noise, ant_phasors, sub_phasors_tof, antenna_count, window):
    """``sum_k |e_k^H s(theta, tof)|^2`` for all grid pairs via the Kronecker structure.

    ``ant_phasors``: (n_theta, M) antenna terms; ``sub_phasors_tof``: (W, n_tof).
    """
    k = e_noise.shape[1]
    e = e_noise.conj().T.reshape(k, antenna_count, window)
    g = e @ sub_phasors_tof  # (k, M, n_tof)
    proj = np.einsum("ta,kaf->ktf", ant_phasors, g)
    return np.sum(np.abs(proj) ** 2, axis=0)


def find_peaks_2d(spectrum: np.ndarray, floor: float = PEAK_FLOOR) -> list[tuple[int, ...]]:
    """Local maxima (8-neighborhood) at or above ``floor`` times the global max."""
    footprint = np.ones((3,) * spectrum.ndim, dtype=bool)
    local_max = ndimage.maximum_filter(spectrum, footprint=footprint, mode="nearest")
    mask = (spectrum >= local_max) & (spectrum >= floor * spectrum.max())
    idx = list(zip(*np.nonzero(mask)))
    idx.sort(key=lambda i: -spectrum[i])
    # plateaus: keep one index per connected flat region
    kept, seen = [], set()
    labels, _ = ndimage.label(mask, structure=footprint)
    for i in idx:
        lab = int(labels[i])
        if lab in seen:
            continue
        seen.add(lab)
        kept.append(tuple(int(j) for j in i))
    return kept


def _refine(grid, values, i):
    """Parabolic sub-grid refinement of a 1-D peak location (on dB values)."""
    if i <= 0 or i >= len(grid) - 1:
        return float(grid[i])
    y0, y1, y2 = 10 * np.log10(np.maximum(values[i - 1 : i + 2], 1e-300))
    denom = y0 - 2 * y1 + y2
    if denom >= 0:
        return float(grid[i])
    offset = 0.5 * (y0 - y2) / denom
    return float(grid[i] + np.clip(offset, -0.5, 0.5) * (grid[i + 1] - grid[i]))


def music_spectrum(
    smoothed,
    angle_grid=None,
    tof_grid=None,
    config: ArrayConfig | None = None,
    signal_dim="auto",
    error_range: float = np.deg2rad(8.0),
    peak_floor: float = PEAK_FLOOR,
) -> AoaProfile:
    """MUSIC pseudo-spectrum over an (angle, ToF) grid plus its peaks.

    ``smoothed`` may be a :class:`SmoothedMatrix`, a CSI frame, or a list of
    frames (their smoothed autocorrelations are averaged).
    """
    config = config or ArrayConfig()
    angle_grid = DEFAULT_ANGLE_GRID if angle_grid is None else np.asarray(angle_grid, dtype=float)
    tof_grid = DEFAULT_TOF_GRID if tof_grid is None else np.asarray(tof_grid, dtype=float)
    if isinstance(smoothed, SmoothedMatrix):
        r = smoothed.matrix @ smoothed.matrix.conj().T
        m_count, window = smoothed.antenna_count, smoothed.window
    else:
        r, m_count, window = covariance(smoothed)
    if not np.any(r):
        raise EstimationFailed("all-zero CSI")
    e_noise, dim = noise_subspace(r, signal_dim)

    ant = phase_shift_aoa(angle_grid, config)[:, None] ** np.arange(m_count)[None, :]
    sub = tof_phasor(tof_grid, config)[None, :] ** np.arange(window)[:, None]
    denom = _noise_projection(e_noise, ant, sub, m_count, window)
    spectrum = 1.0 / np.maximum(denom, 1e-300)

    peaks = []
    for ia, it in find_peaks_2d(spectrum, peak_floor):
        angle = _refine(angle_grid, spectrum[:, it], ia)
        peaks.append(AoaPeak(angle=angle, power=float(spectrum[ia, it]), tof_bin=float(tof_grid[it])))
    return AoaProfile(angle_grid, tof_grid, spectrum, peaks, error_range, dim)


def estimate_profile(frames, config: ArrayConfig | None = None, **kwargs) -> AoaProfile:
    """Convenience wrapper: CSI frame(s) straight to an :class:`AoaProfile`."""
    return music_spectrum(frames, config=config, **kwargs)


def profile_peaks_with_ambiguity(
    profile: AoaProfile,
    config: ArrayConfig,
    angle_tol: float = np.deg2rad(2.0),
    tof_tol: float = 5e-9,
) -> list[GratingFamily]:
    """Group spectrum peaks into grating families, strongest first.

    Each family carries the complete analytic set of lobes of its strongest
    peak, whether or not every lobe produced a separate peak on the grid.
    """
    if not profile.peaks:
        raise ValueError("profile has no peaks")
    remaining = list(profile.peaks)
    families = []
    while remaining:
        lead = remaining.pop(0)
        angles = grating_lobe_family(float(np.clip(lead.angle, -np.pi / 2, np.pi / 2)), config)
        members, rest = [lead], []
        for p in remaining:
            near = min(abs(p.angle - a) for a in angles) <= angle_tol
            if near and abs(p.tof_bin - lead.tof_bin) <= tof_tol:
                members.append(p)
            else:
                rest.append(p)
        remaining = rest
        families.append(GratingFamily(angles, lead.power, lead.tof_bin, members))
    return families


def nearfield_spectrum(
    smoothed,
    position_grid,
    pose: NodePose,
    config: ArrayConfig,
    tof_grid=None,
    signal_dim="auto",
) -> np.ndarray:
    """MUSIC spectrum over candidate source positions (spherical wavefront).

    The antenna terms use exact element-to-position path differences; the ToF
    dimension is maximized out.
    """
    tof_grid = DEFAULT_TOF_GRID if tof_grid is None else np.asarray(tof_grid, dtype=float)
    positions = np.atleast_2d(np.asarray(position_grid, dtype=float))
    if isinstance(smoothed, SmoothedMatrix):
        r = smoothed.matrix @ smoothed.matrix.conj().T
        m_count, window = smoothed.antenna_count, smoothed.window
    else:
        r, m_count, window = covariance(smoothed)
    e_noise, _ = noise_subspace(r, signal_dim)
    elements = pose.element_positions(config)
    dist = np.linalg.norm(positions[:, None, :] - elements[None, :, :], axis=2)  # (P, M)
    ant = phase_shift_distance(dist - dist[:, :1], config.wavelength)
    sub = tof_phasor(tof_grid, config)[None, :] ** np.arange(window)[:, None]
    denom = _noise_projection(e_noise, ant, sub, m_count, window)
    return (1.0 / np.maximum(denom, 1e-300)).max(axis=1)


def beamformer_spectrum(frame, angle_grid, config: ArrayConfig) -> np.ndarray:
    """Conventional (delay-and-sum) angular power of a CSI frame, peak-normalized."""
    x = _frames(frame)[0]
    ant = phase_shift_aoa(np.asarray(angle_grid, dtype=float), config)[:, None] ** np.arange(x.shape[0])[None, :]
    power = np.sum(np.abs(ant.conj() @ x) ** 2, axis=1)
    return power / power.max()


def music_angle_spectrum(profile: AoaProfile) -> np.ndarray:
    """Angle-only spectrum: maximum over the ToF axis."""
    return profile.spectrum.max(axis=1)
