"""Geometry and steering vectors for small uniform linear arrays.

Conventions used throughout the package:

* Element 0 sits at ``NodePose.position``; element ``m`` is displaced by
  ``m * spacing`` along the array axis, whose global direction is
  ``NodePose.heading``.
* Local angles are measured from the array normal, counter-clockwise positive,
  and live in ``[-pi/2, pi/2]``. A local angle ``theta`` in front of the array
  points along the global bearing ``heading + pi/2 + theta``.
* A linear array cannot tell the front half-plane from its mirror image across
  the array axis; :func:`mirror_bearing` gives the second direction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

SPEED_OF_LIGHT = 299_792_458.0

DEFAULT_SPACING = 0.26  # laptop antenna separation, meters
DEFAULT_CARRIER = 2.4e9
DEFAULT_SUBCARRIER_SPACING = 312.5e3  # 20 MHz WiFi
DEFAULT_SUBCARRIERS = 56


class DegenerateGeometryError(ValueError):
    """Raised when a geometric construction has no unique answer."""


@dataclass(frozen=True)
class ArrayConfig:
    antenna_count: int = 2
    spacing: float = DEFAULT_SPACING
    carrier_frequency: float = DEFAULT_CARRIER
    subcarrier_spacing: float = DEFAULT_SUBCARRIER_SPACING
    subcarrier_count: int = DEFAULT_SUBCARRIERS

    def __post_init__(self):
        if self.antenna_count < 2:
            raise ValueError("antenna_count must be >= 2")
        if self.spacing <= 0:
            raise ValueError("spacing must be positive")
        if self.carrier_frequency <= 0:
            raise ValueError("carrier_frequency must be positive")
        if self.subcarrier_spacing <= 0:
            raise ValueError("subcarrier_spacing must be positive")
        if self.subcarrier_count < 1:
            raise ValueError("subcarrier_count must be >= 1")

    @property
    def wavelength(self) -> float:
        return SPEED_OF_LIGHT / self.carrier_frequency

    @classmethod
    def from_wavelength(cls, wavelength: float, spacing: float | None = None, **kwargs) -> "ArrayConfig":
        """Build a config from a wavelength instead of a carrier frequency.

        ``spacing`` defaults to half the wavelength.
        """
        if wavelength <= 0:
            raise ValueError("wavelength must be positive")
        if spacing is None:
            spacing = wavelength / 2
        return cls(spacing=spacing, carrier_frequency=SPEED_OF_LIGHT / wavelength, **kwargs)


def wrap_angle(angle):
    """Wrap angles to ``[-pi, pi)``."""
    return (np.asarray(angle) + np.pi) % (2 * np.pi) - np.pi


@dataclass(frozen=True)
class NodePose:
    position: tuple[float, float]
    heading: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "position", (float(self.position[0]), float(self.position[1])))
        object.__setattr__(self, "heading", float(wrap_angle(self.heading)))

    @property
    def xy(self) -> np.ndarray:
        return np.array(self.position)

    @property
    def axis(self) -> np.ndarray:
        return np.array([math.cos(self.heading), math.sin(self.heading)])

    def element_positions(self, config: ArrayConfig) -> np.ndarray:
        """(M, 2) array of antenna element coordinates."""
        m = np.arange(config.antenna_count)[:, None]
        return self.xy[None, :] + m * config.spacing * self.axis[None, :]


@dataclass(frozen=True)
class AoaPeak:
    angle: float
    power: float
    tof_bin: float = 0.0


def phase_shift_distance(delta_l, wavelength: float):
    """Unit phasor ``exp(-j 2 pi delta_l / wavelength)`` for an extra path length."""
    if wavelength <= 0:
        raise ValueError("wavelength must be positive")
    return np.exp(-2j * np.pi * np.asarray(delta_l, dtype=float) / wavelength)


def phase_shift_aoa(theta, config: ArrayConfig):
    """Inter-element phasor for a far-field arrival at local angle ``theta``."""
    theta = np.asarray(theta, dtype=float)
    if np.any(np.abs(theta) > np.pi / 2 + 1e-12):
        raise ValueError("theta must lie in [-pi/2, pi/2]")
    return phase_shift_distance(config.spacing * np.sin(theta), config.wavelength)


def steering_vector_farfield(theta: float, config: ArrayConfig) -> np.ndarray:
    phi = phase_shift_aoa(theta, config)
    return phi ** np.arange(config.antenna_count)


def steering_vector_nearfield(source_position, pose: NodePose, config: ArrayConfig) -> np.ndarray:
    """Exact spherical-wave steering vector for a source at a known position."""
    elements = pose.element_positions(config)
    dist = np.linalg.norm(elements - np.asarray(source_position, dtype=float)[None, :], axis=1)
    if np.any(dist < 1e-12):
        raise DegenerateGeometryError("source coincides with an antenna element")
    return phase_shift_distance(dist - dist[0], config.wavelength)


def grating_lobe_family(theta: float, config: ArrayConfig) -> list[float]:
    """All local angles producing the same inter-element phase as ``theta``.

    These are the solutions of ``sin(t) = sin(theta) + k * wavelength / spacing``
    for integer ``k`` inside ``[-pi/2, pi/2]``, sorted ascending. ``theta``
    itself is always included.
    """
    if abs(theta) > np.pi / 2 + 1e-12:
        raise ValueError("theta must lie in [-pi/2, pi/2]")
    theta = float(np.clip(theta, -np.pi / 2, np.pi / 2))
    step = config.wavelength / config.spacing
    s0 = math.sin(theta)
    k_lo = math.ceil((-1.0 - s0) / step - 1e-12)
    k_hi = math.floor((1.0 - s0) / step + 1e-12)
    family = []
    for k in range(k_lo, k_hi + 1):
        if k == 0:
            family.append(theta)
            continue
        s = float(np.clip(s0 + k * step, -1.0, 1.0))
        family.append(math.asin(s))
    return sorted(family)


def local_to_global(theta, pose: NodePose):
    """Global bearing of a front-half-plane arrival at local angle ``theta``."""
    return wrap_angle(pose.heading + np.pi / 2 + np.asarray(theta))


def mirror_bearing(theta, pose: NodePose):
    """Global bearing of the back-half-plane twin of local angle ``theta``."""
    return wrap_angle(pose.heading - np.pi / 2 - np.asarray(theta))


def observed_local_angle(point, pose: NodePose) -> float:
    """Local angle a linear array reports for a source at ``point``.

    Sources behind the array fold onto their mirror image in the front
    half-plane.
    """
    delta = np.asarray(point, dtype=float) - pose.xy
    if np.hypot(*delta) < 1e-12:
        raise DegenerateGeometryError("point coincides with the array")
    alpha = float(wrap_angle(math.atan2(delta[1], delta[0]) - pose.heading - np.pi / 2))
    if alpha > np.pi / 2:
        alpha = np.pi - alpha
    elif alpha < -np.pi / 2:
        alpha = -np.pi - alpha
    return alpha


def candidate_bearings(family, pose: NodePose) -> list[float]:
    """Every global bearing consistent with a grating family.

    Front and mirror bearings are returned for each lobe; endfire lobes
    collapse to a single bearing.
    """
    out = []
    for theta in family:
        front = float(local_to_global(theta, pose))
        back = float(mirror_bearing(theta, pose))
        out.append(front)
        if abs(float(wrap_angle(front - back))) > 1e-9:
            out.append(back)
    return out


def beam_pattern(theta_grid, steer_theta: float, config: ArrayConfig) -> np.ndarray:
    """Normalized conventional beam power ``|s(t)^H s(steer)|^2 / M^2``."""
    theta_grid = np.asarray(theta_grid, dtype=float)
    m = np.arange(config.antenna_count)
    phi = phase_shift_aoa(theta_grid, config)
    phi0 = phase_shift_aoa(steer_theta, config)
    resp = (np.conj(phi)[:, None] ** m[None, :] * (phi0 ** m)[None, :]).sum(axis=1)
    return np.abs(resp) ** 2 / config.antenna_count ** 2


def lobe_width(grid, power, center: float, level_db: float = -3.0) -> float:
    """Width of the lobe around ``center`` measured at ``level_db`` below its peak.

    Edges are located by linear interpolation between grid samples.
    """
    grid = np.asarray(grid, dtype=float)
    power = np.asarray(power, dtype=float)
    i0 = int(np.argmin(np.abs(grid - center)))
    # climb to the local peak first
    while 0 < i0 < len(grid) - 1 and max(power[i0 - 1], power[i0 + 1]) > power[i0]:
        i0 = i0 - 1 if power[i0 - 1] > power[i0 + 1] else i0 + 1
    level = power[i0] * 10 ** (level_db / 10)

    def edge(direction):
        i = i0
        while 0 <= i + direction < len(grid) and power[i + direction] > level:
            i += direction
        j = i + direction
        if not 0 <= j < len(grid):
            return grid[i]
        frac = (power[i] - level) / (power[i] - power[j])
        return grid[i] + frac * (grid[j] - grid[i])

    return float(edge(1) - edge(-1))
