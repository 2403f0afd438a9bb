"""Synthetic CSI, RSSI and network scenes with known ground truth."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .array_model import (
    SPEED_OF_LIGHT,
    ArrayConfig,
    NodePose,
    observed_local_angle,
    phase_shift_aoa,
)


@dataclass(frozen=True)
class PropagationPath:
    aoa: float
    tof: float
    attenuation: complex = 1.0 + 0.0j
    is_direct: bool = True

    def __post_init__(self):
        if self.tof < 0:
            raise ValueError("tof must be non-negative")
        if abs(self.attenuation) <= 0:
            raise ValueError("attenuation must be non-zero")


@dataclass
class CsiFrame:
    """One packet of CSI: ``matrix[m, n]`` is antenna ``m``, subcarrier ``n``."""

    matrix: np.ndarray
    seed: int | None = None

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=complex)
        if self.matrix.ndim != 2:
            raise ValueError("CSI matrix must be 2-D (antennas x subcarriers)")
        if not np.all(np.isfinite(self.matrix)):
            raise ValueError("CSI matrix has non-finite entries")

    @property
    def antenna_count(self) -> int:
        return self.matrix.shape[0]

    @property
    def subcarrier_count(self) -> int:
        return self.matrix.shape[1]


@dataclass(frozen=True)
class RssiModel:
    reference_power: float = -40.0
    path_loss_exponent: float = 2.0
    shadowing_sigma: float = 0.0

    def __post_init__(self):
        if not 1.0 <= self.path_loss_exponent <= 6.0:
            raise ValueError("path_loss_exponent must lie in [1, 6]")
        if self.shadowing_sigma < 0:
            raise ValueError("shadowing_sigma must be non-negative")

    def mean_rssi(self, distance):
        """Noise-free log-distance prediction (vectorized)."""
        return self.reference_power - 10.0 * self.path_loss_exponent * np.log10(distance)


def tof_phasor(tof, config: ArrayConfig):
    """Per-subcarrier phase step ``exp(-j 2 pi df tof)``."""
    return np.exp(-2j * np.pi * config.subcarrier_spacing * np.asarray(tof, dtype=float))


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def synthesize_csi(paths, config: ArrayConfig, snr_db: float | None = None, seed=None) -> CsiFrame:
    """Superpose far-field paths over every antenna and subcarrier.

    Entry ``(m, n)`` is ``sum_k gamma_k * Phi(theta_k)**m * Psi(tau_k)**n`` plus
    circular complex Gaussian noise. ``snr_db=None`` disables noise; otherwise
    the noise power is set relative to the mean per-entry signal power.
    """
    paths = list(paths)
    if not paths:
        raise ValueError("at least one propagation path is required")
    m = np.arange(config.antenna_count)[:, None]
    n = np.arange(config.subcarrier_count)[None, :]
    x = np.zeros((config.antenna_count, config.subcarrier_count), dtype=complex)
    for p in paths:
        x += p.attenuation * phase_shift_aoa(p.aoa, config) ** m * tof_phasor(p.tof, config) ** n
    if snr_db is not None:
        rng = _rng(seed)
        signal_power = np.mean(np.abs(x) ** 2)
        noise_power = signal_power / 10 ** (snr_db / 10)
        noise = rng.standard_normal(x.shape) + 1j * rng.standard_normal(x.shape)
        x = x + np.sqrt(noise_power / 2) * noise
    return CsiFrame(x, seed=seed if isinstance(seed, (int, np.integer)) else None)


def synthesize_rssi(distance, model: RssiModel, seed=None):
    """Log-distance RSSI in dB plus Gaussian shadowing."""
    distance = np.asarray(distance, dtype=float)
    if np.any(distance <= 0):
        raise ValueError("distance must be positive")
    r = model.mean_rssi(distance)
    if model.shadowing_sigma > 0:
        r = r + _rng(seed).normal(0.0, model.shadowing_sigma, size=np.shape(r))
    return float(r) if np.ndim(r) == 0 else r


# --------------------------------------------------------------------------
# AOA error model for the abstract simulation mode


@dataclass(frozen=True)
class AoaErrorModel:
    """Zero-mean angular error, truncated to ``+-error_range``.

    ``kind="gaussian"`` picks the standard deviation so that ``coverage`` of the
    untruncated errors fall inside the range (the range covers 90% of
    measurements by default). ``kind="laplace"`` does the same with a Laplace
    density. ``sigma`` overrides the fitted scale.
    """

    error_range: float = math.radians(8.0)
    coverage: float = 0.9
    kind: str = "gaussian"
    sigma: float | None = None

    @property
    def scale(self) -> float:
        if self.sigma is not None:
            return self.sigma
        if self.kind == "gaussian":
            return self.error_range / float(special.ndtri(0.5 + self.coverage / 2))
        if self.kind == "laplace":
            return self.error_range / -math.log(1 - self.coverage)
        raise ValueError(f"unknown error distribution {self.kind!r}")

    def _base_cdf(self, x):
        z = np.asarray(x, dtype=float) / self.scale
        if self.kind == "gaussian":
            return special.ndtr(z)
        return np.where(z < 0, 0.5 * np.exp(np.minimum(z, 0)), 1 - 0.5 * np.exp(-np.maximum(z, 0)))

    def _base_ppf(self, u):
        u = np.asarray(u, dtype=float)
        if self.kind == "gaussian":
            return self.scale * special.ndtri(u)
        return self.scale * np.where(u < 0.5, np.log(2 * np.minimum(u, 0.5)), -np.log(2 - 2 * np.maximum(u, 0.5)))

    def cdf(self, x):
        """CDF of the truncated distribution."""
        lo, hi = self._base_cdf(-self.error_range), self._base_cdf(self.error_range)
        return np.clip((self._base_cdf(x) - lo) / (hi - lo), 0.0, 1.0)

    def sample(self, rng, size=None):
        if self.error_range <= 0:
            return np.zeros(size) if size is not None else 0.0
        lo, hi = self._base_cdf(-self.error_range), self._base_cdf(self.error_range)
        return self._base_ppf(rng.uniform(lo, hi, size=size))


def perturbed_aoa_observation(true_angle, error_range: float, seed=None, model: AoaErrorModel | None = None):
    """True angle plus a truncated random error (abstract simulation)."""
    if error_range < 0:
        raise ValueError("error_range must be non-negative")
    if model is None:
        model = AoaErrorModel(error_range=error_range)
    elif model.error_range != error_range:
        model = AoaErrorModel(error_range=error_range, coverage=model.coverage, kind=model.kind, sigma=model.sigma)
    true_angle = np.asarray(true_angle, dtype=float)
    err = model.sample(_rng(seed), size=true_angle.shape if true_angle.ndim else None)
    return true_angle + err


# --------------------------------------------------------------------------
# Scenes


@dataclass(frozen=True)
class Rectangle:
    xmin: float
    ymin: float
    xmax: float
    ymax: float

    def __post_init__(self):
        if not (self.xmax > self.xmin and self.ymax > self.ymin):
            raise ValueError("degenerate rectangle")

    @classmethod
    def of_size(cls, width: float, height: float) -> "Rectangle":
        return cls(0.0, 0.0, width, height)

    def contains(self, point, margin: float = 0.0) -> bool:
        x, y = point
        return (self.xmin - margin <= x <= self.xmax + margin) and (self.ymin - margin <= y <= self.ymax + margin)

    def sample(self, rng, size=None) -> np.ndarray:
        shape = (2,) if size is None else (size, 2)
        u = rng.uniform(size=shape)
        return np.array([self.xmin, self.ymin]) + u * np.array([self.xmax - self.xmin, self.ymax - self.ymin])


@dataclass(frozen=True)
class MultipathProfile:
    """Reflection model for generated scenes.

    ``path_count`` is the number of reflected paths per link (0 = direct only).
    Each successive reflection is weaker by ``attenuation_decay`` and arrives
    5-100 ns after the direct path.
    """

    path_count: int = 0
    nlos_probability: float = 0.0
    attenuation_decay: float = 0.5
    excess_tof_range: tuple[float, float] = (5e-9, 100e-9)


@dataclass
class SceneNode:
    pose: NodePose
    array: ArrayConfig = field(default_factory=ArrayConfig)
    rssi_model: RssiModel = field(default_factory=RssiModel)


@dataclass
class NetworkScene:
    nodes: list[SceneNode]
    targets: list[tuple[float, float]]
    space_bounds: Rectangle
    rng_seed: int | None = None
    # paths[t][i]: propagation paths from target t to node i
    paths: list[list[list[PropagationPath]]] = field(default_factory=list)

    def __post_init__(self):
        if len(self.nodes) < 2:
            raise ValueError("a scene needs at least two nodes")
        for n in self.nodes:
            if not self.space_bounds.contains(n.pose.position, margin=1e-9):
                raise ValueError("node outside space bounds")
        for t in self.targets:
            if not self.space_bounds.contains(t, margin=1e-9):
                raise ValueError("target outside space bounds")

    @property
    def poses(self) -> list[NodePose]:
        return [n.pose for n in self.nodes]

    @property
    def models(self) -> list[RssiModel]:
        return [n.rssi_model for n in self.nodes]


def link_paths(target, node: SceneNode, profile: MultipathProfile, rng) -> list[PropagationPath]:
    """Direct path (unless blocked) plus weaker, later reflections."""
    dist = float(np.hypot(*(np.asarray(target) - node.pose.xy)))
    tof = dist / SPEED_OF_LIGHT
    paths = []
    blocked = rng.uniform() < profile.nlos_probability
    if not blocked:
        paths.append(PropagationPath(observed_local_angle(target, node.pose), tof, 1.0 + 0j, True))
    n_reflect = profile.path_count if not blocked else max(profile.path_count, 1)
    lo, hi = profile.excess_tof_range
    for k in range(n_reflect):
        amp = profile.attenuation_decay ** (k + 1)
        phase = rng.uniform(0, 2 * np.pi)
        aoa = rng.uniform(-np.pi / 2, np.pi / 2)
        paths.append(PropagationPath(aoa, tof + rng.uniform(lo, hi), amp * np.exp(1j * phase), False))
    return paths


def build_scene(
    space: Rectangle,
    node_count: int,
    multipath_profile: MultipathProfile | None = None,
    seed=None,
    target_count: int = 1,
    array: ArrayConfig | None = None,
    gamma_range: tuple[float, float] = (2.0, 4.0),
    reference_power: float = -40.0,
    shadowing_sigma: float = 0.0,
    min_separation: float = 1.0,
) -> NetworkScene:
    """Random nodes (uniform positions and headings) and targets inside ``space``.

    Targets are kept at least ``min_separation`` meters from every node.
    """
    if node_count < 2:
        raise ValueError("node_count must be >= 2")
    if not isinstance(space, Rectangle):
        space = Rectangle(*space)
    profile = multipath_profile or MultipathProfile()
    array = array or ArrayConfig()
    rng = _rng(seed)
    nodes = []
    for _ in range(node_count):
        pos = space.sample(rng)
        heading = rng.uniform(-np.pi, np.pi)
        gamma = rng.uniform(*gamma_range)
        nodes.append(SceneNode(NodePose(tuple(pos), heading), array, RssiModel(reference_power, gamma, shadowing_sigma)))
    node_xy = np.array([n.pose.position for n in nodes])
    targets = []
    while len(targets) < target_count:
        t = space.sample(rng)
        if np.min(np.hypot(*(node_xy - t).T)) >= min_separation:
            targets.append((float(t[0]), float(t[1])))
    paths = [[link_paths(t, node, profile, rng) for node in nodes] for t in targets]
    return NetworkScene(nodes, targets, space, seed if isinstance(seed, (int, np.integer)) else None, paths)
