"""Grating-lobe disambiguation across nodes and fine target localization.

Every node contributes a set of candidate beams (rays leaving the node along
each lobe of its grating family, plus the mirror ray a linear array cannot
rule out). A *cluster* picks one beam per node. Clusters are grown from the
ray intersections of the first two nodes, pruned by angular consistency,
ranked by how well the RSSI predicted at their centroid matches the measured
RSSI, and finally refined by a grid search.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .array_model import NodePose, candidate_bearings, wrap_angle
from .channel_sim import Rectangle, RssiModel

LIKELIHOOD_MAX = 1e6
LIKELIHOOD_EPS = 1e-9
PARALLEL_SIN = 1e-3
ANGLE_EPS = 1e-9  # numerical slack on angular residuals, radians


class NoCandidates(RuntimeError):
    """Every beam pair was (near-)parallel, so no intersection exists."""


class AmbiguityUnresolved(RuntimeError):
    """No cluster satisfied the angular error range."""


DEFAULT_OMEGA0 = 0.01  # calibrated on the 30 x 50 m abstract simulation


def default_omega(node_count: int, omega0: float = DEFAULT_OMEGA0) -> float:
    """AOA weight of the fine search, decreasing with the node count."""
    return omega0 / node_count


@dataclass
class FusionConfig:
    error_range: float = math.radians(8.0)
    likelihood_threshold: float | None = None  # None -> 1.0 * I / 3
    packets_to_integrate: int = 10
    omega0: float = DEFAULT_OMEGA0
    search_grid_step: float = 0.05
    cluster_expansion: float = 1.5
    bounds: Rectangle | None = None
    centroid_cutoff: float | None = None  # see grow_clusters

    def __post_init__(self):
        if self.packets_to_integrate < 1:
            raise ValueError("packets_to_integrate must be >= 1")

    def omega(self, node_count: int) -> float:
        return default_omega(node_count, self.omega0)

    def threshold(self, node_count: int) -> float:
        if self.likelihood_threshold is not None:
            return self.likelihood_threshold
        return 1.0 * node_count / 3.0


@dataclass(frozen=True)
class BeamLine:
    node_index: int
    global_angle: float
    origin: tuple[float, float]

    @property
    def direction(self) -> np.ndarray:
        return np.array([math.cos(self.global_angle), math.sin(self.global_angle)])


def node_beams(node_index: int, family, pose: NodePose) -> list[BeamLine]:
    """Beams for one node from a grating family (an object with ``.angles`` or a list)."""
    angles = getattr(family, "angles", family)
    return [BeamLine(node_index, float(b), pose.position) for b in candidate_bearings(angles, pose)]


@dataclass
class CandidateCluster:
    beam_choice: tuple[int, ...]
    beams: tuple[BeamLine, ...]
    intersections: np.ndarray
    centroid: np.ndarray
    residuals: np.ndarray
    rssi_likelihood: float = 0.0
    flags: tuple[str, ...] = ()
    consistency_point: np.ndarray | None = None

    @property
    def max_angular_residual(self) -> float:
        return float(np.max(self.residuals))

    @property
    def node_indices(self) -> tuple[int, ...]:
        return tuple(b.node_index for b in self.beams)


# --------------------------------------------------------------------------
# geometry helpers


def _angles_and_origins(beams):
    ang = np.array([b.global_angle for b in beams], dtype=float)
    org = np.array([b.origin for b in beams], dtype=float).reshape(-1, 2)
    return ang, org


def line_intersections(ang_a, org_a, ang_b, org_b, rays: bool = False):
    """Intersections of every beam in set A with every beam in set B.

    Returns ``(points (na, nb, 2), valid (na, nb))``. Near-parallel pairs are
    invalid; with ``rays=True`` intersections behind either origin are too.
    """
    ua = np.stack([np.cos(ang_a), np.sin(ang_a)], axis=-1)[:, None, :]
    ub = np.stack([np.cos(ang_b), np.sin(ang_b)], axis=-1)[None, :, :]
    cross = ua[..., 0] * ub[..., 1] - ua[..., 1] * ub[..., 0]
    valid = np.abs(cross) >= PARALLEL_SIN
    safe = np.where(valid, cross, 1.0)
    delta = org_b[None, :, :] - org_a[:, None, :]
    t = (delta[..., 0] * ub[..., 1] - delta[..., 1] * ub[..., 0]) / safe
    s = (delta[..., 0] * ua[..., 1] - delta[..., 1] * ua[..., 0]) / safe
    points = org_a[:, None, :] + t[..., None] * ua
    if rays:
        valid &= (t > 0) & (s > 0)
    return points, valid


def angular_deviation(point, beams) -> np.ndarray:
    """|bearing from each beam origin to ``point`` minus the beam angle|."""
    ang, org = _angles_and_origins(beams)
    d = np.asarray(point, dtype=float)[None, :] - org
    return np.abs(wrap_angle(np.arctan2(d[:, 1], d[:, 0]) - ang))


def pairwise_intersections(families_a, pose_a, families_b, pose_b, bounds: Rectangle | None = None,
                           index_a: int = 0, index_b: int = 1):
    """Ray intersections between the beams of two nodes.

    ``families_*`` is a grating family (or a list of them). Returns a list of
    ``(point, (beam_a, beam_b))``. Raises :class:`NoCandidates` when every
    beam pair is near-parallel.
    """
    beams_a = _collect_beams(index_a, families_a, pose_a)
    beams_b = _collect_beams(index_b, families_b, pose_b)
    ang_a, org_a = _angles_and_origins(beams_a)
    ang_b, org_b = _angles_and_origins(beams_b)
    pts, valid = line_intersections(ang_a, org_a, ang_b, org_b, rays=False)
    if not valid.any():
        raise NoCandidates("all beam pairs are parallel")
    _, ray_valid = line_intersections(ang_a, org_a, ang_b, org_b, rays=True)
    out = []
    for i, j in zip(*np.nonzero(ray_valid)):
        p = pts[i, j]
        if bounds is None or bounds.contains(p):
            out.append((p, (beams_a[i], beams_b[j])))
    return out


def _collect_beams(index, families, pose):
    if hasattr(families, "angles") or (len(families) and np.isscalar(families[0])):
        families = [families]
    beams = []
    for fam in families:
        beams.extend(node_beams(index, fam, pose))
    return beams


# --------------------------------------------------------------------------
# cluster search


@dataclass
class ClusterSet:
    """All surviving clusters of one packet, stored column-wise."""

    beams: list[list[BeamLine]]  # per node (in search order)
    choices: np.ndarray  # (P, I) beam index per node
    centroids: np.ndarray  # (P, 2)
    residuals: np.ndarray  # (P, I), measured at the consistency points
    flags: tuple[str, ...] = ()
    points: np.ndarray | None = None  # (P, 2) consistency points
    min_sin: float = PARALLEL_SIN

    def __post_init__(self):
        if self.points is None:
            self.points = self.centroids

    def __len__(self):
        return len(self.choices)

    @property
    def node_count(self) -> int:
        return len(self.beams)

    @property
    def max_residuals(self) -> np.ndarray:
        return self.residuals.max(axis=1) if len(self) else np.zeros(0)

    def chosen_angles(self) -> np.ndarray:
        cols = [np.array([b.global_angle for b in bs])[self.choices[:, k]] for k, bs in enumerate(self.beams)]
        return np.stack(cols, axis=1)

    def cluster(self, k: int, likelihood: float = 0.0) -> CandidateCluster:
        beams = tuple(self.beams[i][self.choices[k, i]] for i in range(self.node_count))
        return CandidateCluster(
            beam_choice=tuple(int(c) for c in self.choices[k]),
            beams=beams,
            intersections=cluster_intersections(beams, self.min_sin),
            centroid=self.centroids[k].copy(),
            residuals=self.residuals[k].copy(),
            rssi_likelihood=likelihood,
            flags=self.flags,
            consistency_point=self.points[k].copy(),
        )

    def clusters(self) -> list[CandidateCluster]:
        return [self.cluster(k) for k in range(len(self))]


def conditioned_cutoff(error_range: float) -> float:
    """Crossing-angle sine below which an intersection is too poorly located to average.

    Beams crossing at less than twice the angular error range qualify.
    """
    return max(PARALLEL_SIN, math.sin(min(2 * error_range, math.pi / 2)))


def cluster_intersections(beams, min_sin: float = PARALLEL_SIN) -> np.ndarray:
    """Line intersections of every sufficiently non-parallel pair of chosen beams."""
    ang, org = _angles_and_origins(beams)
    pts = []
    for i in range(len(beams)):
        for j in range(i + 1, len(beams)):
            if abs(math.sin(ang[j] - ang[i])) < min_sin:
                continue
            p, v = line_intersections(ang[i : i + 1], org[i : i + 1], ang[j : j + 1], org[j : j + 1])
            if v[0, 0]:
                pts.append(p[0, 0])
    return np.array(pts).reshape(-1, 2)


def consistency_points(angles, origins, iterations: int = 3) -> np.ndarray:
    """Points minimizing the squared angular deviation to every chosen beam.

    ``angles`` and ``origins`` are ``(P, I)`` and ``(P, I, 2)``. Solved as
    perpendicular-distance least squares reweighted by ``1 / range**2``
    (a small-angle approximation), starting from equal weights.
    """
    angles = np.asarray(angles, dtype=float)
    origins = np.asarray(origins, dtype=float)
    n = np.stack([-np.sin(angles), np.cos(angles)], axis=-1)
    c = np.sum(n * origins, axis=-1)
    w = np.ones(angles.shape)
    x = origins.mean(axis=1)
    for _ in range(iterations + 1):
        a = np.einsum("pi,pia,pib->pab", w, n, n)
        b = np.einsum("pi,pia,pi->pa", w, n, c)
        det = a[:, 0, 0] * a[:, 1, 1] - a[:, 0, 1] * a[:, 1, 0]
        ok = np.abs(det) > 1e-12 * np.maximum(a[:, 0, 0] * a[:, 1, 1], 1e-300)
        safe = np.where(ok, det, 1.0)
        xn = np.stack([a[:, 1, 1] * b[:, 0] - a[:, 0, 1] * b[:, 1],
                       a[:, 0, 0] * b[:, 1] - a[:, 1, 0] * b[:, 0]], axis=-1) / safe[:, None]
        x = np.where(ok[:, None], xn, x)
        w = 1.0 / np.maximum(np.sum((x[:, None, :] - origins) ** 2, axis=-1), 1e-6)
    return x


def grow_clusters(node_beam_sets, error_range: float, bounds: Rectangle | None = None,
                  keep_best_on_failure: bool = True, prune_slack: float = 1.5,
                  centroid_cutoff: float | None = None) -> ClusterSet:
    """Grow candidate clusters node by node.

    Seeds are the in-bounds ray intersections of the first two nodes. Each
    further node branches on every beam within ``prune_slack * error_range``
    of the partial cluster's consistency point. A finished cluster survives
    when every node's angular deviation from its consistency point is within
    ``error_range``. The reported centroid is the mean of all pairwise
    intersections of the chosen beams whose crossing-angle sine reaches
    ``centroid_cutoff`` (default: only near-parallel pairs are skipped).

    If nothing survives, the minimum-residual cluster is returned flagged
    ``"unresolved"``; with ``keep_best_on_failure=False``
    :class:`AmbiguityUnresolved` is raised instead.
    """
    node_beam_sets = [list(b) for b in node_beam_sets]
    n_nodes = len(node_beam_sets)
    if n_nodes < 2:
        raise ValueError("need at least two nodes")
    if any(len(b) == 0 for b in node_beam_sets):
        raise ValueError("every node needs at least one beam")
    angs, orgs = zip(*(_angles_and_origins(b) for b in node_beam_sets))

    min_sin = PARALLEL_SIN if centroid_cutoff is None else max(PARALLEL_SIN, centroid_cutoff)
    # line intersection tables for every node pair; "ok" marks pairs that
    # are well-conditioned enough to enter a centroid
    tables = {}
    for i in range(n_nodes):
        for j in range(i + 1, n_nodes):
            pts, ok = line_intersections(angs[i], orgs[i], angs[j], orgs[j])
            cross = np.abs(np.sin(angs[j][None, :] - angs[i][:, None]))
            tables[i, j] = (pts, ok & (cross >= min_sin))

    _, ray_ok = line_intersections(angs[0], orgs[0], angs[1], orgs[1], rays=True)
    pts01 = tables[0, 1][0]
    if not ray_ok.any() and not line_intersections(angs[0], orgs[0], angs[1], orgs[1])[1].any():
        raise NoCandidates("first two nodes have only parallel beams")
    seed_ok = ray_ok.copy()
    if bounds is not None:
        seed_ok &= (pts01[..., 0] >= bounds.xmin) & (pts01[..., 0] <= bounds.xmax)
        seed_ok &= (pts01[..., 1] >= bounds.ymin) & (pts01[..., 1] <= bounds.ymax)
    ia, ib = np.nonzero(seed_ok)
    choices = np.stack([ia, ib], axis=1)
    anchor = pts01[ia, ib]
    seed_cond = tables[0, 1][1][ia, ib]
    sums = np.where(seed_cond[:, None], anchor, 0.0)
    counts = seed_cond.astype(float)

    for k in range(2, n_nodes):
        if len(choices) == 0:
            break
        d = anchor[:, None, :] - orgs[k][None, :, :]
        dev = np.abs(wrap_angle(np.arctan2(d[..., 1], d[..., 0]) - angs[k][None, :]))
        p_idx, b_idx = np.nonzero(dev <= prune_slack * error_range + ANGLE_EPS)
        choices = np.concatenate([choices[p_idx], b_idx[:, None]], axis=1)
        sums = sums[p_idx].copy()
        counts = counts[p_idx].copy()
        for i in range(k):
            pts, ok = tables[i, k]
            sel_ok = ok[choices[:, i], b_idx]
            sums += np.where(sel_ok[:, None], pts[choices[:, i], b_idx], 0.0)
            counts += sel_ok
        anchor = _consistency(angs, orgs, choices)

    if len(choices) == 0:
        if keep_best_on_failure:
            return _fallback(node_beam_sets, angs, orgs, min_sin)
        raise AmbiguityUnresolved("no seed intersections")
    points = anchor
    cent = np.where(counts[:, None] > 0, sums / np.maximum(counts, 1)[:, None], points)
    residuals = _residuals(points, angs, orgs, choices)
    keep = residuals.max(axis=1) <= error_range + ANGLE_EPS
    if not keep.any():
        if not keep_best_on_failure:
            raise AmbiguityUnresolved("no cluster within the error range")
        best = int(np.argmin(residuals.max(axis=1)))
        keep = np.zeros(len(keep), dtype=bool)
        keep[best] = True
        flags = ("unresolved",)
    else:
        flags = ()
    return ClusterSet(node_beam_sets, choices[keep], cent[keep], residuals[keep], flags, points[keep], min_sin)


def _consistency(angs, orgs, choices):
    a = np.stack([angs[k][choices[:, k]] for k in range(choices.shape[1])], axis=1)
    o = np.stack([orgs[k][choices[:, k]] for k in range(choices.shape[1])], axis=1)
    return consistency_points(a, o)


def _residuals(cent, angs, orgs, choices):
    cols = []
    for k in range(len(angs)):
        d = cent - orgs[k][choices[:, k]]
        cols.append(np.abs(wrap_angle(np.arctan2(d[:, 1], d[:, 0]) - angs[k][choices[:, k]])))
    return np.stack(cols, axis=1)


def _fallback(node_beam_sets, angs, orgs, min_sin):
    """Best-effort cluster when every seed was pruned: greedy minimum residual.

    Starting from each intersecting beam pair of the first two nodes, every
    further node takes the beam closest to the running consistency point.
    """
    pts01, ok01 = line_intersections(angs[0], orgs[0], angs[1], orgs[1])
    _, ray01 = line_intersections(angs[0], orgs[0], angs[1], orgs[1], rays=True)
    ia, ib = np.nonzero(ray01 if ray01.any() else ok01)
    if len(ia) == 0:
        raise NoCandidates("no intersecting beams")
    choices = np.stack([ia, ib], axis=1)
    point = pts01[ia, ib]
    for k in range(2, len(angs)):
        d = point[:, None, :] - orgs[k][None, :, :]
        dev = np.abs(wrap_angle(np.arctan2(d[..., 1], d[..., 0]) - angs[k][None, :]))
        choices = np.concatenate([choices, np.argmin(dev, axis=1)[:, None]], axis=1)
        point = _consistency(angs[: k + 1], orgs[: k + 1], choices)
    res = _residuals(point, angs, orgs, choices)
    best = int(np.argmin(res.max(axis=1)))
    beams = [node_beam_sets[i][c] for i, c in enumerate(choices[best])]
    inter = cluster_intersections(beams, min_sin)
    cent = inter.mean(axis=0) if len(inter) else point[best]
    return ClusterSet(node_beam_sets, choices[best : best + 1], cent[None, :], res[best : best + 1],
                      ("unresolved",), point[best : best + 1], min_sin)


# --------------------------------------------------------------------------
# RSSI likelihood and selection


def predicted_rssi(points, node_xy, models) -> np.ndarray:
    """LDPL prediction ``(P, I)`` for candidate points seen by each node."""
    points = np.atleast_2d(points)
    node_xy = np.asarray(node_xy, dtype=float)
    dist = np.linalg.norm(points[:, None, :] - node_xy[None, :, :], axis=2)
    dist = np.maximum(dist, 1e-3)
    ref = np.array([m.reference_power for m in models])
    gamma = np.array([m.path_loss_exponent for m in models])
    return ref[None, :] - 10.0 * gamma[None, :] * np.log10(dist)


def likelihood_from_rssi(observed, predicted) -> np.ndarray:
    """``sum(r^2 + r'^2) / sum((r - r')^2)`` along the last axis, capped."""
    observed = np.asarray(observed, dtype=float)
    predicted = np.asarray(predicted, dtype=float)
    num = np.sum(observed ** 2 + predicted ** 2, axis=-1)
    den = np.sum((observed - predicted) ** 2, axis=-1)
    out = np.where(den < LIKELIHOOD_EPS, LIKELIHOOD_MAX, num / np.maximum(den, LIKELIHOOD_EPS))
    return np.minimum(out, LIKELIHOOD_MAX)


def rssi_cluster_likelihood(cluster, rssi_observed, models, node_xy=None) -> float:
    """Eq.-7-style RSSI agreement of a cluster centroid (higher is better)."""
    if cluster is None:
        raise ValueError("cluster required")
    rssi_observed = np.asarray(rssi_observed, dtype=float)
    if node_xy is None:
        node_xy = np.array([b.origin for b in cluster.beams])
    if len(rssi_observed) != len(node_xy) or len(models) != len(node_xy) or np.any(np.isnan(rssi_observed)):
        raise ValueError("RSSI and model required for every node")
    pred = predicted_rssi(cluster.centroid, node_xy, models)[0]
    return float(likelihood_from_rssi(rssi_observed, pred))


def cluster_set_likelihoods(cs: ClusterSet, rssi_observed, models, node_xy) -> np.ndarray:
    rssi_observed = np.asarray(rssi_observed, dtype=float)
    if len(rssi_observed) != len(node_xy) or len(models) != len(node_xy):
        raise ValueError("RSSI and model required for every node")
    return likelihood_from_rssi(rssi_observed[None, :], predicted_rssi(cs.centroids, node_xy, models))


def _rank(cs: ClusterSet, primary=None) -> int:
    """Index of the best cluster: highest ``primary`` then smallest residuals, then beam choice."""
    keys = [cs.choices[:, k] for k in range(cs.node_count - 1, -1, -1)]
    keys.append(np.round(cs.residuals.mean(axis=1), 9))
    keys.append(np.round(cs.max_residuals, 9))
    if primary is not None:
        keys.append(-np.asarray(primary))
    return int(np.lexsort(keys)[0])


def select_by_residual(cs: ClusterSet) -> int:
    return _rank(cs)


def select_by_likelihood(cs: ClusterSet, likelihoods) -> int:
    return _rank(cs, likelihoods)


def select_cluster(clusters, rssi_observed, models) -> CandidateCluster:
    """Highest-likelihood cluster; ties broken by residual then beam choice."""
    clusters = list(clusters)
    if not clusters:
        raise ValueError("no clusters")
    scored = []
    for c in clusters:
        lik = rssi_cluster_likelihood(c, rssi_observed, models)
        c.rssi_likelihood = lik
        scored.append((-lik, round(c.max_angular_residual, 9), c.beam_choice, c))
    scored.sort(key=lambda t: t[:3])
    return scored[0][3]


# --------------------------------------------------------------------------
# multi-packet integration


@dataclass
class IntegrationResult:
    position: np.ndarray
    used: int
    low_confidence: bool = False


def integrate_packets(per_packet_results, threshold: float = 1.0) -> IntegrationResult:
    """Component-wise median of packets whose likelihood reaches ``threshold``.

    When every packet is rejected, the most likely packet (the median of all
    packets tied at the maximum, so the order does not matter) is returned
    with ``low_confidence`` set.
    """
    results = list(per_packet_results)
    if not results:
        raise ValueError("no packet results")
    pos = np.array([np.asarray(p, dtype=float) for p, _ in results]).reshape(-1, 2)
    lik = np.nan_to_num(np.array([float(l) for _, l in results]), nan=-np.inf)
    good = lik >= threshold
    if not good.any():
        return IntegrationResult(np.median(pos[lik == lik.max()], axis=0), 0, True)
    return IntegrationResult(np.median(pos[good], axis=0), int(good.sum()))


# --------------------------------------------------------------------------
# fine localization


def position_likelihood(points, chosen_angles, node_xy, rssi_observed, models, omega: float) -> np.ndarray:
    """Combined AOA + RSSI likelihood of candidate points (Eq.-8 style).

    ``1 / (sum (r-r')^2 / sum (r^2+r'^2) + omega * sum |dAOA|)``; ``omega=inf``
    keeps only the AOA term and ``rssi_observed=None`` drops the RSSI term.
    """
    points = np.atleast_2d(points)
    node_xy = np.asarray(node_xy, dtype=float)
    d = points[:, None, :] - node_xy[None, :, :]
    daoa = np.abs(wrap_angle(np.arctan2(d[..., 1], d[..., 0]) - np.asarray(chosen_angles)[None, :])).sum(axis=1)
    if math.isinf(omega):
        return 1.0 / np.maximum(daoa, 1e-12)
    cost = omega * daoa
    if rssi_observed is not None and models is not None:
        pred = predicted_rssi(points, node_xy, models)
        r = np.asarray(rssi_observed, dtype=float)[None, :]
        cost = cost + np.sum((r - pred) ** 2, axis=1) / np.sum(r ** 2 + pred ** 2, axis=1)
    return 1.0 / np.maximum(cost, 1e-12)


def grid_argmax(score, lo, hi, step: float, coarse_points: int = 41):
    """Maximize ``score(points)`` over a box, refining to ``step`` resolution.

    A coarse grid is evaluated first, then successively finer grids around the
    incumbent until the spacing reaches ``step``.
    """
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    span = hi - lo
    n = np.minimum(np.maximum(np.ceil(span / step).astype(int) + 1, 2), coarse_points)
    best = None
    while True:
        xs = np.linspace(lo[0], hi[0], n[0])
        ys = np.linspace(lo[1], hi[1], n[1])
        grid = np.stack(np.meshgrid(xs, ys, indexing="ij"), axis=-1).reshape(-1, 2)
        vals = score(grid)
        k = int(np.argmax(vals))
        best = grid[k]
        spacing = span / np.maximum(n - 1, 1)
        if np.all(spacing <= step + 1e-12):
            return best
        # zoom: new box spans +-2 cells around the incumbent
        lo = np.maximum(best - 2 * spacing, lo)
        hi = np.minimum(best + 2 * spacing, hi)
        span = hi - lo
        n = np.minimum(np.maximum(np.ceil(span / step).astype(int) + 1, 2), coarse_points)


def pinpoint(cluster: CandidateCluster, rssi_observed, models, config: FusionConfig | None = None,
             omega: float | None = None) -> np.ndarray:
    """Most likely target position inside the expanded cluster box."""
    config = config or FusionConfig()
    inter = np.asarray(cluster.intersections).reshape(-1, 2)
    if len(inter) == 0:
        return np.asarray(cluster.centroid, dtype=float)
    lo, hi = inter.min(axis=0), inter.max(axis=0)
    center, half = (lo + hi) / 2, (hi - lo) / 2 * config.cluster_expansion
    if np.all(half < config.search_grid_step / 2):
        return np.asarray(cluster.centroid, dtype=float)
    half = np.maximum(half, config.search_grid_step)
    node_xy = np.array([b.origin for b in cluster.beams])
    angles = np.array([b.global_angle for b in cluster.beams])
    if omega is None:
        omega = config.omega(len(cluster.beams))

    def score(points):
        return position_likelihood(points, angles, node_xy, rssi_observed, models, omega)

    return grid_argmax(score, center - half, center + half, config.search_grid_step)


# --------------------------------------------------------------------------
# nLOS handling


NLOS_POLICIES = ("strongest-peak", "earliest-tof", "drop-node")


def nlos_policy(node_families, policy: str = "strongest-peak", poses=None, bounds=None,
                error_range: float = math.radians(8.0), relative_floor: float = 0.1):
    """Pick one grating family per node, or ``None`` for a suppressed node.

    ``strongest-peak`` keeps the most powerful family. ``earliest-tof`` keeps
    the smallest-ToF family among those within ``relative_floor`` of the
    strongest, because the direct path is earliest but need not be strongest.
    ``drop-node`` starts from ``earliest-tof`` and suppresses the node whose
    removal makes the remaining beams angularly consistent.
    """
    if policy not in NLOS_POLICIES:
        raise ValueError(f"unknown nLOS policy {policy!r}")
    picked = []
    for fams in node_families:
        fams = list(fams)
        if not fams:
            picked.append(None)
            continue
        if policy == "strongest-peak":
            picked.append(max(fams, key=lambda f: f.power))
        else:
            top = max(f.power for f in fams)
            eligible = [f for f in fams if f.power >= relative_floor * top]
            picked.append(min(eligible, key=lambda f: (f.tof, -f.power)))
    if policy != "drop-node":
        return picked
    if poses is None:
        raise ValueError("drop-node needs node poses")
    return _drop_inconsistent(picked, poses, bounds, error_range)


def _best_residual(picked, poses, bounds, error_range, active):
    beams = [node_beams(i, picked[i], poses[i]) for i in active]
    try:
        cs = grow_clusters(beams, error_range, bounds)
    except NoCandidates:
        return math.inf
    if "unresolved" in cs.flags:
        return math.inf
    return float(cs.max_residuals.min())


def _drop_inconsistent(picked, poses, bounds, error_range):
    active = [i for i, f in enumerate(picked) if f is not None]
    if len(active) < 2:
        raise AmbiguityUnresolved("fewer than two usable nodes")
    if math.isfinite(_best_residual(picked, poses, bounds, error_range, active)) or len(active) <= 2:
        return picked
    best = None
    for k in active:
        rest = [i for i in active if i != k]
        res = _best_residual(picked, poses, bounds, error_range, rest)
        if math.isfinite(res) and (best is None or res < best[1]):
            best = (k, res)
    if best is None:
        raise AmbiguityUnresolved("no consistent node subset")
    out = list(picked)
    out[best[0]] = None
    return out


# --------------------------------------------------------------------------
# end-to-end helpers


@dataclass
class PacketEstimate:
    centroid: np.ndarray
    likelihood: float
    cluster_set: ClusterSet
    index: int
    max_residual: float
    flags: tuple[str, ...] = field(default_factory=tuple)

    def cluster(self) -> CandidateCluster:
        return self.cluster_set.cluster(self.index, self.likelihood)


def localize_packet(node_families, poses, rssi_observed=None, models=None, config: FusionConfig | None = None,
                    use_likelihood: bool = True) -> PacketEstimate:
    """Cluster search plus selection for one packet.

    ``node_families[i]`` is the grating family chosen for node ``i`` (``None``
    drops the node). With ``use_likelihood=False`` or no RSSI, clusters are
    ranked by angular residual alone.
    """
    config = config or FusionConfig()
    active = [i for i, f in enumerate(node_families) if f is not None]
    if len(active) < 2:
        raise AmbiguityUnresolved("fewer than two usable nodes")
    beams = [node_beams(i, node_families[i], poses[i]) for i in active]
    cs = grow_clusters(beams, config.error_range, config.bounds, centroid_cutoff=config.centroid_cutoff)
    node_xy = np.array([poses[i].position for i in active])
    if use_likelihood and rssi_observed is not None:
        obs = np.asarray(rssi_observed, dtype=float)[active]
        mods = [models[i] for i in active]
        liks = cluster_set_likelihoods(cs, obs, mods, node_xy)
        k = select_by_likelihood(cs, liks)
        lik = float(liks[k])
    else:
        k = select_by_residual(cs)
        lik = float("nan")
    return PacketEstimate(cs.centroids[k].copy(), lik, cs, k, float(cs.max_residuals[k]), cs.flags)
