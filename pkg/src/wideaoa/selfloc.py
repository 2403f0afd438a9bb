"""Anchor-free localization of the network nodes themselves.

Two algorithms are provided:

* BTS (bundled two-layer): mutual AOA observations fix the shape of the
  network in units of the node-0/node-1 distance, then the RSSI of every link
  fixes that distance together with one path-loss exponent per emitter. All
  nodes are re-estimated together whenever membership changes.
* ISU (incremental update): a joining node is localized like a client target
  against the fixed, previously estimated node positions.

Node indices are 0-based: node 0 is placed at the origin and node 1 at unit
distance along the bearing from node 0. ``rssi[i, j]`` always denotes the power
of node ``i``'s transmission measured at node ``j``, predicted with node
``i``'s reference power and path-loss exponent.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from .array_model import DegenerateGeometryError, NodePose, candidate_bearings, wrap_angle
from .channel_sim import Rectangle, RssiModel
from .fusion import (
    FusionConfig,
    line_intersections,
    localize_packet,
    pinpoint,
)

GAMMA_BOUNDS = (1.0, 6.0)
SCALE_INTERVAL = (0.1, 200.0)
SCALE_GRID_POINTS = 2000
TIE_TOLERANCE = math.radians(0.1)


class AmbiguousDirection(RuntimeError):
    """Two lobe pairs explain a mutual observation equally well."""


class ScaleUnbounded(RuntimeError):
    """The RSSI fit runs into the edge of the scale search interval."""


def _normalize_families(families) -> tuple[tuple[float, ...], ...]:
    if hasattr(families, "angles"):
        families = [families]
    families = list(families)
    if not families:
        return ()
    first = families[0]
    if np.ndim(first) == 0 and not hasattr(first, "angles"):
        # a flat list of angles is a single family
        return (tuple(float(a) for a in families),)
    return tuple(tuple(float(a) for a in getattr(f, "angles", f)) for f in families)


@dataclass(frozen=True)
class MutualObservation:
    """What ``observer`` measured from a packet sent by ``emitter``.

    ``aoa_families`` holds one or more grating families of local angles (the
    first one is treated as the strongest); ``rssi`` is in dBm.
    """

    observer: int
    emitter: int
    aoa_families: tuple = ()
    rssi: float = float("nan")

    def __post_init__(self):
        if self.observer == self.emitter:
            raise ValueError("observer and emitter must differ")
        fams = _normalize_families(self.aoa_families)
        if not fams or any(len(f) == 0 for f in fams):
            raise ValueError("aoa_families must be non-empty")
        object.__setattr__(self, "aoa_families", fams)

    def bearings(self, heading: float) -> np.ndarray:
        """Every global bearing from the observer toward the emitter."""
        pose = NodePose((0.0, 0.0), heading)
        out = []
        for fam in self.aoa_families:
            out.extend(candidate_bearings(fam, pose))
        return np.array(out)


@dataclass(frozen=True)
class MutualDirection:
    bearing: float  # global bearing from the first observer toward the second
    residual: float
    runner_up: float = math.inf


def _circular_mean(a, b):
    return wrap_angle(a + wrap_angle(b - a) / 2)


def mutual_direction_candidates(obs_ij: MutualObservation, obs_ji: MutualObservation, pose_headings):
    """All lobe pairings of two mutual observations, best first.

    Returns ``(bearings, residuals)``: the averaged bearing from ``obs_ij``'s
    observer toward its emitter and the collinearity residual of each pairing.
    """
    if (obs_ij.observer, obs_ij.emitter) != (obs_ji.emitter, obs_ji.observer):
        raise ValueError("observations must describe the same pair in opposite directions")
    h_i, h_j = pose_headings
    b_i = obs_ij.bearings(h_i)[:, None]
    b_j = obs_ji.bearings(h_j)[None, :] + np.pi
    diff = wrap_angle(b_j - b_i)
    residual = np.abs(diff).ravel()
    bearing = wrap_angle(b_i + diff / 2).ravel()
    order = np.argsort(residual, kind="stable")
    return bearing[order], residual[order]


def resolve_mutual_direction(obs_ij: MutualObservation, obs_ji: MutualObservation, pose_headings,
                             tie_tolerance: float = TIE_TOLERANCE) -> MutualDirection:
    """Pick the lobe pair whose two bearings are most nearly opposite.

    Raises:
        AmbiguousDirection: if a different pairing comes within
            ``tie_tolerance`` of the best one.
    """
    bearing, residual = mutual_direction_candidates(obs_ij, obs_ji, pose_headings)
    best = float(residual[0])
    # pairings that land on the same bearing are not a real ambiguity
    distinct = np.abs(wrap_angle(bearing[1:] - bearing[0])) > tie_tolerance
    others = residual[1:][distinct]
    runner_up = float(others[0]) if len(others) else math.inf
    if runner_up - best <= tie_tolerance:
        raise AmbiguousDirection(
            f"pair ({obs_ij.observer}, {obs_ij.emitter}): residuals {best:.3g} and {runner_up:.3g} tie"
        )
    return MutualDirection(float(bearing[0]), best, runner_up)


# --------------------------------------------------------------------------
# layer 1: topology from bearings


def _undirected(bearings) -> dict[tuple[int, int], float]:
    """Merge ``{(i, j): bearing i->j}`` into one bearing per unordered pair."""
    out: dict[tuple[int, int], list[float]] = {}
    for (i, j), b in bearings.items():
        if i == j:
            raise ValueError("self-bearing")
        key, val = ((i, j), b) if i < j else ((j, i), b + np.pi)
        out.setdefault(key, []).append(float(wrap_angle(val)))
    merged = {}
    for key, vals in out.items():
        merged[key] = float(np.angle(np.mean(np.exp(1j * np.array(vals)))))
    return merged


@dataclass
class TopologyGraph:
    """Network shape in units of the node-0/node-1 distance."""

    directions: dict[tuple[int, int], float]
    coordinates_unit: np.ndarray
    rms_residual: float = 0.0

    @property
    def node_count(self) -> int:
        return len(self.coordinates_unit)

    @property
    def ratios(self) -> np.ndarray:
        """Pairwise distances ``p_ij`` with ``p_01 = 1``."""
        c = self.coordinates_unit
        return np.hypot(*(c[:, None, :] - c[None, :, :]).transpose(2, 0, 1))

    def bearing(self, i: int, j: int) -> float:
        d = self.coordinates_unit[j] - self.coordinates_unit[i]
        return math.atan2(d[1], d[0])

    def angular_residuals(self) -> np.ndarray:
        c = self.coordinates_unit
        out = []
        for (i, j), b in self.directions.items():
            d = c[j] - c[i]
            out.append(float(wrap_angle(math.atan2(d[1], d[0]) - b)))
        return np.array(out)


def _triangulate(pa, ba, pb, bb, min_sin):
    ua = np.array([math.cos(ba), math.sin(ba)])
    ub = np.array([math.cos(bb), math.sin(bb)])
    cross = ua[0] * ub[1] - ua[1] * ub[0]
    if abs(cross) < min_sin:
        return None
    delta = pb - pa
    t = (delta[0] * ub[1] - delta[1] * ub[0]) / cross
    return pa + t * ua


def build_topology(bearings, node_count: int, min_sin: float = 1e-3, refine: bool = True) -> TopologyGraph:
    """Node coordinates (up to scale) from pairwise global bearings.

    Args:
        bearings: mapping ``(i, j) -> bearing from i toward j``. Both
            orientations of a pair may be given; they are averaged.
        node_count: number of nodes.
        min_sin: smallest ``|sin|`` of the angle between the two rays used to
            triangulate a node.
        refine: reconcile redundant bearings by least squares on the angular
            residuals.

    Because the bearings are absolute, there is no reflection freedom left:
    node 0 and the node-0/node-1 bearing fix translation, rotation and scale.

    Raises:
        DegenerateGeometryError: if some node cannot be triangulated from two
            non-collinear bearings.
    """
    if node_count < 2:
        raise ValueError("need at least two nodes")
    pairs = _undirected(bearings)
    if any(j >= node_count for _, j in pairs):
        raise ValueError("bearing references a node outside node_count")
    if (0, 1) not in pairs:
        raise DegenerateGeometryError("the bearing between nodes 0 and 1 is required")

    def toward(i, k):
        if (i, k) in pairs:
            return pairs[(i, k)]
        if (k, i) in pairs:
            return pairs[(k, i)] + np.pi
        return None

    pos = {0: np.zeros(2), 1: np.array([math.cos(pairs[(0, 1)]), math.sin(pairs[(0, 1)])])}
    pending = [k for k in range(2, node_count)]
    while pending:
        progress = False
        for k in list(pending):
            best = None
            for a, b in itertools.combinations(sorted(pos), 2):
                ba, bb = toward(a, k), toward(b, k)
                if ba is None or bb is None:
                    continue
                s = abs(math.sin(bb - ba))
                if s >= min_sin and (best is None or s > best[0]):
                    best = (s, a, b, ba, bb)
            if best is None:
                continue
            _, a, b, ba, bb = best
            p = _triangulate(pos[a], ba, pos[b], bb, min_sin)
            if p is None or min(np.hypot(*(p - q)) for q in pos.values()) < 1e-12:
                continue
            pos[k] = p
            pending.remove(k)
            progress = True
        if not progress:
            raise DegenerateGeometryError(f"nodes {pending} cannot be triangulated from the given bearings")

    coords = np.array([pos[k] for k in range(node_count)])
    topo = TopologyGraph(dict(pairs), coords)
    if refine and node_count > 2:
        topo.coordinates_unit = _refine_coordinates(coords, pairs)
    res = topo.angular_residuals()
    topo.rms_residual = float(np.sqrt(np.mean(res ** 2))) if len(res) else 0.0
    return topo


def _refine_coordinates(coords, pairs):
    idx_i = np.array([i for i, _ in pairs])
    idx_j = np.array([j for _, j in pairs])
    meas = np.array(list(pairs.values()))
    fixed = coords[:2]

    def full(x):
        return np.vstack([fixed, x.reshape(-1, 2)])

    def residuals(x):
        c = full(x)
        d = c[idx_j] - c[idx_i]
        return wrap_angle(np.arctan2(d[:, 1], d[:, 0]) - meas)

    free = len(coords) - 2
    rows = np.arange(len(meas))

    def jacobian(x):
        c = full(x)
        d = c[idx_j] - c[idx_i]
        r2 = np.maximum(np.sum(d ** 2, axis=1), 1e-300)
        gx, gy = -d[:, 1] / r2, d[:, 0] / r2
        jac = np.zeros((len(meas), free, 2))
        for idx, sign in ((idx_j, 1.0), (idx_i, -1.0)):
            m = idx >= 2
            jac[rows[m], idx[m] - 2, 0] += sign * gx[m]
            jac[rows[m], idx[m] - 2, 1] += sign * gy[m]
        return jac.reshape(len(meas), -1)

    sol = optimize.least_squares(residuals, coords[2:].ravel(), jac=jacobian,
                                 method="lm" if len(meas) >= coords[2:].size else "trf")
    return full(sol.x)


# --------------------------------------------------------------------------
# layer 2: scale from RSSI


@dataclass
class ScaleSolution:
    d_12: float  # meters between nodes 0 and 1
    gamma: np.ndarray  # one path-loss exponent per emitter
    residual: float  # sum of squared dB errors

    def __post_init__(self):
        if self.d_12 <= 0:
            raise ValueError("d_12 must be positive")


def _scale_terms(topology: TopologyGraph, rssi, reference_powers):
    ratios = topology.ratios
    rssi = np.asarray(rssi, dtype=float)
    ref = np.asarray(reference_powers, dtype=float)
    emitters, points = rssi.shape
    if points != topology.node_count:
        raise ValueError("rssi must have one column per topology point")
    if len(ref) != emitters:
        raise ValueError("one reference power per emitter is required")
    mask = np.isfinite(rssi)
    np.fill_diagonal(mask[:, :emitters], False)
    ii, jj = np.nonzero(mask)
    p = ratios[ii, jj]
    if np.any(p <= 0):
        raise DegenerateGeometryError("coincident points in the topology")
    return ii, np.log10(p), ref[ii] - rssi[ii, jj], emitters


def _fit_gammas(log_d, ii, log_p, loss, emitters, bounds):
    """Closed-form per-emitter exponents for every candidate scale in ``log_d``."""
    big_l = log_p[None, :] + log_d[:, None]  # (G, K) log10 distances
    onehot = (ii[:, None] == np.arange(emitters)[None, :]).astype(float)
    num = (loss[None, :] * big_l) @ onehot
    den = (big_l ** 2) @ onehot
    with np.errstate(divide="ignore", invalid="ignore"):
        gamma = np.where(den > 0, num / (10.0 * den), bounds[0])
    gamma = np.clip(gamma, *bounds)
    err = loss[None, :] - 10.0 * gamma[:, ii] * big_l
    return gamma, np.sum(err ** 2, axis=1)


def solve_scale(topology: TopologyGraph, rssi, reference_powers, interval=SCALE_INTERVAL,
                grid_points: int = SCALE_GRID_POINTS, gamma_bounds=GAMMA_BOUNDS) -> ScaleSolution:
    """Fit the node-0/node-1 distance and every emitter's path-loss exponent.

    For a fixed distance each exponent has a closed-form least-squares value,
    so the fit is a 1-D search over a log-spaced grid followed by a bounded
    scalar refinement around the best grid point. When several scales fit
    equally well, the smallest one wins.

    Args:
        topology: network shape; it may contain passive points (clients)
            after the emitting nodes.
        rssi: ``(emitters, points)`` matrix, ``rssi[i, j]`` measured at point
            ``j`` from emitter ``i``; NaN marks missing links.
        reference_powers: reference power of every emitter, dBm at 1 m.

    Raises:
        ScaleUnbounded: if the best scale sits on the edge of ``interval``.
    """
    ii, log_p, loss, emitters = _scale_terms(topology, rssi, reference_powers)
    unknowns = 1 + len(np.unique(ii))
    if len(loss) < unknowns:
        raise ValueError(f"{len(loss)} RSSI links cannot determine {unknowns} unknowns")
    log_d = np.linspace(math.log10(interval[0]), math.log10(interval[1]), grid_points)
    _, obj = _fit_gammas(log_d, ii, log_p, loss, emitters, gamma_bounds)
    tol = 1e-12 * (1.0 + float(np.sum(loss ** 2)))
    k = int(np.flatnonzero(obj <= obj.min() + tol)[0])
    if k == 0 or k == grid_points - 1:
        raise ScaleUnbounded("RSSI fit prefers a scale at the edge of the search interval")

    def f(x):
        return float(_fit_gammas(np.array([x]), ii, log_p, loss, emitters, gamma_bounds)[1][0])

    best_x, best_f = log_d[k], float(obj[k])
    sol = optimize.minimize_scalar(f, bounds=(log_d[k - 1], log_d[k + 1]), method="bounded",
                                   options={"xatol": 1e-12})
    if sol.fun < best_f - tol:
        best_x, best_f = float(sol.x), float(sol.fun)
    gamma, _ = _fit_gammas(np.array([best_x]), ii, log_p, loss, emitters, gamma_bounds)
    return ScaleSolution(10.0 ** best_x, gamma[0], best_f)


def scale_objective(topology: TopologyGraph, rssi, reference_powers, d_12: float, gamma) -> float:
    """Sum of squared dB errors for explicit parameters."""
    ii, log_p, loss, _ = _scale_terms(topology, rssi, reference_powers)
    err = loss - 10.0 * np.asarray(gamma, dtype=float)[ii] * (log_p + math.log10(d_12))
    return float(np.sum(err ** 2))


# --------------------------------------------------------------------------
# BTS


def _observation_index(observations):
    index = {}
    for obs in observations:
        key = (obs.observer, obs.emitter)
        if key in index:
            raise ValueError(f"duplicate observation for {key}")
        index[key] = obs
    return index


def rssi_matrix(observations, node_count: int) -> np.ndarray:
    """``r[i, j]``: power of emitter ``i`` at observer ``j`` (NaN if unseen)."""
    r = np.full((node_count, node_count), np.nan)
    for obs in observations:
        r[obs.emitter, obs.observer] = obs.rssi
    return r


@dataclass
class _PairData:
    rays: np.ndarray  # bearings i -> j used to propose positions
    ends: tuple  # raw bearings i -> j as measured at each end that observed the other


def _pair_data(index, headings, node_count, tolerance):
    data = {}
    for i, j in itertools.combinations(range(node_count), 2):
        o_ij, o_ji = index.get((i, j)), index.get((j, i))
        ends = []
        if o_ij is not None:
            ends.append(o_ij.bearings(headings[i]))
        if o_ji is not None:
            ends.append(np.asarray(wrap_angle(o_ji.bearings(headings[j]) + np.pi)))
        if not ends:
            continue
        if len(ends) == 2:
            b, r = mutual_direction_candidates(o_ij, o_ji, (headings[i], headings[j]))
            rays = b[r <= max(tolerance, r[0])]
        else:
            rays = ends[0]
        data[(i, j)] = _PairData(np.asarray(rays), tuple(ends))
    return data


def _toward(data, i, k):
    if (i, k) in data:
        return data[(i, k)]
    if (k, i) in data:
        d = data[(k, i)]
        return _PairData(np.asarray(wrap_angle(d.rays + np.pi)), tuple(np.asarray(wrap_angle(e + np.pi)) for e in d.ends))
    return None


class _PackedEnds:
    """Raw lobe bearings of every pair end, padded into one array."""

    def __init__(self, data):
        self.keys = list(data)
        self.i = np.array([i for i, _ in self.keys])
        self.j = np.array([j for _, j in self.keys])
        rows = [(p, np.asarray(e)) for p, d in enumerate(data.values()) for e in d.ends]
        self.row_pair = np.array([p for p, _ in rows])
        self.lobes = np.full((len(rows), max(len(e) for _, e in rows)), np.nan)
        for r, (_, e) in enumerate(rows):
            self.lobes[r, :len(e)] = e
        self.ends_per_pair = np.bincount(self.row_pair, minlength=len(self.keys))

    def offsets(self, coords):
        """Geometric bearing per pair and signed offset to the nearest lobe per end."""
        delta = coords[self.j] - coords[self.i]
        g = np.arctan2(delta[:, 1], delta[:, 0])
        diff = wrap_angle(self.lobes - g[self.row_pair][:, None])
        pick = np.argmin(np.where(np.isnan(diff), np.inf, np.abs(diff)), axis=1)
        return g, diff[np.arange(len(diff)), pick]


def _misfit_toward(points, origins, ends):
    """Lobe misfit of ``points`` seen from ``origins`` (broadcast over leading axes)."""
    delta = points - origins
    dist = np.hypot(delta[..., 0], delta[..., 1])
    unit = delta / np.maximum(dist, 1e-300)[..., None]
    total = np.zeros(dist.shape)
    for e in ends:
        # nearest lobe = largest cosine; the angle follows from its arccos
        best = np.max(unit @ np.stack([np.cos(e), np.sin(e)]), axis=-1)
        total += np.arccos(np.clip(best, -1.0, 1.0)) ** 2
    total[dist < 1e-9] = np.inf
    return total


def _polish(points, positions, links):
    """One weighted least-squares step toward the closest bearing lines.

    ``points`` is ``(H, T, 2)`` and ``positions`` ``(H, n, 2)``.
    """
    a = np.zeros(points.shape[:-1] + (2, 2))
    rhs = np.zeros(points.shape)
    for i, d in links:
        origin = positions[:, i][:, None, :]
        delta = points - origin
        g = np.arctan2(delta[..., 1], delta[..., 0])
        offsets = []
        for e in d.ends:
            diff = wrap_angle(e - g[..., None])
            offsets.append(np.take_along_axis(diff, np.argmin(np.abs(diff), axis=-1)[..., None], axis=-1)[..., 0])
        ang = g + np.mean(offsets, axis=0)
        normal = np.stack([-np.sin(ang), np.cos(ang)], axis=-1)
        w = 1.0 / np.maximum(np.sum(delta ** 2, axis=-1), 1e-12)
        a += w[..., None, None] * normal[..., :, None] * normal[..., None, :]
        rhs += (w * np.sum(normal * origin, axis=-1))[..., None] * normal
    det = a[..., 0, 0] * a[..., 1, 1] - a[..., 0, 1] * a[..., 1, 0]
    ok = np.abs(det) > 1e-9 * np.maximum(a[..., 0, 0] * a[..., 1, 1], 1e-300)
    eye = np.broadcast_to(np.eye(2), a.shape)
    sol = np.linalg.solve(np.where(ok[..., None, None], a, eye), rhs[..., None])[..., 0]
    return np.where(ok[..., None], sol, points)


def _expand(positions, scores, placed, k, data, per_hypothesis, polish_top=16, proposers=3):
    """Grow every hypothesis by node ``k``; returns candidate (positions, scores).

    Proposals come from crossing the bearing candidates of the first
    ``proposers`` linked nodes; every linked node takes part in the scoring.
    """
    links = [(i, d) for i in placed if (d := _toward(data, i, k)) is not None]
    if len(links) < 2:
        return positions[:0], scores[:0]
    ang = np.concatenate([d.rays for _, d in links[:proposers]])
    own = np.concatenate([np.full(len(d.rays), i) for i, d in links[:proposers]])
    ia, ib = np.nonzero(own[:, None] < own[None, :])
    ua = np.stack([np.cos(ang[ia]), np.sin(ang[ia])], axis=-1)
    ub = np.stack([np.cos(ang[ib]), np.sin(ang[ib])], axis=-1)
    cross = ua[:, 0] * ub[:, 1] - ua[:, 1] * ub[:, 0]
    keep = np.abs(cross) >= 1e-3
    ia, ib, ua, ub, cross = ia[keep], ib[keep], ua[keep], ub[keep], cross[keep]
    if len(ia) == 0:
        return positions[:0], scores[:0]
    oa, ob = positions[:, own[ia]], positions[:, own[ib]]  # (H, Q, 2)
    delta = ob - oa
    t = (delta[..., 0] * ub[:, 1] - delta[..., 1] * ub[:, 0]) / cross
    u = (delta[..., 0] * ua[:, 1] - delta[..., 1] * ua[:, 0]) / cross
    points = oa + t[..., None] * ua
    total = np.where((t > 0) & (u > 0), 0.0, np.inf)
    for i, d in links:
        total = total + _misfit_toward(points, positions[:, i][:, None, :], d.ends)
    top = np.argsort(total, axis=1, kind="stable")[:, :polish_top]
    points = np.take_along_axis(points, top[..., None], axis=1)
    alive = np.isfinite(np.take_along_axis(total, top, axis=1))
    if len(links) > 2:
        points = _polish(points, positions, links)
    total = np.where(alive, 0.0, np.inf)
    for i, d in links:
        total = total + _misfit_toward(points, positions[:, i][:, None, :], d.ends)
    order = np.argsort(total, axis=1, kind="stable")
    points = np.take_along_axis(points, order[..., None], axis=1)
    total = np.take_along_axis(total, order, axis=1)
    # drop proposals that duplicate a better one of the same hypothesis
    gap = np.hypot(*(points[:, :, None, :] - points[:, None, :, :]).transpose(3, 0, 1, 2))
    dup = np.tril(gap < 1e-6, k=-1).any(axis=2)
    total[dup] = np.inf
    ok = np.isfinite(total) & (np.cumsum(~dup & np.isfinite(total), axis=1) <= per_hypothesis)
    h_idx, p_idx = np.nonzero(ok)
    grown = positions[h_idx].copy()
    grown[:, k] = points[h_idx, p_idx]
    return grown, scores[h_idx] + total[h_idx, p_idx]


def _placement_order(data, node_count):
    order = [0, 1]
    rest = list(range(2, node_count))
    while rest:
        links = [sum(1 for i in order if _toward(data, i, k) is not None) for k in rest]
        pick = rest[int(np.argmax(links))]
        if max(links) < 2:
            raise DegenerateGeometryError(f"node {pick} has fewer than two bearings to placed nodes")
        order.append(pick)
        rest.remove(pick)
    return order


def _assign(coords, packed):
    """Bearing per pair closest to the geometry of ``coords``."""
    g, off = packed.offsets(coords)
    mean = np.bincount(packed.row_pair, weights=off, minlength=len(g)) / packed.ends_per_pair
    return {key: float(b) for key, b in zip(packed.keys, wrap_angle(g + mean))}


def _misfit(coords, packed):
    return float(np.sum(packed.offsets(coords)[1] ** 2))


def resolve_bearings_jointly(observations, headings, node_count: int | None = None,
                             mutual_tolerance: float = math.radians(15.0), beam_width: int = 64,
                             per_hypothesis: int = 6):
    """Candidate network shapes that make all lobe measurements consistent.

    A single mutual pair is often ambiguous under noise: with wide spacing each
    end reports several lobes and their mirrors, so a wrong pairing can look
    almost collinear. Nodes are therefore added one at a time; a new node is
    proposed where bearing candidates from two placed nodes cross, and every
    proposal is scored by how close each placed node's nearest measured lobe
    (at both ends of the link) comes to the proposed geometry. The
    ``beam_width`` best partial networks survive each step.

    Returns a list of ``(coordinates_unit, misfit)`` best first, misfit in
    squared radians.
    """
    observations = list(observations)
    if node_count is None:
        node_count = 1 + max(max(o.observer, o.emitter) for o in observations)
    data = _pair_data(_observation_index(observations), headings, node_count, mutual_tolerance)
    if (0, 1) not in data:
        raise DegenerateGeometryError("nodes 0 and 1 must observe each other")
    order = _placement_order(data, node_count)
    first = data[(0, 1)]
    g01 = np.asarray(first.rays)
    positions = np.zeros((len(g01), node_count, 2))
    positions[:, 1] = np.stack([np.cos(g01), np.sin(g01)], axis=-1)
    scores = np.zeros(len(g01))
    for e in first.ends:
        scores += np.min(wrap_angle(e[None, :] - g01[:, None]) ** 2, axis=1)
    placed = [0, 1]
    for k in order[2:]:
        positions, scores = _expand(positions, scores, placed, k, data, per_hypothesis)
        if len(scores) == 0:
            raise DegenerateGeometryError(f"node {k} cannot be placed consistently")
        best = np.argsort(scores, kind="stable")[:beam_width]
        positions, scores = positions[best], scores[best]
        placed.append(k)
    return [(p, float(c)) for p, c in zip(positions, scores)], data


@dataclass
class BtsResult:
    coordinates: np.ndarray  # meters, node 0 at the origin
    topology: TopologyGraph
    scale: ScaleSolution
    bearings: dict[tuple[int, int], float]
    score: float = 0.0


def _settle(coords, packed, node_count, iterations=5):
    """Alternate lobe assignment and least-squares topology until stable."""
    bearings = _assign(coords, packed)
    topo = build_topology(bearings, node_count)
    for _ in range(iterations):
        again = _assign(topo.coordinates_unit, packed)
        if all(abs(float(wrap_angle(again[p] - bearings[p]))) < 1e-12 for p in again):
            break
        bearings = again
        topo = build_topology(bearings, node_count)
    return topo, bearings


def bts_update(observations, headings, reference_powers, node_count: int | None = None,
               aoa_sigma: float = math.radians(2.0), rssi_sigma: float = 2.0,
               mutual_tolerance: float = math.radians(15.0), beam_width: int = 64,
               score_margin: float = 9.0, max_candidates: int = 8) -> BtsResult:
    """Re-localize every node from the full set of mutual observations.

    Network shapes come from :func:`resolve_bearings_jointly`. Shapes whose
    lobe misfit is within ``score_margin`` (in units of ``aoa_sigma**2``) of
    the best are settled by alternating lobe assignment and least squares,
    then given a scale fit; the one with the smallest combined angular and
    RSSI misfit (weighted by ``aoa_sigma`` and ``rssi_sigma``) wins.
    Coordinates are the unit-scale topology times the fitted node-0/node-1
    distance.
    """
    observations = list(observations)
    if node_count is None:
        node_count = 1 + max(max(o.observer, o.emitter) for o in observations)
    rssi = rssi_matrix(observations, node_count)
    options, data = resolve_bearings_jointly(observations, headings, node_count, mutual_tolerance, beam_width)
    cutoff = options[0][1] + score_margin * aoa_sigma ** 2
    packed = _PackedEnds(data)
    best = None
    last_error: Exception | None = None
    for coords, shape_score in options[:max_candidates]:
        if shape_score > cutoff:
            break
        try:
            topo, bearings = _settle(coords, packed, node_count)
            scale = solve_scale(topo, rssi, reference_powers)
        except (DegenerateGeometryError, ScaleUnbounded, ValueError) as exc:
            last_error = exc
            continue
        score = _misfit(topo.coordinates_unit, packed) / aoa_sigma ** 2 + scale.residual / rssi_sigma ** 2
        if best is None or score < best.score:
            best = BtsResult(topo.coordinates_unit * scale.d_12, topo, scale, bearings, score)
    if best is None:
        raise last_error if last_error is not None else DegenerateGeometryError("no consistent network")
    return best


# --------------------------------------------------------------------------
# ISU


@dataclass
class IsuResult:
    coordinates: np.ndarray
    gamma_new: float
    likelihood: float


def estimate_gamma(emitter_xy, receiver_xy, rssi, reference_power: float, bounds=GAMMA_BOUNDS) -> float:
    """Least-squares path-loss exponent of one emitter from known distances."""
    d = np.hypot(*(np.asarray(receiver_xy, dtype=float) - np.asarray(emitter_xy, dtype=float)).T)
    r = np.asarray(rssi, dtype=float)
    ok = np.isfinite(r) & (d > 0)
    if not ok.any():
        return float(np.mean(bounds))
    big_l = np.log10(d[ok])
    den = 10.0 * np.sum(big_l ** 2)
    if den <= 0:
        return float(np.mean(bounds))
    return float(np.clip(np.sum((reference_power - r[ok]) * big_l) / den, *bounds))


def isu_update(existing_coordinates, observations, headings, reference_powers, gammas,
               new_index: int | None = None, config: FusionConfig | None = None) -> IsuResult:
    """Localize one joining node against fixed existing positions.

    The joining node is handled like a client target: every existing node's
    AOA of it plus the RSSI it receives from each existing node feed the
    packet fusion and the fine search. Existing positions are not touched.

    Args:
        existing_coordinates: ``(k, 2)`` positions of nodes ``0..k-1``.
        observations: mutual observations between the new node and the
            existing ones (others are ignored).
        headings: array headings of all ``k + 1`` nodes.
        reference_powers: reference power of all ``k + 1`` nodes.
        gammas: path-loss exponents of the ``k`` existing nodes.
    """
    existing = np.asarray(existing_coordinates, dtype=float).reshape(-1, 2)
    k = len(existing)
    if k < 2:
        raise ValueError("ISU needs at least two localized nodes")
    new = k if new_index is None else new_index
    index = {(o.observer, o.emitter): o for o in observations}
    families, rssi, models, poses = [], [], [], []
    for i in range(k):
        seen = index.get((i, new))
        families.append(None if seen is None else seen.aoa_families[0])
        heard = index.get((new, i))
        rssi.append(np.nan if heard is None else heard.rssi)
        models.append(RssiModel(float(reference_powers[i]), float(np.clip(gammas[i], *GAMMA_BOUNDS))))
        poses.append(NodePose(tuple(existing[i]), headings[i]))
    rssi = np.array(rssi)
    if config is None:
        lo, hi = existing.min(axis=0), existing.max(axis=0)
        pad = max(float(np.hypot(*(hi - lo))), 1.0)
        config = FusionConfig(bounds=Rectangle(lo[0] - pad, lo[1] - pad, hi[0] + pad, hi[1] + pad))
    have_rssi = bool(np.all(np.isfinite(rssi[[i for i, f in enumerate(families) if f is not None]])))
    est = localize_packet(families, poses, rssi if have_rssi else None, models, config)
    if have_rssi:
        active = [i for i, f in enumerate(families) if f is not None]
        position = pinpoint(est.cluster(), rssi[active], [models[i] for i in active], config)
    else:
        position = est.centroid
    coords = np.vstack([existing, position])
    emitted = [index[(i, new)].rssi if (i, new) in index else np.nan for i in range(k)]
    gamma_new = estimate_gamma(position, existing, emitted, float(reference_powers[new]))
    return IsuResult(coords, gamma_new, est.likelihood)


# --------------------------------------------------------------------------
# evaluation helpers


def align_rigid(estimate, truth):
    """Rotate and translate ``estimate`` onto ``truth`` (least squares, no scaling).

    Returns ``(aligned, rotation, translation)`` with
    ``aligned = estimate @ rotation.T + translation``.
    """
    est = np.asarray(estimate, dtype=float)
    tru = np.asarray(truth, dtype=float)
    if est.shape != tru.shape:
        raise ValueError("shape mismatch")
    mu_e, mu_t = est.mean(axis=0), tru.mean(axis=0)
    h = (est - mu_e).T @ (tru - mu_t)
    u, _, vt = np.linalg.svd(h)
    sign = np.sign(np.linalg.det(vt.T @ u.T)) or 1.0
    rot = vt.T @ np.diag([1.0, sign]) @ u.T
    trans = mu_t - mu_e @ rot.T
    return est @ rot.T + trans, rot, trans


def aligned_errors(estimate, truth) -> np.ndarray:
    """Per-node distance after optimal rotation and translation."""
    aligned, _, _ = align_rigid(estimate, truth)
    return np.hypot(*(aligned - np.asarray(truth, dtype=float)).T)
