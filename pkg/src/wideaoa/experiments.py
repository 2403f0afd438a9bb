"""Monte Carlo drivers: the four-stage target pipeline and the self-localization benchmark.

Every trial derives its own random stream from ``(seed, node_count, trial)``
through :class:`numpy.random.SeedSequence`, so results do not depend on the
number of workers or on scheduling order.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .array_model import ArrayConfig, DegenerateGeometryError, NodePose, grating_lobe_family, observed_local_angle
from .channel_sim import (
    AoaErrorModel,
    MultipathProfile,
    Rectangle,
    RssiModel,
    build_scene,
    synthesize_csi,
    synthesize_rssi,
)
from .fusion import (
    DEFAULT_OMEGA0,
    AmbiguityUnresolved,
    FusionConfig,
    NoCandidates,
    integrate_packets,
    localize_packet,
    nlos_policy,
    pinpoint,
)
from .io import read_jsonl, to_jsonable, write_jsonl
from .music import estimate_profile, profile_peaks_with_ambiguity
from .selfloc import (
    MutualObservation,
    ScaleUnbounded,
    align_rigid,
    aligned_errors,
    bts_update,
    isu_update,
)

STAGES = ("a", "b", "c", "d")
MODES = ("abstract", "csi")
QUANTILES = np.round(np.arange(0.0, 1.0 + 1e-9, 0.01), 2)

# stream ids that keep the benchmarks' random streams apart
_STAGE_STREAM = 0
_SELFLOC_STREAM = 1


@dataclass
class ExperimentConfig:
    """Settings for every harness run. All fields have defaults.

    Angles are in degrees here because this object mirrors the JSON config
    file; the library itself works in radians.
    """

    space: tuple[float, float] = (30.0, 50.0)
    node_counts: list[int] = field(default_factory=lambda: [2, 3, 4, 5])
    trials: int = 2000
    error_range: float = 8.0
    packets: int = 10
    stages: list[str] = field(default_factory=lambda: list(STAGES))
    seed: int = 0
    output_dir: str = "results"
    mode: str = "abstract"
    workers: int = 1
    # radio model
    reference_power: float = -40.0
    gamma_range: tuple[float, float] = (2.0, 4.0)
    shadowing_sigma: float = 6.0
    error_distribution: str = "gaussian"
    error_coverage: float = 0.9
    # fusion
    omega0: float = DEFAULT_OMEGA0
    likelihood_threshold: float | None = None
    # csi mode
    snr_db: float = 20.0
    reflections: int = 0
    nlos_probability: float = 0.0
    nlos_policy: str = "strongest-peak"
    # self-localization benchmark
    selfloc_space: tuple[float, float] = (10.0, 10.0)
    initial_nodes: int = 3
    joins: int = 6
    selfloc_aoa_sigma: float | None = 2.0  # None: same error model as target observations
    selfloc_shadowing: float = 2.0
    selfloc_packets: int = 1  # packets averaged per node-to-node link
    end_to_end: bool = True
    heading_error: float = 0.0  # std of the self-reported array headings, degrees

    def __post_init__(self):
        self.space = tuple(float(v) for v in self.space)
        self.selfloc_space = tuple(float(v) for v in self.selfloc_space)
        self.gamma_range = tuple(float(v) for v in self.gamma_range)
        self.node_counts = [int(n) for n in self.node_counts]
        self.stages = [str(s).lower() for s in self.stages]
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if not self.stages:
            raise ValueError("stages must be non-empty")
        if unknown := set(self.stages) - set(STAGES):
            raise ValueError(f"unknown stages {sorted(unknown)}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if not self.node_counts or min(self.node_counts) < 2:
            raise ValueError("node_counts must be non-empty and >= 2")
        if self.packets < 1:
            raise ValueError("packets must be >= 1")
        if self.error_range <= 0:
            raise ValueError("error_range must be positive")
        if self.initial_nodes < 3 or self.joins < 0:
            raise ValueError("self-localization needs >= 3 initial nodes and >= 0 joins")
        if self.selfloc_packets < 1:
            raise ValueError("selfloc_packets must be >= 1")
        if self.heading_error < 0:
            raise ValueError("heading_error must be non-negative")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        if unknown := set(doc) - names:
            raise ValueError(f"unknown config fields {sorted(unknown)}")
        return cls(**doc)

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    @property
    def error_model(self) -> AoaErrorModel:
        return AoaErrorModel(math.radians(self.error_range), self.error_coverage, self.error_distribution)

    @property
    def link_error_model(self) -> AoaErrorModel | None:
        """AOA error of node-to-node (and end-to-end target) observations; None when noiseless."""
        if self.selfloc_aoa_sigma is None:
            return self.error_model
        if self.selfloc_aoa_sigma <= 0:
            return None
        return AoaErrorModel(math.radians(self.error_range), self.error_coverage, self.error_distribution,
                             sigma=math.radians(self.selfloc_aoa_sigma))

    def fusion_config(self, bounds: Rectangle | None = None) -> FusionConfig:
        return FusionConfig(
            error_range=math.radians(self.error_range),
            likelihood_threshold=self.likelihood_threshold,
            packets_to_integrate=self.packets,
            omega0=self.omega0,
            bounds=bounds,
        )


@dataclass
class TrialRecord:
    trial: int
    node_count: int
    stage: str
    true_position: tuple[float, float]
    estimate: tuple[float, float]
    error: float
    likelihood: float = float("nan")
    flags: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "trial": self.trial,
            "node_count": self.node_count,
            "stage": self.stage,
            "true_x": self.true_position[0],
            "true_y": self.true_position[1],
            "est_x": self.estimate[0],
            "est_y": self.estimate[1],
            "error": self.error,
            "likelihood": self.likelihood,
            "flags": ";".join(self.flags),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrialRecord":
        def num(v):
            return float("nan") if v in (None, "") else float(v)

        flags = d.get("flags") or ""
        if isinstance(flags, str):
            flags = tuple(f for f in flags.split(";") if f)
        return cls(int(d["trial"]), int(d["node_count"]), str(d["stage"]), (num(d["true_x"]), num(d["true_y"])),
                   (num(d["est_x"]), num(d["est_y"])), num(d["error"]), num(d.get("likelihood")), tuple(flags))


def _record(trial, node_count, stage, truth, estimate, likelihood=float("nan"), flags=()):
    truth = (float(truth[0]), float(truth[1]))
    if estimate is None:
        return TrialRecord(trial, node_count, stage, truth, (float("nan"),) * 2, float("inf"), likelihood,
                           tuple(flags) + ("failed",))
    est = (float(estimate[0]), float(estimate[1]))
    return TrialRecord(trial, node_count, stage, truth, est, math.dist(truth, est), float(likelihood), tuple(flags))


def trial_rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, keys)]))


# --------------------------------------------------------------------------
# observation generation


def abstract_families(target, poses, array: ArrayConfig, error_model: AoaErrorModel, rng):
    """One perturbed grating family per node (errors drawn directly)."""
    out = []
    for pose in poses:
        theta = observed_local_angle(target, pose) + float(error_model.sample(rng))
        out.append(grating_lobe_family(float(np.clip(theta, -np.pi / 2, np.pi / 2)), array))
    return out


def csi_families(scene, target_index, config: ExperimentConfig, rng):
    """Synthesize CSI per node, run MUSIC and pick one family per node."""
    per_node = []
    for node, links in zip(scene.nodes, scene.paths[target_index]):
        frame = synthesize_csi(links, node.array, snr_db=config.snr_db, seed=rng)
        profile = estimate_profile(frame, node.array, error_range=math.radians(config.error_range))
        try:
            per_node.append(profile_peaks_with_ambiguity(profile, node.array))
        except ValueError:
            per_node.append([])
    return nlos_policy(per_node, config.nlos_policy, scene.poses, scene.space_bounds, math.radians(config.error_range))


def packet_rssi(target, scene, rng) -> np.ndarray:
    dist = [math.dist(target, n.pose.position) for n in scene.nodes]
    return np.array([synthesize_rssi(d, n.rssi_model, rng) for d, n in zip(dist, scene.nodes)])


# --------------------------------------------------------------------------
# four-stage target pipeline


def _stage_trial(args) -> list[TrialRecord]:
    config, node_count, trial = args
    rng = trial_rng(config.seed, _STAGE_STREAM, node_count, trial)
    profile = MultipathProfile(path_count=config.reflections if config.mode == "csi" else 0,
                               nlos_probability=config.nlos_probability if config.mode == "csi" else 0.0)
    scene = build_scene(Rectangle.of_size(*config.space), node_count, profile, seed=rng,
                        gamma_range=config.gamma_range, reference_power=config.reference_power,
                        shadowing_sigma=config.shadowing_sigma)
    target = scene.targets[0]
    poses, models, array = scene.poses, scene.models, scene.nodes[0].array
    fc = config.fusion_config(scene.space_bounds)
    stages = set(config.stages)
    n_packets = config.packets if stages & {"c", "d"} else 1
    err_model = config.error_model

    first = {}
    b_results, d_results = [], []
    for p in range(n_packets):
        if config.mode == "abstract":
            families = abstract_families(target, poses, array, err_model, rng)
        else:
            families = csi_families(scene, 0, config, rng)
        rssi = packet_rssi(target, scene, rng)
        try:
            if p == 0 and "a" in stages:
                est = localize_packet(families, poses, None, None, fc, use_likelihood=False)
                first["a"] = (est.centroid, float("nan"), est.flags)
            est = localize_packet(families, poses, rssi, models, fc)
        except (NoCandidates, AmbiguityUnresolved):
            continue
        if p == 0:
            first["b"] = (est.centroid, est.likelihood, est.flags)
        b_results.append((est.centroid, est.likelihood))
        if "d" in stages:
            active = [i for i, f in enumerate(families) if f is not None]
            fine = pinpoint(est.cluster(), rssi[active], [models[i] for i in active], fc)
            d_results.append((fine, est.likelihood))

    records = []
    threshold = fc.threshold(node_count)
    for stage in STAGES:
        if stage not in stages:
            continue
        if stage in ("a", "b"):
            if stage in first:
                pos, lik, flags = first[stage]
                records.append(_record(trial, node_count, stage, target, pos, lik, flags))
            else:
                records.append(_record(trial, node_count, stage, target, None))
            continue
        results = b_results if stage == "c" else d_results
        if not results:
            records.append(_record(trial, node_count, stage, target, None))
            continue
        merged = integrate_packets(results, threshold)
        flags = ("low-confidence",) if merged.low_confidence else ()
        lik = float(np.nanmax([r[1] for r in results]))
        records.append(_record(trial, node_count, stage, target, merged.position, lik, flags))
    return records


def _map(func, items, workers: int):
    if workers <= 1:
        return [func(it) for it in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(func, items, chunksize=max(1, len(items) // (4 * workers))))


def run_stage_simulation(config: ExperimentConfig) -> list[TrialRecord]:
    """Run every (node count, trial) of the four-stage pipeline.

    Stage ``a`` ranks candidate clusters by angular residual only, ``b`` adds
    the RSSI likelihood, ``c`` integrates ``packets`` packets and ``d`` runs
    the fine likelihood search on each packet before integrating. Stages
    ``a`` and ``b`` use the first packet of each trial.
    """
    items = [(config, n, t) for n in config.node_counts for t in range(config.trials)]
    records = [r for batch in _map(_stage_trial, items, config.workers) for r in batch]
    order = {s: k for k, s in enumerate(STAGES)}
    records.sort(key=lambda r: (r.node_count, order[r.stage], r.trial))
    return records


# --------------------------------------------------------------------------
# self-localization benchmark


@dataclass
class SelflocRecord:
    trial: int
    join: int  # 0 for the initial network
    node_count: int
    algorithm: str  # "bts", "isu", or for targets "anchor-target" / "bts-target"
    mean_error: float
    max_error: float
    flags: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["flags"] = ";".join(self.flags)
        return d


def mutual_observations(positions, headings, models, rng, error_model: AoaErrorModel | None = None,
                        array: ArrayConfig | None = None, packets: int = 1) -> list[MutualObservation]:
    """Every node observes every other: one lobe family and one RSSI each.

    ``models[j]`` gives node ``j``'s transmit parameters, so the RSSI that
    node ``i`` records from ``j`` follows ``j``'s path-loss law. With
    ``packets > 1`` each link is measured that many times with fresh noise
    and the local angles and RSSI values are averaged.
    """
    if packets < 1:
        raise ValueError("packets must be >= 1")
    array = array or ArrayConfig()
    err = error_model
    out = []
    n = len(positions)
    for i in range(n):
        pose = NodePose(tuple(positions[i]), headings[i])
        for j in range(n):
            if i == j:
                continue
            theta = observed_local_angle(positions[j], pose)
            if err is not None:
                theta = float(np.mean(np.clip(theta + err.sample(rng, packets), -np.pi / 2, np.pi / 2)))
            rssi = float(np.mean(synthesize_rssi(np.full(packets, math.dist(positions[i], positions[j])), models[j], rng)))
            out.append(MutualObservation(i, j, [grating_lobe_family(theta, array)], rssi))
    return out


def _subset(observations, count):
    return [o for o in observations if o.observer < count and o.emitter < count]


def _selfloc_trial(args) -> list[SelflocRecord]:
    config, trial = args
    rng = trial_rng(config.seed, _SELFLOC_STREAM, trial)
    total = config.initial_nodes + config.joins
    space = Rectangle.of_size(*config.selfloc_space)
    truth = space.sample(rng, total)
    headings = rng.uniform(-np.pi, np.pi, total)
    gammas = rng.uniform(*config.gamma_range, total)
    ref = np.full(total, config.reference_power)
    models = [RssiModel(config.reference_power, g, config.selfloc_shadowing) for g in gammas]
    link_model = config.link_error_model
    obs = mutual_observations(truth, headings, models, rng, link_model, packets=config.selfloc_packets)
    true_headings = headings
    if config.heading_error > 0:
        # the algorithms only see the self-reported headings
        noise = trial_rng(config.seed, _SELFLOC_STREAM, trial, 1).normal(0.0, math.radians(config.heading_error), total)
        headings = headings + noise

    # noise of one averaged link measurement, used as BTS weights
    sigma = link_model.scale if link_model is not None else 0.0
    link_sigma = max(sigma, 1e-3) / math.sqrt(config.selfloc_packets)
    link_rssi = max(config.selfloc_shadowing, 0.1) / math.sqrt(config.selfloc_packets)
    records = []
    n0 = config.initial_nodes
    try:
        bts = bts_update(_subset(obs, n0), headings[:n0], ref[:n0], n0, aoa_sigma=link_sigma, rssi_sigma=link_rssi)
    except (DegenerateGeometryError, ScaleUnbounded, ValueError):
        return [SelflocRecord(trial, 0, n0, alg, float("inf"), float("inf"), ("failed",)) for alg in ("bts", "isu")]
    e0 = aligned_errors(bts.coordinates, truth[:n0])
    for alg in ("bts", "isu"):
        records.append(SelflocRecord(trial, 0, n0, alg, float(e0.mean()), float(e0.max())))
    bts_xy = bts.coordinates
    isu_xy, isu_gamma = bts.coordinates.copy(), list(bts.scale.gamma)
    bts_gamma = np.asarray(bts.scale.gamma)
    for join in range(1, config.joins + 1):
        k = n0 + join - 1  # index of the joining node
        sub = _subset(obs, k + 1)
        new_obs = [o for o in sub if k in (o.observer, o.emitter)]
        flags = ()
        try:
            isu = isu_update(isu_xy, new_obs, headings[:k + 1], ref[:k + 1], isu_gamma)
            isu_xy = isu.coordinates
            isu_gamma.append(isu.gamma_new)
        except (NoCandidates, AmbiguityUnresolved, DegenerateGeometryError, ValueError):
            isu_xy = np.vstack([isu_xy, isu_xy.mean(axis=0)])
            isu_gamma.append(float(np.mean(config.gamma_range)))
            flags = ("isu-failed",)
        try:
            fresh = bts_update(sub, headings[:k + 1], ref[:k + 1], k + 1, aoa_sigma=link_sigma, rssi_sigma=link_rssi)
            bts_xy, bts_gamma = fresh.coordinates, np.asarray(fresh.scale.gamma)
            bts_flags = ()
        except (DegenerateGeometryError, ScaleUnbounded, ValueError):
            # keep the previous solution and append the ISU estimate of the newcomer
            bts_xy = np.vstack([bts_xy, isu_xy[-1]])
            bts_gamma = np.append(bts_gamma, isu_gamma[-1])
            bts_flags = ("bts-failed",)
        eb = aligned_errors(bts_xy, truth[:k + 1])
        ei = aligned_errors(isu_xy, truth[:k + 1])
        records.append(SelflocRecord(trial, join, k + 1, "bts", float(eb.mean()), float(eb.max()), bts_flags))
        records.append(SelflocRecord(trial, join, k + 1, "isu", float(ei.mean()), float(ei.max()), flags))

    if config.end_to_end:
        records.extend(_end_to_end(config, trial, truth, true_headings, headings, models, bts_xy,
                                   bts_gamma, rng))
    return records


def _end_to_end(config, trial, truth, true_headings, headings, models, bts_xy, bts_gamma, rng):
    """Localize one target with true node positions and with BTS positions.

    Both runs consume the same packets. Observations are generated with the
    true headings; localization uses the reported ones.
    """
    n = len(truth)
    space = Rectangle.of_size(*config.selfloc_space)
    while True:
        target = space.sample(rng)
        if min(math.dist(target, p) for p in truth) >= 0.5:
            break
    err = config.link_error_model or AoaErrorModel(0.0)
    array = ArrayConfig()
    true_poses = [NodePose(tuple(p), h) for p, h in zip(truth, true_headings)]
    # the BTS frame is aligned to the true one only for scoring
    _, rot, trans = align_rigid(bts_xy, truth)
    est_models = [RssiModel(m.reference_power, float(np.clip(g, 1.0, 6.0))) for m, g in zip(models, bts_gamma)]
    frames = {
        "anchor-target": (np.asarray(truth), list(models)),
        "bts-target": (np.asarray(bts_xy), est_models),
    }
    packets = []
    for _ in range(config.packets):
        families = abstract_families(target, true_poses, array, err, rng)
        rssi = np.array([synthesize_rssi(math.dist(target, p), m, rng) for p, m in zip(truth, models)])
        packets.append((families, rssi))
    out = []
    for name, (xy, mods) in frames.items():
        poses = [NodePose(tuple(p), h) for p, h in zip(xy, headings)]
        lo, hi = xy.min(axis=0), xy.max(axis=0)
        pad = max(float(np.hypot(*(hi - lo))) / 2, 1.0)
        fc = FusionConfig(error_range=math.radians(config.error_range), omega0=config.omega0,
                          likelihood_threshold=config.likelihood_threshold,
                          bounds=Rectangle(lo[0] - pad, lo[1] - pad, hi[0] + pad, hi[1] + pad))
        results = []
        for families, rssi in packets:
            try:
                est = localize_packet(families, poses, rssi, mods, fc)
            except (NoCandidates, AmbiguityUnresolved, DegenerateGeometryError):
                continue
            results.append((pinpoint(est.cluster(), rssi, mods, fc), est.likelihood))
        if not results:
            out.append(SelflocRecord(trial, config.joins, n, name, float("inf"), float("inf"), ("failed",)))
            continue
        pos = integrate_packets(results, fc.threshold(n)).position
        if name == "bts-target":
            pos = pos @ rot.T + trans
        e = math.dist(pos, target)
        out.append(SelflocRecord(trial, config.joins, n, name, e, e))
    return out


def heading_sensitivity(config: ExperimentConfig, heading_errors=(0.0, 1.0, 2.0, 5.0)) -> dict[float, dict]:
    """Self-localization summary for a range of heading-report errors (degrees)."""
    return {float(h): summarize_selfloc(run_selfloc_benchmark(config.replace(heading_error=float(h))))
            for h in heading_errors}


def run_selfloc_benchmark(config: ExperimentConfig) -> list[SelflocRecord]:
    """Sequential joins compared between BTS and ISU, plus the end-to-end target check.

    Each trial starts from ``initial_nodes`` nodes solved by BTS, then adds
    ``joins`` nodes one at a time. After every join BTS re-solves all nodes
    while ISU only places the newcomer. Errors are measured after optimal
    rotation and translation onto the true layout.
    """
    items = [(config, t) for t in range(config.trials)]
    records = [r for batch in _map(_selfloc_trial, items, config.workers) for r in batch]
    records.sort(key=lambda r: (r.trial, r.join, r.algorithm))
    return records


# --------------------------------------------------------------------------
# reports


def error_cdf(errors) -> list[tuple[float, float]]:
    """Error quantiles at 1% steps; failures count as infinitely large errors."""
    e = np.asarray(errors, dtype=float)
    e = np.where(np.isnan(e), np.inf, e)
    if len(e) == 0:
        raise ValueError("no errors")
    q = np.quantile(e, QUANTILES, method="inverted_cdf")
    return [(float(p), float(v)) for p, v in zip(QUANTILES, q)]


def summarize(records) -> dict:
    """Median, 90th percentile and counts per stage and node count."""
    groups: dict[tuple[str, int], list[float]] = {}
    for r in records:
        groups.setdefault((r.stage, r.node_count), []).append(r.error)
    out: dict[str, dict[str, dict]] = {}
    for (stage, n), errs in sorted(groups.items()):
        e = np.where(np.isnan(errs), np.inf, np.asarray(errs, dtype=float))
        out.setdefault(stage, {})[str(n)] = {
            "trials": int(len(e)),
            "median": float(np.median(e)),
            "p90": float(np.quantile(e, 0.9, method="inverted_cdf")),
            "failures": int(np.sum(~np.isfinite(e))),
            "median_ci95": _median_ci(e),
        }
    return out


def _median_ci(errors) -> list[float]:
    """Distribution-free 95% interval of the median from order statistics."""
    e = np.sort(errors)
    n = len(e)
    half = 1.96 * math.sqrt(n) / 2
    lo, hi = max(int(math.floor(n / 2 - half)), 0), min(int(math.ceil(n / 2 + half)), n - 1)
    return [float(e[lo]), float(e[hi])]


def emit_reports(records, output_dir) -> dict[str, Path]:
    """Write raw CSV per stage, CDF tables, a summary JSON and a JSON-lines log."""
    records = list(records)
    if not records:
        raise ValueError("no records to report")
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = {}
    fields = list(records[0].to_dict())
    for stage in sorted({r.stage for r in records}):
        path = out / f"trials_stage_{stage}.csv"
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=fields)
            w.writeheader()
            for r in records:
                if r.stage == stage:
                    w.writerow(r.to_dict())
        written[f"trials_{stage}"] = path
        cdf_path = out / f"cdf_stage_{stage}.csv"
        counts = sorted({r.node_count for r in records if r.stage == stage})
        tables = {n: error_cdf([r.error for r in records if r.stage == stage and r.node_count == n]) for n in counts}
        with open(cdf_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["quantile"] + [f"error_{n}_nodes" for n in counts])
            for k, q in enumerate(QUANTILES):
                w.writerow([f"{q:.2f}"] + [repr(tables[n][k][1]) for n in counts])
        written[f"cdf_{stage}"] = cdf_path
    summary_path = out / "summary.json"
    summary_path.write_text(json.dumps(to_jsonable(summarize(records)), indent=2, sort_keys=True), encoding="utf-8")
    written["summary"] = summary_path
    log_path = out / "trials.jsonl"
    write_jsonl([r.to_dict() for r in records], log_path)
    written["log"] = log_path
    return written


def load_records(path) -> list[TrialRecord]:
    """Read a JSON-lines trial log or a per-stage CSV back into records."""
    path = Path(path)
    if path.suffix == ".jsonl":
        return [TrialRecord.from_dict(d) for d in read_jsonl(path)]
    with open(path, newline="", encoding="utf-8") as fh:
        return [TrialRecord.from_dict(d) for d in csv.DictReader(fh)]


def _finite_mean(values) -> float:
    v = np.asarray(values, dtype=float)
    v = v[np.isfinite(v)]
    return float(np.mean(v)) if len(v) else math.nan


def summarize_selfloc(records) -> dict:
    """Per-algorithm error statistics.

    Means skip failed (infinite) records, which are counted under
    ``failures``; medians include them.
    """
    out: dict[str, dict] = {}
    for alg in sorted({r.algorithm for r in records}):
        rows = [r for r in records if r.algorithm == alg]
        e = np.array([r.mean_error for r in rows])
        per_join = {}
        for j in sorted({r.join for r in rows}):
            ej = np.array([r.mean_error for r in rows if r.join == j])
            per_join[str(j)] = {"mean": _finite_mean(ej), "median": float(np.median(ej))}
        out[alg] = {
            "records": len(rows),
            "mean": _finite_mean(e),
            "median": float(np.median(e)),
            "failures": int(sum("failed" in "".join(r.flags) for r in rows)),
            "per_join": per_join,
        }
    return out


def emit_selfloc_reports(records, output_dir) -> dict[str, Path]:
    records = list(records)
    if not records:
        raise ValueError("no records to report")
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "selfloc.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(records[0].to_dict()))
        w.writeheader()
        for r in records:
            w.writerow(r.to_dict())
    summary_path = out / "selfloc_summary.json"
    summary_path.write_text(json.dumps(to_jsonable(summarize_selfloc(records)), indent=2, sort_keys=True), encoding="utf-8")
    log_path = out / "selfloc.jsonl"
    write_jsonl([r.to_dict() for r in records], log_path)
    return {"csv": csv_path, "summary": summary_path, "log": log_path}
