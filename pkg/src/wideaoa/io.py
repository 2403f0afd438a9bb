"""File formats: scenes, CSI frames, AOA profiles, result logs and topologies.

Every JSON document carries a ``format`` tag and an integer ``version``.
CSV files are UTF-8, comma separated, with a header row.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from .array_model import ArrayConfig, NodePose
from .channel_sim import CsiFrame, NetworkScene, PropagationPath, Rectangle, RssiModel, SceneNode

SCENE_FORMAT = "wideaoa-scene"
TOPOLOGY_FORMAT = "wideaoa-topology"
PROFILE_FORMAT = "wideaoa-aoa-summary"
VERSION = 1


def _check_header(doc: dict, fmt: str):
    if doc.get("format") != fmt:
        raise ValueError(f"expected a {fmt!r} document, got {doc.get('format')!r}")
    if doc.get("version") != VERSION:
        raise ValueError(f"unsupported {fmt} version {doc.get('version')!r}")


def _complex_pair(z) -> list[float]:
    return [float(np.real(z)), float(np.imag(z))]


# --------------------------------------------------------------------------
# scenes


def scene_to_dict(scene: NetworkScene) -> dict:
    nodes = []
    for n in scene.nodes:
        a, m = n.array, n.rssi_model
        nodes.append({
            "position": list(n.pose.position),
            "heading": n.pose.heading,
            "array": {
                "antenna_count": a.antenna_count,
                "spacing": a.spacing,
                "carrier_frequency": a.carrier_frequency,
                "subcarrier_spacing": a.subcarrier_spacing,
                "subcarrier_count": a.subcarrier_count,
            },
            "rssi_model": {
                "reference_power": m.reference_power,
                "path_loss_exponent": m.path_loss_exponent,
                "shadowing_sigma": m.shadowing_sigma,
            },
        })
    paths = [
        [
            [{"aoa": p.aoa, "tof": p.tof, "attenuation": _complex_pair(p.attenuation), "is_direct": p.is_direct}
             for p in link]
            for link in per_target
        ]
        for per_target in scene.paths
    ]
    b = scene.space_bounds
    return {
        "format": SCENE_FORMAT,
        "version": VERSION,
        "space_bounds": [b.xmin, b.ymin, b.xmax, b.ymax],
        "seed": None if scene.rng_seed is None else int(scene.rng_seed),
        "nodes": nodes,
        "targets": [list(t) for t in scene.targets],
        "paths": paths,
    }


def scene_from_dict(doc: dict) -> NetworkScene:
    _check_header(doc, SCENE_FORMAT)
    nodes = [
        SceneNode(NodePose(tuple(n["position"]), n["heading"]), ArrayConfig(**n["array"]), RssiModel(**n["rssi_model"]))
        for n in doc["nodes"]
    ]
    paths = [
        [
            [PropagationPath(p["aoa"], p["tof"], complex(*p["attenuation"]), bool(p["is_direct"])) for p in link]
            for link in per_target
        ]
        for per_target in doc.get("paths", [])
    ]
    return NetworkScene(nodes, [tuple(t) for t in doc["targets"]], Rectangle(*doc["space_bounds"]), doc.get("seed"), paths)


def save_scene(scene: NetworkScene, path):
    Path(path).write_text(json.dumps(scene_to_dict(scene), indent=2), encoding="utf-8")


def load_scene(path) -> NetworkScene:
    return scene_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# --------------------------------------------------------------------------
# CSI frames


def write_csi_csv(frame: CsiFrame, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["antenna", "subcarrier", "re", "im"])
        for (m, n), z in np.ndenumerate(frame.matrix):
            w.writerow([m, n, repr(float(z.real)), repr(float(z.imag))])


def read_csi_csv(path) -> CsiFrame:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            rows.append((int(row["antenna"]), int(row["subcarrier"]), float(row["re"]), float(row["im"])))
    if not rows:
        raise ValueError("empty CSI file")
    m_count = 1 + max(r[0] for r in rows)
    n_count = 1 + max(r[1] for r in rows)
    x = np.full((m_count, n_count), np.nan, dtype=complex)
    for m, n, re, im in rows:
        x[m, n] = complex(re, im)
    return CsiFrame(x)


# --------------------------------------------------------------------------
# AOA profiles


def write_profile_csv(profile, path):
    """Long-format spectrum: one row per (angle, tof) grid cell."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["angle_deg", "tof_ns", "power"])
        for i, a in enumerate(profile.angle_grid):
            for j, t in enumerate(profile.tof_grid):
                w.writerow([f"{math.degrees(a):.6g}", f"{t * 1e9:.6g}", f"{profile.spectrum[i, j]:.9g}"])


def profile_summary(families, error_range: float) -> dict:
    """Compact record a node can send instead of raw CSI: its lobe families."""
    return {
        "format": PROFILE_FORMAT,
        "version": VERSION,
        "error_range_deg": math.degrees(error_range),
        "families": [
            {"angles_deg": [math.degrees(a) for a in f.angles], "power": float(f.power), "tof_ns": float(f.tof) * 1e9}
            for f in families
        ],
    }


# --------------------------------------------------------------------------
# JSON lines


def to_jsonable(value):
    """Lists, plain Python scalars and ``None`` for non-finite floats."""
    if isinstance(value, dict):
        return {k: to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return to_jsonable(value.tolist())
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def write_jsonl(records, path):
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(to_jsonable(r), sort_keys=True) + "\n")


def read_jsonl(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def localization_record(estimate, likelihood: float | None = None, residual: float | None = None, flags=()) -> dict:
    """One localization result as a JSON-ready dict."""
    return to_jsonable({
        "position": np.asarray(estimate, dtype=float).tolist(),
        "likelihood": likelihood,
        "max_residual_deg": None if residual is None else math.degrees(residual),
        "flags": list(flags),
    })


# --------------------------------------------------------------------------
# self-localization topology


def topology_to_dict(result, observations=()) -> dict:
    """Solved network (a ``BtsResult``) plus, optionally, its observation log."""
    topo, scale = result.topology, result.scale
    n = topo.node_count
    ratios = topo.ratios
    return to_jsonable({
        "format": TOPOLOGY_FORMAT,
        "version": VERSION,
        "node_count": n,
        "bearings": [{"from": i, "to": j, "bearing": b} for (i, j), b in sorted(result.bearings.items())],
        "ratios": [[float(ratios[i, j]) for j in range(n)] for i in range(n)],
        "d_12": scale.d_12,
        "gamma": np.asarray(scale.gamma).tolist(),
        "scale_residual": scale.residual,
        "bearing_rms_residual": topo.rms_residual,
        "coordinates": np.asarray(result.coordinates).tolist(),
        "observations": [
            {"observer": o.observer, "emitter": o.emitter, "aoa_families": [list(f) for f in o.aoa_families], "rssi": o.rssi}
            for o in observations
        ],
    })


def save_topology(result, path, observations=()):
    Path(path).write_text(json.dumps(topology_to_dict(result, observations), indent=2), encoding="utf-8")


def load_topology(path) -> dict:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    _check_header(doc, TOPOLOGY_FORMAT)
    return doc
