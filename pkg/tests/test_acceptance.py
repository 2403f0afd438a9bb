"""End-to-end acceptance checks.

Each test records a one-line verdict (shown in the "acceptance criteria"
section of the pytest summary) and then asserts it. Thresholds and trial
counts are the contract values; none of them is tuned to make a check pass.
"""

import math
import subprocess
import sys
import time

import numpy as np
import pytest

from wideaoa.array_model import ArrayConfig, NodePose, grating_lobe_family, lobe_width, observed_local_angle
from wideaoa.channel_sim import PropagationPath, synthesize_csi
from wideaoa.experiments import ExperimentConfig, run_selfloc_benchmark, run_stage_simulation, summarize
from wideaoa.music import beamformer_spectrum, build_smoothed_matrix, estimate_profile, profile_peaks_with_ambiguity
from wideaoa.selfloc import MutualObservation, TopologyGraph, bts_update, solve_scale

from oracles import grating_family_by_scan, procrustes_error

WIDE = ArrayConfig()
HALF = ArrayConfig.from_wavelength(WIDE.wavelength)


def timed(func):
    start = time.perf_counter()
    out = func()
    return out, time.perf_counter() - start


def medians(records, stage):
    return {int(n): v["median"] for n, v in summarize(records)[stage].items()}


# --------------------------------------------------------------------------


def test_c01_smoothed_matrix_shape_and_rank(criterion):
    def run():
        rng = np.random.default_rng(1)
        shapes, ranks = [], []
        angles = np.radians([-60.0, -25.0, 5.0, 35.0, 70.0])
        tofs = np.array([10.0, 45.0, 80.0, 120.0, 160.0]) * 1e-9
        for count in range(1, 6):
            paths = [PropagationPath(a, t, complex(np.exp(1j * rng.uniform(0, 2 * np.pi))))
                     for a, t in zip(angles[:count], tofs[:count])]
            csi = synthesize_csi(paths, WIDE)
            assert csi.matrix.shape == (2, 56)
            sm = build_smoothed_matrix(csi).matrix
            shapes.append(sm.shape)
            s = np.linalg.svd(sm, compute_uv=False)
            ranks.append(int(np.sum(s > 1e-9 * s[0])))
        return shapes, ranks

    (shapes, ranks), elapsed = timed(run)
    ok = all(s == (38, 38) for s in shapes) and ranks == [1, 2, 3, 4, 5] and elapsed < 1.0
    criterion(1, ok, f"shapes {sorted(set(shapes))}, ranks {ranks} for L=1..5, {elapsed:.2f} s (limit 1 s)")
    assert ok


def test_c02_beam_width_ratio(criterion):
    def run():
        grid = np.linspace(-np.pi / 2, np.pi / 2, 18001)
        widths = []
        for cfg in (WIDE, HALF):
            csi = synthesize_csi([PropagationPath(0.0, 20e-9)], cfg)
            widths.append(lobe_width(grid, beamformer_spectrum(csi, grid, cfg), 0.0))
        return widths

    (wide, half), elapsed = timed(run)
    ratio = wide / half
    ok = 0.15 <= ratio <= 0.35 and elapsed < 10.0
    criterion(2, ok, f"-3 dB width {math.degrees(wide):.2f} deg vs {math.degrees(half):.2f} deg, "
                     f"ratio {ratio:.3f} (band [0.15, 0.35]), {elapsed:.2f} s")
    assert ok


def test_c03_grating_family_matches_scan(criterion):
    def run():
        rng = np.random.default_rng(2024)
        worst, count_mismatch = 0.0, 0
        for _ in range(50):
            theta = rng.uniform(-89.0, 89.0)
            spacing = rng.uniform(0.0625, 0.5)
            cfg = ArrayConfig.from_wavelength(0.125, spacing=spacing)
            fam = np.degrees(grating_lobe_family(math.radians(theta), cfg))
            oracle = np.array(grating_family_by_scan(theta, spacing, 0.125))
            if len(fam) != len(oracle):
                count_mismatch += 1
                continue
            worst = max(worst, float(np.max(np.abs(fam - oracle))))
        return worst, count_mismatch

    (worst, mismatch), elapsed = timed(run)
    ok = mismatch == 0 and worst <= 0.02 and elapsed < 30.0
    criterion(3, ok, f"max discrepancy {worst:.4f} deg over 50 configs, {mismatch} size mismatches, {elapsed:.1f} s")
    assert ok


def test_c04_music_median_error(criterion):
    def run():
        rng = np.random.default_rng(4)
        errors = []
        for trial in range(500):
            truth = rng.uniform(-math.radians(60), math.radians(60))
            tof = rng.uniform(10e-9, 100e-9)
            csi = synthesize_csi([PropagationPath(truth, tof)], WIDE, snr_db=20.0, seed=trial)
            fams = profile_peaks_with_ambiguity(estimate_profile(csi, WIDE), WIDE)
            # a grating family pins the angle only up to its aliases
            errors.append(min(abs(a - truth) for a in fams[0].angles))
        return math.degrees(float(np.median(errors)))

    med, elapsed = timed(run)
    ok = med <= 2.25 + 1.0 and elapsed < 300.0
    criterion(4, ok, f"median error {med:.3f} deg over 500 trials (limit 3.25 deg), {elapsed:.1f} s")
    assert ok


def test_c05_stage_a_node_gain(criterion):
    config = ExperimentConfig(trials=2000, node_counts=[2, 5], stages=["a"], seed=0)
    records, elapsed = timed(lambda: run_stage_simulation(config))
    med = medians(records, "a")
    gap = med[2] - med[5]
    ok = 6.0 <= gap <= 12.0 and elapsed < 120.0
    criterion(5, ok, f"stage a median 2 nodes {med[2]:.2f} m, 5 nodes {med[5]:.2f} m, gap {gap:.2f} m "
                     f"(band [6, 12]), {elapsed:.1f} s")
    assert ok


def test_c06_packet_integration_gain(criterion):
    config = ExperimentConfig(trials=2000, node_counts=[2, 3], stages=["b", "c"], seed=0)
    records, elapsed = timed(lambda: run_stage_simulation(config))
    b, c = medians(records, "b"), medians(records, "c")
    gains = {n: b[n] - c[n] for n in (2, 3)}
    ok = all(g > 2.0 for g in gains.values()) and elapsed < 300.0
    criterion(6, ok, f"stage b -> c median reduction 2 nodes {gains[2]:.2f} m, 3 nodes {gains[3]:.2f} m "
                     f"(need > 2 m), {elapsed:.1f} s")
    assert ok


def test_c07_fine_search_gain(criterion):
    config = ExperimentConfig(trials=2000, node_counts=[5], stages=["c", "d"], seed=0)
    records, elapsed = timed(lambda: run_stage_simulation(config))
    c, d = medians(records, "c")[5], medians(records, "d")[5]
    ok = c - d >= 0.05 and elapsed < 300.0
    criterion(7, ok, f"5-node median stage c {c:.3f} m, stage d {d:.3f} m, gain {c - d:.3f} m "
                     f"(need >= 0.05 m), {elapsed:.1f} s")
    assert ok


def test_c08_likelihood_anchors(criterion):
    config = ExperimentConfig(trials=2000, node_counts=[3], stages=["b"], seed=0)
    records, elapsed = timed(lambda: run_stage_simulation(config))
    err = np.array([r.error for r in records])
    lik = np.array([r.likelihood for r in records])
    good, bad = err < 1.0, (err > 10.0) & np.isfinite(err)
    frac_good = float(np.mean(lik[good] > 20)) if good.any() else math.nan
    frac_bad = float(np.mean(lik[bad] < 1)) if bad.any() else math.nan
    ok = frac_good >= 0.8 and frac_bad >= 0.8 and elapsed < 120.0
    criterion(8, ok, f"error<1 m: {frac_good:.1%} of {good.sum()} have likelihood>20; "
                     f"error>10 m: {frac_bad:.1%} of {bad.sum()} have likelihood<1 (need 80% each), {elapsed:.1f} s")
    assert ok


def test_c09_self_localization_round_trip(criterion):
    def run():
        rng = np.random.default_rng(9)
        pos = np.array([[0.0, 0.0], [6.0, 1.0], [2.5, 7.0], [8.0, 6.5]]) + rng.uniform(-0.5, 0.5, (4, 2))
        heads = rng.uniform(-np.pi, np.pi, 4)
        gammas = rng.uniform(2, 4, 4)
        obs = []
        for i in range(4):
            for j in range(4):
                if i != j:
                    theta = observed_local_angle(pos[j], NodePose(tuple(pos[i]), heads[i]))
                    rssi = -40 - 10 * gammas[j] * math.log10(math.dist(pos[i], pos[j]))
                    obs.append(MutualObservation(i, j, [grating_lobe_family(theta, WIDE)], rssi))
        res = bts_update(obs, heads, [-40.0] * 4)
        geo = procrustes_error(res.coordinates, pos)

        d12 = 7.0
        unit = np.array([[0.0, 0.0], [1.0, 0.0], [0.3, 0.9], [1.2, 1.1]])
        r = np.full((4, 4), np.nan)
        for i in range(4):
            for j in range(4):
                if i != j:
                    r[i, j] = -40 - 10 * 2.5 * math.log10(d12 * math.dist(unit[i], unit[j]))
        sol = solve_scale(TopologyGraph({}, unit), r, [-40.0] * 4)
        return geo, abs(sol.d_12 - d12)

    (geo, scale_err), elapsed = timed(run)
    ok = geo < 1e-6 and scale_err < 1e-3 and elapsed < 10.0
    criterion(9, ok, f"BTS aligned error {geo:.2e} m (limit 1e-6), d_12 error {scale_err:.2e} m (limit 1e-3), "
                     f"{elapsed:.2f} s")
    assert ok


def test_c10_bts_beats_isu(criterion):
    config = ExperimentConfig(trials=500, seed=0, end_to_end=False)
    records, elapsed = timed(lambda: run_selfloc_benchmark(config))
    by_key = {(r.trial, r.join, r.algorithm): r for r in records if r.join > 0}
    pairs = [(by_key[(t, j, "bts")].mean_error, by_key[(t, j, "isu")].mean_error)
             for (t, j, alg) in by_key if alg == "bts"]
    pairs = np.array([p for p in pairs if all(math.isfinite(v) for v in p)])
    bts, isu = pairs.mean(axis=0)
    trials_failed = sum(1 for r in records if r.join == 0 and "failed" in r.flags) // 2
    ok = bts < isu and elapsed < 300.0
    criterion(10, ok, f"mean node error over {len(pairs)} joins: BTS {bts:.2f} m, ISU {isu:.2f} m "
                      f"({trials_failed} trials with unsolvable initial network), {elapsed:.1f} s")
    assert ok


def test_c11_end_to_end_ratio(criterion):
    # node links and the target share one noise model and packet count
    config = ExperimentConfig(trials=200, seed=0, selfloc_aoa_sigma=None, selfloc_packets=10, end_to_end=True)
    records, elapsed = timed(lambda: run_selfloc_benchmark(config))
    anchor = np.array([r.mean_error for r in records if r.algorithm == "anchor-target"])
    bts = np.array([r.mean_error for r in records if r.algorithm == "bts-target"])
    ratio = float(np.median(bts) / np.median(anchor))
    ok = ratio <= 2.0 and elapsed < 600.0
    criterion(11, ok, f"median target error with BTS nodes {np.median(bts):.3f} m vs known anchors "
                      f"{np.median(anchor):.3f} m, ratio {ratio:.2f} (limit 2.0), {elapsed:.1f} s")
    assert ok


PROPERTY_TESTS = {
    "unit-magnitude steering": ["tests/test_array_model.py::test_steering_entries_unit_magnitude"],
    "grating family involution": ["tests/test_array_model.py::test_grating_family_involution",
                                  "tests/test_array_model.py::test_grating_family_closed_on_one_degree_grid"],
    "singleton families at narrow spacing": [
        "tests/test_array_model.py::test_grating_family_singleton_below_half_wavelength",
        "tests/test_array_model.py::test_grating_family_singleton_at_half_wavelength_off_endfire"],
    "near-field convergence": ["tests/test_array_model.py::test_nearfield_converges_to_farfield"],
    "rank-one single path": ["tests/test_channel_sim.py::test_noiseless_single_path_is_rank_one"],
    "energy scaling": ["tests/test_channel_sim.py::test_doubling_gains_doubles_frame"],
    "RSSI monotone": ["tests/test_channel_sim.py::test_rssi_strictly_decreasing"],
    "steering in column space": ["tests/test_music.py::test_extended_steering_in_column_space"],
    "beam width ratio": ["tests/test_array_model.py::test_beam_width_ratio_between_spacings"],
    "all columns narrower": ["tests/test_music.py::test_all_columns_narrower_than_one_column"],
    "global phase invariance": ["tests/test_music.py::test_spectrum_invariant_to_global_phase"],
    "translation equivariance": ["tests/test_fusion.py::test_translation_equivariance"],
    "rotation equivariance": ["tests/test_fusion.py::test_rotation_equivariance_aoa_only"],
    "likelihood scaling invariance": ["tests/test_fusion.py::test_selection_invariant_to_likelihood_scaling"],
    "monotone pruning": ["tests/test_fusion.py::test_adding_a_node_never_adds_clusters"],
    "integration permutation invariance": ["tests/test_fusion.py::test_integration_permutation_invariant"],
    "gauge and alignment": ["tests/test_selfloc.py::test_bts_noiseless_four_nodes_exact",
                            "tests/test_selfloc.py::test_rigid_alignment_does_not_rescale",
                            "tests/test_selfloc.py::test_rigid_alignment_recovers_motion"],
    "triangle inequality": ["tests/test_selfloc.py::test_ratios_obey_triangle_inequality"],
    "scale global minimum": ["tests/test_selfloc.py::test_scale_objective_at_solution_beats_truth"],
    "mutual pairing strictly best": ["tests/test_selfloc.py::test_selected_pairing_is_strictly_best"],
    "determinism": ["tests/test_experiments.py::test_stage_simulation_is_deterministic",
                    "tests/test_experiments.py::test_parallel_run_matches_serial",
                    "tests/test_experiments.py::test_trial_seeds_do_not_depend_on_trial_count",
                    "tests/test_experiments.py::test_benchmark_is_deterministic_and_parallel_safe"],
    "stage monotonicity and node count": [
        "tests/test_experiments.py::test_stage_monotone_in_aggregate_and_more_nodes_help"],
    "CDF monotone": ["tests/test_experiments.py::test_error_cdf_is_monotone",
                     "tests/test_experiments.py::test_report_cdf_is_monotone"],
}


def _matching(outcomes, test_id):
    return [v for k, v in outcomes.items() if k == test_id or k.startswith(test_id + "[")]


def test_c12_property_suites(criterion, session_outcomes, request):
    start = time.perf_counter()
    ids = [t for group in PROPERTY_TESTS.values() for t in group]
    missing = [t for t in ids if not _matching(session_outcomes, t)]
    rerun_ok = True
    if missing:
        # the property tests did not run in this session (e.g. this file alone)
        done = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", *missing],
                              cwd=request.config.rootpath, capture_output=True, text=True)
        rerun_ok = done.returncode == 0
    failed = [t for t in ids if t not in missing and any(v != "passed" for v in _matching(session_outcomes, t))]
    ok = not failed and rerun_ok
    elapsed = time.perf_counter() - start
    detail = (f"{len(PROPERTY_TESTS)} invariants, {len(ids)} tests, "
              f"{len(missing)} run separately, failed: {failed or 'none'}{'' if rerun_ok else ' (rerun failed)'}"
              f", {elapsed:.1f} s")
    criterion(12, ok, detail)
    assert ok
