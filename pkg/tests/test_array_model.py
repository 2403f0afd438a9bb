import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from wideaoa.array_model import (
    ArrayConfig,
    DegenerateGeometryError,
    NodePose,
    beam_pattern,
    candidate_bearings,
    grating_lobe_family,
    local_to_global,
    lobe_width,
    mirror_bearing,
    observed_local_angle,
    phase_shift_aoa,
    phase_shift_distance,
    steering_vector_farfield,
    steering_vector_nearfield,
    wrap_angle,
)

from oracles import grating_family_by_scan

WIDE = ArrayConfig.from_wavelength(0.125, spacing=0.26)
HALF = ArrayConfig.from_wavelength(0.125)


# phase shifts

@pytest.mark.parametrize(
    "delta, expected",
    [(0.0, 1 + 0j), (0.125, 1 + 0j), (0.03125, -1j)],
)
def test_phase_shift_distance_values(delta, expected):
    assert phase_shift_distance(delta, 0.125) == pytest.approx(expected, abs=1e-12)


def test_phase_shift_distance_rejects_bad_wavelength():
    with pytest.raises(ValueError):
        phase_shift_distance(0.1, 0.0)


def test_phase_shift_aoa_broadside_and_endfire():
    assert phase_shift_aoa(0.0, WIDE) == pytest.approx(1 + 0j)
    assert phase_shift_aoa(np.pi / 2, HALF) == pytest.approx(-1 + 0j, abs=1e-12)


def test_phase_shift_aoa_aliasing_onset():
    # numeric evaluation of exp(-j 2 pi d sin(theta) / lambda) at sin(theta) = lambda / d
    theta = math.asin(0.125 / 0.26)
    direct = np.exp(-2j * np.pi * 0.26 * math.sin(theta) / 0.125)
    assert phase_shift_aoa(theta, WIDE) == pytest.approx(direct, abs=1e-12)
    assert phase_shift_aoa(theta, WIDE) == pytest.approx(1 + 0j, abs=1e-12)


def test_phase_shift_aoa_rejects_out_of_range():
    with pytest.raises(ValueError):
        phase_shift_aoa(2.0, WIDE)


# steering vectors

def test_farfield_steering_values():
    np.testing.assert_allclose(steering_vector_farfield(0.0, WIDE), [1, 1])
    np.testing.assert_allclose(steering_vector_farfield(np.pi / 6, HALF), [1, -1j], atol=1e-12)
    expected = [1, np.exp(-2j * np.pi * 0.13 / 0.125)]
    np.testing.assert_allclose(steering_vector_farfield(np.pi / 6, WIDE), expected, atol=1e-12)


def test_nearfield_symmetric_source():
    pose = NodePose((0.0, 0.0), 0.0)  # antenna 1 at (d, 0)
    v = steering_vector_nearfield((WIDE.spacing / 2, 3.0), pose, WIDE)
    np.testing.assert_allclose(v, [1, 1], atol=1e-12)


def test_nearfield_exact_path_difference():
    pose = NodePose((0.0, 0.0), 0.0)
    src = 0.5 * np.array([math.cos(math.pi / 4), math.sin(math.pi / 4)])
    d0 = np.hypot(*src)
    d1 = np.hypot(*(src - np.array([WIDE.spacing, 0.0])))
    expected = np.exp(-2j * np.pi * (d1 - d0) / WIDE.wavelength)
    np.testing.assert_allclose(steering_vector_nearfield(src, pose, WIDE), [1, expected], atol=1e-12)


def test_nearfield_matches_farfield_at_100m():
    pose = NodePose((0.0, 0.0), 0.0)
    center = np.array([WIDE.spacing / 2, 0.0])
    v_near = steering_vector_nearfield(center + [0.0, 100.0], pose, WIDE)
    v_far = steering_vector_farfield(0.0, WIDE)
    assert np.max(np.abs(np.angle(v_near / v_far))) < 1e-3


def test_nearfield_rejects_source_on_element():
    with pytest.raises(DegenerateGeometryError):
        steering_vector_nearfield((0.0, 0.0), NodePose((0.0, 0.0)), WIDE)


@given(st.floats(-np.pi / 2, np.pi / 2), st.floats(0.05, 1.0))
def test_steering_entries_unit_magnitude(theta, spacing):
    cfg = ArrayConfig(antenna_count=4, spacing=spacing)
    np.testing.assert_allclose(np.abs(steering_vector_farfield(theta, cfg)), 1.0, atol=1e-12)


@given(
    st.floats(-1.4, 1.4),
    st.floats(-np.pi, np.pi),
    st.floats(1000.0, 1e5),
)
def test_nearfield_converges_to_farfield(theta, heading, range_factor):
    pose = NodePose((1.0, -2.0), heading)
    center = pose.element_positions(WIDE).mean(axis=0)
    bearing = float(local_to_global(theta, pose))
    src = center + range_factor * WIDE.spacing * np.array([math.cos(bearing), math.sin(bearing)])
    v_near = steering_vector_nearfield(src, pose, WIDE)
    v_far = steering_vector_farfield(theta, WIDE)
    assert np.max(np.abs(np.angle(v_near / v_far))) < 1e-3


# grating lobes

def test_grating_family_half_wavelength_is_singleton():
    assert grating_lobe_family(0.0, HALF) == [0.0]


def test_grating_family_broadside_wide():
    fam = np.degrees(grating_lobe_family(0.0, WIDE))
    np.testing.assert_allclose(fam, [-74.0, -28.7, 0.0, 28.7, 74.0], atol=0.1)
    oracle = grating_family_by_scan(0.0, 0.26, 0.125)
    np.testing.assert_allclose(fam, oracle, atol=0.02)


def test_grating_family_two_wavelength_spacing():
    cfg = ArrayConfig.from_wavelength(0.125, spacing=0.25)
    fam = np.degrees(grating_lobe_family(math.radians(30.0), cfg))
    # sin(t) = 0.5 + k/2 for k = -3..1
    expected = np.degrees(np.arcsin([-1.0, -0.5, 0.0, 0.5, 1.0]))
    np.testing.assert_allclose(fam, expected, atol=1e-9)
    np.testing.assert_allclose(fam, grating_family_by_scan(30.0, 0.25, 0.125), atol=0.02)


@pytest.mark.parametrize("seed", range(5))
def test_grating_family_matches_scan_oracle(seed):
    r = np.random.default_rng(seed)
    theta = r.uniform(-89.0, 89.0)
    spacing = r.uniform(0.0625, 0.5)
    fam = np.degrees(grating_lobe_family(math.radians(theta), ArrayConfig.from_wavelength(0.125, spacing=spacing)))
    oracle = grating_family_by_scan(theta, spacing, 0.125)
    assert len(fam) == len(oracle)
    assert np.max(np.abs(fam - oracle)) <= 0.02


def test_grating_family_closed_on_one_degree_grid():
    for theta_deg in range(-90, 91):
        theta = math.radians(theta_deg)
        fam = grating_lobe_family(theta, WIDE)
        for other in fam:
            back = grating_lobe_family(other, WIDE)
            assert min(abs(b - theta) for b in back) < 1e-9
            assert len(back) == len(fam) or abs(abs(theta_deg) - 90) < 1e-9 or abs(abs(other) - np.pi / 2) < 1e-6


@given(st.floats(-np.pi / 2, np.pi / 2), st.floats(0.26, 1.0))
def test_grating_family_involution(theta, spacing):
    cfg = ArrayConfig.from_wavelength(0.125, spacing=spacing)
    for other in grating_lobe_family(theta, cfg):
        assert min(abs(b - theta) for b in grating_lobe_family(other, cfg)) < 1e-7


@given(st.floats(-np.pi / 2, np.pi / 2), st.floats(0.01, 1.0, exclude_max=True))
def test_grating_family_singleton_below_half_wavelength(theta, fraction):
    cfg = ArrayConfig.from_wavelength(0.125, spacing=0.0625 * fraction)
    assert grating_lobe_family(theta, cfg) == [pytest.approx(theta)]


def test_grating_family_singleton_at_half_wavelength_off_endfire():
    for theta_deg in range(-89, 90):
        assert len(grating_lobe_family(math.radians(theta_deg), HALF)) == 1
    # the two endfire directions share one phase at exactly half a wavelength
    assert np.allclose(grating_lobe_family(np.pi / 2, HALF), [-np.pi / 2, np.pi / 2])


@given(st.floats(-np.pi / 2, np.pi / 2))
def test_grating_family_members_share_phase(theta):
    ref = phase_shift_aoa(theta, WIDE)
    for t in grating_lobe_family(theta, WIDE):
        assert abs(phase_shift_aoa(t, WIDE) - ref) < 1e-9


def test_grating_family_rejects_out_of_range():
    with pytest.raises(ValueError):
        grating_lobe_family(2.0, WIDE)


# local/global geometry

def test_front_and_mirror_bearings():
    pose = NodePose((0.0, 0.0), 0.0)
    assert float(local_to_global(0.0, pose)) == pytest.approx(np.pi / 2)
    assert float(mirror_bearing(0.0, pose)) == pytest.approx(-np.pi / 2)


@given(st.floats(-100, 100), st.floats(-100, 100), st.floats(-np.pi, np.pi))
def test_observed_angle_lands_on_a_candidate_bearing(x, y, heading):
    pose = NodePose((0.0, 0.0), heading)
    if math.hypot(x, y) < 1e-3:
        return
    theta = observed_local_angle((x, y), pose)
    assert -np.pi / 2 <= theta <= np.pi / 2
    true_bearing = math.atan2(y, x)
    dev = min(abs(float(wrap_angle(b - true_bearing))) for b in candidate_bearings([theta], pose))
    assert dev < 1e-9


def test_observed_angle_rejects_coincident_point():
    with pytest.raises(DegenerateGeometryError):
        observed_local_angle((1.0, 1.0), NodePose((1.0, 1.0)))


def test_candidate_bearings_endfire_collapses():
    pose = NodePose((0.0, 0.0), 0.3)
    assert len(candidate_bearings([np.pi / 2], pose)) == 1
    assert len(candidate_bearings(grating_lobe_family(0.0, WIDE), pose)) == 10


# beam width

def test_beam_width_ratio_between_spacings():
    grid = np.linspace(-np.pi / 2, np.pi / 2, 18001)
    wide = lobe_width(grid, beam_pattern(grid, 0.0, WIDE), 0.0)
    half = lobe_width(grid, beam_pattern(grid, 0.0, HALF), 0.0)
    assert 0.15 <= wide / half <= 0.35


def test_lobe_width_of_known_triangle():
    grid = np.linspace(-1, 1, 2001)
    power = np.maximum(1 - np.abs(grid), 0)
    assert lobe_width(grid, power, 0.0, level_db=10 * math.log10(0.5)) == pytest.approx(1.0, abs=1e-9)


@pytest.mark.parametrize("bad", [dict(antenna_count=1), dict(spacing=0.0), dict(carrier_frequency=-1.0)])
def test_array_config_validation(bad):
    with pytest.raises(ValueError):
        ArrayConfig(**bad)
