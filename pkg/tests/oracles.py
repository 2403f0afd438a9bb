"""Independent reference computations used by the tests.

These deliberately avoid the library code paths they check: brute-force grid
scans, explicit loops and textbook closed forms.
"""

import numpy as np


def grating_family_by_scan(theta_deg: float, spacing: float, wavelength: float, step_deg: float = 0.01):
    """Angles (degrees) on a dense grid where the inter-element phase matches ``theta``.

    A root is reported at the grid point of smaller |phase difference| for
    every sign change of the wrapped difference, plus exact zeros.
    """
    grid = np.round(np.arange(-90.0, 90.0 + step_deg / 2, step_deg), 10)
    k = 2 * np.pi * spacing / wavelength
    diff = k * (np.sin(np.radians(grid)) - np.sin(np.radians(theta_deg)))
    g = np.angle(np.exp(1j * diff))
    roots = set()
    for i in range(len(grid)):
        if g[i] == 0:
            roots.add(i)
    for i in range(len(grid) - 1):
        a, b = g[i], g[i + 1]
        if a * b < 0 and abs(a - b) < np.pi:  # skip the +-pi wrap
            roots.add(i if abs(a) <= abs(b) else i + 1)
    # an endfire lobe can touch zero without a sign change
    for i in (0, len(grid) - 1):
        if abs(g[i]) < k * np.radians(step_deg) ** 2:
            roots.add(i)
    out = sorted(grid[sorted(roots)])
    merged = []
    for a in out:
        if not merged or a - merged[-1] > 5 * step_deg:
            merged.append(a)
    return merged


def csi_by_loops(paths, antenna_count, subcarrier_count, wavelength, spacing, subcarrier_spacing):
    """Noise-free CSI evaluated entry by entry."""
    x = np.zeros((antenna_count, subcarrier_count), dtype=complex)
    for m in range(antenna_count):
        for n in range(subcarrier_count):
            for aoa, tof, att in paths:
                phi = np.exp(-2j * np.pi * spacing * np.sin(aoa) / wavelength)
                psi = np.exp(-2j * np.pi * subcarrier_spacing * tof)
                x[m, n] += att * phi ** m * psi ** n
    return x


def procrustes_error(estimate, truth, with_scale=False):
    """Max residual after the best rotation + translation (optionally scale)."""
    a = np.asarray(estimate, float)
    b = np.asarray(truth, float)
    a0, b0 = a - a.mean(0), b - b.mean(0)
    u, s, vt = np.linalg.svd(a0.T @ b0)
    d = np.sign(np.linalg.det(u @ vt))
    corr = np.diag([1.0, d])
    rot = u @ corr @ vt
    scale = (s * np.diag(corr)).sum() / (a0 ** 2).sum() if with_scale else 1.0
    return float(np.max(np.linalg.norm(scale * a0 @ rot - b0, axis=1)))


def ray_intersection(p, a, q, b):
    """Solve p + t*(cos a, sin a) = q + s*(cos b, sin b) by Cramer's rule."""
    m = np.array([[np.cos(a), -np.cos(b)], [np.sin(a), -np.sin(b)]])
    t, s = np.linalg.solve(m, np.asarray(q, float) - np.asarray(p, float))
    return np.asarray(p, float) + t * np.array([np.cos(a), np.sin(a)]), t, s
