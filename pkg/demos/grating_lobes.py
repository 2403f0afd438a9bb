"""Why a 26 cm two-antenna array sees several directions at once.

Synthesizes one CSI frame for a single path, runs MUSIC on it with the wide
spacing and with half-wavelength spacing, and prints the lobe families and the
beam widths side by side.

    python demos/grating_lobes.py
"""

import math

import numpy as np

from wideaoa.array_model import ArrayConfig, lobe_width
from wideaoa.channel_sim import PropagationPath, synthesize_csi
from wideaoa.music import beamformer_spectrum, estimate_profile, profile_peaks_with_ambiguity

TRUE_ANGLE = math.radians(20.0)


def describe(name, cfg):
    csi = synthesize_csi([PropagationPath(TRUE_ANGLE, 30e-9)], cfg, snr_db=20.0, seed=0)
    families = profile_peaks_with_ambiguity(estimate_profile(csi, cfg), cfg)
    grid = np.linspace(-np.pi / 2, np.pi / 2, 18001)
    width = lobe_width(grid, beamformer_spectrum(csi, grid, cfg), TRUE_ANGLE)
    lobes = ", ".join(f"{math.degrees(a):6.1f}" for a in families[0].angles)
    print(f"{name:>12}: spacing {cfg.spacing * 100:5.1f} cm, -3 dB beam {math.degrees(width):5.1f} deg")
    print(f"{'':>12}  lobes [{lobes}] deg, ToF {families[0].tof * 1e9:.1f} ns")
    return width


def main():
    wide = ArrayConfig()
    half = ArrayConfig.from_wavelength(wide.wavelength)
    w = describe("wide", wide)
    h = describe("half-lambda", half)
    print(f"beam width ratio {w / h:.2f}: narrower beams, paid for with extra lobes")


if __name__ == "__main__":
    main()
