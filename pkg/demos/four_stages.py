"""Walk one target through the four localization stages.

Stage a keeps the lobe cluster with the smallest angular residual, stage b
ranks clusters by RSSI likelihood, stage c takes the median over packets and
stage d searches the cluster box for the most likely point.

    python demos/four_stages.py [seed]
"""

import math
import sys

import numpy as np

from wideaoa.channel_sim import Rectangle, build_scene
from wideaoa.experiments import ExperimentConfig, abstract_families, packet_rssi
from wideaoa.fusion import AmbiguityUnresolved, NoCandidates, integrate_packets, localize_packet, pinpoint


def main(seed=3):
    config = ExperimentConfig()
    rng = np.random.default_rng(seed)
    scene = build_scene(Rectangle.of_size(*config.space), 4, seed=rng, shadowing_sigma=config.shadowing_sigma)
    target = np.asarray(scene.targets[0])
    fc = config.fusion_config(scene.space_bounds)
    poses, models, array = scene.poses, scene.models, scene.nodes[0].array
    print(f"target at ({target[0]:.1f}, {target[1]:.1f}) m, 4 nodes")

    coarse, fine = [], []
    for p in range(config.packets):
        families = abstract_families(target, poses, array, config.error_model, rng)
        rssi = packet_rssi(target, scene, rng)
        try:
            est = localize_packet(families, poses, rssi, models, fc)
        except (NoCandidates, AmbiguityUnresolved) as exc:
            print(f"packet {p}: skipped ({exc})")
            continue
        if p == 0:
            only_angles = localize_packet(families, poses, config=fc, use_likelihood=False)
            print(f"stage a: error {math.dist(only_angles.centroid, target):6.2f} m "
                  f"({len(est.cluster_set.centroids)} candidate clusters)")
            print(f"stage b: error {math.dist(est.centroid, target):6.2f} m (likelihood {est.likelihood:.1f})")
        coarse.append((est.centroid, est.likelihood))
        fine.append((pinpoint(est.cluster(), rssi, models, fc), est.likelihood))

    threshold = fc.threshold(len(poses))
    c = integrate_packets(coarse, threshold)
    d = integrate_packets(fine, threshold)
    print(f"stage c: error {math.dist(c.position, target):6.2f} m from {c.used} of {len(coarse)} packets")
    print(f"stage d: error {math.dist(d.position, target):6.2f} m")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 3)
