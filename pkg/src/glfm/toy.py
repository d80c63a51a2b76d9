"""Small synthetic shape corpora for demos and tests."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from glfm.cloud import PointCloud
from glfm.rng import as_rng
from glfm.synthesis import SynthesisConfig, synthesize_anomaly


def plane_patch(n: int = 2000, size: float = 1.0, noise: float = 0.0005, rng=None,
                sample_id: str = "plane") -> PointCloud:
    """Uniform samples on a square patch in z=0 with Gaussian depth noise."""
    rng = as_rng(rng)
    xy = rng.uniform(0.0, size, size=(n, 2))
    z = rng.normal(0.0, noise, size=n)
    return PointCloud(np.c_[xy, z], id=sample_id)


def sphere(n: int = 2000, radius: float = 0.3, noise: float = 0.0005, rng=None,
           sample_id: str = "sphere") -> PointCloud:
    """Uniform samples on a sphere centred at the origin, with radial noise."""
    rng = as_rng(rng)
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    r = radius + rng.normal(0.0, noise, size=n)
    return PointCloud(v * r[:, None], id=sample_id)


SHAPES = {"plane": plane_patch, "sphere": sphere}


# Small bumps (0.05% to 0.2% of the points) on a plane look locally like the
# curved surface of a sphere, so a bank that mixes both classes absorbs them.
CONFUSION_SYNTHESIS = SynthesisConfig(c_frac_range=(0.0005, 0.002))


@dataclass
class Scenario:
    train: list                 # normal PointClouds, both classes
    train_classes: list
    test: list                  # (class, PointCloud, mask or None)

    def test_labels(self) -> list:
        return [int(mask is not None and bool(np.any(mask))) for _, _, mask in self.test]


def confusion_scenario(seed: int = 0, n_train: int = 30, n_test: int = 20,
                       n_points: int = 2000, sphere_radius: float = 0.3,
                       synthesis: SynthesisConfig = CONFUSION_SYNTHESIS) -> Scenario:
    """Two-class corpus (plane patches and spheres) where synthetic plane
    bumps resemble normal sphere curvature.

    Per class: ``n_train`` normal training clouds, ``n_test`` normal test
    clouds and ``n_test`` test clouds with one synthetic defect each.
    Everything is drawn from independent streams of one seed.
    """
    rng = as_rng(seed)
    makers = (("plane", lambda r: plane_patch(n_points, rng=r)),
              ("sphere", lambda r: sphere(n_points, radius=sphere_radius, rng=r)))
    train, train_classes = [], []
    for i in range(n_train):
        for ci, (cls, make) in enumerate(makers):
            train.append(make(rng.split(100 * ci + i)))
            train_classes.append(cls)
    test = []
    for i in range(n_test):
        for ci, (cls, make) in enumerate(makers):
            test.append((cls, make(rng.split(1000 + 10 * i + ci)), None))
            base = make(rng.split(3000 + 10 * i + ci))
            s = synthesize_anomaly(base, synthesis, rng.split(5000 + 10 * i + ci))
            test.append((cls, s.cloud, s.mask))
    return Scenario(train, train_classes, test)
