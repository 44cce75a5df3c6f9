"""Synthetic oriented-grating dataset used by the desk-scale experiment.

Class ``k`` of ``num_classes`` is a sinusoidal grating at angle ``k * pi / num_classes``
with random phase, random contrast and additive pixel noise, on a mid-grey
background. Low spatial frequency keeps the class signal partially alive
under heavy blur while noise corruptions erode it gradually.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from arm_meter.tensor_io import Dataset


@dataclass(frozen=True)
class GratingConfig:
    n_samples: int = 5000
    num_classes: int = 4
    size: int = 16
    period: float = 12.0
    contrast: tuple[float, float] = (0.1, 0.3)
    pixel_noise: float = 0.05
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def gratings(cfg: GratingConfig = GratingConfig(), name: str = "gratings") -> Dataset:
    rng = np.random.default_rng(cfg.seed)
    n, s = cfg.n_samples, cfg.size
    labels = np.arange(n) % cfg.num_classes
    rng.shuffle(labels)
    theta = labels * np.pi / cfg.num_classes
    phase = rng.uniform(0, 2 * np.pi, n)
    amp = rng.uniform(*cfg.contrast, n)
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    proj = (np.cos(theta)[:, None, None] * xx + np.sin(theta)[:, None, None] * yy)
    wave = np.sin(2 * np.pi * proj / cfg.period + phase[:, None, None])
    img = 0.5 + amp[:, None, None] * wave + cfg.pixel_noise * rng.standard_normal((n, s, s))
    img = np.clip(img, 0.0, 1.0).astype(np.float32)[:, None]
    return Dataset(name, img, labels, cfg.num_classes)
