"""Graded image corruptions: additive Gaussian noise, salt-and-pepper, Gaussian blur.

Randomness is drawn from one Philox stream per image, keyed by ``(seed, sample
index)``, so output never depends on processing order.
"""

from __future__ import annotations

import os
import sys
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from arm_meter.tensor_io import Dataset

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

KINDS = ("gaussian", "salt_pepper", "blur")


def image_rng(seed: int, index: int) -> np.random.Generator:
    """Independent generator for sample ``index`` under ``seed``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(index,))))


def gaussian_noise(ds: Dataset, sigma: float, seed: int) -> Dataset:
    if not sigma >= 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    out = ds.images.copy()
    if sigma > 0:
        for i in range(len(ds)):
            noise = image_rng(seed, i).standard_normal(out[i].shape)
            out[i] = np.clip(ds.images[i] + sigma * noise, 0.0, 1.0)
    return ds.with_images(out, f"{ds.name}_gaussian{sigma:g}")


def salt_pepper(ds: Dataset, p: float, seed: int) -> Dataset:
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p must be in [0, 1], got {p}")
    out = ds.images.copy()
    if p > 0:
        for i in range(len(ds)):
            rng = image_rng(seed, i)
            hit = rng.random(out[i].shape) < p
            salt = rng.random(out[i].shape) < 0.5
            out[i][hit] = salt[hit].astype(np.float32)
    return ds.with_images(out, f"{ds.name}_salt_pepper{p:g}")


def gaussian_kernel(radius: int) -> np.ndarray:
    """Normalized 1-D kernel of size ``2 * radius + 1`` and std ``radius / 2``."""
    if radius == 0:
        return np.ones(1)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / (radius / 2.0)) ** 2)
    return k / k.sum()


def blur_images(images: np.ndarray, radius: int) -> np.ndarray:
    """Separable Gaussian blur over the last two axes with mirror padding (edge not repeated)."""
    k = gaussian_kernel(radius)
    h, w = images.shape[-2:]
    x = images.astype(np.float64)
    pad = [(0, 0)] * (x.ndim - 2)
    xp = np.pad(x, pad + [(radius, radius), (0, 0)], mode="reflect")
    rows = sum(k[t] * xp[..., t : t + h, :] for t in range(k.size))
    rp = np.pad(rows, pad + [(0, 0), (radius, radius)], mode="reflect")
    return sum(k[t] * rp[..., :, t : t + w] for t in range(k.size))


def blur(ds: Dataset, radius: int) -> Dataset:
    if radius < 0 or int(radius) != radius:
        raise ValueError(f"radius must be a non-negative integer, got {radius}")
    radius = int(radius)
    _, _, h, w = ds.images.shape
    if radius > min(h, w):
        raise ValueError(f"radius {radius} exceeds image size {h}x{w}")
    if radius == 0:
        return ds.with_images(ds.images.copy(), f"{ds.name}_blur0")
    out = np.clip(blur_images(ds.images, radius), 0.0, 1.0).astype(np.float32)
    return ds.with_images(out, f"{ds.name}_blur{radius}")


# ---------------------------------------------------------------------------
# Ladders
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    level: int
    param: float
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown corruption kind {self.kind!r}")
        if self.level < 1:
            raise ValueError("levels start at 1")

    @property
    def sigma(self) -> float:
        return self._named("gaussian")

    @property
    def p(self) -> float:
        return self._named("salt_pepper")

    @property
    def radius(self) -> int:
        return int(self._named("blur"))

    def _named(self, kind: str) -> float:
        if self.kind != kind:
            raise AttributeError(f"{self.kind} corruption has no {kind} parameter")
        return self.param

    def apply(self, ds: Dataset) -> Dataset:
        if self.kind == "gaussian":
            out = gaussian_noise(ds, self.param, self.seed)
        elif self.kind == "salt_pepper":
            out = salt_pepper(ds, self.param, self.seed)
        else:
            out = blur(ds, int(self.param))
        out.name = f"{ds.name}_{self.kind}{self.level}"
        return out


def default_ladder_path() -> Path:
    return Path(str(resources.files("arm_meter") / "data" / "ladders.toml"))


def load_ladders(path: str | os.PathLike | None = None) -> dict[str, list[float]]:
    """Read per-kind parameter lists from a TOML file; missing kinds fall back to defaults."""
    with open(default_ladder_path(), "rb") as fh:
        ladders = tomllib.load(fh)
    if path is not None:
        with open(path, "rb") as fh:
            ladders.update(tomllib.load(fh))
    for kind in KINDS:
        values = [float(v) for v in ladders[kind]]
        if not values:
            raise ValueError(f"empty ladder for {kind}")
        if any(b <= a for a, b in zip(values, values[1:])):
            raise ValueError(f"ladder for {kind} is not strictly increasing")
        ladders[kind] = values
    return {k: ladders[k] for k in KINDS}


def severity_ladder(kind: str, seed: int = 0, ladders: dict | None = None) -> list[CorruptionSpec]:
    if kind not in KINDS:
        raise ValueError(f"unknown corruption kind {kind!r}")
    values = (ladders or load_ladders())[kind]
    return [CorruptionSpec(kind, level, value, seed) for level, value in enumerate(values, start=1)]


def corruption_spec(kind: str, level: int, seed: int = 0, ladders: dict | None = None) -> CorruptionSpec:
    ladder = severity_ladder(kind, seed, ladders)
    if not 1 <= level <= len(ladder):
        raise ValueError(f"level {level} outside ladder 1..{len(ladder)} for {kind}")
    return ladder[level - 1]
