"""Synthetic multi-organ "scans" for episodic few-shot training and evaluation.

Every scan is a stack of slices containing one shape per class. Shape size
follows a smooth rise-and-fall profile along the stack and the shape drifts
across the field of view, mimicking an organ sweeping through axial slices.
Per-scan appearance, scale and contour deformation are drawn from the
class's ranges; those ranges are the intra-class variation knobs.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from pmcr.core import PMT_U8, Rng, read_tensor, write_tensor
from pmcr.errors import InvalidSpec

FAMILIES = ("ellipse", "blob", "ring")


@dataclass
class ClassSpec:
    class_id: int
    family: str = "ellipse"
    center: tuple = (0.5, 0.5)  # (row, col) as fractions of the image side
    scale_range: tuple = (0.10, 0.16)  # peak radius as a fraction of the image side
    aspect_range: tuple = (0.8, 1.2)
    deformation: float = 0.1  # amplitude of radial harmonics, fraction of radius
    rotation_range: tuple = (0.0, 3.14159)
    intensity_range: tuple = (0.6, 0.8)
    texture_freq: float = 0.0  # cycles per pixel of the stripe texture
    texture_amp: float = 0.0
    drift: float = 0.06  # total centre travel across the scan, fraction of side

    def validate(self) -> None:
        if self.family not in FAMILIES:
            raise InvalidSpec(f"unknown shape family {self.family!r}")
        for name in ("scale_range", "aspect_range", "rotation_range", "intensity_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise InvalidSpec(f"{name} has low > high")
        if self.scale_range[0] <= 0:
            raise InvalidSpec("scale must be positive")
        if not 0 <= self.deformation < 1:
            raise InvalidSpec("deformation must lie in [0, 1)")


@dataclass
class SyntheticTaskSpec:
    classes: List[ClassSpec] = field(default_factory=list)
    base_classes: List[int] = field(default_factory=list)
    novel_classes: List[int] = field(default_factory=list)
    image_size: int = 64
    noise: float = 0.03
    background: tuple = (0.15, 0.3)
    depth: int = 9
    size_variation: float = 0.4  # relative shrink of organs at the scan ends
    n_train_scans: int = 8
    n_test_scans: int = 6

    def __post_init__(self) -> None:
        self.classes = [c if isinstance(c, ClassSpec) else ClassSpec(**c) for c in self.classes]
        for c in self.classes:
            c.center = tuple(c.center)
            for name in ("scale_range", "aspect_range", "rotation_range", "intensity_range"):
                setattr(c, name, tuple(getattr(c, name)))
        self.background = tuple(self.background)

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    def validate(self) -> None:
        if not self.classes:
            raise InvalidSpec("no classes")
        ids = [c.class_id for c in self.classes]
        if len(set(ids)) != len(ids) or min(ids) < 1 or max(ids) > 255:
            raise InvalidSpec("class ids must be unique integers in 1..255")
        if set(self.base_classes) & set(self.novel_classes):
            raise InvalidSpec("base and novel classes overlap")
        if not set(self.base_classes) | set(self.novel_classes) <= set(ids):
            raise InvalidSpec("split refers to unknown class ids")
        if self.image_size < 8 or self.depth < 1 or self.n_train_scans < 0 or self.n_test_scans < 0:
            raise InvalidSpec("image_size, depth or scan counts out of range")
        if self.noise < 0:
            raise InvalidSpec("noise must be non-negative")
        if not 0 <= self.size_variation < 1:
            raise InvalidSpec("size_variation must lie in [0, 1)")
        for c in self.classes:
            c.validate()

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticTaskSpec":
        return cls(**d)


def default_task() -> SyntheticTaskSpec:
    """Two base classes and one novel class on 64x64 slices."""
    return SyntheticTaskSpec(
        classes=[
            ClassSpec(1, "ellipse", center=(0.32, 0.30), scale_range=(0.13, 0.19), aspect_range=(0.7, 1.0),
                      deformation=0.10, intensity_range=(0.75, 0.95), texture_freq=0.0, texture_amp=0.0),
            ClassSpec(2, "ring", center=(0.32, 0.72), scale_range=(0.12, 0.17), aspect_range=(0.85, 1.15),
                      deformation=0.08, intensity_range=(0.50, 0.65), texture_freq=0.25, texture_amp=0.12),
            ClassSpec(3, "blob", center=(0.72, 0.50), scale_range=(0.13, 0.19), aspect_range=(0.8, 1.25),
                      deformation=0.15, intensity_range=(0.55, 0.85), texture_freq=0.12, texture_amp=0.08),
        ],
        base_classes=[1, 2],
        novel_classes=[3],
    )


def _contour_radius(theta, radius, aspect, rotation, harmonics):
    t = theta - rotation
    # ellipse radius in polar form
    r = radius / np.sqrt((np.cos(t) / aspect) ** 2 + (np.sin(t) * aspect) ** 2)
    for k, amp, phase in harmonics:
        r = r * (1.0 + amp * np.cos(k * theta + phase))
    return r


def _draw_scan_params(c: ClassSpec, rng: Rng) -> dict:
    n_harm = {"ellipse": 1, "ring": 2, "blob": 3}[c.family]
    ks = {"ellipse": [2], "ring": [3, 4], "blob": [2, 3, 5]}[c.family]
    amps = rng.uniform(0, 1, n_harm)
    amps = c.deformation * amps / max(amps.sum(), 1e-12)
    return {
        "radius": rng.uniform(*c.scale_range),
        "aspect": rng.uniform(*c.aspect_range),
        "rotation": rng.uniform(*c.rotation_range),
        "intensity": rng.uniform(*c.intensity_range),
        "harmonics": [(k, float(a), float(rng.uniform(0, 2 * np.pi))) for k, a in zip(ks, amps)],
        "drift_angle": rng.uniform(0, 2 * np.pi),
        "stripe_angle": rng.uniform(0, np.pi),
        "offset": rng.uniform(-0.03, 0.03, 2),
    }


def slice_profile(t: int, depth: int, variation: float = 0.4) -> float:
    """Relative organ size on slice ``t``: ``1 - variation`` at the ends, 1 mid-scan."""
    if depth == 1:
        return 1.0
    return 1.0 - variation + variation * np.sin(np.pi * t / (depth - 1))


def render_scan(spec: SyntheticTaskSpec, rng: Rng):
    """One scan: ``(images depth x H x W x 3 float32, masks depth x H x W uint8)``."""
    n = spec.image_size
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    params = [(c, _draw_scan_params(c, rng)) for c in spec.classes]
    bg_level = rng.uniform(*spec.background)
    images = np.zeros((spec.depth, n, n, 3), dtype=np.float32)
    masks = np.zeros((spec.depth, n, n), dtype=np.uint8)
    # smooth background shading shared by the whole scan
    gy, gx = rng.uniform(-0.08, 0.08, 2)
    shading = bg_level + gy * (yy / n - 0.5) + gx * (xx / n - 0.5)
    for t in range(spec.depth):
        img = shading.copy()
        lab = np.zeros((n, n), dtype=np.uint8)
        frac = (t / (spec.depth - 1) - 0.5) if spec.depth > 1 else 0.0
        for c, p in params:
            cy = (c.center[0] + p["offset"][0] + frac * c.drift * np.sin(p["drift_angle"])) * n
            cx = (c.center[1] + p["offset"][1] + frac * c.drift * np.cos(p["drift_angle"])) * n
            dy, dx = yy - cy, xx - cx
            rho = np.hypot(dy, dx)
            theta = np.arctan2(dy, dx)
            R = _contour_radius(theta, p["radius"] * n * slice_profile(t, spec.depth, spec.size_variation), p["aspect"],
                                p["rotation"], p["harmonics"])
            inside = rho <= R
            if c.family == "ring":
                inside &= rho >= 0.45 * R
            value = np.full((n, n), p["intensity"])
            if c.texture_amp > 0:
                a = p["stripe_angle"]
                value = value + c.texture_amp * np.sin(2 * np.pi * c.texture_freq * (yy * np.sin(a) + xx * np.cos(a)))
            img[inside] = value[inside]
            lab[inside] = c.class_id
        if spec.noise > 0:
            img = img + rng.normal(0, spec.noise, size=img.shape)
        img = np.clip(img, 0.0, 1.0)
        images[t] = np.repeat(img[:, :, None], 3, axis=2)
        masks[t] = lab
    return images, masks


def generate_dataset(spec: SyntheticTaskSpec, rng: Union[Rng, int], out_dir: Union[str, Path, None] = None):
    """Render all scans; write ``.pmt`` files plus ``manifest.json`` when ``out_dir`` is given."""
    spec.validate()
    if isinstance(rng, int):
        rng = Rng(rng)
    seed = rng.seed
    n_total = spec.n_train_scans + spec.n_test_scans
    scans = []
    for i in range(n_total):
        images, masks = render_scan(spec, rng.child(i))
        split = "train" if i < spec.n_train_scans else "test"
        scans.append(Scan(f"scan_{i:03d}", split, images.astype(np.float64), masks))
    ds = Dataset(spec, scans, seed)
    if out_dir is not None:
        ds.save(out_dir)
    return ds


@dataclass
class Scan:
    name: str
    split: str
    images: np.ndarray  # depth x H x W x 3
    masks: np.ndarray  # depth x H x W

    @property
    def depth(self) -> int:
        return self.images.shape[0]


@dataclass
class Dataset:
    spec: SyntheticTaskSpec
    scans: List[Scan]
    seed: int = 0

    def split(self, name: str) -> List[Scan]:
        return [s for s in self.scans if s.split == name]

    def save(self, out_dir: Union[str, Path]) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        entries = []
        for s in self.scans:
            write_tensor(s.images, out / f"{s.name}_img.pmt")
            write_tensor(s.masks.astype(np.uint8), out / f"{s.name}_mask.pmt", dtype=PMT_U8)
            entries.append({"name": s.name, "split": s.split, "image": f"{s.name}_img.pmt",
                            "mask": f"{s.name}_mask.pmt", "depth": s.depth})
        manifest = {"format": "pmcr-synthetic-v1", "seed": self.seed, "spec": self.spec.to_dict(), "scans": entries}
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return out

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Dataset":
        root = Path(path)
        manifest = json.loads((root / "manifest.json").read_text())
        spec = SyntheticTaskSpec.from_dict(manifest["spec"])
        scans = [
            Scan(e["name"], e["split"], read_tensor(root / e["image"]), read_tensor(root / e["mask"]))
            for e in manifest["scans"]
        ]
        return cls(spec, scans, manifest.get("seed", 0))
