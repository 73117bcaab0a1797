"""Procedural labeled outdoor scenes: ground, buildings, poles, cars, vegetation."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .errors import InvalidArgument
from .pcio import DEFAULT_CLASSES, RawPointCloud

GROUND, BUILDING, POLE, CAR, VEGETATION = range(5)

# class-conditioned intensity means; noise makes neighbouring classes overlap
INTENSITY_MEAN = np.array([0.30, 0.50, 0.60, 0.70, 0.40])


@dataclass(frozen=True)
class SceneSpec:
    extent: tuple[float, float, float] = (60.0, 60.0, 30.0)
    density: float = 40.0  # points per m^2, ground and object surfaces alike
    buildings: int = 2
    large_buildings: int = 1
    poles: int = 10
    cars: int = 8
    trees: int = 8
    jitter: float = 0.02
    intensity_noise: float = 0.1
    seed: int = 0
    building_size: tuple[float, float] = (5.0, 15.0)
    large_building_size: tuple[float, float] = (20.0, 28.0)
    building_height: tuple[float, float] = (10.0, 20.0)

    def validate(self) -> None:
        if len(self.extent) != 3 or min(self.extent) <= 0:
            raise InvalidArgument(f"extent must be three positive lengths, got {self.extent}")
        if not self.density > 0:
            raise InvalidArgument("density must be positive")
        if self.jitter < 0 or self.intensity_noise < 0:
            raise InvalidArgument("jitter and intensity_noise must be non-negative")
        counts = (self.buildings, self.large_buildings, self.poles, self.cars, self.trees)
        if min(counts) < 0:
            raise InvalidArgument("object counts must be non-negative")
        if self.building_height[1] > self.extent[2]:
            raise InvalidArgument("buildings taller than the scene extent")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        for k in ("extent", "building_size", "large_building_size", "building_height"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class _Layout:
    """Axis-aligned footprints already placed, for overlap rejection."""

    extent: tuple[float, float]
    boxes: list[tuple[float, float, float, float]] = field(default_factory=list)

    def place(self, rng, sx: float, sy: float, margin: float = 1.0, tries: int = 200):
        X, Y = self.extent
        if sx + 2 * margin > X or sy + 2 * margin > Y:
            raise InvalidArgument(f"a {sx:.1f} x {sy:.1f} m object cannot fit a {X} x {Y} m scene")
        for _ in range(tries):
            x0 = rng.uniform(margin, X - margin - sx)
            y0 = rng.uniform(margin, Y - margin - sy)
            box = (x0, y0, x0 + sx, y0 + sy)
            if all(box[2] + margin <= b[0] or b[2] + margin <= box[0] or
                   box[3] + margin <= b[1] or b[3] + margin <= box[1] for b in self.boxes):
                self.boxes.append(box)
                return box
        raise InvalidArgument("objects do not fit the scene extent without overlap")


def ground_plane(extent_xy, density: float, jitter: float, rng) -> np.ndarray:
    """Jittered regular grid with ``density`` points per m^2."""
    X, Y = extent_xy
    step = 1.0 / np.sqrt(density)
    nx, ny = max(1, int(round(X / step))), max(1, int(round(Y / step)))
    gx, gy = np.meshgrid((np.arange(nx) + 0.5) * X / nx, (np.arange(ny) + 0.5) * Y / ny, indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel(), np.zeros(gx.size)], axis=1)
    return pts + rng.normal(0.0, jitter, pts.shape)


def box_shell(lo, hi, density: float, rng, bottom: bool = False) -> np.ndarray:
    """Uniform samples on the faces of an axis-aligned box."""
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    size = hi - lo
    faces = []  # (fixed axis, fixed value)
    for axis in range(3):
        if axis < 2 or bottom:
            faces.append((axis, lo[axis]))
        faces.append((axis, hi[axis]))
    out = []
    for axis, value in faces:
        a, b = [i for i in range(3) if i != axis]
        n = max(1, int(round(density * size[a] * size[b])))
        p = np.empty((n, 3))
        p[:, a] = rng.uniform(lo[a], hi[a], n)
        p[:, b] = rng.uniform(lo[b], hi[b], n)
        p[:, axis] = value
        out.append(p)
    return np.concatenate(out)


def cylinder(x, y, radius: float, height: float, density: float, rng) -> np.ndarray:
    n = max(1, int(round(density * 2 * np.pi * radius * height)))
    theta = rng.uniform(0, 2 * np.pi, n)
    return np.stack([x + radius * np.cos(theta), y + radius * np.sin(theta), rng.uniform(0, height, n)], axis=1)


def blob(center, sigma: float, density: float, rng) -> np.ndarray:
    n = max(1, int(round(density * 4 * np.pi * sigma ** 2)))
    p = rng.normal(center, sigma, (n, 3))
    p[:, 2] = np.maximum(p[:, 2], 0.05)
    return p


def generate_scene(spec: SceneSpec) -> RawPointCloud:
    """Labeled cloud for ``spec``; identical for identical specs."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    X, Y, _ = spec.extent
    layout = _Layout((X, Y))
    parts: list[tuple[np.ndarray, int]] = []

    buildings = []
    for size_range, count in ((spec.large_building_size, spec.large_buildings),
                              (spec.building_size, spec.buildings)):
        for _ in range(count):
            sx, sy = rng.uniform(*size_range, 2)
            x0, y0, x1, y1 = layout.place(rng, sx, sy)
            h = rng.uniform(*spec.building_height)
            buildings.append((x0, y0, x1, y1))
            parts.append((box_shell((x0, y0, 0.0), (x1, y1, h), spec.density, rng), BUILDING))
    for _ in range(spec.cars):
        along_x = rng.random() < 0.5
        sx, sy = (4.0, 2.0) if along_x else (2.0, 4.0)
        sx, sy = sx * rng.uniform(0.9, 1.1), sy * rng.uniform(0.9, 1.1)
        x0, y0, x1, y1 = layout.place(rng, sx, sy, margin=0.5)
        parts.append((box_shell((x0, y0, 0.2), (x1, y1, 0.2 + rng.uniform(1.3, 1.7)), spec.density, rng, bottom=True), CAR))
    for _ in range(spec.poles):
        r = rng.uniform(0.1, 0.2)
        x0, y0, _, _ = layout.place(rng, 2 * r, 2 * r, margin=0.5)
        parts.append((cylinder(x0 + r, y0 + r, r, rng.uniform(5.0, 9.0), spec.density, rng), POLE))
    for _ in range(spec.trees):
        sigma = rng.uniform(1.0, 2.0)
        x0, y0, _, _ = layout.place(rng, 4 * sigma, 4 * sigma, margin=0.5)
        center = (x0 + 2 * sigma, y0 + 2 * sigma, rng.uniform(2.5, 4.0))
        parts.append((blob(center, sigma, spec.density, rng), VEGETATION))

    ground = ground_plane((X, Y), spec.density, spec.jitter, rng)
    under = np.zeros(len(ground), dtype=bool)
    for x0, y0, x1, y1 in buildings:
        under |= (ground[:, 0] > x0) & (ground[:, 0] < x1) & (ground[:, 1] > y0) & (ground[:, 1] < y1)
    parts.insert(0, (ground[~under], GROUND))

    pos = np.concatenate([p if lab == GROUND else p + rng.normal(0.0, spec.jitter, p.shape) for p, lab in parts])
    labels = np.concatenate([np.full(len(p), lab, dtype=np.int64) for p, lab in parts])
    intensity = np.clip(INTENSITY_MEAN[labels] + rng.normal(0.0, spec.intensity_noise, len(labels)), 0.0, 1.0)
    # stored clouds are float32 on disk; round now so save/load is lossless
    pos = pos.astype(np.float32).astype(np.float64)
    intensity = intensity.astype(np.float32).astype(np.float64)
    return RawPointCloud(pos, None, intensity, labels, DEFAULT_CLASSES.count)


@dataclass
class BenchmarkSuite:
    train: list[RawPointCloud]
    test: list[RawPointCloud]
    train_specs: list[SceneSpec]
    test_specs: list[SceneSpec]

    def class_frequencies(self) -> dict[str, np.ndarray]:
        C = DEFAULT_CLASSES.count
        return {
            split: np.bincount(np.concatenate([c.labels for c in clouds]), minlength=C)
            for split, clouds in (("train", self.train), ("test", self.test))
        }

    def frequency_report(self) -> str:
        freq = self.class_frequencies()
        lines = [f"{'class':<12}{'train':>10}{'test':>10}"]
        for c, name in enumerate(DEFAULT_CLASSES.names):
            lines.append(f"{name:<12}{freq['train'][c]:>10d}{freq['test'][c]:>10d}")
        lines.append(f"{'total':<12}{freq['train'].sum():>10d}{freq['test'].sum():>10d}")
        return "\n".join(lines)


def suite_specs(seed: int = 0, n_train: int = 8, n_test: int = 2, base: SceneSpec | None = None):
    """Scene specs with disjoint per-scene seeds derived from ``seed``."""
    base = base or SceneSpec()
    seeds = np.random.SeedSequence(seed).generate_state(n_train + n_test, dtype=np.uint32)
    specs = [replace(base, seed=int(s)) for s in seeds]
    return specs[:n_train], specs[n_train:]


def generate_benchmark_suite(seed: int = 0, n_train: int = 8, n_test: int = 2,
                             base: SceneSpec | None = None) -> BenchmarkSuite:
    train_specs, test_specs = suite_specs(seed, n_train, n_test, base)
    return BenchmarkSuite([generate_scene(s) for s in train_specs], [generate_scene(s) for s in test_specs],
                          train_specs, test_specs)
