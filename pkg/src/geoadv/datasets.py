"""Procedural point-cloud dataset of simple analytic shapes.

Each class is a closed surface with z as the up axis. Shapes other than the
sphere are triangulated finely and sampled by area with
:func:`geometry.sample_mesh_surface`.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import InvalidSpec
from .geometry import TriangleMesh, normalize_unit_ball, sample_mesh_surface

SHAPES = ("sphere", "box", "cylinder", "cone", "torus", "ellipsoid", "pyramid", "capsule")

_SEGMENTS = 64


def _revolve(profile, segments: int = _SEGMENTS) -> TriangleMesh:
    """Surface of revolution about z of a polyline of ``(r, z)`` pairs."""
    profile = np.asarray(profile, dtype=np.float64)
    theta = np.linspace(0.0, 2 * np.pi, segments, endpoint=False)
    c, s = np.cos(theta), np.sin(theta)
    m = len(profile)
    verts = np.empty((m * segments, 3))
    for i, (r, z) in enumerate(profile):
        verts[i * segments : (i + 1) * segments] = np.column_stack([r * c, r * s, np.full(segments, z)])
    faces = []
    for i in range(m - 1):
        for j in range(segments):
            a = i * segments + j
            b = i * segments + (j + 1) % segments
            cc = (i + 1) * segments + j
            d = (i + 1) * segments + (j + 1) % segments
            faces += [(a, b, d), (a, d, cc)]
    return TriangleMesh(verts, np.array(faces))


def _arc(r0, z0, radius, a0, a1, steps=16):
    t = np.linspace(a0, a1, steps)
    return np.column_stack([r0 + radius * np.cos(t), z0 + radius * np.sin(t)])


def _box(hx=1.0, hy=0.75, hz=0.55) -> TriangleMesh:
    v = np.array([[x, y, z] for x in (-hx, hx) for y in (-hy, hy) for z in (-hz, hz)])
    quads = [(0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1), (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3)]
    faces = [t for a, b, c, d in quads for t in ((a, b, c), (a, c, d))]
    return TriangleMesh(v, np.array(faces))


def _pyramid(h=0.8, base=-0.55, apex=0.9) -> TriangleMesh:
    v = np.array([[-h, -h, base], [h, -h, base], [h, h, base], [-h, h, base], [0, 0, apex]])
    faces = [(0, 2, 1), (0, 3, 2), (0, 1, 4), (1, 2, 4), (2, 3, 4), (3, 0, 4)]
    return TriangleMesh(v, np.array(faces))


def shape_mesh(name: str) -> TriangleMesh:
    """Triangulated base surface of a shape class."""
    if name == "sphere":
        return _revolve(_arc(0.0, 0.0, 1.0, -np.pi / 2, np.pi / 2, 33))
    if name == "box":
        return _box()
    if name == "cylinder":
        return _revolve([(0.0, -1.0), (0.55, -1.0), (0.55, 1.0), (0.0, 1.0)])
    if name == "cone":
        return _revolve([(0.0, -0.6), (0.85, -0.6), (0.0, 1.0)])
    if name == "torus":
        return _revolve(_arc(0.75, 0.0, 0.28, 0.0, 2 * np.pi, 33))
    if name == "ellipsoid":
        mesh = _revolve(_arc(0.0, 0.0, 1.0, -np.pi / 2, np.pi / 2, 33))
        return TriangleMesh(mesh.vertices * (1.0, 0.5, 0.28), mesh.faces)
    if name == "pyramid":
        return _pyramid()
    if name == "capsule":
        prof = np.vstack(
            [
                _arc(0.0, -0.6, 0.4, -np.pi / 2, 0.0),
                _arc(0.0, 0.6, 0.4, 0.0, np.pi / 2),
            ]
        )
        return _revolve(prof)
    raise InvalidSpec(f"unknown shape {name!r}")


def sample_shape(name: str, n: int, rng: np.random.Generator) -> np.ndarray:
    if name == "sphere":
        v = rng.normal(size=(n, 3))
        return v / np.linalg.norm(v, axis=1, keepdims=True)
    return sample_mesh_surface(shape_mesh(name), n, rng)


@dataclass
class DatasetSpec:
    classes: tuple = SHAPES
    train_per_class: int = 250
    test_per_class: int = 50
    n_points: int = 1024
    scale_range: tuple = (0.7, 1.3)
    rotate: bool = True
    noise: float = 0.005
    seed: int = 0

    def validate(self) -> None:
        if len(self.classes) < 2 or len(set(self.classes)) != len(self.classes):
            raise InvalidSpec("need at least two distinct classes")
        for c in self.classes:
            if c not in SHAPES:
                raise InvalidSpec(f"unknown shape {c!r}; choose from {', '.join(SHAPES)}")
        if self.n_points < 64:
            raise InvalidSpec("n_points must be >= 64")
        if self.train_per_class < 0 or self.test_per_class < 0:
            raise InvalidSpec("class counts must be non-negative")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise InvalidSpec("scale_range must satisfy 0 < lo <= hi")
        if self.noise < 0:
            raise InvalidSpec("noise must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["classes"] = list(self.classes)
        d["scale_range"] = list(self.scale_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        d = dict(d)
        d["classes"] = tuple(d.get("classes", SHAPES))
        d["scale_range"] = tuple(d.get("scale_range", (0.7, 1.3)))
        return cls(**d)


@dataclass
class Dataset:
    train_points: np.ndarray
    train_labels: np.ndarray
    test_points: np.ndarray
    test_labels: np.ndarray
    class_names: list = field(default_factory=list)
    spec: Optional[DatasetSpec] = None


def make_cloud(name: str, spec: DatasetSpec, rng: np.random.Generator, augment: bool = True) -> np.ndarray:
    pts = sample_shape(name, spec.n_points, rng)
    if augment:
        pts = pts * rng.uniform(*spec.scale_range, size=3)
        if spec.rotate:
            t = rng.uniform(0.0, 2 * np.pi)
            c, s = np.cos(t), np.sin(t)
            pts = pts @ np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])
        if spec.noise > 0:
            pts = pts + rng.uniform(-spec.noise, spec.noise, size=pts.shape)
    return normalize_unit_ball(pts)


def gen_dataset(spec: DatasetSpec = DatasetSpec()) -> Dataset:
    """Generate train/test splits; every cloud has its own seed stream.

    Train and test clouds draw from disjoint seed streams, so the splits
    never share a sample.
    """
    spec.validate()
    splits = {}
    for split_id, (split, count) in enumerate(
        (("train", spec.train_per_class), ("test", spec.test_per_class))
    ):
        pts = np.empty((count * len(spec.classes), spec.n_points, 3))
        labels = np.empty(count * len(spec.classes), dtype=np.intp)
        row = 0
        for i in range(count):
            for label, name in enumerate(spec.classes):
                rng = np.random.default_rng([spec.seed, split_id, label, i])
                pts[row] = make_cloud(name, spec, rng)
                labels[row] = label
                row += 1
        splits[split] = (pts, labels)
    return Dataset(*splits["train"], *splits["test"], list(spec.classes), spec)


def save_dataset(ds: Dataset, root) -> None:
    """One XYZ file per cloud plus a ``manifest.json`` of labels."""
    from .fileio import write_json, write_xyz

    root = Path(root)
    manifest = {"schema_version": 1, "classes": ds.class_names, "train": [], "test": []}
    if ds.spec is not None:
        manifest["spec"] = ds.spec.to_dict()
    for split, pts, labels in (
        ("train", ds.train_points, ds.train_labels),
        ("test", ds.test_points, ds.test_labels),
    ):
        for i, (cloud, label) in enumerate(zip(pts, labels)):
            rel = f"{split}/{i:05d}_{ds.class_names[label]}.xyz"
            write_xyz(cloud, root / rel)
            manifest[split].append({"id": f"{split}-{i:05d}", "file": rel, "label": int(label)})
    write_json(root / "manifest.json", manifest)


def load_dataset(root) -> Dataset:
    from .fileio import read_json, read_xyz

    root = Path(root)
    manifest = read_json(root / "manifest.json")
    arrays = {}
    for split in ("train", "test"):
        entries = manifest[split]
        clouds = [read_xyz(root / e["file"]) for e in entries]
        pts = np.stack(clouds) if clouds else np.zeros((0, 0, 3))
        arrays[split] = (pts, np.array([e["label"] for e in entries], dtype=np.intp))
    spec = DatasetSpec.from_dict(manifest["spec"]) if "spec" in manifest else None
    return Dataset(*arrays["train"], *arrays["test"], list(manifest["classes"]), spec)
