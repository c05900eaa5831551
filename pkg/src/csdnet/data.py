"""Depth/thermal samples: dataset loader, synthetic scene generator, splits, batching.

All maps are float32 in [0, 1] with *near = bright* depth.  Raw depth files
store the sensor convention (far = bright) and are inverted on load.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import DataError, DomainError


@dataclass
class Sample:
    id: str
    depth: np.ndarray
    thermal: np.ndarray
    gt: np.ndarray
    embedding_path: Optional[str] = None

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=np.float32)
        self.thermal = np.asarray(self.thermal, dtype=np.float32)
        self.gt = (np.asarray(self.gt) > 0.5).astype(np.uint8)
        if not (self.depth.shape == self.thermal.shape == self.gt.shape) or self.depth.ndim != 2:
            raise DomainError(
                f"sample {self.id!r}: depth {self.depth.shape}, thermal {self.thermal.shape} "
                f"and gt {self.gt.shape} must be equal 2-D shapes"
            )

    @property
    def shape(self) -> Tuple[int, int]:
        return self.depth.shape

    def hflip(self) -> "Sample":
        return Sample(self.id, self.depth[:, ::-1].copy(), self.thermal[:, ::-1].copy(),
                      self.gt[:, ::-1].copy(), self.embedding_path)


@dataclass
class ObjectSpec:
    shape: str  # "ellipse" | "rectangle"
    center: Tuple[float, float]  # (row, col), pixels
    size: Tuple[float, float]  # ellipse radii or rectangle half-extents, (rows, cols)
    depth_visibility: float = 1.0
    thermal_visibility: float = 1.0


@dataclass
class SceneSpec:
    seed: int
    canvas: Tuple[int, int] = (64, 64)
    objects: List[ObjectSpec] = field(default_factory=list)
    depth_clutter: float = 0.01
    thermal_clutter: float = 0.06
    contrast: float = 0.35

    def __post_init__(self):
        self.canvas = tuple(int(c) for c in self.canvas)
        self.objects = [o if isinstance(o, ObjectSpec) else ObjectSpec(**o) for o in self.objects]
        if not any(max(o.depth_visibility, o.thermal_visibility) > 0 for o in self.objects):
            raise DomainError("a scene needs at least one object visible in some modality")
        for o in self.objects:
            if o.shape not in ("ellipse", "rectangle"):
                raise DomainError(f"unknown object shape {o.shape!r}")
            for v in (o.depth_visibility, o.thermal_visibility):
                if not 0.0 <= v <= 1.0:
                    raise DomainError(f"visibility must be in [0, 1], got {v}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "SceneSpec":
        return cls(**json.loads(text))


def rasterize(obj: ObjectSpec, canvas: Tuple[int, int]) -> np.ndarray:
    """Boolean support of one object, sampled at integer pixel positions."""
    rows, cols = np.mgrid[0:canvas[0], 0:canvas[1]].astype(np.float64)
    dy = rows - obj.center[0]
    dx = cols - obj.center[1]
    if obj.shape == "ellipse":
        return (dy / obj.size[0]) ** 2 + (dx / obj.size[1]) ** 2 <= 1.0
    return (np.abs(dy) <= obj.size[0]) & (np.abs(dx) <= obj.size[1])


def synth_sample(spec: SceneSpec, sample_id: Optional[str] = None) -> Sample:
    """Render a low-coherence depth/thermal pair and its ground truth.

    Depth: a tilted plane (smooth gradient) plus faint noise; each object is
    raised by ``contrast * depth_visibility``.  Thermal: smoothed random
    clutter; each object is heated by ``contrast * thermal_visibility``.
    The ground truth is the union of all object supports.
    """
    h, w = spec.canvas
    rng = np.random.default_rng(spec.seed)
    rows, cols = np.mgrid[0:h, 0:w] / max(h, w)

    angle = rng.uniform(0, 2 * np.pi)
    ramp = np.cos(angle) * rows + np.sin(angle) * cols
    ramp = (ramp - ramp.min()) / max(np.ptp(ramp), 1e-9)
    depth = 0.15 + 0.35 * ramp + spec.depth_clutter * rng.standard_normal((h, w))

    clutter = ndimage.gaussian_filter(rng.standard_normal((h, w)), sigma=2.0, mode="reflect")
    clutter /= max(clutter.std(), 1e-9)
    thermal = 0.35 + spec.thermal_clutter * clutter

    gt = np.zeros((h, w), dtype=bool)
    for obj in spec.objects:
        support = rasterize(obj, (h, w))
        gt |= support
        depth = depth + spec.contrast * obj.depth_visibility * support
        thermal = thermal + spec.contrast * obj.thermal_visibility * support

    return Sample(
        id=sample_id or f"synth_{spec.seed:06d}",
        depth=np.clip(depth, 0.0, 1.0),
        thermal=np.clip(thermal, 0.0, 1.0),
        gt=gt,
    )


# (depth_visibility, thermal_visibility) cycled over objects
LOW_COHERENCE_MIX = ((1.0, 0.0), (0.0, 1.0), (0.8, 0.8))


def random_scene(seed: int, canvas=(64, 64), n_objects: int = 3, mix=LOW_COHERENCE_MIX) -> SceneSpec:
    """Scene with objects cycling through depth-only, thermal-only and shared visibility."""
    rng = np.random.default_rng(seed)
    h, w = canvas
    objects = []
    placed = []
    for k in range(n_objects):
        ry = rng.uniform(0.08, 0.16) * h
        rx = rng.uniform(0.08, 0.16) * w
        for _ in range(100):
            cy = rng.uniform(ry + 1, h - ry - 1)
            cx = rng.uniform(rx + 1, w - rx - 1)
            if all(abs(cy - py) > ry + pry + 2 or abs(cx - px) > rx + prx + 2 for py, px, pry, prx in placed):
                break
        placed.append((cy, cx, ry, rx))
        dv, tv = mix[k % len(mix)]
        objects.append(ObjectSpec(
            shape="ellipse" if rng.random() < 0.6 else "rectangle",
            center=(float(cy), float(cx)),
            size=(float(ry), float(rx)),
            depth_visibility=dv,
            thermal_visibility=tv,
        ))
    return SceneSpec(seed=int(seed), canvas=tuple(canvas), objects=objects)


def synthetic_dataset(n: int, seed: int = 0, canvas=(64, 64), n_objects: int = 3) -> List[Sample]:
    return [synth_sample(random_scene(seed * 100003 + k, canvas, n_objects), f"synth_{seed}_{k:04d}")
            for k in range(n)]


@dataclass(frozen=True)
class DatasetLayout:
    depth_dir: str = "D"
    thermal_dir: str = "T"
    gt_dir: str = "GT"
    suffix: str = ".png"
    invert_depth: bool = True

    def paths(self, root, sample_id: str):
        root = Path(root)
        return (root / self.depth_dir / f"{sample_id}{self.suffix}",
                root / self.thermal_dir / f"{sample_id}{self.suffix}",
                root / self.gt_dir / f"{sample_id}{self.suffix}")


def _read_gray(path: Path, size=None, resample=Image.BILINEAR) -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert("L")
        if size is not None and im.size != (size[1], size[0]):
            im = im.resize((size[1], size[0]), resample=resample)
        return np.asarray(im, dtype=np.float32) / 255.0


def load_vdt_sample(root, sample_id: str, size: Optional[Tuple[int, int]] = None,
                    layout: DatasetLayout = DatasetLayout()) -> Sample:
    """Load ``root/{D,T,GT}/<id>.png`` as one sample.

    Raises:
        DataError: any of the three files is missing; the message names it.
    """
    paths = layout.paths(root, sample_id)
    missing = [str(p) for p in paths if not p.is_file()]
    if missing:
        raise DataError(f"sample {sample_id!r}: missing file(s): {', '.join(missing)}")
    d_path, t_path, g_path = paths
    depth = _read_gray(d_path, size)
    if layout.invert_depth:
        depth = 1.0 - depth
    thermal = _read_gray(t_path, size)
    if size is None:
        size = depth.shape
    gt = _read_gray(g_path, size, resample=Image.NEAREST) >= 0.5
    return Sample(sample_id, depth, thermal, gt)


def list_sample_ids(root, layout: DatasetLayout = DatasetLayout()) -> List[str]:
    gt_dir = Path(root) / layout.gt_dir
    if not gt_dir.is_dir():
        raise DataError(f"ground-truth directory not found: {gt_dir}")
    return sorted(p.stem for p in gt_dir.glob(f"*{layout.suffix}"))


def _to_u8(x: np.ndarray) -> Image.Image:
    return Image.fromarray(np.clip(np.round(np.asarray(x, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8))


def write_png(path, x) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    _to_u8(x).save(path)
    return path


def write_sample(root, sample: Sample, layout: DatasetLayout = DatasetLayout()):
    """Write a sample in the on-disk layout read by :func:`load_vdt_sample`."""
    d_path, t_path, g_path = layout.paths(root, sample.id)
    write_png(d_path, 1.0 - sample.depth if layout.invert_depth else sample.depth)
    write_png(t_path, sample.thermal)
    write_png(g_path, sample.gt)


def make_split(ids: Sequence[str], train_fraction: float, seed: int):
    """Deterministic disjoint ``(train, test)`` partition of ``ids``."""
    ids = list(ids)
    if not ids:
        raise DomainError("cannot split an empty id list")
    if not 0.0 <= train_fraction <= 1.0:
        raise DomainError(f"train_fraction must be in [0, 1], got {train_fraction}")
    order = np.random.default_rng(seed).permutation(len(ids))
    n_train = int(round(train_fraction * len(ids)))
    return [ids[i] for i in order[:n_train]], [ids[i] for i in order[n_train:]]


def write_split(path, ids: Sequence[str]) -> Path:
    path = Path(path)
    path.write_text("".join(f"{i}\n" for i in ids))
    return path


def read_split(path) -> List[str]:
    return [line.strip() for line in Path(path).read_text().splitlines() if line.strip()]


def batch_order(n: int, batch_size: int, seed: int, epoch: int) -> List[np.ndarray]:
    """Index batches for one epoch; reproducible per ``(seed, epoch)``."""
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def iterate_batches(samples: Sequence[Sample], batch_size: int, seed: int, epoch: int) -> Iterator[List[Sample]]:
    for idx in batch_order(len(samples), batch_size, seed, epoch):
        yield [samples[i] for i in idx]
