"""Paired two-sensor datasets: a deterministic synthetic generator, stratified
splits, PNG/PGM import, and a seeded batch loader.

Synthetic classes are built so that neither sensor alone identifies the class:
the visible-like image encodes ``label // 2`` in its illumination direction,
the infrared-like image encodes ``label % 2`` in where a hot spot sits on the
target, and the target silhouette (shared by both) only tells ``label // 2``
apart by parity. Each image also carries a decoy of the other sensor's cue.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator

import numpy as np
from scipy import ndimage

from . import fdt
from .errors import DatasetError, SplitError

SPLITS = ("train", "test", "val")
DEFAULT_RATIOS = (0.7, 0.2, 0.1)
MANIFEST = "manifest.csv"
MANIFEST_FIELDS = ("pair_id", "label", "split", "path_vis", "path_ir")


@dataclass(frozen=True)
class SynthSpec:
    seed: int = 0
    classes: int = 6
    per_class: int = 200
    image_size: int = 32
    max_shift: float = 2.0        # pixels, applied to the infrared image
    max_rotation: float = 5.0     # degrees, applied to the infrared image
    noise_vis: float = 0.05
    noise_ir: float = 0.05

    def __post_init__(self):
        if self.classes < 2 or self.per_class < 1:
            raise ValueError("need at least two classes and one sample per class")
        if self.image_size < 16 or self.image_size % 4:
            raise ValueError("image size must be a multiple of 4, at least 16")


@dataclass
class PairedSample:
    image_vis: np.ndarray   # [3, H, W] in [0, 1]
    image_ir: np.ndarray
    label: int
    pair_id: int


# rendering

def _grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    ax = (np.arange(size) + 0.5) / size * 2.0 - 1.0
    return np.meshgrid(ax, ax, indexing="ij")


def _silhouette(family: int, size: int, cy: float, cx: float, scale: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    if family == 0:
        d = np.sqrt(dy * dy + dx * dx) - scale
    else:
        d = np.maximum(np.abs(dy), np.abs(dx)) - 0.85 * scale
    return 1.0 / (1.0 + np.exp(2.0 * d))     # soft edge


def _blob(size: int, cy: float, cx: float, sigma: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    return np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * sigma * sigma))


def _hot_spot_offset(bit: int, size: int) -> tuple[float, float]:
    r = size * 0.11
    return (-r, -r) if bit == 0 else (r, r)


def _render(spec: SynthSpec, label: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    size = spec.image_size
    vis_attr = label // 2
    n_vis_attr = (spec.classes + 1) // 2
    ir_attr = label % 2
    family = vis_attr % 2

    cy, cx = size / 2 + rng.uniform(-0.1, 0.1, size=2) * size
    scale = size * rng.uniform(0.18, 0.24)
    shape = _silhouette(family, size, cy, cx, scale)
    gy, gx = _grid(size)

    # visible-like: smooth shading whose direction encodes vis_attr
    theta = 2 * math.pi * vis_attr / n_vis_attr + rng.uniform(-0.2, 0.2)
    ramp = math.cos(theta) * gx + math.sin(theta) * gy
    base = 0.45 + rng.uniform(-0.08, 0.08)
    shading = base + 0.22 * ramp
    tint = 1.0 + rng.uniform(-0.08, 0.08, size=3)
    obj = 0.25 + 0.1 * rng.uniform(-1, 1)
    vis = shading[None] * tint[:, None, None] + obj * shape[None]
    decoy_bit = int(rng.integers(2))
    oy, ox = _hot_spot_offset(decoy_bit, size)
    vis = vis + 0.25 * _blob(size, cy + oy, cx + ox, size * 0.05)[None]

    # infrared-like: warm target, blob clutter, hot spot position encodes ir_attr
    clutter = sum(rng.uniform(0.05, 0.15) * _blob(size, *rng.uniform(0, size, 2), size * rng.uniform(0.08, 0.2))
                  for _ in range(3))
    decoy_theta = rng.uniform(0, 2 * math.pi)
    decoy_ramp = 0.12 * (math.cos(decoy_theta) * gx + math.sin(decoy_theta) * gy)
    oy, ox = _hot_spot_offset(ir_attr, size)
    oy, ox = oy + rng.uniform(-1, 1), ox + rng.uniform(-1, 1)
    ir = (0.2 + decoy_ramp + clutter + (0.3 + 0.1 * rng.uniform(-1, 1)) * shape
          + 0.4 * _blob(size, cy + oy, cx + ox, size * 0.05))

    if spec.max_rotation or spec.max_shift:
        angle = rng.uniform(-spec.max_rotation, spec.max_rotation)
        shift = rng.uniform(-spec.max_shift, spec.max_shift, size=2)
        ir = _rigid(ir, angle, shift)
    ir = np.repeat(ir[None], 3, axis=0)

    if spec.noise_vis:
        vis = vis + rng.normal(0.0, spec.noise_vis, vis.shape)
    if spec.noise_ir:
        ir = ir + rng.normal(0.0, spec.noise_ir, ir.shape)
    return (np.clip(vis, 0, 1).astype(np.float32), np.clip(ir, 0, 1).astype(np.float32))


def _rigid(img: np.ndarray, angle_deg: float, shift: np.ndarray) -> np.ndarray:
    """Rotate about the image center, then translate."""
    a = math.radians(angle_deg)
    rot = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
    center = (np.array(img.shape) - 1) / 2.0
    offset = center - rot @ center - rot @ shift
    return ndimage.affine_transform(img, rot, offset=offset, order=1, mode="nearest")


def synthesize(spec: SynthSpec) -> list[PairedSample]:
    """All samples of ``spec`` in memory, ordered by class then index."""
    samples = []
    for label in range(spec.classes):
        for i in range(spec.per_class):
            pair_id = label * spec.per_class + i
            rng = np.random.default_rng([spec.seed, pair_id])
            vis, ir = _render(spec, label, rng)
            samples.append(PairedSample(vis, ir, label, pair_id))
    return samples


# splits and manifests

def split(labels, ratios=DEFAULT_RATIOS, seed: int = 0) -> dict[str, np.ndarray]:
    """Stratified train/test/val index sets, deterministic under ``seed``."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise SplitError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    out = {name: [] for name in SPLITS}
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        if len(idx) < 3:
            raise SplitError(f"class {c} has {len(idx)} samples; at least 3 are needed")
        idx = rng.permutation(idx)
        n_train = int(round(ratios[0] * len(idx)))
        n_test = int(round(ratios[1] * len(idx)))
        out["train"].extend(idx[:n_train])
        out["test"].extend(idx[n_train:n_train + n_test])
        out["val"].extend(idx[n_train + n_test:])
    return {name: np.sort(np.asarray(v, dtype=np.int64)) for name, v in out.items()}


def write_manifest(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=MANIFEST_FIELDS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def read_manifest(path) -> list[dict]:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST
    try:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise DatasetError(f"cannot read manifest {path}: {exc.strerror}", path=str(path)) from exc
    for row in rows:
        row["pair_id"] = int(row["pair_id"])
        row["label"] = int(row["label"])
    return rows


def _write_pairs(out_dir: Path, samples: list[PairedSample], ratios, seed: int) -> Path:
    (out_dir / "pairs").mkdir(parents=True, exist_ok=True)
    parts = split([s.label for s in samples], ratios, seed)
    which = {}
    for name, idx in parts.items():
        for i in idx:
            which[int(i)] = name
    rows = []
    for i, s in enumerate(samples):
        pv = f"pairs/{s.pair_id:06d}_vis.fdt"
        pi = f"pairs/{s.pair_id:06d}_ir.fdt"
        fdt.save(out_dir / pv, s.image_vis)
        fdt.save(out_dir / pi, s.image_ir)
        rows.append({"pair_id": s.pair_id, "label": s.label, "split": which[i],
                     "path_vis": pv, "path_ir": pi})
    manifest = out_dir / MANIFEST
    write_manifest(manifest, rows)
    return manifest


def generate(spec: SynthSpec, out_dir, ratios=DEFAULT_RATIOS) -> Path:
    """Write the dataset of ``spec`` (FDT images + manifest.csv) and return the manifest path."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        manifest = _write_pairs(out_dir, synthesize(spec), ratios, spec.seed)
        with open(out_dir / "synth.cfg", "w") as fh:
            for key, value in asdict(spec).items():
                fh.write(f"{key}={value}\n")
    except OSError as exc:
        if isinstance(exc, DatasetError):
            raise
        raise DatasetError(f"cannot write dataset to {out_dir}: {exc.strerror}", path=str(out_dir)) from exc
    return manifest


def _read_image(path: Path, size: int | None) -> np.ndarray:
    from PIL import Image

    try:
        with Image.open(path) as im:
            im = im.convert("L")
            if size is not None and im.size != (size, size):
                im = im.resize((size, size), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float32) / 255.0
    except OSError as exc:
        raise DatasetError(f"cannot read image {path}", path=str(path)) from exc
    return np.repeat(arr[None], 3, axis=0)


def import_pairs(src_dir, out_dir, size: int | None = None, ratios=DEFAULT_RATIOS, seed: int = 0) -> Path:
    """Convert ``<src>/<class>/<stem>_vis.{png,pgm}`` + ``<stem>_ir.*`` pairs to a dataset.

    Class indices follow the sorted class directory names, recorded in classes.txt.
    """
    src_dir, out_dir = Path(src_dir), Path(out_dir)
    classes = sorted(p.name for p in src_dir.iterdir() if p.is_dir())
    if len(classes) < 2:
        raise DatasetError(f"{src_dir} needs at least two class directories", path=str(src_dir))
    samples = []
    for label, name in enumerate(classes):
        for vis_path in sorted((src_dir / name).iterdir()):
            stem, suffix = vis_path.stem, vis_path.suffix.lower()
            if not stem.endswith("_vis") or suffix not in (".png", ".pgm"):
                continue
            ir_path = vis_path.with_name(stem[:-4] + "_ir" + vis_path.suffix)
            if not ir_path.exists():
                raise DatasetError(f"missing infrared partner {ir_path}", path=str(ir_path))
            vis, ir = _read_image(vis_path, size), _read_image(ir_path, size)
            if vis.shape != ir.shape or vis.shape[1] % 4 or vis.shape[2] % 4:
                raise DatasetError(f"pair {vis_path.name}: sizes must match and be divisible by 4",
                                   path=str(vis_path))
            samples.append(PairedSample(vis, ir, label, len(samples)))
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = _write_pairs(out_dir, samples, ratios, seed)
    (out_dir / "classes.txt").write_text("\n".join(classes) + "\n")
    return manifest


# loading

@dataclass
class Batch:
    vis: np.ndarray
    ir: np.ndarray
    labels: np.ndarray
    pair_ids: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)


class PairDataset:
    """All pairs of one split held in memory."""

    def __init__(self, vis: np.ndarray, ir: np.ndarray, labels: np.ndarray, pair_ids: np.ndarray):
        self.vis, self.ir, self.labels, self.pair_ids = vis, ir, labels, pair_ids

    @classmethod
    def from_manifest(cls, manifest, split_name: str | None = None) -> "PairDataset":
        manifest = Path(manifest)
        root = manifest if manifest.is_dir() else manifest.parent
        rows = [r for r in read_manifest(manifest) if split_name is None or r["split"] == split_name]
        if not rows:
            raise DatasetError(f"no pairs for split {split_name!r} in {manifest}", path=str(manifest))
        vis = np.stack([fdt.load(root / r["path_vis"]) for r in rows])
        ir = np.stack([fdt.load(root / r["path_ir"]) for r in rows])
        labels = np.array([r["label"] for r in rows], dtype=np.int64)
        ids = np.array([r["pair_id"] for r in rows], dtype=np.int64)
        return cls(vis, ir, labels, ids)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1

    def batches(self, batch_size: int, shuffle: bool = True, seed: int = 0) -> Iterator[Batch]:
        """One epoch of batches; the final partial batch is kept."""
        if batch_size < 1:
            raise ValueError("batch size must be positive")
        order = np.random.default_rng(seed).permutation(len(self)) if shuffle else np.arange(len(self))
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            yield Batch(self.vis[idx], self.ir[idx], self.labels[idx], self.pair_ids[idx])


def load_pairs(manifest, split_name: str, batch_size: int = 24, seed: int = 0,
               shuffle: bool = True) -> Iterator[Batch]:
    return PairDataset.from_manifest(manifest, split_name).batches(batch_size, shuffle, seed)


# data-level fusion headroom check

def linear_probe_accuracy(train_x: np.ndarray, train_y: np.ndarray, test_x: np.ndarray,
                          test_y: np.ndarray, ridge: float = 1.0) -> float:
    """Test accuracy of a one-vs-rest ridge classifier on flattened inputs."""
    xtr = train_x.reshape(len(train_x), -1).astype(np.float64)
    xte = test_x.reshape(len(test_x), -1).astype(np.float64)
    mu, sd = xtr.mean(0), xtr.std(0) + 1e-6
    xtr, xte = (xtr - mu) / sd, (xte - mu) / sd
    xtr = np.hstack([xtr, np.ones((len(xtr), 1))])
    xte = np.hstack([xte, np.ones((len(xte), 1))])
    classes = int(max(train_y.max(), test_y.max())) + 1
    targets = np.eye(classes)[train_y] * 2 - 1
    # dual form: fewer samples than features
    gram = xtr @ xtr.T + ridge * np.eye(len(xtr))
    w = xtr.T @ np.linalg.solve(gram, targets)
    pred = np.argmax(xte @ w, axis=1)
    return float(np.mean(pred == test_y))
