"""Synthetic layered volumes with boundary-derived class labels.

A volume is a depth profile (rank 1) or a depth x width image (rank 2)
partitioned by three boundaries into four classes: everything above the
first boundary is background (0), then each boundary opens the next class
(1, 2, 3). Intensities are per-class means plus Gaussian noise; rank-2
boundaries are smooth cosine mixtures with optional localized bumps on the
middle boundary. Generation uses the counter-based Philox generator so the
same seed reproduces identical bytes on any platform.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dten
from .dten import write_json_atomic

__all__ = [
    "Boundaries",
    "Volume",
    "SplitSpec",
    "PAPER_SPLITS",
    "LAYER_MEANS",
    "GENERATOR_NAME",
    "labels_from_boundaries",
    "generate",
    "extract_ascans",
    "ascans_from_bscans",
    "save_dataset",
    "load_dataset",
    "stack_volumes",
    "batches",
]

LAYER_MEANS = (0.1, 0.7, 0.45, 0.25)
GENERATOR_NAME = "philox4x64"
SPLIT_NAMES = ("train", "reward", "val", "test")


@dataclass(frozen=True)
class SplitSpec:
    """Volume counts per split; defaults are desk-scale."""

    n_train: int = 60
    n_reward: int = 24
    n_val: int = 2
    n_test: int = 24

    def __post_init__(self):
        for name, n in self.as_dict().items():
            if n < 1:
                raise ValueError(f"{name} must be positive, got {n}")

    def as_dict(self) -> dict[str, int]:
        return {
            "train": self.n_train,
            "reward": self.n_reward,
            "val": self.n_val,
            "test": self.n_test,
        }


PAPER_SPLITS = SplitSpec(n_train=150, n_reward=56, n_val=2, n_test=60)


@dataclass
class Boundaries:
    """Depth indices of the three layer boundaries, top to bottom.

    Scalars for depth profiles; per-column integer arrays for images.
    """

    ilm: int | np.ndarray
    rpedc: int | np.ndarray
    bm: int | np.ndarray

    def check(self, depth: int) -> None:
        ilm, rpedc, bm = (np.asarray(v) for v in (self.ilm, self.rpedc, self.bm))
        if not (np.all(0 <= ilm) and np.all(ilm < rpedc)
                and np.all(rpedc < bm) and np.all(bm < depth)):
            raise ValueError(
                f"boundaries must satisfy 0 <= ilm < rpedc < bm < {depth} at every column"
            )


@dataclass
class Volume:
    """Intensity tensor (1, 1, spatial...) with integer class labels of the
    same spatial shape."""

    intensity: np.ndarray
    labels: np.ndarray
    boundaries: Boundaries | None = None

    @property
    def spatial(self) -> tuple[int, ...]:
        return self.intensity.shape[2:]

    @property
    def rank(self) -> int:
        return self.intensity.ndim - 2


def labels_from_boundaries(b: Boundaries, depth: int) -> np.ndarray:
    """Class per depth index: 0 above ilm, then 1, 2, 3 at each boundary.

    Intervals are half-open; a boundary pixel belongs to the layer below it.
    Scalar boundaries give a (depth,) array, per-column arrays (width,)
    give (depth, width).
    """
    b.check(depth)
    ilm, rpedc, bm = (np.asarray(v) for v in (b.ilm, b.rpedc, b.bm))
    d = np.arange(depth)
    if ilm.ndim == 0:
        labels = np.zeros(depth, dtype=np.int64)
    else:
        d = d[:, None]
        labels = np.zeros((depth, ilm.shape[0]), dtype=np.int64)
    labels += (d >= ilm).astype(np.int64)
    labels += (d >= rpedc).astype(np.int64)
    labels += (d >= bm).astype(np.int64)
    return labels


def _smooth_curve(rng: np.random.Generator, width: int, base: float, depth: int) -> np.ndarray:
    pos = np.arange(width) / width
    curve = np.full(width, base)
    for m in range(1, 4):
        amp = rng.uniform(0, 0.03 * depth) / m
        phase = rng.uniform(0, 2 * np.pi)
        curve += amp * np.cos(2 * np.pi * m * pos + phase)
    return curve


def _sample_boundaries(rng: np.random.Generator, rank: int, depth: int,
                       width: int, drusen_prob: float) -> Boundaries:
    ilm = rng.uniform(0.12, 0.28) * depth
    rpedc = ilm + rng.uniform(0.18, 0.32) * depth
    bm = rpedc + rng.uniform(0.12, 0.25) * depth
    if rank == 1:
        b = Boundaries(int(ilm), int(rpedc), int(bm))
    else:
        ilm_c = _smooth_curve(rng, width, ilm, depth)
        rpedc_c = _smooth_curve(rng, width, rpedc, depth)
        bm_c = _smooth_curve(rng, width, bm, depth)
        if rng.random() < drusen_prob:
            # drusen-like bump: the middle boundary rises locally toward ilm
            center = rng.uniform(0.2, 0.8) * width
            sigma = rng.uniform(width / 16, width / 8)
            height = rng.uniform(0.06, 0.14) * depth
            rpedc_c = rpedc_c - height * np.exp(-0.5 * ((np.arange(width) - center) / sigma) ** 2)
        ilm_i = np.clip(ilm_c.astype(np.int64), 1, depth - 7)
        rpedc_i = np.clip(rpedc_c.astype(np.int64), ilm_i + 2, depth - 4)
        bm_i = np.clip(bm_c.astype(np.int64), rpedc_i + 2, depth - 2)
        b = Boundaries(ilm_i, rpedc_i, bm_i)
    b.check(depth)
    return b


def _render(rng: np.random.Generator, b: Boundaries, rank: int, depth: int,
            width: int, noise_sigma: float) -> Volume:
    labels = labels_from_boundaries(b, depth)
    means = np.asarray(LAYER_MEANS, dtype=np.float32)
    intensity = means[labels]
    if noise_sigma > 0:
        intensity = intensity + noise_sigma * rng.standard_normal(labels.shape)
    shape = (1, 1, depth) if rank == 1 else (1, 1, depth, width)
    return Volume(
        intensity=intensity.reshape(shape).astype(np.float32),
        labels=labels,
        boundaries=b,
    )


def generate(seed: int, rank: int, depth: int = 64, width: int = 64,
             splits: SplitSpec | None = None, noise_sigma: float = 0.1,
             drusen_prob: float = 0.3) -> dict[str, list[Volume]]:
    """Deterministic dataset of disjoint train/reward/val/test volumes."""
    if rank not in (1, 2):
        raise ValueError(f"rank must be 1 or 2, got {rank}")
    if depth < 16:
        raise ValueError(f"depth too small: {depth}")
    splits = splits or SplitSpec()
    rng = np.random.Generator(np.random.Philox(seed))
    out: dict[str, list[Volume]] = {}
    for split, count in splits.as_dict().items():
        vols = []
        for _ in range(count):
            b = _sample_boundaries(rng, rank, depth, width, drusen_prob)
            vols.append(_render(rng, b, rank, depth, width, noise_sigma))
        out[split] = vols
    return out


def extract_ascans(vol: Volume) -> list[Volume]:
    """Split a rank-2 volume into its per-column depth profiles, in order."""
    if vol.rank != 2:
        raise ValueError(f"extract_ascans requires a rank-2 volume, got rank {vol.rank}")
    width = vol.spatial[1]
    out = []
    for j in range(width):
        b = vol.boundaries
        col_b = None
        if b is not None:
            col_b = Boundaries(int(np.asarray(b.ilm)[j]),
                               int(np.asarray(b.rpedc)[j]),
                               int(np.asarray(b.bm)[j]))
        out.append(Volume(
            intensity=np.ascontiguousarray(vol.intensity[:, :, :, j]),
            labels=np.ascontiguousarray(vol.labels[:, j]),
            boundaries=col_b,
        ))
    return out


def ascans_from_bscans(splits2d: dict[str, list[Volume]],
                       columns_per_scan: int = 16) -> dict[str, list[Volume]]:
    """Derive a rank-1 dataset by taking evenly spaced columns of each image;
    columns stay in their source volume's split."""
    out: dict[str, list[Volume]] = {}
    for split, vols in splits2d.items():
        derived = []
        for vol in vols:
            cols = extract_ascans(vol)
            idx = np.linspace(0, len(cols) - 1, min(columns_per_scan, len(cols)))
            for j in sorted(set(int(round(i)) for i in idx)):
                derived.append(cols[j])
        out[split] = derived
    return out


# -- dataset directories -------------------------------------------------------


def save_dataset(directory: str | Path, splits: dict[str, list[Volume]], meta: dict) -> None:
    """Layout: <dir>/<split>/vol_<idx>/{intensity.dten, labels.dten, meta.json}."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for split, vols in splits.items():
        for i, vol in enumerate(vols):
            vdir = directory / split / f"vol_{i:03d}"
            vdir.mkdir(parents=True, exist_ok=True)
            dten.write_dten(vdir / "intensity.dten", vol.intensity)
            dten.write_dten(vdir / "labels.dten", vol.labels.astype(np.float32))
            vmeta: dict = {"index": i}
            if vol.boundaries is not None:
                vmeta["boundaries"] = {
                    "ilm": np.asarray(vol.boundaries.ilm).tolist(),
                    "rpedc": np.asarray(vol.boundaries.rpedc).tolist(),
                    "bm": np.asarray(vol.boundaries.bm).tolist(),
                }
            write_json_atomic(vdir / "meta.json", vmeta)
    write_json_atomic(directory / "meta.json", meta)


def load_dataset(directory: str | Path) -> tuple[dict[str, list[Volume]], dict]:
    directory = Path(directory)
    meta_path = directory / "meta.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"{directory}: not a dataset directory (no meta.json)")
    meta = json.loads(meta_path.read_text())
    splits: dict[str, list[Volume]] = {}
    for split in SPLIT_NAMES:
        sdir = directory / split
        if not sdir.is_dir():
            continue
        vols = []
        for vdir in sorted(sdir.iterdir()):
            if not vdir.is_dir():
                continue
            intensity = dten.read_dten(vdir / "intensity.dten")
            labels = np.rint(dten.read_dten(vdir / "labels.dten")).astype(np.int64)
            b = None
            vmeta_path = vdir / "meta.json"
            if vmeta_path.exists():
                vmeta = json.loads(vmeta_path.read_text())
                if "boundaries" in vmeta:
                    raw = vmeta["boundaries"]
                    b = Boundaries(
                        *(np.asarray(raw[k]) if isinstance(raw[k], list) else raw[k]
                          for k in ("ilm", "rpedc", "bm"))
                    )
            vols.append(Volume(intensity=intensity, labels=labels, boundaries=b))
        splits[split] = vols
    return splits, meta


# -- batching --------------------------------------------------------------------


def stack_volumes(vols: list[Volume]) -> tuple[np.ndarray, np.ndarray]:
    """(B, 1, spatial...) intensities and (B, spatial...) labels."""
    x = np.concatenate([v.intensity for v in vols], axis=0)
    y = np.stack([v.labels for v in vols], axis=0)
    return x, y


def batches(vols: list[Volume], batch_size: int,
            rng: np.random.Generator | None = None):
    """Yield (x, y) minibatches; shuffled when an rng is given. The final
    partial batch is kept."""
    order = np.arange(len(vols))
    if rng is not None:
        rng.shuffle(order)
    for start in range(0, len(vols), batch_size):
        chunk = [vols[i] for i in order[start : start + batch_size]]
        yield stack_volumes(chunk)
