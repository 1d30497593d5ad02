"""Volume records, the on-disk volume store, synthetic phantoms and splits."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import (
    DimensionMismatchError,
    FormatVersionError,
    ManifestError,
    MissingSliceError,
    StoreError,
)

FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"


@dataclass
class VolumeRecord:
    """A stack of axial slices with optional per-slice label masks.

    ``slices`` is ``(S, H, W)`` float32 in [0, 1]; ``masks`` is ``(S, H, W)``
    uint8 with 0 = background and organs 1..k_classes, or ``None`` for
    unlabeled volumes.
    """

    volume_id: str
    slices: np.ndarray
    masks: Optional[np.ndarray] = None
    domain_tag: str = "source"
    spacing: tuple = (1.0, 1.0, 1.0)
    k_classes: int = 4

    def __post_init__(self):
        self.slices = np.ascontiguousarray(self.slices, dtype=np.float32)
        if self.slices.ndim != 3 or self.slices.shape[0] < 1:
            raise ValueError(f"{self.volume_id}: slices must be (S, H, W), got {self.slices.shape}")
        if min(self.slices.shape[1:]) < 8:
            raise ValueError(f"{self.volume_id}: slices must be at least 8x8")
        if not np.all(np.isfinite(self.slices)):
            raise ValueError(f"{self.volume_id}: non-finite pixel values")
        if self.masks is not None:
            self.masks = np.ascontiguousarray(self.masks, dtype=np.uint8)
            if self.masks.shape != self.slices.shape:
                raise ValueError(
                    f"{self.volume_id}: masks {self.masks.shape} do not align with slices {self.slices.shape}"
                )
            if self.masks.size and int(self.masks.max()) > self.k_classes:
                raise ValueError(f"{self.volume_id}: mask label exceeds k_classes={self.k_classes}")
        if self.domain_tag not in ("source", "target"):
            raise ValueError(f"unknown domain_tag {self.domain_tag!r}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ValueError("spacing must be 3 positive reals")

    @property
    def n_slices(self) -> int:
        return self.slices.shape[0]

    @property
    def hw(self) -> tuple[int, int]:
        return self.slices.shape[1], self.slices.shape[2]


@dataclass(frozen=True)
class SplitSpec:
    train_volume_ids: list
    test_volume_ids: list
    fraction: float
    seed: int


def minmax_normalize(volume: np.ndarray) -> np.ndarray:
    lo, hi = float(volume.min()), float(volume.max())
    if hi - lo < 1e-12:
        return np.zeros_like(volume, dtype=np.float32)
    return ((volume - lo) / (hi - lo)).astype(np.float32)


# ---------------------------------------------------------------------------
# synthetic phantoms


def _organ_layout(k_classes: int, hw: tuple[int, int]):
    H, W = hw
    if k_classes == 1:
        return np.array([[H / 2.0, W / 2.0]])
    ring = 0.28 * min(H, W)
    angles = 2 * np.pi * np.arange(k_classes) / k_classes + np.pi / 4
    return np.stack([H / 2.0 + ring * np.sin(angles), W / 2.0 + ring * np.cos(angles)], axis=1)


def organ_geometry(rng: np.random.Generator, n_slices: int, hw: tuple[int, int], k_classes: int) -> np.ndarray:
    """Per-slice ellipse parameters ``(K, S, 4)`` as ``(cy, cx, ry, rx)`` in pixels.

    Centers and radii follow one slow sinusoid per organ so that neighbouring
    slices overlap more than slices two apart.
    """
    H, W = hw
    base = _organ_layout(k_classes, hw)
    scale = min(H, W)
    s = np.arange(n_slices) / max(n_slices - 1, 1)
    geom = np.empty((k_classes, n_slices, 4))
    for k in range(k_classes):
        cy, cx = base[k] + rng.uniform(-0.04, 0.04, size=2) * scale
        ry, rx = rng.uniform(0.13, 0.19, size=2) * scale
        phase = rng.uniform(0, 2 * np.pi)
        freq = rng.uniform(0.5, 0.9)
        drift = np.sin(2 * np.pi * freq * s + phase)
        drift2 = np.cos(2 * np.pi * freq * s + phase)
        geom[k, :, 0] = cy + 0.05 * scale * drift
        geom[k, :, 1] = cx + 0.05 * scale * drift2
        geom[k, :, 2] = ry * (1.0 + 0.25 * drift2)
        geom[k, :, 3] = rx * (1.0 + 0.25 * drift)
    return geom


def rasterize_ellipse(hw: tuple[int, int], cy: float, cx: float, ry: float, rx: float) -> np.ndarray:
    yy, xx = np.mgrid[0 : hw[0], 0 : hw[1]]
    return ((yy + 0.5 - cy) / ry) ** 2 + ((xx + 0.5 - cx) / rx) ** 2 <= 1.0


def organ_intensity(k_classes: int) -> np.ndarray:
    """Organ brightness levels, background is 0."""
    if k_classes == 1:
        return np.array([1.0])
    return 0.25 + 0.75 * np.arange(k_classes) / (k_classes - 1)


def _check_dims(n_volumes, slices_per_volume, hw, k_classes):
    if n_volumes < 1:
        raise ValueError(f"n_volumes must be >= 1, got {n_volumes}")
    if slices_per_volume < 3:
        raise ValueError(f"slices_per_volume must be >= 3, got {slices_per_volume}")
    if len(hw) != 2 or min(hw) < 8:
        raise ValueError(f"hw must be a pair of sizes >= 8, got {hw}")
    if k_classes < 1 or k_classes > 255:
        raise ValueError(f"k_classes must be in [1, 255], got {k_classes}")


def generate_synthetic_dataset(
    n_volumes: int,
    slices_per_volume: int,
    hw: tuple[int, int] = (32, 32),
    k_classes: int = 4,
    seed: int = 0,
    noise_std: float = 0.03,
    prefix: str = "vol",
) -> list[VolumeRecord]:
    """Ellipse phantoms with smoothly drifting organs and exact masks."""
    hw = tuple(int(v) for v in hw)
    _check_dims(n_volumes, slices_per_volume, hw, k_classes)
    levels = organ_intensity(k_classes)
    records = []
    for v, child in enumerate(np.random.SeedSequence(seed).spawn(n_volumes)):
        rng = np.random.default_rng(child)
        geom = organ_geometry(rng, slices_per_volume, hw, k_classes)
        masks = np.zeros((slices_per_volume,) + hw, dtype=np.uint8)
        for s in range(slices_per_volume):
            for k in range(k_classes):
                masks[s][rasterize_ellipse(hw, *geom[k, s])] = k + 1
        image = np.zeros(masks.shape, dtype=np.float64)
        for k in range(k_classes):
            image[masks == k + 1] = levels[k]
        image += rng.normal(0.0, noise_std, size=image.shape)
        records.append(
            VolumeRecord(
                volume_id=f"{prefix}{v:03d}",
                slices=minmax_normalize(image),
                masks=masks,
                domain_tag="source",
                spacing=(1.0, 1.0, 2.5),
                k_classes=k_classes,
            )
        )
    return records


def shift_domain(
    records: Sequence[VolumeRecord],
    scale: float = 0.8,
    offset: float = 0.1,
    noise_std: float = 0.02,
    seed: int = 0,
) -> list[VolumeRecord]:
    """Global intensity affine shift plus mild noise, tagged as target domain.

    Applied after normalization, immediately before encoding.
    """
    rng = np.random.default_rng(seed)
    out = []
    for rec in records:
        pixels = scale * rec.slices.astype(np.float64) + offset
        if noise_std > 0:
            pixels = pixels + rng.normal(0.0, noise_std, size=pixels.shape)
        out.append(
            VolumeRecord(
                volume_id=rec.volume_id,
                slices=np.clip(pixels, 0.0, 1.0),
                masks=None if rec.masks is None else rec.masks.copy(),
                domain_tag="target",
                spacing=rec.spacing,
                k_classes=rec.k_classes,
            )
        )
    return out


# ---------------------------------------------------------------------------
# on-disk store


def _slice_name(i: int) -> str:
    return f"slice_{i:04d}.f32"


def _mask_name(i: int) -> str:
    return f"mask_{i:04d}.u8"


def write_volume_store(records: Sequence[VolumeRecord], path, provenance: Optional[dict] = None) -> dict:
    """Write volumes under ``path`` and return the manifest that was written.

    ``provenance`` (e.g. config hash and seed) is stored verbatim in the manifest.
    """
    root = Path(path)
    ids = [r.volume_id for r in records]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate volume ids")
    try:
        root.mkdir(parents=True, exist_ok=True)
        entries = []
        for rec in records:
            vdir = root / rec.volume_id
            vdir.mkdir(exist_ok=True)
            for i in range(rec.n_slices):
                rec.slices[i].astype("<f4").tofile(vdir / _slice_name(i))
                if rec.masks is not None:
                    rec.masks[i].astype(np.uint8).tofile(vdir / _mask_name(i))
            H, W = rec.hw
            entries.append(
                {
                    "id": rec.volume_id,
                    "S": rec.n_slices,
                    "H": H,
                    "W": W,
                    "K": rec.k_classes,
                    "domain_tag": rec.domain_tag,
                    "has_masks": rec.masks is not None,
                    "spacing": list(rec.spacing),
                }
            )
        manifest = {"format_version": FORMAT_VERSION, "volumes": entries}
        if provenance:
            manifest["provenance"] = dict(provenance)
        with open(root / MANIFEST_NAME, "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise StoreError(f"failed writing volume store at {root}: {exc}") from exc
    return manifest


def read_manifest(path, audit: Optional[Callable[[Path], None]] = None) -> dict:
    mpath = Path(path) / MANIFEST_NAME
    if audit is not None:
        audit(mpath)
    if not mpath.is_file():
        raise ManifestError(f"no {MANIFEST_NAME} in {path}")
    try:
        with open(mpath, encoding="utf-8") as fh:
            manifest = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ManifestError(f"unreadable manifest {mpath}: {exc}") from exc
    if not isinstance(manifest, dict) or "format_version" not in manifest or "volumes" not in manifest:
        raise ManifestError(f"malformed manifest {mpath}")
    if manifest["format_version"] != FORMAT_VERSION:
        raise FormatVersionError(
            f"{mpath}: format_version {manifest['format_version']!r} is not supported (expected {FORMAT_VERSION})"
        )
    return manifest


def _read_raw(path: Path, dtype: str, count: int, audit) -> np.ndarray:
    if audit is not None:
        audit(path)
    if not path.is_file():
        raise MissingSliceError(f"missing file {path}")
    size = os.path.getsize(path)
    expected = count * np.dtype(dtype).itemsize
    if size != expected:
        raise DimensionMismatchError(f"{path}: {size} bytes, manifest implies {expected}")
    return np.fromfile(path, dtype=dtype, count=count)


def read_volume_store(
    path,
    volume_ids: Optional[Sequence[str]] = None,
    audit: Optional[Callable[[Path], None]] = None,
) -> list[VolumeRecord]:
    """Inverse of :func:`write_volume_store`.

    ``audit`` is called with every path before it is opened; the source-free
    runner uses it to log and police file access.
    """
    root = Path(path)
    manifest = read_manifest(root, audit)
    wanted = None if volume_ids is None else set(volume_ids)
    records = []
    for entry in manifest["volumes"]:
        try:
            vid, S, H, W, K = entry["id"], int(entry["S"]), int(entry["H"]), int(entry["W"]), int(entry["K"])
            has_masks = bool(entry["has_masks"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"malformed volume entry in {root}: {entry!r}") from exc
        if wanted is not None and vid not in wanted:
            continue
        vdir = root / vid
        slices = np.stack(
            [_read_raw(vdir / _slice_name(i), "<f4", H * W, audit).reshape(H, W) for i in range(S)]
        )
        masks = None
        if has_masks:
            masks = np.stack(
                [_read_raw(vdir / _mask_name(i), "u1", H * W, audit).reshape(H, W) for i in range(S)]
            )
        records.append(
            VolumeRecord(
                volume_id=vid,
                slices=slices.astype(np.float32),
                masks=masks,
                domain_tag=entry.get("domain_tag", "source"),
                spacing=tuple(entry.get("spacing", (1.0, 1.0, 1.0))),
                k_classes=K,
            )
        )
    if wanted is not None:
        found = {r.volume_id for r in records}
        if wanted - found:
            raise StoreError(f"volumes not in store {root}: {sorted(wanted - found)}")
    return records


# ---------------------------------------------------------------------------
# splits


def make_split(volume_ids: Sequence[str], fraction: float, seed: int) -> SplitSpec:
    ids = list(volume_ids)
    if len(ids) < 2:
        raise ValueError("a split needs at least 2 volumes")
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate volume ids")
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must lie in (0, 1), got {fraction}")
    n_train = min(max(1, round(fraction * len(ids))), len(ids) - 1)
    order = np.random.default_rng(seed).permutation(len(ids))
    train = sorted(ids[i] for i in order[:n_train])
    test = sorted(ids[i] for i in order[n_train:])
    return SplitSpec(train_volume_ids=train, test_volume_ids=test, fraction=fraction, seed=seed)
