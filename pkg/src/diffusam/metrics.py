"""Dice scoring and embedding-cluster diagnostics."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np
import torch

from .data import VolumeRecord
from .errors import MissingVolumesError, ShapeError


def dice(pred: np.ndarray, truth: np.ndarray, label: Optional[int] = None) -> float:
    """2|A∩B| / (|A| + |B|), with two empty masks scoring 1.0.

    With ``label`` the masks are compared on that class only; otherwise any
    non-zero value counts as foreground.
    """
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction {pred.shape} vs truth {truth.shape}")
    a = pred == label if label is not None else pred != 0
    b = truth == label if label is not None else truth != 0
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / denom


def _meta_line(metadata: Optional[dict]) -> str:
    if not metadata:
        return ""
    return "# " + " ".join(f"{k}={v}" for k, v in sorted(metadata.items())) + "\n"


@dataclass
class DiceReport:
    per_organ: dict  # organ id -> mean volume Dice
    mean: float
    n_volumes: int
    per_volume: dict = field(default_factory=dict)  # (organ, volume_id) -> Dice
    metadata: dict = field(default_factory=dict)

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            fh.write(_meta_line(self.metadata))
            w = csv.writer(fh)
            w.writerow(["organ", "volume_id", "dice"])
            for (organ, vid), d in sorted(self.per_volume.items()):
                w.writerow([organ, vid, f"{d:.6f}"])
            for organ, d in sorted(self.per_organ.items()):
                w.writerow([organ, "ALL", f"{d:.6f}"])
            w.writerow(["mean", "ALL", f"{self.mean:.6f}"])


def evaluate(
    predictions: Mapping[str, np.ndarray],
    truths: Sequence[VolumeRecord],
    organ_ids: Sequence[int],
    metadata: Optional[dict] = None,
) -> DiceReport:
    """Per-organ Dice over each full 3D stack, then averaged over volumes."""
    missing = [t.volume_id for t in truths if t.volume_id not in predictions]
    if missing:
        raise MissingVolumesError(missing)
    per_volume = {}
    for t in truths:
        if t.masks is None:
            raise ValueError(f"truth volume {t.volume_id} has no masks")
        pred = np.asarray(predictions[t.volume_id])
        for organ in organ_ids:
            per_volume[(organ, t.volume_id)] = dice(pred, t.masks, organ)
    per_organ = {o: float(np.mean([per_volume[(o, t.volume_id)] for t in truths])) for o in organ_ids}
    return DiceReport(
        per_organ=per_organ,
        mean=float(np.mean(list(per_organ.values()))),
        n_volumes=len(truths),
        per_volume=per_volume,
        metadata=dict(metadata or {}),
    )


# ---------------------------------------------------------------------------
# cluster diagnostic


@dataclass
class ClusterDiagnostic:
    gaps: dict  # class -> distance between generated and truth centroids
    spread_ratio: dict  # class -> generated spread / truth spread
    points: np.ndarray  # (N, 2) projection of the pooled embeddings
    point_classes: np.ndarray
    point_is_generated: np.ndarray
    absent: list = field(default_factory=list)

    def write_csv(self, path, points_path=None, metadata: Optional[dict] = None):
        header = _meta_line(metadata)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            fh.write(header)
            w = csv.writer(fh)
            w.writerow(["class", "gap", "spread_ratio"])
            for c in sorted(self.gaps):
                w.writerow([c, f"{self.gaps[c]:.6f}", f"{self.spread_ratio[c]:.6f}"])
        if points_path is not None:
            with open(points_path, "w", newline="", encoding="utf-8") as fh:
                fh.write(header)
                w = csv.writer(fh)
                w.writerow(["class", "source", "x", "y"])
                for c, g, (x, y) in zip(self.point_classes, self.point_is_generated, self.points):
                    w.writerow([int(c), "generated" if g else "truth", f"{x:.6f}", f"{y:.6f}"])


def _flatten(items):
    vecs, labs = [], []
    for emb, lab in items:
        e = emb.detach().cpu().numpy() if isinstance(emb, torch.Tensor) else np.asarray(emb)
        vecs.append(e.astype(np.float64).ravel())
        labs.append(int(lab))
    return np.array(vecs), np.array(labs)


def pca_2d(x: np.ndarray) -> np.ndarray:
    """Top-2 principal component scores; each axis signed so its largest loading is positive."""
    centered = x - x.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    comps = vt[:2]
    for r in range(comps.shape[0]):
        if comps[r, np.argmax(np.abs(comps[r]))] < 0:
            comps[r] = -comps[r]
    scores = centered @ comps.T
    if scores.shape[1] < 2:
        scores = np.pad(scores, ((0, 0), (0, 2 - scores.shape[1])))
    return scores


def cluster_diagnostic(generated, truth) -> ClusterDiagnostic:
    """Compare generated and ground-truth embeddings class by class.

    Both arguments are sequences of ``(embedding, label)``. A class missing
    on either side is listed in ``absent`` rather than raising.
    """
    gx, gl = _flatten(generated)
    tx, tl = _flatten(truth)
    gaps, spread, absent = {}, {}, []
    for c in sorted(set(gl.tolist()) | set(tl.tolist())):
        g, t = gx[gl == c], tx[tl == c]
        if len(g) == 0 or len(t) == 0:
            absent.append(c)
            continue
        gc, tc = g.mean(axis=0), t.mean(axis=0)
        gaps[c] = float(np.linalg.norm(gc - tc))
        g_spread = float(np.linalg.norm(g - gc, axis=1).mean())
        t_spread = float(np.linalg.norm(t - tc, axis=1).mean())
        spread[c] = g_spread / t_spread if t_spread > 0 else float("inf") if g_spread > 0 else 1.0
    pooled = np.concatenate([gx, tx])
    return ClusterDiagnostic(
        gaps=gaps,
        spread_ratio=spread,
        points=pca_2d(pooled),
        point_classes=np.concatenate([gl, tl]),
        point_is_generated=np.concatenate([np.ones(len(gl), bool), np.zeros(len(tl), bool)]),
        absent=absent,
    )
