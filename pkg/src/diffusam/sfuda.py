"""Source-free inference on a target domain with a source-trained prior.

Nothing is adapted: the prior is loaded, frozen, and applied to target
slices. Every file the run opens goes through an :class:`AccessAuditor`,
which refuses anything under a source store.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .backbone import Backbone
from .data import VolumeRecord, read_volume_store
from .errors import SourceAccessError
from .metrics import DiceReport, evaluate
from .prior import load_params, params_digest
from .schedule import NoiseSchedule, SamplerConfig
from .volumetric import VolumeSegmentation, sample_slice_memories, segment_volume, slice_seed

log = logging.getLogger(__name__)


class AccessAuditor:
    def __init__(self, forbidden: Sequence = ()):
        self.forbidden = [Path(p).resolve() for p in forbidden]
        self.log: list = []

    def __call__(self, path) -> None:
        p = Path(path).resolve()
        for root in self.forbidden:
            if p == root or root in p.parents:
                raise SourceAccessError(f"source-free run attempted to open {p} (under source store {root})")
        self.log.append(str(p))

    def touches(self, roots: Sequence) -> list:
        roots = [Path(r).resolve() for r in roots]
        return [p for p in self.log if any(Path(p) == r or r in Path(p).parents for r in roots)]


@dataclass
class SfudaRun:
    params_path: Path
    target_store: Path
    source_stores: Sequence = ()
    cache_dir: Optional[Path] = None
    access_log: list = field(default_factory=list)


@dataclass
class SfudaResult:
    segmentations: dict
    report: Optional[DiceReport]
    params_hash_before: str
    params_hash_after: str
    access_log: list


def _cache_path(run: SfudaRun, phash: str, vid: str, i: int, label: int, seed: int) -> Optional[Path]:
    if run.cache_dir is None:
        return None
    return Path(run.cache_dir) / phash[:16] / vid / f"s{i:04d}_l{label}_seed{seed}.npy"


def generate_pseudo_memories(
    run: SfudaRun,
    auditor: AccessAuditor,
    denoiser,
    phash: str,
    volume: VolumeRecord,
    backbone: Backbone,
    sched: NoiseSchedule,
    sampler_cfg: SamplerConfig,
    labels: Sequence[int],
    seed: int,
) -> dict:
    """Phase 1: one sampled memory per (slice, label), cached when a cache dir is set."""
    z_imgs = backbone.encode_image(volume.slices)
    out = {}
    for i in range(volume.n_slices):
        paths = [_cache_path(run, phash, volume.volume_id, i, lab, seed) for lab in labels]
        if paths[0] is not None and all(p.is_file() for p in paths):
            for p in paths:
                auditor(p)
            out[i] = torch.from_numpy(np.stack([np.load(p) for p in paths]))
            continue
        with torch.no_grad():
            mem = sample_slice_memories(denoiser, z_imgs[i], labels, sched, sampler_cfg, slice_seed(seed, i))
        out[i] = mem
        if paths[0] is not None:
            for p, m in zip(paths, mem):
                auditor(p)
                p.parent.mkdir(parents=True, exist_ok=True)
                np.save(p, m.numpy())
    return out


def run_sfuda(
    run: SfudaRun,
    backbone: Backbone,
    sched: NoiseSchedule,
    sampler_cfg: SamplerConfig,
    labels: Optional[Sequence[int]] = None,
    seed: int = 0,
    use_adjacency: bool = True,
    metadata: Optional[dict] = None,
) -> SfudaResult:
    """Apply a source-trained prior to every target volume.

    Phase 1 samples pseudo-memories for all target slices; phase 2 decodes
    each volume middle-out exactly as in-domain inference does. A Dice
    report is produced when the target store carries masks (used for
    evaluation only).
    """
    auditor = AccessAuditor(run.source_stores)
    auditor(run.params_path)
    denoiser = load_params(run.params_path)
    for p in denoiser.parameters():
        p.requires_grad_(False)
    phash = params_digest(denoiser)
    targets = read_volume_store(run.target_store, audit=auditor)
    labels = list(labels) if labels is not None else list(range(1, backbone.spec.k + 1))

    if denoiser.arch.cross_slice:
        # the prior needs decoded neighbours, so sampling cannot be hoisted
        log.info("cross-slice prior: pseudo-memories are sampled during propagation")
        pseudo = {v.volume_id: None for v in targets}
    else:
        pseudo = {
            v.volume_id: generate_pseudo_memories(run, auditor, denoiser, phash, v, backbone, sched, sampler_cfg, labels, seed)
            for v in targets
        }

    segs: dict[str, VolumeSegmentation] = {}
    for v in targets:
        segs[v.volume_id] = segment_volume(
            v,
            denoiser,
            backbone,
            sched,
            sampler_cfg,
            labels=labels,
            seed=seed,
            use_adjacency=use_adjacency,
            pseudo_memories=pseudo[v.volume_id],
        )
    report = None
    if all(v.masks is not None for v in targets):
        report = evaluate({k: s.masks for k, s in segs.items()}, targets, labels, metadata)
    after = params_digest(denoiser)
    run.access_log = list(auditor.log)
    return SfudaResult(
        segmentations=segs,
        report=report,
        params_hash_before=phash,
        params_hash_after=after,
        access_log=list(auditor.log),
    )


def class_centroids(volumes: Sequence[VolumeRecord], backbone: Backbone) -> dict:
    """Mean image-embedding vector of fully occupied cells, per class (0 = background)."""
    spec = backbone.spec
    sums, counts = {}, {}
    for v in volumes:
        z = backbone.encode_image(v.slices).numpy()  # (S, C, h, w)
        occ = backbone.encode_memory(v.masks.astype(np.int64), backbone.encode_image(v.slices))[:, : spec.k].numpy()
        bg = 1.0 - occ.sum(axis=1)
        full = np.concatenate([bg[:, None], occ], axis=1) >= 1.0 - 1e-6  # (S, K+1, h, w)
        for c in range(spec.k + 1):
            sel = full[:, c]
            if sel.any():
                cells = np.moveaxis(z, 1, -1)[sel]
                sums[c] = sums.get(c, 0.0) + cells.sum(axis=0)
                counts[c] = counts.get(c, 0) + len(cells)
    return {c: sums[c] / counts[c] for c in sums}


def feature_affinity(source: Sequence[VolumeRecord], target: Sequence[VolumeRecord], backbone: Backbone) -> dict:
    """Check that each target class centroid is nearest to its own source class centroid."""
    src = class_centroids(source, backbone)
    tgt = class_centroids(target, backbone)
    result = {}
    for c, tc in tgt.items():
        dists = {s: float(np.linalg.norm(tc - sc)) for s, sc in src.items()}
        result[c] = {"nearest": min(dists, key=dists.get), "distances": dists}
    result["holds"] = all(result[c]["nearest"] == c for c in tgt)
    return result
