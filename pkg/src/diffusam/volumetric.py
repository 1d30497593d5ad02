"""Middle-out slice propagation and prompt-free volume segmentation."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import partial
from typing import Mapping, Optional, Sequence

import numpy as np
import torch

from .backbone import Backbone, restrict_to_class, threshold_mask
from .data import VolumeRecord
from .errors import NonFiniteError, ShapeError
from .schedule import NoiseSchedule, SamplerConfig, sample


@dataclass(frozen=True)
class PropagationPlan:
    order: list
    adjacency: dict  # slice -> inward neighbour; absent for the middle slice


@dataclass
class VolumeSegmentation:
    volume_id: str
    masks: np.ndarray  # (S, H, W) uint8
    plan: PropagationPlan
    memories: Optional[dict] = None  # slice -> (L, C_mem, h, w) sampled memories
    trace: list = field(default_factory=list)  # (visit step, slice, adjacent slice, step that decoded it)


def plan_propagation(S: int) -> PropagationPlan:
    """Visit the middle slice first, then alternate outwards: m, m+1, m-1, m+2, ..."""
    if S < 1:
        raise ValueError(f"need at least one slice, got {S}")
    m = S // 2
    order = [m]
    adjacency = {}
    for d in range(1, S):
        for i, inward in ((m + d, m + d - 1), (m - d, m - d + 1)):
            if 0 <= i < S:
                order.append(i)
                adjacency[i] = inward
    return PropagationPlan(order=order, adjacency=adjacency)


def slice_seed(seed: int, slice_index: int) -> int:
    """Sampling seed for one slice; independent of visiting order."""
    return int(np.random.SeedSequence([int(seed), int(slice_index)]).generate_state(1)[0])


def sample_slice_memories(
    denoiser,
    z_img: torch.Tensor,
    labels: Sequence[int],
    sched: NoiseSchedule,
    sampler_cfg: SamplerConfig,
    seed: int,
    adjacent: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Sample one memory embedding per organ label for a slice, ``(L, C_mem, h, w)``."""
    L = len(labels)
    z = z_img.unsqueeze(0).expand(L, *z_img.shape)
    lab = torch.tensor(list(labels), dtype=torch.long)
    fn = denoiser
    if getattr(getattr(denoiser, "arch", None), "cross_slice", False):
        fn = partial(denoiser, adjacent=adjacent)
    return sample(fn, z, lab, sampler_cfg, sched, seed, shape=denoiser.memory_shape)


def segment_volume(
    volume: VolumeRecord,
    denoiser,
    backbone: Backbone,
    sched: NoiseSchedule,
    sampler_cfg: SamplerConfig,
    labels: Optional[Sequence[int]] = None,
    seed: int = 0,
    use_adjacency: bool = True,
    pseudo_memories: Optional[Mapping[int, torch.Tensor]] = None,
    keep_memories: bool = False,
) -> VolumeSegmentation:
    """Segment every slice without prompts, middle slice first.

    Each slice gets one sampled memory per organ. Unless ``use_adjacency``
    is off, that memory is fused with the memory of the inward neighbour's
    decoded mask (restricted to the same organ) before decoding. Decoded
    masks are final once produced. ``pseudo_memories`` supplies
    precomputed samples keyed by slice index.
    """
    spec = backbone.spec
    if volume.hw != (spec.H, spec.W):
        raise ShapeError(f"volume {volume.volume_id}: slices {volume.hw} != backbone ({spec.H}, {spec.W})")
    labels = list(labels) if labels is not None else list(range(1, spec.k + 1))
    plan = plan_propagation(volume.n_slices)
    cross_slice_prior = getattr(getattr(denoiser, "arch", None), "cross_slice", False)
    z_imgs = backbone.encode_image(volume.slices)
    masks = np.zeros((volume.n_slices, spec.H, spec.W), dtype=np.uint8)
    decoded_at: dict = {}
    trace = []
    kept = {} if keep_memories else None

    with torch.no_grad():
        for step, i in enumerate(plan.order):
            adj = plan.adjacency.get(i) if use_adjacency else None
            adj_mem = None
            if adj is not None:
                if adj not in decoded_at:
                    raise AssertionError(f"slice {adj} consumed before it was decoded")
                adj_masks = np.stack([restrict_to_class(masks[adj], lab) for lab in labels])
                adj_mem = backbone.encode_memory(adj_masks, z_imgs[adj].unsqueeze(0).expand(len(labels), *z_imgs[adj].shape))
            trace.append((step, i, adj, decoded_at.get(adj)))

            if pseudo_memories is not None and i in pseudo_memories:
                z_mem = pseudo_memories[i]
            else:
                prior_adj = adj_mem if cross_slice_prior else None
                z_mem = sample_slice_memories(denoiser, z_imgs[i], labels, sched, sampler_cfg, slice_seed(seed, i), prior_adj)
            if not torch.all(torch.isfinite(z_mem)):
                raise NonFiniteError(f"volume {volume.volume_id}: non-finite memory at slice {i}")
            if kept is not None:
                kept[i] = z_mem.clone()

            fused = backbone.memory_attention(z_mem, adj_mem)
            logits_all = backbone.decode_mask(fused, z_imgs[i].unsqueeze(0).expand(len(labels), *z_imgs[i].shape))
            logits = torch.full((spec.k, spec.H, spec.W), -1e4)
            for row, lab in enumerate(labels):
                logits[lab - 1] = logits_all[row, lab - 1]
            masks[i] = threshold_mask(logits)
            decoded_at[i] = step

    return VolumeSegmentation(volume_id=volume.volume_id, masks=masks, plan=plan, memories=kept, trace=trace)


def segment_volumes(volumes: Sequence[VolumeRecord], denoiser, backbone, sched, sampler_cfg, **kwargs) -> dict:
    return {v.volume_id: segment_volume(v, denoiser, backbone, sched, sampler_cfg, **kwargs) for v in volumes}
