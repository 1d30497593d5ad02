"""Frozen segmentation-backbone facade and its invertible mock.

The facade has four stages: image encoder, memory encoder, memory attention
and mask decoder. :class:`MockBackbone` implements them with fixed linear
maps and block pooling, so a memory embedding built from a ground-truth
mask decodes back to that mask. End-to-end tests use this as an oracle.

A real-backbone adapter only has to provide the same methods and a
:class:`BackboneSpec`; nothing downstream depends on the mock internals.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional, Protocol, Union

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ShapeError

LOGIT_EPS = 1e-4
ArrayLike = Union[np.ndarray, torch.Tensor]


@dataclass(frozen=True)
class BackboneSpec:
    c_img: int = 8
    c_mem: int = 8
    h: int = 16
    w: int = 16
    H: int = 32
    W: int = 32
    k: int = 4
    kind: str = "mock"

    def __post_init__(self):
        for name in ("c_img", "c_mem", "h", "w", "H", "W", "k"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.H % self.h or self.W % self.w:
            raise ValueError("embedding grid must divide the slice grid")
        if self.c_mem < self.k:
            raise ValueError("c_mem must hold at least k mask channels")
        if self.kind not in ("mock", "plugin"):
            raise ValueError(f"unknown backbone kind {self.kind!r}")

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return (self.c_img, self.h, self.w)

    @property
    def memory_shape(self) -> tuple[int, int, int]:
        return (self.c_mem, self.h, self.w)

    def to_dict(self) -> dict:
        return asdict(self)


class Backbone(Protocol):
    spec: BackboneSpec
    fusion_weight: float

    def encode_image(self, slice_: ArrayLike) -> torch.Tensor: ...

    def encode_memory(self, mask: ArrayLike, z_img: torch.Tensor) -> torch.Tensor: ...

    def memory_attention(self, z_self: torch.Tensor, z_adj: Optional[torch.Tensor] = None) -> torch.Tensor: ...

    def decode_mask(self, z_fused: torch.Tensor, z_img: torch.Tensor) -> torch.Tensor: ...


def _as_tensor(x: ArrayLike) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.from_numpy(np.ascontiguousarray(x))


def block_average(planes: torch.Tensor, h: int, w: int) -> torch.Tensor:
    """Average ``(..., H, W)`` over non-overlapping blocks down to ``(..., h, w)``."""
    H, W = planes.shape[-2:]
    lead = planes.shape[:-2]
    x = planes.reshape(-1, 1, H, W)
    x = F.avg_pool2d(x, kernel_size=(H // h, W // w))
    return x.reshape(*lead, h, w)


def upsample_occupancy(planes: torch.Tensor, H: int, W: int) -> torch.Tensor:
    """Upsample block occupancies to pixels.

    Bicubic, but never more than 0.49 away from the block's own occupancy:
    fully occupied or empty blocks decode exactly, partial blocks take
    their sub-block shape from the neighbours.
    """
    h, w = planes.shape[-2:]
    lead = planes.shape[:-2]
    x = planes.reshape(-1, 1, h, w)
    if (H, W) == (h, w):
        return planes
    smooth = F.interpolate(x, size=(H, W), mode="bicubic", align_corners=False)
    blocky = F.interpolate(x, size=(H, W), mode="nearest")
    out = torch.minimum(torch.maximum(smooth, blocky - 0.49), blocky + 0.49)
    return out.reshape(*lead, H, W)


def mask_planes(mask: ArrayLike, k: int) -> torch.Tensor:
    """Per-class foreground planes ``(..., K, H, W)`` in [0, 1].

    Integer arrays are label masks (0 = background); floating arrays are
    ``(..., K, H, W)`` logits and go through a sigmoid.
    """
    m = _as_tensor(mask)
    if m.is_floating_point():
        if m.dim() < 3 or m.shape[-3] != k:
            raise ShapeError(f"mask logits need {k} class planes, got shape {tuple(m.shape)}")
        return torch.sigmoid(m.float())
    m = m.long()
    if m.numel() and (int(m.max()) > k or int(m.min()) < 0):
        raise ShapeError(f"label mask values must lie in [0, {k}]")
    classes = torch.arange(1, k + 1).view(k, 1, 1)
    return (m.unsqueeze(-3) == classes).float()


def restrict_to_class(mask: np.ndarray, label: int) -> np.ndarray:
    return np.where(mask == label, label, 0).astype(np.uint8)


def threshold_mask(logits: ArrayLike) -> np.ndarray:
    """Hard label mask from ``(..., K, H, W)`` logits.

    Argmax over classes where the winning logit is positive, background
    elsewhere. Ties go to the lower class index.
    """
    x = logits.detach().cpu().numpy() if isinstance(logits, torch.Tensor) else np.asarray(logits)
    best = np.argmax(x, axis=-3)
    top = np.take_along_axis(x, np.expand_dims(best, -3), axis=-3).squeeze(-3)
    return np.where(top > 0, best + 1, 0).astype(np.uint8)


class MockBackbone:
    """Deterministic affine stand-in for a frozen promptable segmenter.

    All tensors are created once from ``seed`` and never updated.
    """

    def __init__(self, spec: Optional[BackboneSpec] = None, seed: int = 0, fusion_weight: float = 0.3):
        self.spec = spec or BackboneSpec()
        if not 0.0 <= fusion_weight <= 1.0:
            raise ValueError("fusion_weight must lie in [0, 1]")
        self.seed = int(seed)
        self.fusion_weight = float(fusion_weight)
        rng = np.random.default_rng(self.seed)
        s = self.spec
        self._img_weight = torch.tensor(rng.uniform(0.5, 1.5, s.c_img) * rng.choice([-1, 1], s.c_img), dtype=torch.float32)
        self._img_bias = torch.tensor(rng.normal(0.0, 0.1, s.c_img), dtype=torch.float32)
        n_proj = s.c_mem - s.k
        self._mem_proj = torch.tensor(rng.normal(0.0, 1.0 / np.sqrt(s.c_img), (n_proj, s.c_img)), dtype=torch.float32)

    def describe(self) -> dict:
        return {"spec": self.spec.to_dict(), "seed": self.seed, "fusion_weight": self.fusion_weight}

    def _check_image(self, z_img: torch.Tensor):
        if tuple(z_img.shape[-3:]) != self.spec.image_shape:
            raise ShapeError(f"image embedding shape {tuple(z_img.shape)} != {self.spec.image_shape}")

    def _check_memory(self, z: torch.Tensor, what: str = "memory embedding"):
        if tuple(z.shape[-3:]) != self.spec.memory_shape:
            raise ShapeError(f"{what} shape {tuple(z.shape)} != {self.spec.memory_shape}")

    def encode_image(self, slice_: ArrayLike) -> torch.Tensor:
        x = _as_tensor(slice_).float()
        s = self.spec
        if x.dim() < 2 or tuple(x.shape[-2:]) != (s.H, s.W):
            raise ShapeError(f"slice shape {tuple(x.shape)} does not end in ({s.H}, {s.W})")
        pooled = block_average(x, s.h, s.w).unsqueeze(-3)
        return pooled * self._img_weight.view(-1, 1, 1) + self._img_bias.view(-1, 1, 1)

    def encode_memory(self, mask: ArrayLike, z_img: torch.Tensor) -> torch.Tensor:
        s = self.spec
        self._check_image(z_img)
        planes = mask_planes(mask, s.k)
        if tuple(planes.shape[-2:]) != (s.H, s.W):
            raise ShapeError(f"mask shape {tuple(planes.shape)} does not end in ({s.H}, {s.W})")
        occ = block_average(planes, s.h, s.w)
        proj = torch.einsum("pc,...chw->...phw", self._mem_proj, z_img)
        lead = torch.broadcast_shapes(occ.shape[:-3], proj.shape[:-3])
        occ = occ.expand(*lead, *occ.shape[-3:])
        proj = proj.expand(*lead, *proj.shape[-3:])
        return torch.cat([occ, proj], dim=-3)

    def memory_attention(self, z_self: torch.Tensor, z_adj: Optional[torch.Tensor] = None) -> torch.Tensor:
        self._check_memory(z_self)
        if z_adj is None:
            return z_self
        if z_adj.shape != z_self.shape:
            raise ShapeError(f"adjacent memory shape {tuple(z_adj.shape)} != {tuple(z_self.shape)}")
        w = self.fusion_weight
        return (1.0 - w) * z_self + w * z_adj

    def decode_mask(self, z_fused: torch.Tensor, z_img: torch.Tensor) -> torch.Tensor:
        s = self.spec
        self._check_memory(z_fused, "fused memory")
        self._check_image(z_img)
        occ = upsample_occupancy(z_fused[..., : s.k, :, :], s.H, s.W)
        p = occ.clamp(LOGIT_EPS, 1.0 - LOGIT_EPS)
        return torch.log(p) - torch.log1p(-p)
