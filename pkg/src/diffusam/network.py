"""Small conditional UNet that predicts clean memory embeddings."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional, Union

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass(frozen=True)
class DenoiserArch:
    c_mem: int = 8
    c_img: int = 8
    h: int = 16
    w: int = 16
    k_classes: int = 4
    base_width: int = 32
    levels: int = 1
    emb_dim: int = 64
    cross_slice: bool = False

    def __post_init__(self):
        if self.levels < 1 or self.base_width < 1 or self.emb_dim < 2 or self.emb_dim % 2:
            raise ValueError(f"invalid denoiser architecture {self}")
        if self.h % 2 ** (self.levels - 1) or self.w % 2 ** (self.levels - 1):
            raise ValueError("embedding grid not divisible by the number of resolution levels")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserArch":
        return cls(**d)


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


def _groups(ch: int) -> int:
    return 8 if ch % 8 == 0 else 1


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, emb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.emb = nn.Linear(emb_dim, out_ch)
        self.norm2 = nn.GroupNorm(_groups(out_ch), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb(emb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class ConditionalUNet(nn.Module):
    """x0-predicting denoiser conditioned on image embedding, timestep and label.

    The image embedding (and, for cross-slice priors, the adjacent slice's
    memory) is concatenated with the noisy memory along channels. Timestep
    and label embeddings are summed and added inside every residual block.
    """

    def __init__(self, arch: DenoiserArch):
        super().__init__()
        self.arch = arch
        a = arch
        in_ch = a.c_mem + a.c_img + (a.c_mem if a.cross_slice else 0)
        widths = [a.base_width * 2**i for i in range(a.levels)]

        self.time_mlp = nn.Sequential(nn.Linear(a.emb_dim, a.emb_dim), nn.SiLU(), nn.Linear(a.emb_dim, a.emb_dim))
        # index 0 is unused so organ ids map straight to rows
        self.label_emb = nn.Embedding(a.k_classes + 1, a.emb_dim)
        self.inp = nn.Conv2d(in_ch, widths[0], 3, padding=1)

        self.down = nn.ModuleList()
        self.downsample = nn.ModuleList()
        ch = widths[0]
        for i, wd in enumerate(widths):
            self.down.append(ResBlock(ch, wd, a.emb_dim))
            ch = wd
            if i < a.levels - 1:
                self.downsample.append(nn.Conv2d(ch, ch, 3, stride=2, padding=1))
        self.mid = ResBlock(ch, ch, a.emb_dim)
        self.up = nn.ModuleList()
        self.upsample = nn.ModuleList()
        for i, wd in reversed(list(enumerate(widths))):
            self.up.append(ResBlock(ch + wd, wd, a.emb_dim))
            ch = wd
            if i > 0:
                self.upsample.append(nn.Conv2d(ch, widths[i - 1], 3, padding=1))
                ch = widths[i - 1]
        self.out_norm = nn.GroupNorm(_groups(ch), ch)
        self.out = nn.Conv2d(ch, a.c_mem, 3, padding=1)

    @property
    def memory_shape(self) -> tuple[int, int, int]:
        return (self.arch.c_mem, self.arch.h, self.arch.w)

    def forward(
        self,
        x_t: torch.Tensor,
        t: Union[int, torch.Tensor],
        z_img: torch.Tensor,
        label: Union[int, torch.Tensor],
        adjacent: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        unbatched = x_t.dim() == 3
        if unbatched:
            x_t = x_t.unsqueeze(0)
        B = x_t.shape[0]
        if z_img.dim() == 3:
            z_img = z_img.unsqueeze(0)
        z_img = z_img.expand(B, *z_img.shape[1:])
        t = torch.as_tensor(t).reshape(-1).expand(B)
        label = torch.as_tensor(label, dtype=torch.long).reshape(-1).expand(B)

        parts = [x_t, z_img]
        if self.arch.cross_slice:
            if adjacent is None:
                adjacent = torch.zeros_like(x_t)
            elif adjacent.dim() == 3:
                adjacent = adjacent.unsqueeze(0)
            parts.append(adjacent.expand(B, *adjacent.shape[1:]))
        h = self.inp(torch.cat(parts, dim=1))
        temb = timestep_embedding(t, self.arch.emb_dim).to(self.label_emb.weight.dtype)
        emb = self.time_mlp(temb) + self.label_emb(label)

        skips = []
        for i, block in enumerate(self.down):
            h = block(h, emb)
            skips.append(h)
            if i < len(self.downsample):
                h = self.downsample[i](h)
        h = self.mid(h, emb)
        for j, block in enumerate(self.up):
            h = block(torch.cat([h, skips.pop()], dim=1), emb)
            if j < len(self.upsample):
                h = F.interpolate(h, scale_factor=2, mode="nearest")
                h = self.upsample[j](h)
        out = self.out(F.silu(self.out_norm(h)))
        return out[0] if unbatched else out


def count_parameters(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())
