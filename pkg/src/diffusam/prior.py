"""Diffusion prior over memory embeddings: losses, training and parameter files."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F

from .backbone import Backbone, mask_planes, restrict_to_class
from .data import VolumeRecord
from .errors import ArchitectureMismatchError, DivergenceError, ParamsFormatError, ParamsVersionError, ShapeError
from .network import ConditionalUNet, DenoiserArch
from .schedule import add_noise, make_schedule

log = logging.getLogger(__name__)

PARAMS_MAGIC = b"DFSPRIOR"
PARAMS_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 7800
    batch_size: int = 4
    learning_rate: float = 1e-4
    lambda_prior: float = 1.0
    lambda_seg: float = 1.0
    optimizer: str = "adam"
    seed: int = 0
    T: int = 1000
    beta_const: float = 0.008
    k_steps: int = 2
    cross_slice_conditioning: bool = False
    # noisy-prior benchmark: std of noise injected into the target mask channels,
    # drawn as the forward-process noise itself so the prior cannot average it out
    target_noise: float = 0.0

    def __post_init__(self):
        if self.iterations < 1 or self.batch_size < 1 or self.T < 1 or self.k_steps < 1:
            raise ValueError("iterations, batch_size, T and k_steps must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.lambda_prior < 0 or self.lambda_seg < 0:
            raise ValueError("loss weights must be non-negative")
        if self.optimizer != "adam":
            raise ValueError(f"unsupported optimizer {self.optimizer!r}")
        if self.target_noise < 0:
            raise ValueError("target_noise must be non-negative")


@dataclass
class TrainingExample:
    z_img: torch.Tensor
    z_mem_target: torch.Tensor
    label: int
    truth: np.ndarray  # class-restricted label mask, values in {0, label}
    adjacent_memory: Optional[torch.Tensor] = None
    volume_id: str = ""
    slice_index: int = -1


@dataclass
class LossHistory:
    iteration: list = field(default_factory=list)
    l_prior: list = field(default_factory=list)
    l_seg: list = field(default_factory=list)  # None where the seg branch is off
    l_total: list = field(default_factory=list)

    def append(self, it: int, lp: float, ls: Optional[float], total: float):
        self.iteration.append(it)
        self.l_prior.append(lp)
        self.l_seg.append(ls)
        self.l_total.append(total)

    def smoothed_prior(self, window: int = 100) -> tuple[float, float]:
        """Mean prior loss over the first and the last ``window`` iterations."""
        lp = np.asarray(self.l_prior, dtype=np.float64)
        window = max(1, min(window, len(lp) // 2 or 1))
        return float(lp[:window].mean()), float(lp[-window:].mean())

    def write_csv(self, path, config_hash: str = "", seed: Optional[int] = None):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            if config_hash:
                fh.write(f"# config_hash={config_hash} seed={seed}\n")
            w = csv.writer(fh)
            w.writerow(["iteration", "l_prior", "l_seg", "l_total"])
            for row in zip(self.iteration, self.l_prior, self.l_seg, self.l_total):
                it, lp, ls, lt = row
                w.writerow([it, repr(lp), "" if ls is None else repr(ls), repr(lt)])


# ---------------------------------------------------------------------------
# losses


def denoise_predict(
    params: ConditionalUNet,
    x_t: torch.Tensor,
    t: Union[int, torch.Tensor],
    z_img: torch.Tensor,
    label: Union[int, torch.Tensor],
    adjacent: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    if tuple(x_t.shape[-3:]) != params.memory_shape:
        raise ShapeError(f"noisy memory shape {tuple(x_t.shape)} != {params.memory_shape}")
    a = params.arch
    if tuple(z_img.shape[-3:]) != (a.c_img, a.h, a.w):
        raise ShapeError(f"image embedding shape {tuple(z_img.shape)} != {(a.c_img, a.h, a.w)}")
    return params(x_t, t, z_img, label, adjacent)


def prior_loss(prediction: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean squared error over all entries."""
    if prediction.shape != target.shape:
        raise ShapeError(f"prediction {tuple(prediction.shape)} vs target {tuple(target.shape)}")
    return torch.mean((prediction - target) ** 2)


def seg_loss(logits: torch.Tensor, truth: Union[np.ndarray, torch.Tensor], smooth: float = 1.0) -> torch.Tensor:
    """Soft Dice plus pixel BCE per class, averaged over classes (and batch).

    ``logits`` is ``(..., K, H, W)``; ``truth`` is a label mask ``(..., H, W)``.
    """
    k = logits.shape[-3]
    g = mask_planes(truth, k).to(logits.dtype)
    if g.shape != logits.shape:
        raise ShapeError(f"truth planes {tuple(g.shape)} vs logits {tuple(logits.shape)}")
    p = torch.sigmoid(logits)
    inter = (p * g).sum(dim=(-2, -1))
    dice = 1.0 - (2.0 * inter + smooth) / (p.sum(dim=(-2, -1)) + g.sum(dim=(-2, -1)) + smooth)
    bce = F.binary_cross_entropy_with_logits(logits, g, reduction="none").mean(dim=(-2, -1))
    return (dice + bce).mean()


def combined_loss(l_prior, l_seg, cfg: TrainConfig):
    return cfg.lambda_prior * l_prior + cfg.lambda_seg * l_seg


# ---------------------------------------------------------------------------
# training set


def _inward_neighbor(S: int) -> dict:
    from .volumetric import plan_propagation

    return plan_propagation(S).adjacency


def build_training_set(
    volumes: Sequence[VolumeRecord],
    backbone: Backbone,
    cross_slice: bool = False,
    labels: Optional[Sequence[int]] = None,
) -> list[TrainingExample]:
    """One example per (slice, organ), empty organ masks included.

    With ``cross_slice`` each example also carries the memory of the inward
    neighbour's ground-truth mask for that organ, mirroring what inference
    will feed it.
    """
    examples = []
    for vol in volumes:
        if vol.masks is None:
            raise ValueError(f"volume {vol.volume_id} has no masks")
        ks = list(labels) if labels is not None else list(range(1, vol.k_classes + 1))
        z_imgs = backbone.encode_image(vol.slices)
        adjacency = _inward_neighbor(vol.n_slices) if cross_slice else {}
        for i in range(vol.n_slices):
            for lab in ks:
                truth = restrict_to_class(vol.masks[i], lab)
                adj = None
                j = adjacency.get(i)
                if j is not None:
                    adj = backbone.encode_memory(restrict_to_class(vol.masks[j], lab), z_imgs[j])
                examples.append(
                    TrainingExample(
                        z_img=z_imgs[i],
                        z_mem_target=backbone.encode_memory(truth, z_imgs[i]),
                        label=lab,
                        truth=truth,
                        adjacent_memory=adj,
                        volume_id=vol.volume_id,
                        slice_index=i,
                    )
                )
    return examples


# ---------------------------------------------------------------------------
# training


def arch_for(backbone: Backbone, cross_slice: bool = False, **overrides) -> DenoiserArch:
    s = backbone.spec
    return DenoiserArch(c_mem=s.c_mem, c_img=s.c_img, h=s.h, w=s.w, k_classes=s.k, cross_slice=cross_slice, **overrides)


def _stack(examples: Sequence[TrainingExample], backbone: Backbone):
    z_img = torch.stack([e.z_img for e in examples])
    target = torch.stack([e.z_mem_target for e in examples])
    labels = torch.tensor([e.label for e in examples], dtype=torch.long)
    truth = torch.from_numpy(np.stack([e.truth for e in examples]).astype(np.int64))
    has_adj = torch.tensor([e.adjacent_memory is not None for e in examples])
    adj = torch.stack([e.adjacent_memory if e.adjacent_memory is not None else torch.zeros_like(e.z_mem_target) for e in examples])
    return z_img, target, labels, truth, has_adj, adj


def train(
    examples: Sequence[TrainingExample],
    backbone: Backbone,
    cfg: TrainConfig,
    arch: Optional[DenoiserArch] = None,
    init: Optional[ConditionalUNet] = None,
    callback: Optional[Callable[[int, ConditionalUNet], None]] = None,
    callback_every: int = 0,
    dtype: torch.dtype = torch.float32,
) -> tuple[ConditionalUNet, LossHistory]:
    """Fit the prior with Adam on the weighted prior + segmentation objective.

    The segmentation branch decodes the direct x0 prediction (optionally
    fused with the adjacent memory) through the frozen backbone. With
    ``lambda_seg == 0`` that branch is skipped and ``l_seg`` is recorded as
    ``None``. ``callback(iteration, net)`` runs before the first step and
    every ``callback_every`` iterations after.
    """
    if not examples:
        raise ValueError("no training examples")
    torch.manual_seed(cfg.seed)
    if init is not None:
        net = init
    else:
        net = ConditionalUNet(arch or arch_for(backbone, cfg.cross_slice_conditioning))
    net = net.to(dtype)
    if net.arch.cross_slice != cfg.cross_slice_conditioning:
        raise ValueError("architecture cross_slice flag disagrees with the training config")
    sched = make_schedule(cfg.T, cfg.beta_const)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate)
    gen = torch.Generator().manual_seed(cfg.seed)

    z_img, target, labels, truth, has_adj, adj = _stack(examples, backbone)
    z_img, target, adj = z_img.to(dtype), target.to(dtype), adj.to(dtype)
    use_adj = cfg.cross_slice_conditioning and bool(has_adj.any())
    use_seg = cfg.lambda_seg > 0
    n = len(examples)
    history = LossHistory()
    net.train()
    if callback is not None:
        callback(0, net)
    for it in range(1, cfg.iterations + 1):
        idx = torch.randint(0, n, (cfg.batch_size,), generator=gen)
        t = torch.randint(1, cfg.T + 1, (cfg.batch_size,), generator=gen)
        eps = torch.randn(target[idx].shape, generator=gen, dtype=dtype)
        x0 = target[idx]
        x_t = add_noise(x0, t, eps, sched)
        adj_b = adj[idx] if cfg.cross_slice_conditioning else None
        pred = net(x_t, t, z_img[idx], labels[idx], adj_b)
        goal = x0
        if cfg.target_noise > 0:
            k = backbone.spec.k
            goal = torch.cat([x0[:, :k] + cfg.target_noise * eps[:, :k], x0[:, k:]], dim=1)
        lp = prior_loss(pred, goal)
        if use_seg:
            if use_adj:
                # missing neighbours blend with themselves, a no-op
                partner = torch.where(has_adj[idx].view(-1, 1, 1, 1), adj_b, pred)
                fused = backbone.memory_attention(pred, partner)
            else:
                fused = backbone.memory_attention(pred)
            logits = backbone.decode_mask(fused, z_img[idx])
            ls = seg_loss(logits, truth[idx])
            loss = combined_loss(lp, ls, cfg)
        else:
            ls = None
            loss = cfg.lambda_prior * lp
        if not torch.isfinite(loss):
            raise DivergenceError(it)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        lp_v = float(lp.item())
        ls_v = None if ls is None else float(ls.item())
        history.append(it, lp_v, ls_v, float(combined_loss(lp_v, ls_v or 0.0, cfg)))
        if callback is not None and callback_every and it % callback_every == 0:
            callback(it, net)
    net.eval()
    return net, history


# ---------------------------------------------------------------------------
# parameter files
#
# layout: magic(8) | version u32 | descriptor length u32 | descriptor json
#         | payload length u64 | crc32 u32 | payload (float32 little-endian)


def _state_items(net: ConditionalUNet):
    return [(k, v.detach().to(torch.float32).contiguous()) for k, v in net.state_dict().items()]


def params_digest(net: ConditionalUNet) -> str:
    h = hashlib.sha256()
    for name, v in _state_items(net):
        h.update(name.encode())
        h.update(v.numpy().astype("<f4").tobytes())
    return h.hexdigest()


def save_params(net: ConditionalUNet, path, metadata: Optional[dict] = None) -> str:
    items = _state_items(net)
    payload = b"".join(v.numpy().astype("<f4").tobytes() for _, v in items)
    descriptor = {
        "arch": net.arch.to_dict(),
        "tensors": [[name, list(v.shape)] for name, v in items],
        "metadata": metadata or {},
    }
    desc = json.dumps(descriptor, sort_keys=True).encode("utf-8")
    blob = (
        PARAMS_MAGIC
        + struct.pack("<II", PARAMS_VERSION, len(desc))
        + desc
        + struct.pack("<QI", len(payload), zlib.crc32(payload))
        + payload
    )
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def read_params_header(path) -> dict:
    return _parse_params(Path(path).read_bytes())[0]


def _parse_params(blob: bytes):
    if len(blob) < 16 or blob[:8] != PARAMS_MAGIC:
        raise ParamsFormatError("not a prior parameter file (bad magic)")
    version, dlen = struct.unpack_from("<II", blob, 8)
    if version != PARAMS_VERSION:
        raise ParamsVersionError(f"parameter file version {version}, expected {PARAMS_VERSION}")
    off = 16
    try:
        descriptor = json.loads(blob[off : off + dlen].decode("utf-8"))
        off += dlen
        plen, crc = struct.unpack_from("<QI", blob, off)
    except (UnicodeDecodeError, json.JSONDecodeError, struct.error) as exc:
        raise ParamsFormatError(f"corrupted parameter header: {exc}") from exc
    off += 12
    payload = blob[off:]
    if len(payload) != plen or zlib.crc32(payload) != crc:
        raise ParamsFormatError("parameter payload is truncated or corrupted")
    return descriptor, payload


def load_params(path, expected_arch: Optional[DenoiserArch] = None) -> ConditionalUNet:
    descriptor, payload = _parse_params(Path(path).read_bytes())
    try:
        arch = DenoiserArch.from_dict(descriptor["arch"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ArchitectureMismatchError(f"unreadable architecture descriptor: {exc}") from exc
    if expected_arch is not None and arch != expected_arch:
        raise ArchitectureMismatchError(f"file architecture {arch} != expected {expected_arch}")
    net = ConditionalUNet(arch)
    state = net.state_dict()
    tensors = descriptor.get("tensors", [])
    if [n for n, _ in tensors] != list(state):
        raise ArchitectureMismatchError("parameter names do not match the architecture")
    flat = np.frombuffer(payload, dtype="<f4")
    off = 0
    new_state = {}
    for name, shape in tensors:
        if tuple(shape) != tuple(state[name].shape):
            raise ArchitectureMismatchError(f"{name}: stored shape {tuple(shape)} != {tuple(state[name].shape)}")
        size = int(np.prod(shape)) if shape else 1
        new_state[name] = torch.from_numpy(flat[off : off + size].reshape(shape).astype(np.float32))
        off += size
    if off != flat.size:
        raise ArchitectureMismatchError("parameter payload size does not match the architecture")
    if not all(torch.all(torch.isfinite(v)) for v in new_state.values()):
        raise ParamsFormatError("non-finite parameters")
    net.load_state_dict(new_state)
    net.eval()
    net.metadata = descriptor.get("metadata", {})
    return net
