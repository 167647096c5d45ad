"""2D U-Net for two-class voxel maps, plus the weight-exchange container.

The encoder is ``depth`` dual-conv stages (two 3x3 conv+BN+PReLU blocks each);
the first conv of every stage after the first has stride 2. The decoder
mirrors it with 2x2 transposed convolutions and skip concatenation, ending in
a 1x1 conv over two output channels. Convolutions feeding a BatchNorm carry
no bias.

``WeightVector`` is the unit of federated exchange: an ordered name->array
map over the full module state (parameters and BatchNorm buffers) tagged with
a config fingerprint so only like-architected vectors combine.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, TrainingError


@dataclass(frozen=True)
class UNetConfig:
    depth: int = 3
    base_channels: int = 8
    in_channels: int = 2
    out_channels: int = 2

    def __post_init__(self):
        if self.depth < 1 or self.base_channels < 1:
            raise ConfigurationError("depth and base_channels must be >= 1")
        if self.in_channels < 1 or self.out_channels != 2:
            raise ConfigurationError("expected in_channels >= 1 and exactly 2 output channels")

    @property
    def spatial_divisor(self) -> int:
        return 2 ** (self.depth - 1)

    def fingerprint(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


class DualConv(nn.Module):
    """Two conv+BN+PReLU blocks; ``stride`` applies to the first conv only."""

    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        self.block = nn.Sequential(
            nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False),
            nn.BatchNorm2d(out_ch),
            nn.PReLU(),
            nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False),
            nn.BatchNorm2d(out_ch),
            nn.PReLU(),
        )

    def forward(self, x):
        return self.block(x)


class LesionUNet(nn.Module):
    def __init__(self, cfg: UNetConfig):
        super().__init__()
        self.cfg = cfg
        chans = [cfg.base_channels * 2**i for i in range(cfg.depth)]
        self.encoders = nn.ModuleList()
        for i, ch in enumerate(chans):
            in_ch = cfg.in_channels if i == 0 else chans[i - 1]
            self.encoders.append(DualConv(in_ch, ch, stride=1 if i == 0 else 2))
        self.upconvs = nn.ModuleList()
        self.decoders = nn.ModuleList()
        for i in range(cfg.depth - 2, -1, -1):
            self.upconvs.append(nn.ConvTranspose2d(chans[i + 1], chans[i], 2, stride=2))
            self.decoders.append(DualConv(2 * chans[i], chans[i]))
        self.head = nn.Conv2d(chans[0], cfg.out_channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h, w = x.shape[-2:]
        div = self.cfg.spatial_divisor
        if h % div or w % div:
            raise ConfigurationError(
                f"spatial dims ({h}, {w}) must be divisible by {div} for depth {self.cfg.depth}"
            )
        feats = []
        for enc in self.encoders:
            x = enc(x)
            feats.append(x)
        for up, dec, skip in zip(self.upconvs, self.decoders, reversed(feats[:-1])):
            x = dec(torch.cat([up(x), skip], dim=1))
        return self.head(x)


@dataclass
class WeightVector:
    """Ordered named arrays plus the architecture fingerprint they belong to."""

    arrays: dict[str, np.ndarray]
    fingerprint: str

    def check_combinable(self, other: "WeightVector") -> None:
        if self.fingerprint != other.fingerprint:
            raise ConfigurationError(
                f"weight fingerprints differ ({self.fingerprint} vs {other.fingerprint})"
            )
        for name, arr in self.arrays.items():
            if name not in other.arrays or other.arrays[name].shape != arr.shape:
                raise ConfigurationError(f"weight entry {name!r} missing or shape-mismatched")

    def copy(self) -> "WeightVector":
        return WeightVector({k: v.copy() for k, v in self.arrays.items()}, self.fingerprint)

    def allclose(self, other: "WeightVector", atol: float = 0.0) -> bool:
        return self.fingerprint == other.fingerprint and all(
            np.allclose(v, other.arrays[k], atol=atol, rtol=0.0) for k, v in self.arrays.items()
        )


def weights_from_module(module: LesionUNet) -> WeightVector:
    arrays = {k: v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}
    return WeightVector(arrays=arrays, fingerprint=module.cfg.fingerprint())


def load_weights_into(module: LesionUNet, weights: WeightVector) -> LesionUNet:
    if weights.fingerprint != module.cfg.fingerprint():
        raise ConfigurationError("weights were built for a different architecture")
    state = {}
    for name, ref in module.state_dict().items():
        if name not in weights.arrays:
            raise ConfigurationError(f"weights are missing entry {name!r}")
        state[name] = torch.from_numpy(np.ascontiguousarray(weights.arrays[name])).to(ref.dtype)
    module.load_state_dict(state)
    return module


def init_weights(cfg: UNetConfig, seed: int) -> WeightVector:
    """Deterministic initialization: same (cfg, seed) gives identical arrays."""
    torch.manual_seed(seed)
    return weights_from_module(LesionUNet(cfg))


def build_model(cfg: UNetConfig, weights: WeightVector | None = None) -> LesionUNet:
    module = LesionUNet(cfg)
    if weights is not None:
        load_weights_into(module, weights)
    return module


def make_optimizer(module: nn.Module, learning_rate: float, weight_decay: float) -> torch.optim.Adam:
    return torch.optim.Adam(module.parameters(), lr=learning_rate, weight_decay=weight_decay)


def cross_entropy_loss(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean per-voxel two-class cross-entropy; targets are class indices or [B,2,...] distributions."""
    log_probs = F.log_softmax(logits, dim=1)
    if targets.dim() == logits.dim():
        return -(targets * log_probs).sum(dim=1).mean()
    return F.nll_loss(log_probs, targets.long())


def train_step(
    module: LesionUNet,
    optimizer: torch.optim.Optimizer,
    images: torch.Tensor,
    targets: torch.Tensor,
) -> float:
    """One Adam step on the batch; returns the (finite) loss value."""
    module.train()
    optimizer.zero_grad()
    loss = cross_entropy_loss(module(images), targets)
    value = float(loss.detach())
    if not np.isfinite(value):
        raise TrainingError(
            f"non-finite loss {value} (batch shape {tuple(images.shape)}, "
            f"param scale {max(p.abs().max().item() for p in module.parameters()):.3e})"
        )
    loss.backward()
    optimizer.step()
    return value


@torch.no_grad()
def predict_probs(module: LesionUNet, images: np.ndarray, batch_size: int = 16) -> np.ndarray:
    """Softmax probabilities [N, 2, H, W] for a stack of slices, in eval mode."""
    module.eval()
    chunks = []
    for start in range(0, len(images), batch_size):
        batch = torch.from_numpy(images[start : start + batch_size]).float()
        chunks.append(F.softmax(module(batch), dim=1).numpy())
    if not chunks:
        return np.zeros((0, 2) + images.shape[2:], dtype=np.float32)
    return np.concatenate(chunks)


# checkpoint container: one .npz with the named arrays plus a JSON header

def save_weights(weights: WeightVector, path: str | Path, config: UNetConfig | None = None) -> None:
    meta = {
        "fingerprint": weights.fingerprint,
        "names": list(weights.arrays.keys()),
        "config": asdict(config) if config is not None else None,
    }
    np.savez(path, __meta__=np.array(json.dumps(meta)), **weights.arrays)


def load_saved_weights(path: str | Path) -> tuple[WeightVector, UNetConfig | None]:
    with np.load(path) as data:
        meta = json.loads(str(data["__meta__"]))
        arrays = {name: data[name] for name in meta["names"]}
    cfg = UNetConfig(**meta["config"]) if meta.get("config") else None
    return WeightVector(arrays=arrays, fingerprint=meta["fingerprint"]), cfg
