"""Multi-head encoder-decoder segmentation networks.

Two variants share one encoder layout:

  * ``segnet-style``: encoder of ``stages`` x [conv-norm-relu x2, 2x2
    max-pool]; each of the three decoder heads runs ``stages`` x
    [2x2-stride-2 transpose conv, conv-norm-relu x2] with no skip
    connections.
  * ``unet-style``: same, plus channel concatenation of the matching
    encoder feature map before each decoder conv pair.

Each head ends in a 1x1 conv to 2 channels followed by a per-pixel 2-class
softmax; the tissue probability is channel 1. The loss is the mean
binary cross-entropy per head (probabilities clamped to [1e-7, 1 - 1e-7]),
summed over the three heads; with a 2-class softmax this equals 2-class
cross-entropy.

Normalization uses per-channel batch statistics while training and running
averages (momentum 0.1) at inference. Parameter init is He-uniform with
fan-in scaling, fully determined by ``config.seed``.

Inference on a model that is not being trained is thread-safe; training
mutates the model and must own it exclusively.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable

import numpy as np
import torch
from torch import nn

from .corpus import MaskTriple
from .errors import ConfigError, DataError

ARCHITECTURES = ("segnet-style", "unet-style")

PROB_EPS = 1e-7
CHECKPOINT_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    variant: str
    input_width: int
    input_height: int
    stages: int = 3
    base_channels: int = 16
    kernel_size: int = 3
    pool_factor: int = 2
    seed: int = 0
    auto_pad: bool = False

    def __post_init__(self) -> None:
        if self.variant not in ARCHITECTURES:
            raise ConfigError(
                f"unknown variant {self.variant!r}; expected one of {ARCHITECTURES}"
            )
        if not (2 <= self.stages <= 5):
            raise ConfigError(f"stages must lie in [2, 5], got {self.stages}")
        if self.base_channels < 4:
            raise ConfigError(f"base_channels must be >= 4, got {self.base_channels}")
        if self.kernel_size != 3:
            raise ConfigError("kernel_size is fixed at 3")
        if self.pool_factor != 2:
            raise ConfigError("pool_factor is fixed at 2")
        divisor = self.pool_factor**self.stages
        if not self.auto_pad and (
            self.input_width % divisor or self.input_height % divisor
        ):
            raise ConfigError(
                f"input dims {self.input_width}x{self.input_height} not divisible by "
                f"pool_factor^stages = {divisor}; reduce stages or set auto_pad"
            )

    @property
    def padded_dims(self) -> tuple[int, int]:
        """(width, height) the conv stack actually runs at."""
        divisor = self.pool_factor**self.stages
        pw = -(-self.input_width // divisor) * divisor
        ph = -(-self.input_height // divisor) * divisor
        return pw, ph

    def to_json(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_json(obj: dict) -> "ModelConfig":
        return ModelConfig(**obj)

    def hash(self) -> str:
        payload = json.dumps(self.to_json(), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()[:16]


class ChannelNorm(nn.Module):
    """Per-channel normalization with controllable running-stat updates.

    ``update_running_stats`` can be switched off to evaluate the training-mode
    loss as a pure function of the parameters (finite-difference probing).
    """

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.update_running_stats = True
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.register_buffer("running_mean", torch.zeros(channels))
        self.register_buffer("running_var", torch.ones(channels))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.training:
            mean = x.mean(dim=(0, 2, 3))
            var = x.var(dim=(0, 2, 3), unbiased=False)
            if self.update_running_stats:
                n = x.numel() // x.shape[1]
                unbiased = var.detach() * (n / max(n - 1, 1))
                with torch.no_grad():
                    m = self.momentum
                    self.running_mean.mul_(1 - m).add_(m * mean.detach())
                    self.running_var.mul_(1 - m).add_(m * unbiased)
        else:
            mean = self.running_mean
            var = self.running_var
        shape = (1, -1, 1, 1)
        inv = torch.rsqrt(var.reshape(shape) + self.eps)
        return (x - mean.reshape(shape)) * inv * self.weight.reshape(shape) + self.bias.reshape(shape)


def set_norm_stat_updates(model: nn.Module, enabled: bool) -> None:
    for mod in model.modules():
        if isinstance(mod, ChannelNorm):
            mod.update_running_stats = enabled


def _conv_pair(in_ch: int, out_ch: int, k: int) -> nn.Sequential:
    pad = k // 2
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, k, padding=pad),
        ChannelNorm(out_ch),
        nn.ReLU(),
        nn.Conv2d(out_ch, out_ch, k, padding=pad),
        ChannelNorm(out_ch),
        nn.ReLU(),
    )


class _DecoderHead(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        b = config.base_channels
        s = config.stages
        skip = config.variant == "unet-style"
        self.skip = skip
        ups, blocks = [], []
        prev = b * 2 ** (s - 1)
        for j in reversed(range(s)):
            ch = b * 2**j
            ups.append(nn.ConvTranspose2d(prev, ch, kernel_size=2, stride=2))
            blocks.append(_conv_pair(ch * 2 if skip else ch, ch, config.kernel_size))
            prev = ch
        self.ups = nn.ModuleList(ups)
        self.blocks = nn.ModuleList(blocks)
        self.classify = nn.Conv2d(b, 2, kernel_size=1)

    def forward(self, x: torch.Tensor, enc_feats: list[torch.Tensor]) -> torch.Tensor:
        for up, block, feat in zip(self.ups, self.blocks, reversed(enc_feats)):
            x = up(x)
            if self.skip:
                x = torch.cat([x, feat], dim=1)
            x = block(x)
        return self.classify(x)


class SegModel(nn.Module):
    """Shared encoder with three independent decoder heads."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        b = config.base_channels
        enc = []
        in_ch = 1
        for i in range(config.stages):
            out_ch = b * 2**i
            enc.append(_conv_pair(in_ch, out_ch, config.kernel_size))
            in_ch = out_ch
        self.encoder = nn.ModuleList(enc)
        self.pool = nn.MaxPool2d(config.pool_factor)
        self.heads = nn.ModuleList(_DecoderHead(config) for _ in range(3))

    def _pad_input(self, x: torch.Tensor) -> tuple[torch.Tensor, tuple[int, int, int, int]]:
        pw, ph = self.config.padded_dims
        w, h = self.config.input_width, self.config.input_height
        left = (pw - w) // 2
        top = (ph - h) // 2
        pads = (left, pw - w - left, top, ph - h - top)
        if any(pads):
            x = torch.nn.functional.pad(x, pads, mode="reflect")
        return x, pads

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """(B, 1, H, W) -> logits of shape (B, 3, 2, H, W)."""
        if x.ndim != 4 or x.shape[1] != 1:
            raise DataError(f"expected input of shape (B, 1, H, W), got {tuple(x.shape)}")
        if x.shape[2] != self.config.input_height or x.shape[3] != self.config.input_width:
            raise DataError(
                f"input dims {x.shape[3]}x{x.shape[2]} do not match model "
                f"{self.config.input_width}x{self.config.input_height}"
            )
        x, pads = self._pad_input(x)
        enc_feats = []
        for block in self.encoder:
            x = block(x)
            enc_feats.append(x)
            x = self.pool(x)
        logits = torch.stack([head(x, enc_feats) for head in self.heads], dim=1)
        left, _, top, _ = pads
        h, w = self.config.input_height, self.config.input_width
        return logits[..., top : top + h, left : left + w]

    def probabilities(self, x: torch.Tensor) -> torch.Tensor:
        """(B, 1, H, W) -> tissue probabilities of shape (B, 3, H, W)."""
        probs = torch.softmax(self.forward(x), dim=2)
        return probs[:, :, 1]

    @torch.no_grad()
    def predict_proba(self, frames: np.ndarray) -> np.ndarray:
        """Batch of (B, H, W) float frames -> (B, 3, H, W) tissue probabilities.

        Runs in inference mode (running normalization statistics); the
        result is deterministic.
        """
        was_training = self.training
        self.eval()
        try:
            x = torch.from_numpy(np.ascontiguousarray(frames, dtype=np.float32))
            x = x.unsqueeze(1).to(next(self.parameters()).dtype)
            return self.probabilities(x).to(torch.float32).numpy()
        finally:
            self.train(was_training)


@dataclass(frozen=True)
class PredictionTriple:
    """Per-pixel tissue probabilities for one frame, one grid per head."""

    p1: np.ndarray
    p2: np.ndarray
    p3: np.ndarray

    def grids(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return (self.p1, self.p2, self.p3)

    @staticmethod
    def from_stack(stack: np.ndarray) -> "PredictionTriple":
        return PredictionTriple(stack[0], stack[1], stack[2])


def build_model(config: ModelConfig) -> SegModel:
    """Construct a model and give it a deterministic He-uniform init."""
    model = SegModel(config)
    gen = torch.Generator().manual_seed(config.seed & (2**63 - 1))
    with torch.no_grad():
        for mod in model.modules():
            if isinstance(mod, (nn.Conv2d, nn.ConvTranspose2d)):
                fan_in = mod.in_channels * mod.kernel_size[0] * mod.kernel_size[1]
                bound = float(np.sqrt(6.0 / fan_in))
                mod.weight.uniform_(-bound, bound, generator=gen)
                mod.bias.zero_()
            elif isinstance(mod, ChannelNorm):
                mod.weight.fill_(1.0)
                mod.bias.zero_()
    return model


def forward(model: SegModel, frames: np.ndarray) -> np.ndarray:
    """Inference on a batch of (B, H, W) frames -> (B, 3, H, W) probabilities."""
    frames = np.asarray(frames, dtype=np.float32)
    if frames.ndim == 2:
        frames = frames[None]
    return model.predict_proba(frames)


def forward_triples(model: SegModel, frames: np.ndarray) -> list[PredictionTriple]:
    return [PredictionTriple.from_stack(p) for p in forward(model, frames)]


def bce_loss(probs: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean BCE per head on clamped probabilities, summed over the 3 heads.

    probs, targets: (B, 3, H, W); targets in {0, 1}.
    """
    if probs.shape != targets.shape:
        raise DataError(f"prediction shape {tuple(probs.shape)} != target {tuple(targets.shape)}")
    p = probs.clamp(PROB_EPS, 1.0 - PROB_EPS)
    y = targets.to(p.dtype)
    per_head = -(y * torch.log(p) + (1.0 - y) * torch.log(1.0 - p)).mean(dim=(0, 2, 3))
    return per_head.sum()


def loss(predictions: np.ndarray, targets: np.ndarray) -> float:
    """Public loss surface over numpy batches of shape (B, 3, H, W)."""
    p = torch.from_numpy(np.asarray(predictions, dtype=np.float64))
    y = torch.from_numpy(np.asarray(targets, dtype=np.float64))
    return float(bce_loss(p, y))


def model_loss(
    model: SegModel, frames: torch.Tensor, targets: torch.Tensor
) -> torch.Tensor:
    """Differentiable training-mode loss for a torch batch."""
    probs = model.probabilities(frames)
    return bce_loss(probs, targets)


def predict_masks(model: SegModel, frame: np.ndarray) -> MaskTriple:
    """Threshold tissue probabilities at 0.5; ties go to tissue."""
    probs = forward(model, np.asarray(frame, dtype=np.float32)[None])[0]
    return MaskTriple.from_stack((probs >= 0.5).astype(np.uint8))


def gradient(
    model: SegModel, frames: np.ndarray, targets: np.ndarray
) -> dict[str, np.ndarray]:
    """Gradients of the training-mode loss w.r.t. every named parameter.

    Running normalization statistics are left untouched, so repeated calls
    see an identical model.
    """
    dtype = next(model.parameters()).dtype
    x = torch.from_numpy(np.asarray(frames, dtype=np.float32)).unsqueeze(1).to(dtype)
    y = torch.from_numpy(np.asarray(targets, dtype=np.float32)).to(dtype)
    was_training = model.training
    model.train()
    set_norm_stat_updates(model, False)
    try:
        model.zero_grad(set_to_none=True)
        value = model_loss(model, x, y)
        value.backward()
        grads = {
            name: (
                p.grad.detach().clone().numpy()
                if p.grad is not None
                else np.zeros(p.shape)
            )
            for name, p in model.named_parameters()
        }
    finally:
        model.zero_grad(set_to_none=True)
        set_norm_stat_updates(model, True)
        model.train(was_training)
    return grads


def parameter_count(model: SegModel) -> int:
    return sum(p.numel() for p in model.parameters())


# ---------------------------------------------------------------------------
# Checkpoints: opaque weights blob + sidecar JSON
# ---------------------------------------------------------------------------

def save_checkpoint(
    model: SegModel,
    path: Path,
    *,
    epoch: int = 0,
    val_metrics: dict | None = None,
    seed: int | None = None,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), path)
    sidecar = {
        "schema_version": CHECKPOINT_SCHEMA_VERSION,
        "config": model.config.to_json(),
        "config_hash": model.config.hash(),
        "seed": model.config.seed if seed is None else seed,
        "epoch": epoch,
        "val_metrics": val_metrics or {},
    }
    path.with_suffix(path.suffix + ".json").write_text(
        json.dumps(sidecar, indent=2, sort_keys=True) + "\n"
    )
    return path


def load_checkpoint(path: Path, expected_config: ModelConfig | None = None) -> SegModel:
    path = Path(path)
    sidecar_path = path.with_suffix(path.suffix + ".json")
    if not path.is_file():
        raise DataError(f"missing checkpoint file: {path}")
    if not sidecar_path.is_file():
        raise DataError(f"missing checkpoint sidecar: {sidecar_path}")
    sidecar = json.loads(sidecar_path.read_text())
    config = ModelConfig.from_json(sidecar["config"])
    if sidecar.get("config_hash") != config.hash():
        raise DataError(f"checkpoint {path}: sidecar config hash mismatch")
    if expected_config is not None and expected_config.hash() != config.hash():
        raise ConfigError(
            f"checkpoint {path} was built for a different config "
            f"({config.hash()} != {expected_config.hash()})"
        )
    model = SegModel(config)
    state = torch.load(path, weights_only=True)
    model.load_state_dict(state)
    model.eval()
    return model


def clone_model(model: SegModel) -> SegModel:
    """Fresh model with identical weights and running statistics."""
    twin = SegModel(model.config)
    twin = twin.to(next(model.parameters()).dtype)
    twin.load_state_dict({k: v.clone() for k, v in model.state_dict().items()})
    twin.train(model.training)
    return twin


def checkpoint_sidecar(path: Path) -> dict:
    sidecar_path = Path(path).with_suffix(Path(path).suffix + ".json")
    if not sidecar_path.is_file():
        raise DataError(f"missing checkpoint sidecar: {sidecar_path}")
    return json.loads(sidecar_path.read_text())


def named_parameter_arrays(model: SegModel) -> Iterable[tuple[str, np.ndarray]]:
    for name, p in model.named_parameters():
        yield name, p.detach().numpy()
