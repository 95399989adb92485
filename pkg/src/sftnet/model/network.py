"""The two-block depth/registration network.

The main block is a residual encoder-decoder: an RGB image at 270x480 goes
through a 7x7 stride-2 stem and a 3x3-stride-3 max-pool, three encoder stages
of {one projection/strided block + identity blocks} down to a 12x20x1024
bottleneck, then a channel-reduction stage and two upsampling decoder stages
with exact crop/pad fixups back to 270x480. Its three output channels are the
depth estimate (channel 0) and the two registration channels. The adaptation
block consumes the input image concatenated with the main output (6 channels)
and emits a refined single-channel depth map. All final activations are
linear; outputs are never clamped.
"""

from __future__ import annotations

import io
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from ..geometry import NETWORK_HEIGHT, NETWORK_WIDTH, NormalizationSpec
from .blocks import (
    BN_EPS,
    BN_MOMENTUM,
    CropTo,
    PadTo,
    down_block,
    identity_block,
    projection_block,
    up_block,
)

CHECKPOINT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class WeightInitSpec:
    """Weight initialization: scheme name plus the seed that makes it reproducible."""

    scheme: str = "glorot-uniform"
    seed: int = 0

    def __post_init__(self):
        if self.scheme != "glorot-uniform":
            raise ValueError(f"unsupported init scheme {self.scheme!r}")


@dataclass(frozen=True)
class ArchitectureConfig:
    """Width control: every channel count is divided by width_divisor.

    The divisor-8 configuration keeps the exact topology at 1/64 the compute,
    which is what the gradient checks and sanity training runs use.
    """

    width_divisor: int = 1

    def ch(self, base: int) -> int:
        return max(base // self.width_divisor, 1)


class _Stem(nn.Sequential):
    def __init__(self, in_channels: int, out_channels: int):
        super().__init__(
            nn.Conv2d(in_channels, out_channels, 7, stride=2, padding=3),
            nn.BatchNorm2d(out_channels, eps=BN_EPS, momentum=BN_MOMENTUM),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(3, stride=3),
        )


class MainBlock(nn.Module):
    """Encoder-decoder from RGB to (depth, warp-u, warp-v)."""

    def __init__(self, arch: ArchitectureConfig):
        super().__init__()
        c = arch.ch
        self.stem = _Stem(3, c(64))  # -> (45, 80, 64)
        self.enc1 = nn.Sequential(
            projection_block((c(64), c(64), c(256)), c(64)),
            identity_block((c(64), c(64), c(256))),
            identity_block((c(64), c(64), c(256))),
        )  # -> (45, 80, 256)
        self.enc2 = nn.Sequential(
            down_block((c(128), c(128), c(512)), c(256)),
            *[identity_block((c(128), c(128), c(512))) for _ in range(3)],
        )  # -> (23, 40, 512)
        self.enc3 = nn.Sequential(
            down_block((c(256), c(256), c(1024)), c(512)),
            *[identity_block((c(256), c(256), c(1024))) for _ in range(3)],
        )  # -> (12, 20, 1024): the encoder bottleneck
        self.neck = nn.Sequential(
            projection_block((c(1024), c(1024), c(256)), c(1024)),
            identity_block((c(1024), c(1024), c(256))),
            identity_block((c(1024), c(1024), c(256))),
        )  # -> (12, 20, 256)
        self.dec1 = nn.Sequential(
            up_block((c(512), c(512), c(128)), c(256)),  # -> (24, 40, 128)
            CropTo(23, 39),
            *[identity_block((c(512), c(512), c(128))) for _ in range(3)],
        )
        self.dec2 = nn.Sequential(
            up_block((c(256), c(256), c(64)), c(128)),  # -> (46, 78, 64)
            PadTo(46, 80),
            identity_block((c(256), c(256), c(64))),
            identity_block((c(256), c(256), c(64))),
        )
        self.head = nn.Sequential(
            nn.Upsample(scale_factor=3, mode="nearest"),  # -> (138, 240)
            CropTo(136, 240),
            nn.Conv2d(c(64), c(64), 7, padding=3),
            nn.BatchNorm2d(c(64), eps=BN_EPS, momentum=BN_MOMENTUM),
            nn.ReLU(inplace=True),
            nn.Upsample(scale_factor=2, mode="nearest"),  # -> (272, 480)
            CropTo(NETWORK_HEIGHT, NETWORK_WIDTH),
            nn.Conv2d(c(64), 3, 3, padding=1),  # linear output
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out, _ = self.forward_with_bottleneck(x)
        return out

    def forward_with_bottleneck(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        z = self.enc3(self.enc2(self.enc1(self.stem(x))))
        out = self.head(self.dec2(self.dec1(self.neck(z))))
        return out, z


class AdaptationBlock(nn.Module):
    """Shallower encoder-decoder refining depth from the 6-channel concat."""

    def __init__(self, arch: ArchitectureConfig):
        super().__init__()
        c = arch.ch
        self.stem = _Stem(6, c(64))  # -> (45, 80, 64)
        self.enc1 = nn.Sequential(
            projection_block((c(64), c(64), c(256)), c(64)),
            identity_block((c(64), c(64), c(256))),
            identity_block((c(64), c(64), c(256))),
        )
        self.enc2 = nn.Sequential(
            down_block((c(128), c(128), c(512)), c(256)),
            *[identity_block((c(128), c(128), c(512))) for _ in range(4)],
        )  # -> (23, 40, 512)
        self.dec1 = nn.Sequential(
            up_block((c(512), c(512), c(128)), c(512)),  # -> (46, 80, 128)
            identity_block((c(512), c(512), c(128))),
            identity_block((c(512), c(512), c(128))),
        )
        self.head = nn.Sequential(
            nn.Upsample(scale_factor=2, mode="nearest"),  # -> (92, 160)
            CropTo(90, 160),
            nn.Conv2d(c(128), c(64), 3, padding=1),
            nn.BatchNorm2d(c(64), eps=BN_EPS, momentum=BN_MOMENTUM),
            nn.ReLU(inplace=True),
            nn.Upsample(scale_factor=3, mode="nearest"),  # -> (270, 480)
            nn.Conv2d(c(64), c(32), 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(c(32), 1, 3, padding=1),  # linear output
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.dec1(self.enc2(self.enc1(self.stem(x)))))


class SfTNet(nn.Module):
    """Full model: main block plus depth-refining adaptation block.

    A single trainer owns the weights during training; a frozen instance is
    safe for concurrent inference calls.
    """

    input_shape = (NETWORK_HEIGHT, NETWORK_WIDTH, 3)

    def __init__(self, arch: ArchitectureConfig | None = None,
                 init: WeightInitSpec | None = None):
        super().__init__()
        self.arch = arch or ArchitectureConfig()
        self.init_spec = init or WeightInitSpec()
        self.main_block = MainBlock(self.arch)
        self.adaptation_block = AdaptationBlock(self.arch)
        self.provenance: dict = {}
        _init_weights(self, self.init_spec)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(B, 3, 270, 480) -> main output (B, 3, h, w), refined depth (B, 1, h, w)."""
        _check_input(x)
        main_out = self.main_block(x)
        refined = self.adaptation_block(torch.cat([x, main_out], dim=1))
        return main_out, refined

    def forward_with_bottleneck(self, x: torch.Tensor):
        _check_input(x)
        main_out, bottleneck = self.main_block.forward_with_bottleneck(x)
        refined = self.adaptation_block(torch.cat([x, main_out], dim=1))
        return main_out, refined, bottleneck


def _check_input(x: torch.Tensor) -> None:
    if x.ndim != 4 or x.shape[1] != 3 or x.shape[2] != NETWORK_HEIGHT or x.shape[3] != NETWORK_WIDTH:
        raise ValueError(
            f"expected input of shape (B, 3, {NETWORK_HEIGHT}, {NETWORK_WIDTH}), "
            f"got {tuple(x.shape)}"
        )


def _init_weights(model: nn.Module, init: WeightInitSpec) -> None:
    gen = torch.Generator().manual_seed(init.seed)
    for module in model.modules():
        if isinstance(module, nn.Conv2d):
            nn.init.xavier_uniform_(module.weight, generator=gen)
            if module.bias is not None:
                nn.init.zeros_(module.bias)
        elif isinstance(module, nn.BatchNorm2d):
            nn.init.ones_(module.weight)
            nn.init.zeros_(module.bias)


def build_model(init: WeightInitSpec | None = None,
                arch: ArchitectureConfig | None = None) -> SfTNet:
    """Fresh model with deterministically initialized weights."""
    return SfTNet(arch=arch, init=init)


def predict_maps(model: SfTNet, image: np.ndarray):
    """Run inference on (h, w, 3) or (B, h, w, 3) images with values in [0, 1].

    Returns (rho_hat, eta_hat, rho_refined) as numpy arrays: the main block's
    depth channel, its two registration channels, and the refined depth.
    """
    image = np.asarray(image, dtype=np.float32)
    single = image.ndim == 3
    if single:
        image = image[None]
    if image.shape[1:] != (NETWORK_HEIGHT, NETWORK_WIDTH, 3):
        raise ValueError(
            f"expected image(s) of shape ({NETWORK_HEIGHT}, {NETWORK_WIDTH}, 3), "
            f"got {image.shape[1:]}"
        )
    x = torch.from_numpy(np.ascontiguousarray(image.transpose(0, 3, 1, 2)))
    was_training = model.training
    model.eval()
    with torch.no_grad():
        main_out, refined = model(x)
    if was_training:
        model.train()
    main_np = main_out.numpy()
    rho_hat = main_np[:, 0]
    eta_hat = main_np[:, 1:3].transpose(0, 2, 3, 1)
    rho_refined = refined.numpy()[:, 0]
    if single:
        return rho_hat[0], eta_hat[0], rho_refined[0]
    return rho_hat, eta_hat, rho_refined


@dataclass
class ParameterSummary:
    """Per-module parameter accounting for one model."""

    blocks: dict = field(default_factory=dict)  # name -> {"parameters": n, "shapes": [...]}
    total: int = 0

    def format(self) -> str:
        lines = []
        for name, entry in self.blocks.items():
            lines.append(f"{name}: {entry['parameters']:,} parameters")
            widths = sorted({s[0] for s in entry["shapes"]}, reverse=True)
            lines.append(f"  output widths: {widths}")
        lines.append(f"total: {self.total:,} parameters")
        return "\n".join(lines)


def parameter_summary(model: SfTNet) -> ParameterSummary:
    summary = ParameterSummary()
    for block_name in ("main_block", "adaptation_block"):
        block = getattr(model, block_name)
        for stage_name, stage in block.named_children():
            params = list(stage.parameters())
            summary.blocks[f"{block_name}.{stage_name}"] = {
                "parameters": sum(p.numel() for p in params),
                "shapes": [tuple(p.shape) for p in params],
            }
    summary.total = sum(p.numel() for p in model.parameters())
    return summary


def save_checkpoint(model: SfTNet, path, norm_spec: NormalizationSpec,
                    meta: dict | None = None) -> None:
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "arch": asdict(model.arch),
        "init": asdict(model.init_spec),
        "normalization": asdict(norm_spec),
        "state_dict": model.state_dict(),
        "provenance": dict(model.provenance),
        "meta": meta or {},
    }
    torch.save(payload, path)


def load_checkpoint(path) -> tuple[SfTNet, NormalizationSpec, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format version {version}")
    model = SfTNet(
        arch=ArchitectureConfig(**payload["arch"]),
        init=WeightInitSpec(**payload["init"]),
    )
    model.load_state_dict(payload["state_dict"])
    model.provenance = dict(payload.get("provenance", {}))
    model.eval()
    spec = NormalizationSpec(**payload["normalization"])
    return model, spec, payload.get("meta", {})


def state_hash(module: nn.Module) -> str:
    """Bit-exact digest over every tensor in the module's state dict."""
    import hashlib

    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode())
        buf = io.BytesIO()
        np.save(buf, tensor.detach().cpu().numpy())
        h.update(buf.getvalue())
    return h.hexdigest()
