"""Desk-scale super-resolution generator and discriminator families.

One blueprint describes a teacher GAN; applying a channel fraction to it
yields the matching student networks.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

EPS = 1e-7
CKPT_FORMAT = "sdakd-ckpt-v1"
SKIP_CLAMP = 0.999

FractionLike = Union[Fraction, int, float, str]


def parse_fraction(value: FractionLike) -> Fraction:
    """Parse ``"1/4"``, ``0.25`` or ``Fraction(1, 4)`` into a Fraction in (0, 1]."""
    try:
        frac = Fraction(value).limit_denominator(1 << 16) if isinstance(value, float) else Fraction(value)
    except (ValueError, ZeroDivisionError, TypeError) as exc:
        raise ValueError(f"invalid channel fraction {value!r}") from exc
    if frac <= 0 or frac > 1:
        raise ValueError(f"channel fraction must lie in (0, 1], got {frac}")
    return frac


def format_fraction(frac: FractionLike) -> str:
    frac = Fraction(frac)
    return str(frac.numerator) if frac.denominator == 1 else f"{frac.numerator}/{frac.denominator}"


def scale_width(width: int, fraction: FractionLike) -> int:
    # round half up; exact rational arithmetic so 1/8 * 4 is exactly 0.5
    return max(1, math.floor(Fraction(fraction) * width + Fraction(1, 2)))


@dataclass(frozen=True)
class ArchitectureBlueprint:
    """Teacher-level description of a generator/discriminator pair.

    ``base_channel_widths`` are the generator widths: the trunk width first,
    then one width per 2x upsampling conv. ``disc_channel_widths`` are the
    widths of the strided discriminator blocks.
    """

    base_channel_widths: tuple[int, ...] = (64, 32, 16)
    num_residual_blocks: int = 4
    upscale_factor: int = 4
    input_channels: int = 3
    disc_channel_widths: tuple[int, ...] = (64, 128, 128)
    image_skip: bool = True

    def __post_init__(self) -> None:
        object.__setattr__(self, "base_channel_widths", tuple(int(w) for w in self.base_channel_widths))
        object.__setattr__(self, "disc_channel_widths", tuple(int(w) for w in self.disc_channel_widths))
        if self.upscale_factor not in (2, 4):
            raise ValueError(f"upscale_factor must be 2 or 4, got {self.upscale_factor}")
        n_up = int(math.log2(self.upscale_factor))
        if len(self.base_channel_widths) != 1 + n_up:
            raise ValueError(
                f"generator needs {1 + n_up} widths (trunk + one per 2x stage), "
                f"got {len(self.base_channel_widths)}"
            )
        if any(w < 1 for w in self.base_channel_widths + self.disc_channel_widths):
            raise ValueError("all channel widths must be >= 1")
        if not self.disc_channel_widths:
            raise ValueError("discriminator needs at least one block")
        if self.num_residual_blocks < 1:
            raise ValueError("num_residual_blocks must be positive")
        if self.input_channels < 1:
            raise ValueError("input_channels must be positive")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, data: dict) -> "ArchitectureBlueprint":
        return cls(**data)


@dataclass(frozen=True)
class ScaledArchitecture:
    blueprint: ArchitectureBlueprint
    channel_fraction: Fraction = field(default=Fraction(1))

    def __post_init__(self) -> None:
        object.__setattr__(self, "channel_fraction", parse_fraction(self.channel_fraction))

    @property
    def generator_widths(self) -> list[int]:
        return [scale_width(w, self.channel_fraction) for w in self.blueprint.base_channel_widths]

    @property
    def discriminator_widths(self) -> list[int]:
        return [scale_width(w, self.channel_fraction) for w in self.blueprint.disc_channel_widths]

    @property
    def label(self) -> str:
        return format_fraction(self.channel_fraction)


def _init_conv(conv: nn.Module, gen: torch.Generator, scale: float = 1.0) -> None:
    nn.init.kaiming_normal_(conv.weight, a=0.2, mode="fan_in", nonlinearity="leaky_relu", generator=gen)
    if scale != 1.0:
        with torch.no_grad():
            conv.weight.mul_(scale)
    if conv.bias is not None:
        nn.init.zeros_(conv.bias)


class ResidualBlock(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.conv1 = nn.Conv2d(width, width, 3, 1, 1)
        self.conv2 = nn.Conv2d(width, width, 3, 1, 1)

    def forward(self, x: Tensor) -> Tensor:
        return x + self.conv2(F.leaky_relu(self.conv1(x), 0.2))


class GeneratorNetwork(nn.Module):
    """Conv head -> residual trunk -> trunk conv -> (nearest 2x + conv) * k -> tanh.

    With ``image_skip`` the tail predicts a residual on top of the bicubic
    upsampled input, added before the tanh: ``tanh(atanh(bicubic(x)) + tail)``.
    A zero tail therefore reproduces bicubic upsampling exactly (up to the
    clamp that keeps atanh finite).

    The backbone convolutions are, in order, the head, the two convs of every
    residual block and the trunk conv. ``fm_hook_layer`` indexes that list and
    defaults to the trunk conv, the last one.
    """

    def __init__(self, arch: ScaledArchitecture):
        super().__init__()
        self.architecture = arch
        bp = arch.blueprint
        trunk, *up_widths = arch.generator_widths
        self.head = nn.Conv2d(bp.input_channels, trunk, 3, 1, 1)
        self.blocks = nn.ModuleList(ResidualBlock(trunk) for _ in range(bp.num_residual_blocks))
        self.trunk_conv = nn.Conv2d(trunk, trunk, 3, 1, 1)
        ups, prev = [], trunk
        for w in up_widths:
            ups.append(nn.Conv2d(prev, w, 3, 1, 1))
            prev = w
        self.up_convs = nn.ModuleList(ups)
        self.tail = nn.Conv2d(prev, bp.input_channels, 3, 1, 1)
        self.fm_hook_layer = self.num_backbone_layers - 1

    @property
    def num_backbone_layers(self) -> int:
        return 2 + 2 * len(self.blocks)

    @property
    def upscale_factor(self) -> int:
        return self.architecture.blueprint.upscale_factor

    @property
    def fm_channels(self) -> int:
        # every backbone conv runs at trunk width
        return self.architecture.generator_widths[0]

    def _check_input(self, x: Tensor) -> None:
        expected = self.architecture.blueprint.input_channels
        if x.dim() != 4 or x.shape[1] != expected:
            raise ValueError(f"expected a (N, {expected}, H, W) batch, got shape {tuple(x.shape)}")

    def _backbone(self, x: Tensor, tap: int | None = None) -> tuple[Tensor, Tensor | None]:
        tapped = None
        head = self.head(x)
        if tap == 0:
            tapped = head
        h, idx = head, 1
        for block in self.blocks:
            mid = block.conv1(h)
            if tap == idx:
                tapped = mid
            out = block.conv2(F.leaky_relu(mid, 0.2))
            if tap == idx + 1:
                tapped = out
            h = h + out
            idx += 2
        trunk = self.trunk_conv(h)
        if tap == idx:
            tapped = trunk
        return head + trunk, tapped

    def _upsample(self, feat: Tensor, x: Tensor) -> Tensor:
        for conv in self.up_convs:
            feat = F.leaky_relu(conv(F.interpolate(feat, scale_factor=2, mode="nearest")), 0.2)
        out = self.tail(feat)
        if self.architecture.blueprint.image_skip:
            base = F.interpolate(x, scale_factor=self.upscale_factor, mode="bicubic", align_corners=False)
            out = out + torch.atanh(base.clamp(-SKIP_CLAMP, SKIP_CLAMP))
        return torch.tanh(out)

    def forward(self, x: Tensor) -> Tensor:
        self._check_input(x)
        feat, _ = self._backbone(x)
        return self._upsample(feat, x)

    def forward_with_features(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """Return ``(sr_image, hooked_feature_map)`` from a single pass."""
        self._check_input(x)
        self._check_hook()
        feat, tapped = self._backbone(x, self.fm_hook_layer)
        return self._upsample(feat, x), tapped

    def _check_hook(self) -> None:
        if not 0 <= self.fm_hook_layer < self.num_backbone_layers:
            raise IndexError(
                f"fm_hook_layer {self.fm_hook_layer} out of range [0, {self.num_backbone_layers})"
            )


class DiscriminatorNetwork(nn.Module):
    """Strided conv stack (one 2x reduction per block), global average pool, linear + sigmoid."""

    def __init__(self, arch: ScaledArchitecture, input_size: int = 64):
        super().__init__()
        self.architecture = arch
        self.input_size = input_size
        convs, prev = [], arch.blueprint.input_channels
        for w in arch.discriminator_widths:
            convs.append(nn.Conv2d(prev, w, 3, 2, 1))
            prev = w
        self.convs = nn.ModuleList(convs)
        self.head = nn.Linear(prev, 1)

    def logits(self, x: Tensor) -> Tensor:
        c = self.architecture.blueprint.input_channels
        if x.dim() != 4 or x.shape[1] != c or x.shape[-2:] != (self.input_size, self.input_size):
            raise ValueError(
                f"discriminator built for (N, {c}, {self.input_size}, {self.input_size}), "
                f"got {tuple(x.shape)}"
            )
        for conv in self.convs:
            x = F.leaky_relu(conv(x), 0.2)
        return self.head(x.mean(dim=(2, 3))).squeeze(1)

    def forward(self, x: Tensor) -> Tensor:
        return torch.sigmoid(self.logits(x)).clamp(EPS, 1 - EPS)


def _seeded(seed: int) -> torch.Generator:
    return torch.Generator().manual_seed(int(seed))


def _as_arch(arch: ScaledArchitecture | ArchitectureBlueprint) -> ScaledArchitecture:
    return ScaledArchitecture(arch) if isinstance(arch, ArchitectureBlueprint) else arch


def build_generator(arch: ScaledArchitecture, seed: int = 0) -> GeneratorNetwork:
    arch = _as_arch(arch)
    g = GeneratorNetwork(arch)
    gen = _seeded(seed)
    small = ("conv2", "tail") if arch.blueprint.image_skip else ("conv2",)
    for name, module in g.named_modules():
        if isinstance(module, nn.Conv2d):
            # residual branches start small so the trunk stays well conditioned,
            # and with the image skip the initial output stays close to bicubic
            _init_conv(module, gen, 0.1 if name.endswith(small) else 1.0)
    g.seed = int(seed)
    return g


def build_discriminator(arch: ScaledArchitecture, seed: int = 0, input_size: int = 64) -> DiscriminatorNetwork:
    arch = _as_arch(arch)
    d = DiscriminatorNetwork(arch, input_size=input_size)
    gen = _seeded(seed)
    for module in d.modules():
        if isinstance(module, nn.Conv2d):
            _init_conv(module, gen)
    nn.init.kaiming_normal_(d.head.weight, nonlinearity="linear", generator=gen)
    nn.init.zeros_(d.head.bias)
    d.seed = int(seed)
    return d


def generate(g: GeneratorNetwork, lr_batch: Tensor) -> Tensor:
    return g(lr_batch)


def backbone_feature_map(g: GeneratorNetwork, lr_batch: Tensor) -> Tensor:
    return g.forward_with_features(lr_batch)[1]


def discriminate(d: DiscriminatorNetwork, image_batch: Tensor) -> Tensor:
    return d(image_batch)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def conv_layers(module: nn.Module) -> list[tuple[str, nn.Conv2d]]:
    return [(n, m) for n, m in module.named_modules() if isinstance(m, nn.Conv2d)]


# -- checkpoints -----------------------------------------------------------


def save_checkpoint(path: str | Path, net: nn.Module, extra: dict | None = None) -> Path:
    """Write ``net`` as a versioned ``.npz`` archive (metadata + flat weight map)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "format": CKPT_FORMAT,
        "kind": type(net).__name__,
        "seed": getattr(net, "seed", None),
        **(extra or {}),
    }
    if isinstance(net, (GeneratorNetwork, DiscriminatorNetwork)):
        meta["blueprint"] = net.architecture.blueprint.to_dict()
        meta["channel_fraction"] = format_fraction(net.architecture.channel_fraction)
    if isinstance(net, DiscriminatorNetwork):
        meta["input_size"] = net.input_size
    if isinstance(net, GeneratorNetwork):
        meta["fm_hook_layer"] = net.fm_hook_layer
    arrays = {k: v.detach().cpu().numpy() for k, v in net.state_dict().items()}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta)), **arrays)
    return path


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as archive:
        if "__meta__" not in archive.files:
            raise ValueError(f"{path} is not an sdakd checkpoint")
        meta = json.loads(str(archive["__meta__"]))
        if meta.get("format") != CKPT_FORMAT:
            raise ValueError(f"{path}: unsupported checkpoint format {meta.get('format')!r}")
        weights = {k: archive[k] for k in archive.files if k != "__meta__"}
    return meta, weights


def load_state(net: nn.Module, weights: dict[str, np.ndarray]) -> nn.Module:
    net.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in weights.items()})
    return net


def load_network(path: str | Path) -> GeneratorNetwork | DiscriminatorNetwork:
    meta, weights = read_checkpoint(path)
    arch = ScaledArchitecture(
        ArchitectureBlueprint.from_dict(meta["blueprint"]), parse_fraction(meta["channel_fraction"])
    )
    if meta["kind"] == "GeneratorNetwork":
        net: nn.Module = GeneratorNetwork(arch)
        net.fm_hook_layer = meta.get("fm_hook_layer", net.fm_hook_layer)
    elif meta["kind"] == "DiscriminatorNetwork":
        net = DiscriminatorNetwork(arch, input_size=meta["input_size"])
    else:
        raise ValueError(f"{path}: not a generator/discriminator checkpoint ({meta['kind']})")
    net.seed = meta.get("seed")
    return load_state(net, weights)
