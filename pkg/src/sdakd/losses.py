"""Distillation and adversarial loss terms, and their stage-wise compositions.

Every loss reduces by the mean over batch and all elements. Teacher-side
inputs are detached inside each loss, so no gradient ever reaches a teacher.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .models import EPS


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 0.1

    def __post_init__(self) -> None:
        for name in ("lambda1", "lambda2"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {value}")


class FMProjector(nn.Module):
    """Two-layer perceptron applied over channels at every spatial position.

    Realised as two 1x1 convolutions with a ReLU between them; the first
    layer takes the student's channel count, the second emits the teacher's.
    """

    def __init__(self, input_channels: int, output_channels: int, hidden_width: int | None = None, seed: int = 0):
        super().__init__()
        hidden_width = hidden_width or output_channels
        self.input_channels = input_channels
        self.output_channels = output_channels
        self.hidden_width = hidden_width
        self.fc1 = nn.Conv2d(input_channels, hidden_width, 1)
        self.fc2 = nn.Conv2d(hidden_width, output_channels, 1)
        gen = torch.Generator().manual_seed(int(seed))
        nn.init.kaiming_normal_(self.fc1.weight, nonlinearity="relu", generator=gen)
        nn.init.kaiming_normal_(self.fc2.weight, nonlinearity="linear", generator=gen)
        nn.init.zeros_(self.fc1.bias)
        nn.init.zeros_(self.fc2.bias)

    @classmethod
    def identity(cls, channels: int) -> "FMProjector":
        """Exact identity map: relu(x) - relu(-x) == x, using 2*channels hidden units."""
        proj = cls(channels, channels, hidden_width=2 * channels)
        eye = torch.eye(channels)
        with torch.no_grad():
            proj.fc1.weight.copy_(torch.cat([eye, -eye])[:, :, None, None])
            proj.fc2.weight.copy_(torch.cat([eye, -eye], dim=1)[:, :, None, None])
            proj.fc1.bias.zero_()
            proj.fc2.bias.zero_()
        return proj

    def forward(self, fm: Tensor) -> Tensor:
        if fm.dim() != 4 or fm.shape[1] != self.input_channels:
            raise ValueError(f"projector expects {self.input_channels} input channels, got shape {tuple(fm.shape)}")
        return self.fc2(F.relu(self.fc1(fm)))


class FrozenPerceptualExtractor(nn.Module):
    """Fixed, seeded, randomly initialised 4-layer conv net.

    Layer 3 activations define the perceptual space used by the supervised
    loss; layer 4, average-pooled, gives the 64-d embedding used for the
    Fréchet distance.
    """

    widths = (16, 32, 64, 64)
    strides = (1, 2, 2, 2)

    def __init__(self, seed: int = 0, in_channels: int = 3, tap_layer: int = 3):
        super().__init__()
        if not 1 <= tap_layer <= len(self.widths):
            raise ValueError(f"tap_layer must be in [1, {len(self.widths)}]")
        self.seed = int(seed)
        self.tap_layer = tap_layer
        gen = torch.Generator().manual_seed(self.seed)
        convs, prev = [], in_channels
        for w, s in zip(self.widths, self.strides):
            conv = nn.Conv2d(prev, w, 3, s, 1)
            nn.init.kaiming_normal_(conv.weight, nonlinearity="relu", generator=gen)
            # small random biases keep ReLU units from sharing one kink at zero
            nn.init.uniform_(conv.bias, -0.1, 0.1, generator=gen)
            convs.append(conv)
            prev = w
        self.convs = nn.ModuleList(convs)
        self.requires_grad_(False)
        self.eval()

    @property
    def feature_dim(self) -> int:
        return self.widths[-1]

    def train(self, mode: bool = True) -> "FrozenPerceptualExtractor":
        return super().train(False)

    def activations(self, x: Tensor, upto: int) -> Tensor:
        for conv in self.convs[:upto]:
            x = F.relu(conv(x))
        return x

    def perceptual(self, x: Tensor) -> Tensor:
        return self.activations(x, self.tap_layer)

    def embed(self, x: Tensor) -> Tensor:
        return self.activations(x, len(self.convs)).mean(dim=(2, 3))

    forward = perceptual


def _same_shape(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def supervised_loss(student_out: Tensor, teacher_out: Tensor, extractor: FrozenPerceptualExtractor | None) -> Tensor:
    """Mean absolute difference plus mean squared perceptual-feature difference.

    ``extractor=None`` drops the perceptual term.
    """
    _same_shape(student_out, teacher_out, "supervised_loss")
    teacher_out = teacher_out.detach()
    loss = (student_out - teacher_out).abs().mean()
    if extractor is not None:
        loss = loss + (extractor.perceptual(student_out) - extractor.perceptual(teacher_out)).pow(2).mean()
    return loss


def mlp_fm_loss(student_fm: Tensor, teacher_fm: Tensor, projector: FMProjector) -> Tensor:
    if student_fm.shape[1] != projector.input_channels or teacher_fm.shape[1] != projector.output_channels:
        raise ValueError(
            f"projector maps {projector.input_channels}->{projector.output_channels} channels, "
            f"got student {student_fm.shape[1]} / teacher {teacher_fm.shape[1]}"
        )
    if student_fm.shape[0] != teacher_fm.shape[0] or student_fm.shape[2:] != teacher_fm.shape[2:]:
        raise ValueError(f"feature maps disagree: {tuple(student_fm.shape)} vs {tuple(teacher_fm.shape)}")
    return (projector(student_fm) - teacher_fm.detach()).pow(2).mean()


def adversarial_g_loss(p_fake: Tensor) -> Tensor:
    """Non-saturating generator loss, mean of -log p_fake."""
    return -torch.log(p_fake).mean()


def adversarial_d_loss(p_real: Tensor, p_fake: Tensor) -> Tensor:
    # means taken per term so real and fake batches may differ in size
    return -torch.log(p_real).mean() - torch.log1p(-p_fake).mean()


def disc_response_loss(p_real_student: Tensor, p_real_teacher: Tensor) -> Tensor:
    _same_shape(p_real_student, p_real_teacher, "disc_response_loss")
    return (p_real_student - p_real_teacher.detach()).pow(2).mean()


def stage2_generator_loss(l_sup: Tensor | float, l_mlp: Tensor | float, w: LossWeights) -> Tensor | float:
    return l_sup + w.lambda1 * l_mlp


def stage3_generator_loss(
    l_sup: Tensor | float, l_mlp: Tensor | float, l_adv: Tensor | float, w: LossWeights
) -> Tensor | float:
    if w.lambda2 == 0:
        return stage2_generator_loss(l_sup, l_mlp, w)
    return stage2_generator_loss(l_sup, l_mlp, w) + w.lambda2 * l_adv


__all__ = [
    "EPS",
    "FMProjector",
    "FrozenPerceptualExtractor",
    "LossWeights",
    "adversarial_d_loss",
    "adversarial_g_loss",
    "disc_response_loss",
    "mlp_fm_loss",
    "stage2_generator_loss",
    "stage3_generator_loss",
    "supervised_loss",
]
