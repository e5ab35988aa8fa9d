"""Three-stage student-discriminator distillation: teacher pre-training,
supervised-only student training, then joint supervised + adversarial
training, with validation-driven model selection.
"""

from __future__ import annotations

import copy
import json
import logging
import time
import warnings
from collections import Counter
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterator

import torch
from torch import Tensor, nn

from . import losses as L
from .data import SRDataset
from .losses import FMProjector, FrozenPerceptualExtractor, LossWeights
from .metrics import ff_fd
from .models import (
    ArchitectureBlueprint,
    DiscriminatorNetwork,
    GeneratorNetwork,
    ScaledArchitecture,
    build_discriminator,
    build_generator,
    format_fraction,
    load_network,
    load_state,
    read_checkpoint,
    save_checkpoint,
)

log = logging.getLogger(__name__)

COLLAPSE_VARIANCE = 1e-6


class DivergenceError(RuntimeError):
    """A loss became NaN or infinite."""


@dataclass
class StagePlan:
    n1: int = 5
    n2: int = 5
    n3: int = 5
    learning_rate: float = 2e-4
    betas: tuple[float, float] = (0.5, 0.999)
    batch_size: int = 4
    seed: int = 0

    def __post_init__(self) -> None:
        if min(self.n1, self.n2, self.n3) < 0:
            raise ValueError("epoch counts must be >= 0")
        if self.learning_rate <= 0 or self.batch_size < 1:
            raise ValueError("learning_rate must be > 0 and batch_size >= 1")
        self.betas = tuple(self.betas)

    @classmethod
    def uniform(cls, n: int, **kwargs) -> "StagePlan":
        return cls(n1=n, n2=n, n3=n, **kwargs)


@dataclass
class EpochRecord:
    epoch: int
    stage: str
    losses: dict[str, float]
    val_score: float | None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Checkpoint:
    epoch: int
    stage: str
    score: float
    states: dict[str, dict[str, Tensor]]
    path: Path | None = None


@dataclass
class Trace:
    """Counts of optimizer updates, loss evaluations and fake-batch sources."""

    updates: Counter = field(default_factory=Counter)
    loss_evals: Counter = field(default_factory=Counter)
    fake_sources: Counter = field(default_factory=Counter)

    def loss(self, stage: str, *names: str) -> None:
        for name in names:
            self.loss_evals[f"{stage}:{name}"] += 1

    def evaluated(self, stage: str, name: str) -> int:
        return self.loss_evals[f"{stage}:{name}"]

    def to_dict(self) -> dict:
        # asdict() would rebuild each Counter from (key, value) pairs and count the pairs
        return {"updates": dict(self.updates), "loss_evals": dict(self.loss_evals), "fake_sources": dict(self.fake_sources)}


@dataclass
class TrainingRun:
    student_g: GeneratorNetwork
    plan: StagePlan
    weights: LossWeights
    extractor: FrozenPerceptualExtractor
    teacher_g: GeneratorNetwork | None = None
    teacher_d: DiscriminatorNetwork | None = None
    student_d: DiscriminatorNetwork | None = None
    projector: FMProjector | None = None
    adversary: DiscriminatorNetwork | None = None
    method: str = "sdakd"
    label: str = ""
    gt_l1: bool = False
    out_dir: Path | None = None
    metric_history: list[EpochRecord] = field(default_factory=list)
    checkpoints: list[Checkpoint] = field(default_factory=list)
    best_checkpoint: Path | None = None
    trace: Trace = field(default_factory=Trace)
    summary: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.out_dir is not None:
            self.out_dir = Path(self.out_dir)
            self.out_dir.mkdir(parents=True, exist_ok=True)
            (self.out_dir / "metrics.jsonl").touch()

    @property
    def discriminator(self) -> DiscriminatorNetwork | None:
        """The discriminator the student generator is trained against."""
        return self.adversary if self.adversary is not None else self.student_d

    def trainable(self) -> dict[str, nn.Module]:
        nets = {"student_g": self.student_g, "student_d": self.student_d, "projector": self.projector}
        if self.adversary is not None and self.adversary is not self.student_d:
            nets["adversary"] = self.adversary
        return {k: v for k, v in nets.items() if v is not None}

    def log_epoch(self, record: EpochRecord, wall_time: float) -> None:
        self.metric_history.append(record)
        if self.out_dir is not None:
            with open(self.out_dir / "metrics.jsonl", "a") as fh:
                fh.write(json.dumps({**record.to_dict(), "wall_time": round(wall_time, 4)}) + "\n")


# -- helpers -----------------------------------------------------------------


def derive_seed(seed: int, offset: int) -> int:
    return int(seed) * 1009 + offset


def _adam(params, plan: StagePlan) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=plan.learning_rate, betas=plan.betas)


def _batches(n: int, batch_size: int, seed: int) -> Iterator[Tensor]:
    order = torch.randperm(n, generator=torch.Generator().manual_seed(seed))
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def _finite(value: Tensor, what: str) -> Tensor:
    if not torch.isfinite(value):
        raise DivergenceError(f"{what} diverged (value {value.item()})")
    return value


def _freeze(*nets: nn.Module | None) -> None:
    for net in nets:
        if net is not None:
            net.requires_grad_(False)
            net.eval()


class _EpochLosses:
    def __init__(self) -> None:
        self.sums: Counter = Counter()
        self.steps = 0

    def add(self, **values: Tensor | float) -> None:
        for k, v in values.items():
            self.sums[k] += float(v.detach()) if isinstance(v, Tensor) else float(v)

    def means(self) -> dict[str, float]:
        return {k: v / max(self.steps, 1) for k, v in sorted(self.sums.items())}


@torch.no_grad()
def validation_score(g: GeneratorNetwork, data: SRDataset, extractor: FrozenPerceptualExtractor, split: str = "validation") -> float:
    lr, hr = data.subset(split)
    was_training = g.training
    g.eval()
    try:
        sr = torch.cat([g(lr[i : i + 64]) for i in range(0, lr.shape[0], 64)])
    finally:
        g.train(was_training)
    return ff_fd(sr, hr, extractor)


def _snapshot(run: TrainingRun) -> dict[str, dict[str, Tensor]]:
    return {k: copy.deepcopy(v.state_dict()) for k, v in run.trainable().items()}


def _end_epoch(run: TrainingRun, data: SRDataset, stage: str, acc: _EpochLosses, started: float) -> EpochRecord:
    score = validation_score(run.student_g, data, run.extractor)
    record = EpochRecord(len(run.metric_history) + 1, stage, acc.means(), score)
    run.log_epoch(record, time.perf_counter() - started)
    ckpt = Checkpoint(record.epoch, stage, score, _snapshot(run))
    run.checkpoints.append(ckpt)
    best = select_best(run)
    if best is ckpt and run.out_dir is not None:
        run.best_checkpoint = _write_states(run, ckpt.states, "best")
        ckpt.path = run.best_checkpoint
    log.info("[%s] epoch %d %s val=%.4f", run.method, record.epoch, stage, score)
    return record


def _write_states(run: TrainingRun, states: dict, prefix: str) -> Path:
    ckpt_dir = run.out_dir / "checkpoints"
    for name, state in states.items():
        net = copy.deepcopy(run.trainable()[name])
        net.load_state_dict(state)
        save_checkpoint(ckpt_dir / f"{prefix}_{name}.npz", net)
    return ckpt_dir / f"{prefix}_student_g.npz"


def _warn_on_collapse(sr: Tensor, run: TrainingRun, stage: str) -> None:
    if sr.shape[0] > 1 and sr.detach().var(dim=0).mean() < COLLAPSE_VARIANCE:
        warnings.warn(f"{run.method} {stage}: generator output batch variance below {COLLAPSE_VARIANCE}; possible mode collapse")


# -- stage 1 -------------------------------------------------------------------


def gan_epoch(
    g: GeneratorNetwork,
    d: DiscriminatorNetwork,
    data: SRDataset,
    opt_g: torch.optim.Optimizer,
    opt_d: torch.optim.Optimizer,
    weights: LossWeights,
    extractor: FrozenPerceptualExtractor,
    batch_size: int,
    seed: int,
    trace: Trace,
    stage: str,
) -> _EpochLosses:
    """One epoch of ground-truth supervised + adversarial GAN training."""
    lr_all, hr_all = data.subset("train")
    acc = _EpochLosses()
    g.train(), d.train()
    for idx in _batches(lr_all.shape[0], batch_size, seed):
        lr, hr = lr_all[idx], hr_all[idx]
        sr = g(lr)

        opt_d.zero_grad(set_to_none=True)
        l_d = _finite(L.adversarial_d_loss(d(hr), d(sr.detach())), f"{stage} discriminator loss")
        l_d.backward()
        opt_d.step()
        trace.updates["d"] += 1
        trace.fake_sources["d:g"] += 1

        opt_g.zero_grad(set_to_none=True)
        l_sup = L.supervised_loss(sr, hr, extractor)
        l_adv = L.adversarial_g_loss(d(sr))
        l_g = _finite(l_sup + weights.lambda2 * l_adv, f"{stage} generator loss")
        l_g.backward()
        opt_g.step()
        trace.updates["g"] += 1
        trace.loss(stage, "supervised", "adversarial_g", "adversarial_d")
        acc.steps += 1
        acc.add(d=l_d, sup=l_sup, adv=l_adv, g=l_g)
    return acc


def run_stage1(
    blueprint: ArchitectureBlueprint,
    data: SRDataset,
    plan: StagePlan,
    weights: LossWeights | None = None,
    extractor: FrozenPerceptualExtractor | None = None,
    pretrained: tuple[str | Path, str | Path] | None = None,
    out_dir: str | Path | None = None,
    trace: Trace | None = None,
) -> tuple[GeneratorNetwork, DiscriminatorNetwork]:
    """Pre-train (or load) the teacher generator and discriminator."""
    if plan.n1 == 0:
        if pretrained is None:
            raise ValueError("n1 = 0 requires pretrained teacher checkpoints")
        g, d = load_network(pretrained[0]), load_network(pretrained[1])
        if not isinstance(g, GeneratorNetwork) or not isinstance(d, DiscriminatorNetwork):
            raise ValueError("pretrained checkpoints must be (generator, discriminator)")
        return g, d
    if len(data) == 0 or data.splits is None or not data.splits.train:
        raise ValueError("stage 1 needs a non-empty training split")
    weights = weights or LossWeights()
    extractor = extractor or FrozenPerceptualExtractor()
    trace = trace or Trace()
    arch = ScaledArchitecture(blueprint, 1)
    g = build_generator(arch, derive_seed(plan.seed, 1))
    d = build_discriminator(arch, derive_seed(plan.seed, 2), input_size=data.hr_size)
    opt_g, opt_d = _adam(g.parameters(), plan), _adam(d.parameters(), plan)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.jsonl").write_text("")
    for epoch in range(plan.n1):
        started = time.perf_counter()
        acc = gan_epoch(g, d, data, opt_g, opt_d, weights, extractor, plan.batch_size,
                        derive_seed(plan.seed, 100 + epoch), trace, "stage1")
        record = EpochRecord(epoch + 1, "stage1", acc.means(), validation_score(g, data, extractor))
        log.info("[teacher] epoch %d val=%.4f", record.epoch, record.val_score)
        if out is not None:
            with open(out / "metrics.jsonl", "a") as fh:
                fh.write(json.dumps({**record.to_dict(), "wall_time": round(time.perf_counter() - started, 4)}) + "\n")
    if out is not None:
        save_checkpoint(out / "teacher_g.npz", g)
        save_checkpoint(out / "teacher_d.npz", d)
        save_checkpoint(out / "extractor.npz", extractor)
    _freeze(g, d)
    return g, d


# -- stages 2 and 3 --------------------------------------------------------------


def new_sdakd_run(
    teachers: tuple[GeneratorNetwork, DiscriminatorNetwork],
    fraction,
    plan: StagePlan,
    weights: LossWeights | None = None,
    extractor: FrozenPerceptualExtractor | None = None,
    *,
    with_projector: bool = True,
    with_student_d: bool = True,
    method: str = "sdakd",
    out_dir: str | Path | None = None,
    gt_l1: bool = False,
) -> TrainingRun:
    """Freshly initialised students of fraction ``C`` next to frozen teachers."""
    teacher_g, teacher_d = teachers
    _freeze(teacher_g, teacher_d)
    arch = ScaledArchitecture(teacher_g.architecture.blueprint, fraction)
    student_g = build_generator(arch, derive_seed(plan.seed, 11))
    student_d = (
        build_discriminator(arch, derive_seed(plan.seed, 12), input_size=teacher_d.input_size)
        if with_student_d
        else None
    )
    projector = (
        FMProjector(student_g.fm_channels, teacher_g.fm_channels, teacher_g.fm_channels, seed=derive_seed(plan.seed, 13))
        if with_projector
        else None
    )
    c = format_fraction(arch.channel_fraction)
    return TrainingRun(
        student_g=student_g,
        plan=plan,
        weights=weights or LossWeights(),
        extractor=extractor or FrozenPerceptualExtractor(),
        teacher_g=teacher_g,
        teacher_d=teacher_d,
        student_d=student_d,
        projector=projector,
        method=method,
        label=f"SDAKD ({c}, {c})" if method == "sdakd" else method,
        gt_l1=gt_l1,
        out_dir=out_dir,
    )


def _generator_losses(run: TrainingRun, lr: Tensor, hr: Tensor, stage: str) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """Student forward pass plus the supervised and feature-map terms.

    Returns ``(student_sr, teacher_sr, l_sup, l_mlp)``.
    """
    with torch.no_grad():
        t_sr, t_fm = run.teacher_g.forward_with_features(lr)
    s_sr, s_fm = run.student_g.forward_with_features(lr)
    l_sup = L.supervised_loss(s_sr, t_sr, run.extractor)
    if run.gt_l1:
        l_sup = l_sup + (s_sr - hr).abs().mean()
    trace_names = ["supervised"]
    if run.projector is not None:
        l_mlp = L.mlp_fm_loss(s_fm, t_fm, run.projector)
        trace_names.append("mlp_fm")
    else:
        l_mlp = torch.zeros(())
    run.trace.loss(stage, *trace_names)
    return s_sr, t_sr, l_sup, l_mlp


def _generator_params(run: TrainingRun) -> list[nn.Parameter]:
    params = list(run.student_g.parameters())
    if run.projector is not None:
        params += list(run.projector.parameters())
    return params


def run_stage2(run: TrainingRun, data: SRDataset, epochs: int | None = None, stage: str = "stage2") -> TrainingRun:
    """Supervised-only student training: L_sup + lambda1 * L_MLP for the generator, response
    distillation for the student discriminator (if present). No adversarial terms.
    """
    epochs = run.plan.n2 if epochs is None else epochs
    if run.teacher_g is None:
        raise ValueError("stage 2 needs a teacher generator")
    if run.projector is not None and (
        run.projector.input_channels != run.student_g.fm_channels
        or run.projector.output_channels != run.teacher_g.fm_channels
    ):
        raise ValueError(
            f"projector {run.projector.input_channels}->{run.projector.output_channels} does not match "
            f"student/teacher feature maps {run.student_g.fm_channels}->{run.teacher_g.fm_channels}"
        )
    _freeze(run.teacher_g, run.teacher_d)
    opt_g = _adam(_generator_params(run), run.plan)
    opt_d = _adam(run.student_d.parameters(), run.plan) if run.student_d is not None else None
    lr_all, hr_all = data.subset("train")
    for epoch in range(epochs):
        started = time.perf_counter()
        acc = _EpochLosses()
        run.student_g.train()
        seed = derive_seed(run.plan.seed, 200 + len(run.metric_history))
        for idx in _batches(lr_all.shape[0], run.plan.batch_size, seed):
            lr, hr = lr_all[idx], hr_all[idx]
            opt_g.zero_grad(set_to_none=True)
            s_sr, t_sr, l_sup, l_mlp = _generator_losses(run, lr, hr, stage)
            l_g = _finite(L.stage2_generator_loss(l_sup, l_mlp, run.weights), f"{stage} generator loss")
            l_g.backward()
            opt_g.step()
            run.trace.updates["student_g"] += 1
            acc.add(sup=l_sup, mlp=l_mlp, g=l_g)

            if opt_d is not None:
                run.student_d.train()
                mix = torch.cat([hr, t_sr])
                with torch.no_grad():
                    p_t = run.teacher_d(mix)
                opt_d.zero_grad(set_to_none=True)
                l_d = _finite(L.disc_response_loss(run.student_d(mix), p_t), f"{stage} discriminator loss")
                l_d.backward()
                opt_d.step()
                run.trace.updates["student_d"] += 1
                run.trace.loss(stage, "disc_response")
                acc.add(d=l_d)
            acc.steps += 1
        _warn_on_collapse(s_sr, run, stage)
        _end_epoch(run, data, stage, acc, started)
    return run


def run_stage3(run: TrainingRun, data: SRDataset, epochs: int | None = None, stage: str = "stage3") -> TrainingRun:
    """Alternating updates: discriminator on the adversarial loss, then the
    student generator (and projector) on supervised + FM + adversarial terms.
    """
    epochs = run.plan.n3 if epochs is None else epochs
    disc = run.discriminator
    if disc is None:
        raise ValueError("stage 3 needs a discriminator for the student generator")
    _freeze(run.teacher_g)
    if run.teacher_d is not None and run.teacher_d is not disc:
        _freeze(run.teacher_d)
    disc.requires_grad_(True)
    disc_name = "student_d" if disc is run.student_d else "adversary"
    opt_g = _adam(_generator_params(run), run.plan)
    opt_d = _adam(disc.parameters(), run.plan)
    lr_all, hr_all = data.subset("train")
    for epoch in range(epochs):
        started = time.perf_counter()
        acc = _EpochLosses()
        run.student_g.train(), disc.train()
        seed = derive_seed(run.plan.seed, 200 + len(run.metric_history))
        for idx in _batches(lr_all.shape[0], run.plan.batch_size, seed):
            lr, hr = lr_all[idx], hr_all[idx]
            s_sr, _, l_sup, l_mlp = _generator_losses(run, lr, hr, stage)

            opt_d.zero_grad(set_to_none=True)
            l_d = _finite(L.adversarial_d_loss(disc(hr), disc(s_sr.detach())), f"{stage} discriminator loss")
            l_d.backward()
            opt_d.step()
            run.trace.updates[disc_name] += 1
            run.trace.fake_sources[f"{disc_name}:student_g"] += 1

            opt_g.zero_grad(set_to_none=True)
            l_adv = L.adversarial_g_loss(disc(s_sr))
            l_g = _finite(L.stage3_generator_loss(l_sup, l_mlp, l_adv, run.weights), f"{stage} generator loss")
            l_g.backward()
            opt_g.step()
            run.trace.updates["student_g"] += 1
            run.trace.loss(stage, "adversarial_d", "adversarial_g")
            acc.steps += 1
            acc.add(sup=l_sup, mlp=l_mlp, adv=l_adv, g=l_g, d=l_d)
        _warn_on_collapse(s_sr, run, stage)
        _end_epoch(run, data, stage, acc, started)
    return run


# -- selection, evaluation, calibration -------------------------------------------


def select_best(run: TrainingRun) -> Checkpoint:
    """Checkpoint with the lowest validation score; ties go to the earliest epoch."""
    if not run.checkpoints:
        raise ValueError("metric history is empty")
    return min(run.checkpoints, key=lambda c: (c.score, c.epoch))


def best_generator(run: TrainingRun) -> GeneratorNetwork:
    g = copy.deepcopy(run.student_g)
    g.load_state_dict(select_best(run).states["student_g"])
    return g.eval()


def finalize(run: TrainingRun, data: SRDataset, extra: dict | None = None) -> dict:
    """Pick the best epoch, score it on validation and test, write the summary."""
    best = select_best(run)
    g = best_generator(run)
    cg = format_fraction(run.student_g.architecture.channel_fraction)
    disc = run.discriminator
    cd = format_fraction(disc.architecture.channel_fraction) if disc is not None else None
    summary = {
        "method": run.method,
        "label": run.label,
        "generator_fraction": cg,
        "discriminator_fraction": cd,
        "best_epoch": best.epoch,
        "val_score": best.score,
        "test_score": validation_score(g, data, run.extractor, "test"),
        "epochs": len(run.metric_history),
        "generator_updates": run.trace.updates["student_g"],
        "seed": run.plan.seed,
        "provenance": str(run.out_dir) if run.out_dir is not None else None,
        **(extra or {}),
    }
    run.summary = summary
    if run.out_dir is not None:
        _write_states(run, _snapshot(run), "final")
        if run.teacher_d is not None and disc is not run.teacher_d:
            save_checkpoint(run.out_dir / "checkpoints" / "teacher_d.npz", run.teacher_d)
        save_checkpoint(run.out_dir / "extractor.npz", run.extractor)
        (run.out_dir / "trace.json").write_text(json.dumps(run.trace.to_dict(), indent=1))
        (run.out_dir / "summary.json").write_text(json.dumps(summary, indent=1))
    return summary


def balanced_lambda2(l_sup: float, l_mlp: float, l_adv: float, lambda1: float = 1.0) -> float:
    """lambda2 that makes the adversarial term equal the mean of the other two."""
    if l_adv == 0:
        raise ZeroDivisionError("adversarial loss is zero; lambda2 balancing is undefined")
    return (l_sup + lambda1 * l_mlp) / 2 / l_adv


@torch.no_grad()
def calibrate_lambda2(run: TrainingRun, lr_batch: Tensor, hr_batch: Tensor | None = None) -> float:
    """Suggest lambda2 from the loss magnitudes at the current (stage-3 start) state."""
    disc = run.discriminator
    if disc is None:
        raise ValueError("calibration needs the stage-3 discriminator")
    hr_batch = hr_batch if hr_batch is not None else torch.zeros(0)
    s_sr, _, l_sup, l_mlp = _generator_losses(run, lr_batch, hr_batch, "calibration")
    l_adv = L.adversarial_g_loss(disc(s_sr))
    return balanced_lambda2(float(l_sup), float(l_mlp), float(l_adv), run.weights.lambda1)


def load_teachers(directory: str | Path) -> tuple[GeneratorNetwork, DiscriminatorNetwork, FrozenPerceptualExtractor | None]:
    directory = Path(directory)
    g = load_network(directory / "teacher_g.npz")
    d = load_network(directory / "teacher_d.npz")
    extractor = None
    if (directory / "extractor.npz").exists():
        meta, weights = read_checkpoint(directory / "extractor.npz")
        extractor = load_state(FrozenPerceptualExtractor(seed=meta.get("seed") or 0), weights)
    _freeze(g, d)
    return g, d, extractor


def run_sdakd(
    teachers: tuple[GeneratorNetwork, DiscriminatorNetwork],
    data: SRDataset,
    fraction=Fraction(1, 2),
    plan: StagePlan | None = None,
    weights: LossWeights | None = None,
    extractor: FrozenPerceptualExtractor | None = None,
    out_dir: str | Path | None = None,
    gt_l1: bool = False,
) -> TrainingRun:
    """Stages 2 and 3 followed by model selection."""
    plan = plan or StagePlan()
    run = new_sdakd_run(teachers, fraction, plan, weights, extractor, out_dir=out_dir, gt_l1=gt_l1)
    run_stage2(run, data)
    run_stage3(run, data)
    finalize(run, data)
    return run
