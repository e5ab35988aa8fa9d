"""Comparison methods: reduced-width scratch training, a discriminator-free
distiller, online co-distillation (plain and with a shared-fake discriminator)
and the ablation variants of the student-discriminator pipeline.

Every baseline gets the same generator update budget as the full method,
``(n2 + n3)`` epochs, except ablation 1 which by definition drops stage 2.
"""

from __future__ import annotations

import copy
import time
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import torch

from . import losses as L
from .data import SRDataset
from .losses import FrozenPerceptualExtractor, LossWeights
from .models import (
    ArchitectureBlueprint,
    DiscriminatorNetwork,
    GeneratorNetwork,
    ScaledArchitecture,
    build_discriminator,
    build_generator,
    format_fraction,
    parse_fraction,
)
from .pipeline import (
    StagePlan,
    TrainingRun,
    _adam,
    _batches,
    _end_epoch,
    _EpochLosses,
    _finite,
    _warn_on_collapse,
    derive_seed,
    finalize,
    gan_epoch,
    new_sdakd_run,
    run_stage2,
    run_stage3,
)

METHODS = ("scratch", "omgd_style", "dcd_style", "dcd_modified", "ablation1", "ablation2", "ablation3")


@dataclass
class BaselineSpec:
    method: str
    generator_fraction: Fraction = Fraction(1, 2)
    discriminator_fraction: Fraction = Fraction(1)
    plan: StagePlan = field(default_factory=StagePlan)
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise ValueError(f"unknown baseline method {self.method!r}; expected one of {METHODS}")
        self.generator_fraction = parse_fraction(self.generator_fraction)
        self.discriminator_fraction = parse_fraction(self.discriminator_fraction)

    @property
    def epochs(self) -> int:
        return self.plan.n2 + self.plan.n3

    @property
    def label(self) -> str:
        cg, cd = format_fraction(self.generator_fraction), format_fraction(self.discriminator_fraction)
        names = {
            "scratch": f"Scratch - ({cg}, {cd})",
            "omgd_style": "OMGD-style",
            "dcd_style": "DCD-style",
            "dcd_modified": "DCD-style with modified adversarial training",
        }
        return names.get(self.method, f"Ablation {self.method[-1]}")


def _check(spec: BaselineSpec, *allowed: str) -> None:
    if spec.method not in allowed:
        raise ValueError(f"spec.method is {spec.method!r}, expected {' or '.join(allowed)}")


def run_scratch(
    spec: BaselineSpec,
    blueprint: ArchitectureBlueprint,
    data: SRDataset,
    extractor: FrozenPerceptualExtractor | None = None,
    out_dir: str | Path | None = None,
) -> TrainingRun:
    """Reduced GAN trained on ground truth only: no teacher anywhere."""
    _check(spec, "scratch")
    if data.splits is None or not data.splits.train:
        raise ValueError("scratch training needs a non-empty training split")
    plan = spec.plan
    g = build_generator(ScaledArchitecture(blueprint, spec.generator_fraction), derive_seed(plan.seed, 21))
    d = build_discriminator(
        ScaledArchitecture(blueprint, spec.discriminator_fraction), derive_seed(plan.seed, 22), input_size=data.hr_size
    )
    run = TrainingRun(
        student_g=g, plan=plan, weights=spec.weights, extractor=extractor or FrozenPerceptualExtractor(),
        student_d=d, method="scratch", label=spec.label, out_dir=out_dir,
    )
    opt_g, opt_d = _adam(g.parameters(), plan), _adam(d.parameters(), plan)
    for _ in range(spec.epochs):
        started = time.perf_counter()
        seed = derive_seed(plan.seed, 200 + len(run.metric_history))
        acc = gan_epoch(g, d, data, opt_g, opt_d, spec.weights, run.extractor, plan.batch_size, seed, run.trace, "scratch")
        run.trace.updates["student_g"] += acc.steps
        run.trace.updates["student_d"] += acc.steps
        _end_epoch(run, data, "scratch", acc, started)
    finalize(run, data)
    return run


def run_omgd_style(
    spec: BaselineSpec,
    teacher_g: GeneratorNetwork,
    data: SRDataset,
    extractor: FrozenPerceptualExtractor | None = None,
    out_dir: str | Path | None = None,
) -> TrainingRun:
    """Discriminator-free distillation: supervised + FM terms for n2 + n3 epochs."""
    _check(spec, "omgd_style")
    run = new_sdakd_run(
        (teacher_g, None), spec.generator_fraction, spec.plan, spec.weights, extractor,
        with_student_d=False, method="omgd_style", out_dir=out_dir,
    )
    run.label = spec.label
    run_stage2(run, data, epochs=spec.epochs, stage="omgd")
    finalize(run, data)
    return run


def _dcd(
    spec: BaselineSpec,
    blueprint: ArchitectureBlueprint,
    data: SRDataset,
    extractor: FrozenPerceptualExtractor | None,
    out_dir: str | Path | None,
    shared_fakes: bool,
) -> TrainingRun:
    plan, w = spec.plan, spec.weights
    teacher_g = build_generator(ScaledArchitecture(blueprint, 1), derive_seed(plan.seed, 31))
    teacher_d = build_discriminator(
        ScaledArchitecture(blueprint, spec.discriminator_fraction), derive_seed(plan.seed, 32), input_size=data.hr_size
    )
    student_g = build_generator(ScaledArchitecture(blueprint, spec.generator_fraction), derive_seed(plan.seed, 33))
    run = TrainingRun(
        student_g=student_g, plan=plan, weights=w, extractor=extractor or FrozenPerceptualExtractor(),
        teacher_g=teacher_g, teacher_d=teacher_d, adversary=teacher_d, method=spec.method,
        label=spec.label, out_dir=out_dir,
    )
    opt_tg, opt_td = _adam(teacher_g.parameters(), plan), _adam(teacher_d.parameters(), plan)
    opt_sg = _adam(student_g.parameters(), plan)
    lr_all, hr_all = data.subset("train")
    stage = spec.method
    for _ in range(spec.epochs):
        started = time.perf_counter()
        acc = _EpochLosses()
        for net in (teacher_g, teacher_d, student_g):
            net.train()
        seed = derive_seed(plan.seed, 200 + len(run.metric_history))
        for idx in _batches(lr_all.shape[0], plan.batch_size, seed):
            lr, hr = lr_all[idx], hr_all[idx]
            t_sr, s_sr = teacher_g(lr), student_g(lr)

            fakes = [t_sr.detach()]
            run.trace.fake_sources["teacher_d:teacher_g"] += 1
            if shared_fakes:
                fakes.append(s_sr.detach())
                run.trace.fake_sources["teacher_d:student_g"] += 1
            opt_td.zero_grad(set_to_none=True)
            l_d = _finite(L.adversarial_d_loss(teacher_d(hr), teacher_d(torch.cat(fakes))), f"{stage} discriminator loss")
            l_d.backward()
            opt_td.step()
            run.trace.updates["teacher_d"] += 1

            opt_tg.zero_grad(set_to_none=True)
            l_t = L.supervised_loss(t_sr, hr, run.extractor) + w.lambda2 * L.adversarial_g_loss(teacher_d(t_sr))
            _finite(l_t, f"{stage} teacher generator loss").backward()
            opt_tg.step()
            run.trace.updates["teacher_g"] += 1

            opt_sg.zero_grad(set_to_none=True)
            l_sup = L.supervised_loss(s_sr, t_sr, run.extractor)
            l_adv = L.adversarial_g_loss(teacher_d(s_sr))
            l_s = _finite(l_sup + w.lambda2 * l_adv, f"{stage} student generator loss")
            l_s.backward()
            opt_sg.step()
            run.trace.updates["student_g"] += 1
            run.trace.loss(stage, "supervised", "adversarial_g", "adversarial_d")
            acc.steps += 1
            acc.add(d=l_d, teacher_g=l_t, sup=l_sup, adv=l_adv, g=l_s)
        _warn_on_collapse(s_sr, run, stage)
        _end_epoch(run, data, stage, acc, started)
    finalize(run, data)
    return run


def run_dcd_style(spec, blueprint, data, extractor=None, out_dir=None) -> TrainingRun:
    """Teacher G, teacher D and student G co-trained from scratch; the
    discriminator only ever sees teacher fakes.
    """
    _check(spec, "dcd_style")
    return _dcd(spec, blueprint, data, extractor, out_dir, shared_fakes=False)


def run_dcd_modified(spec, blueprint, data, extractor=None, out_dir=None) -> TrainingRun:
    """As :func:`run_dcd_style`, but the discriminator's fake batch is teacher
    and student fakes in equal parts.
    """
    _check(spec, "dcd_modified")
    return _dcd(spec, blueprint, data, extractor, out_dir, shared_fakes=True)


ABLATIONS = {
    # variant: (stage-2 epochs used, FM distillation)
    1: (False, False),
    2: (True, False),
    3: (True, True),
}


def run_ablation(
    variant: int,
    spec: BaselineSpec,
    teachers: tuple[GeneratorNetwork, DiscriminatorNetwork],
    data: SRDataset,
    extractor: FrozenPerceptualExtractor | None = None,
    out_dir: str | Path | None = None,
) -> TrainingRun:
    """Pipeline variants that train the student against a copy of the
    pre-trained teacher discriminator instead of a student discriminator.
    """
    if variant not in ABLATIONS:
        raise ValueError(f"ablation variant must be 1, 2 or 3, got {variant}")
    use_stage2, use_fm = ABLATIONS[variant]
    teacher_g, teacher_d = teachers
    run = new_sdakd_run(
        teachers, spec.generator_fraction, spec.plan, spec.weights, extractor,
        with_projector=use_fm, with_student_d=False, method=f"ablation{variant}", out_dir=out_dir,
    )
    run.label = f"Ablation {variant}"
    run.adversary = copy.deepcopy(teacher_d)
    if use_stage2:
        run_stage2(run, data)
    run_stage3(run, data)
    finalize(run, data, extra={"n2": spec.plan.n2 if use_stage2 else 0, "fm_distillation": use_fm, "student_discriminator": False})
    return run


def run_baseline(
    spec: BaselineSpec,
    data: SRDataset,
    blueprint: ArchitectureBlueprint,
    teachers: tuple[GeneratorNetwork, DiscriminatorNetwork] | None = None,
    extractor: FrozenPerceptualExtractor | None = None,
    out_dir: str | Path | None = None,
) -> TrainingRun:
    if spec.method == "scratch":
        return run_scratch(spec, blueprint, data, extractor, out_dir)
    if spec.method in ("dcd_style", "dcd_modified"):
        fn = run_dcd_style if spec.method == "dcd_style" else run_dcd_modified
        return fn(spec, blueprint, data, extractor, out_dir)
    if teachers is None:
        raise ValueError(f"{spec.method} needs trained teacher networks")
    if spec.method == "omgd_style":
        return run_omgd_style(spec, teachers[0], data, extractor, out_dir)
    return run_ablation(int(spec.method[-1]), spec, teachers, data, extractor, out_dir)
