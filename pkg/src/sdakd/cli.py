"""``sdakd`` command line: teacher training, distillation, baselines, the
ablation grid, discriminator diagnostics, latency tables and reports.

Exit codes: 0 success, 2 bad config or arguments, 3 divergence, 4 missing artifact.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from fractions import Fraction
from pathlib import Path
from typing import Callable, Sequence

from .baselines import METHODS, run_baseline
from .config import ConfigError, ExperimentConfig, load_config, parse_config
from .data import SRDataset, fractions_for_counts, ingest, split, synthesize
from .losses import FrozenPerceptualExtractor
from .metrics import (
    METRIC_NAME,
    DiscOutputStats,
    balance_score,
    disc_output_distribution,
    measure_speedup,
)
from .models import format_fraction, load_network, parse_fraction
from .pipeline import DivergenceError, load_teachers, run_sdakd, run_stage1

log = logging.getLogger("sdakd")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_MISSING = 0, 2, 3, 4
DEFAULT_ROOT = "runs"


class MissingArtifact(FileNotFoundError):
    pass


# -- plumbing -------------------------------------------------------------------


def output_root(flag: str | None) -> Path:
    return Path(flag or os.environ.get("SDAKD_OUT") or DEFAULT_ROOT)


def build_dataset(cfg: ExperimentConfig) -> SRDataset:
    ds = cfg.dataset
    if ds.source == "synthetic":
        data = synthesize(ds.count, ds.size, seed=ds.seed, scale=ds.scale)
    else:
        if not Path(ds.source).is_dir():
            raise MissingArtifact(f"dataset directory {ds.source} does not exist")
        data = ingest(ds.source, hr_size=ds.size, limit=ds.count, scale=ds.scale)
    split(data, fractions_for_counts(ds.splits.train, ds.splits.validation, ds.splits.test), seed=ds.seed)
    return data


def _frac_tag(frac) -> str:
    return format_fraction(frac).replace("/", "_")


def _store_config(cfg: ExperimentConfig, run_dir: Path) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.yaml").write_text(cfg.to_yaml())


def _with_seed(cfg: ExperimentConfig, seed: int | None) -> ExperimentConfig:
    if seed is None:
        return cfg
    data = cfg.model_dump(mode="json", by_alias=True)
    data["training"]["seed"] = seed
    return parse_config(data)


def _extractor(cfg: ExperimentConfig) -> FrozenPerceptualExtractor:
    return FrozenPerceptualExtractor(seed=cfg.evaluation.extractor_seed)


def teacher_dir(root: Path, seed: int, override: str | None = None) -> Path:
    return Path(override) if override else root / "teacher" / f"seed{seed}"


def _teachers(directory: Path):
    missing = [n for n in ("teacher_g.npz", "teacher_d.npz") if not (directory / n).exists()]
    if missing:
        raise MissingArtifact(f"teacher checkpoints missing in {directory}: {', '.join(missing)}; run train-teacher first")
    g, d, ext = load_teachers(directory)
    return (g, d), ext


def _row(summary: dict) -> dict:
    keys = ("label", "method", "generator_fraction", "discriminator_fraction", "val_score", "test_score", "best_epoch", "seed", "provenance")
    return {k: summary.get(k) for k in keys}


def _print_rows(rows: Sequence[dict], out=None) -> None:
    out = out or sys.stdout
    print(render_table(rows), file=out)
    for r in rows:
        print(json.dumps(r), file=out)


def render_table(rows: Sequence[dict]) -> str:
    cols = [("label", "Method"), ("val_score", "Val ff-FD"), ("test_score", "Test ff-FD"), ("best_epoch", "Best epoch"), ("provenance", "Run directory")]
    cells = [[h for _, h in cols]]
    for r in rows:
        cells.append([f"{r[k]:.4f}" if isinstance(r.get(k), float) else str(r.get(k, "")) for k, _ in cols])
    widths = [max(len(row[i]) for row in cells) for i in range(len(cols))]
    lines = [" | ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in cells]
    lines.insert(1, "-+-".join("-" * w for w in widths))
    return "\n".join(lines)


# -- verbs ----------------------------------------------------------------------


def cmd_train_teacher(cfg: ExperimentConfig, root: Path, skip: bool = False, teacher: str | None = None) -> Path:
    plan = cfg.plan()
    directory = teacher_dir(root, plan.seed, teacher)
    if skip or plan.n1 == 0:
        _teachers(directory)
        print(f"stage 1 skipped; using {directory / 'teacher_g.npz'} and {directory / 'teacher_d.npz'}")
        return directory
    _store_config(cfg, directory)
    data = build_dataset(cfg)
    data.write_manifest(directory / "dataset.json")
    g, _ = run_stage1(cfg.blueprint(), data, plan, cfg.weights(), _extractor(cfg), out_dir=directory)
    last = json.loads((directory / "metrics.jsonl").read_text().splitlines()[-1])
    print(f"teacher trained for {plan.n1} epochs; final losses {json.dumps(last['losses'])}; val {METRIC_NAME} {last['val_score']:.4f}")
    print(directory / "teacher_g.npz")
    print(directory / "teacher_d.npz")
    return directory


def cmd_distill(cfg: ExperimentConfig, root: Path, fractions: Sequence, teacher: str | None = None) -> list[dict]:
    plan = cfg.plan()
    teachers, ext = _teachers(teacher_dir(root, plan.seed, teacher))
    data = build_dataset(cfg)
    rows = []
    for frac in fractions:
        run_dir = root / "distill" / f"C{_frac_tag(frac)}" / f"seed{plan.seed}"
        _store_config(cfg, run_dir)
        run = run_sdakd(teachers, data, frac, plan, cfg.weights(), ext or _extractor(cfg), run_dir, cfg.training.gt_l1)
        rows.append(_row(run.summary))
    _print_rows(rows)
    return rows


def cmd_baseline(cfg: ExperimentConfig, root: Path, method: str, generator_fraction, discriminator_fraction, teacher: str | None = None) -> dict:
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}; expected one of {', '.join(METHODS)}")
    spec = cfg.baseline_spec(method, generator_fraction, discriminator_fraction)
    needs_teacher = method not in ("scratch", "dcd_style", "dcd_modified")
    teachers, ext = _teachers(teacher_dir(root, spec.plan.seed, teacher)) if needs_teacher else (None, None)
    run_dir = root / "baseline" / f"{method}_{_frac_tag(spec.generator_fraction)}_{_frac_tag(spec.discriminator_fraction)}" / f"seed{spec.plan.seed}"
    _store_config(cfg, run_dir)
    run = run_baseline(spec, build_dataset(cfg), cfg.blueprint(), teachers, ext or _extractor(cfg), run_dir)
    row = _row(run.summary)
    _print_rows([row])
    return row


def cmd_ablate(cfg: ExperimentConfig, root: Path, fraction=Fraction(1, 4), teacher: str | None = None) -> list[dict]:
    plan = cfg.plan()
    teachers, ext = _teachers(teacher_dir(root, plan.seed, teacher))
    ext = ext or _extractor(cfg)
    data = build_dataset(cfg)
    tag, rows = _frac_tag(fraction), []
    for variant in (1, 2, 3):
        spec = cfg.baseline_spec(f"ablation{variant}", fraction, fraction)
        run_dir = root / "ablate" / f"C{tag}" / f"ablation{variant}" / f"seed{plan.seed}"
        _store_config(cfg, run_dir)
        rows.append(_row(run_baseline(spec, data, cfg.blueprint(), teachers, ext, run_dir).summary))
    run_dir = root / "ablate" / f"C{tag}" / "sdakd" / f"seed{plan.seed}"
    _store_config(cfg, run_dir)
    rows.append(_row(run_sdakd(teachers, data, fraction, plan, cfg.weights(), ext, run_dir, cfg.training.gt_l1).summary))
    _print_rows(rows)
    return rows


def _diag_pairs(run_dir: Path) -> list[tuple[str, Path]]:
    ckpt = run_dir / "checkpoints"
    names = {
        "student_d": "student discriminator",
        "adversary": "discriminator the student trained against",
        "teacher_d": "teacher discriminator",
    }
    pairs = []
    for key, label in names.items():
        for prefix in ("final_", ""):
            path = ckpt / f"{prefix}{key}.npz"
            if path.exists():
                pairs.append((label, path))
                break
    return pairs


def cmd_diagnose(cfg: ExperimentConfig, run_dirs: Sequence[str], root: Path) -> dict:
    """Histogram every discriminator stored with each run against that run's final student generator."""
    if not run_dirs:
        raise ConfigError("diagnose needs at least one --run directory")
    data = build_dataset(cfg)
    lr, _ = data.subset("train")
    n, bins = cfg.evaluation.diag_samples, cfg.evaluation.histogram_bins
    out_dir = root / "diagnose"
    out_dir.mkdir(parents=True, exist_ok=True)
    results: dict[str, dict] = {}
    for rd in map(Path, run_dirs):
        g_path = rd / "checkpoints" / "final_student_g.npz"
        if not g_path.exists():
            raise MissingArtifact(f"{g_path} not found")
        pairs = _diag_pairs(rd)
        if not pairs:
            raise MissingArtifact(f"no discriminator checkpoints under {rd / 'checkpoints'}")
        g = load_network(g_path)
        for label, d_path in pairs:
            stats = disc_output_distribution(load_network(d_path), g, lr, count=n, bins=bins)
            key = f"{rd.as_posix()}::{d_path.stem}"
            tag = f"{rd.parent.name}_{rd.name}_{d_path.stem}"
            (out_dir / f"{tag}.csv").write_text(stats.to_csv())
            results[key] = {"run": str(rd), "discriminator": label, "mean": stats.mean, "balance_score": balance_score(stats), "stats": stats}
            print(f"{rd}  {label:<42} mean={stats.mean:.4f} balance={balance_score(stats):.4f}")
    _plot_histograms(results, out_dir / "histograms.png")
    (out_dir / "balance.jsonl").write_text(
        "".join(json.dumps({k: v for k, v in r.items() if k != "stats"}) + "\n" for r in results.values())
    )
    return results


def _plot_histograms(results: dict, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for key, r in results.items():
        stats: DiscOutputStats = r["stats"]
        ax.hist(stats.probabilities, bins=stats.bin_edges, alpha=0.5, label=f"{Path(r['run']).parent.name}: {r['discriminator']}")
    ax.axvline(0.5, color="k", lw=0.8, ls="--")
    ax.set_xlabel("discriminator output P(real)")
    ax.set_ylabel("count")
    ax.legend(fontsize=6)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def cmd_speedtest(cfg: ExperimentConfig, passes: int | None = None) -> list[dict]:
    passes = passes or cfg.evaluation.speed_passes
    shape = (1, 3, cfg.dataset.size // cfg.dataset.scale, cfg.dataset.size // cfg.dataset.scale)
    report = measure_speedup(cfg.blueprint(), (1, "1/2", "1/4", "1/8"), shape, passes, cfg.evaluation.speed_warmup)
    print(report.render())
    return report.rows()


def cmd_report(root: Path) -> list[dict]:
    summaries = sorted(root.rglob("summary.json"))
    if not summaries:
        raise MissingArtifact(f"no summary.json under {root}")
    rows = []
    for path in summaries:
        row = _row(json.loads(path.read_text()))
        row["provenance"] = str(path.parent)
        rows.append(row)
    _print_rows(rows)
    (root / "report.jsonl").write_text("".join(json.dumps(r) + "\n" for r in rows))
    return rows


# -- argument parsing --------------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML experiment config (defaults apply when omitted)")
    common.add_argument("--seed", type=int, help="override training.seed")
    common.add_argument("--out", help="output root (else $SDAKD_OUT, else ./runs)")
    common.add_argument("--teacher", help="teacher checkpoint directory (default <out>/teacher/seed<N>)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="sdakd", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="verb", required=True)
    t = sub.add_parser("train-teacher", parents=[common], help="stage 1: pre-train teacher G and D")
    t.add_argument("--skip", action="store_true", help="bypass stage 1 and reuse existing teacher checkpoints")
    d = sub.add_parser("distill", parents=[common], help="stages 2 and 3 at one or more channel fractions")
    d.add_argument("--fraction", default="1/2")
    d.add_argument("--sweep", action="store_true", help="run every fraction listed in architecture.fractions")
    b = sub.add_parser("baseline", parents=[common], help="train one comparison method")
    b.add_argument("--method", required=True)
    b.add_argument("--fraction", default="1/2", help="student generator fraction")
    b.add_argument("--disc-fraction", default=None, help="discriminator fraction (default: same as --fraction for scratch, 1 otherwise)")
    a = sub.add_parser("ablate", parents=[common], help="ablations 1-3 plus the full method")
    a.add_argument("--fraction", default="1/4")
    g = sub.add_parser("diagnose", parents=[common], help="discriminator output histograms for finished runs")
    g.add_argument("--run", action="append", default=[], help="run directory (repeatable)")
    s = sub.add_parser("speedtest", parents=[common], help="generator latency per channel fraction")
    s.add_argument("--passes", type=int)
    sub.add_parser("report", parents=[common], help="tabulate every summary.json under the output root")
    return p


def _dispatch(args: argparse.Namespace) -> None:
    cfg = load_config(args.config) if args.config else parse_config({})
    cfg = _with_seed(cfg, args.seed)
    root = output_root(args.out)
    verb: dict[str, Callable[[], object]] = {
        "train-teacher": lambda: cmd_train_teacher(cfg, root, args.skip, args.teacher),
        "distill": lambda: cmd_distill(
            cfg, root, cfg.architecture.fractions if args.sweep else [args.fraction], args.teacher
        ),
        "baseline": lambda: cmd_baseline(
            cfg, root, args.method, args.fraction,
            args.disc_fraction or (args.fraction if args.method == "scratch" else "1"), args.teacher,
        ),
        "ablate": lambda: cmd_ablate(cfg, root, args.fraction, args.teacher),
        "diagnose": lambda: cmd_diagnose(cfg, args.run, root),
        "speedtest": lambda: cmd_speedtest(cfg, args.passes),
        "report": lambda: cmd_report(root),
    }
    verb[args.verb]()


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = _parser().parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        for name in ("fraction", "disc_fraction"):
            if getattr(args, name, None) is not None:
                parse_fraction(getattr(args, name))
        _dispatch(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (MissingArtifact, FileNotFoundError) as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except ValueError as exc:
        print(f"invalid argument: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
