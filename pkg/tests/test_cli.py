import json
from pathlib import Path

import pytest
import yaml

from sdakd import cli
from sdakd.config import SCHEMA, ConfigError, load_config, parse_config
from sdakd.pipeline import DivergenceError

TINY = {
    "schema": SCHEMA,
    "dataset": {"size": 16, "splits": {"train": 24, "validation": 8, "test": 8}},
    "architecture": {"generator_widths": [8, 8, 4], "discriminator_widths": [8, 8], "residual_blocks": 1},
    "training": {"n1": 1, "n2": 1, "n3": 1, "batch_size": 8},
    "evaluation": {"diag_samples": 20, "speed_passes": 3, "speed_warmup": 1},
}


def write_config(path: Path, data=TINY) -> str:
    path.write_text(yaml.safe_dump(data))
    return str(path)


def rows_from(stdout: str) -> list[dict]:
    return [json.loads(line) for line in stdout.splitlines() if line.startswith("{")]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = write_config(root / "tiny.yaml")
    assert cli.main(["train-teacher", "--config", cfg, "--out", str(root / "out")]) == 0
    return root, cfg


# -- config ---------------------------------------------------------------------


def test_defaults_validate():
    cfg = parse_config({})
    assert cfg.schema_version == SCHEMA
    assert (cfg.training.n1, cfg.training.n2, cfg.training.n3) == (5, 5, 5)
    assert (cfg.training.lambda1, cfg.training.lambda2) == (1.0, 0.1)
    assert cfg.architecture.fractions == ["1/2", "1/4", "1/8"]
    assert (cfg.dataset.splits.train, cfg.dataset.splits.validation, cfg.dataset.splits.test) == (512, 64, 64)


@pytest.mark.parametrize(
    "patch, key",
    [
        ({"dataset": {"bogus": 1}}, "dataset.bogus"),
        ({"surprise": True}, "surprise"),
        ({"training": {"n2": -1}}, "training.n2"),
        ({"methods": {"baselines": [{"method": "gan_compression"}]}}, "methods.baselines.0.method"),
        ({"schema": "sdakd-config-v0"}, "schema"),
        ({"dataset": {"size": 30, "scale": 4}}, "dataset"),
    ],
)
def test_bad_config_names_offending_key(patch, key):
    with pytest.raises(ConfigError, match=key.replace(".", r"\.")):
        parse_config(patch)


def test_fractions_normalised():
    cfg = parse_config({"architecture": {"fractions": [0.5, "2/8"]}})
    assert cfg.architecture.fractions == ["1/2", "1/4"]


def test_yaml_round_trip(tmp_path):
    cfg = parse_config(TINY)
    path = tmp_path / "c.yaml"
    path.write_text(cfg.to_yaml())
    assert load_config(path) == cfg


def test_load_config_rejects_non_mapping(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("- a\n- b\n")
    with pytest.raises(ConfigError, match="mapping"):
        load_config(path)


def test_plan_and_blueprint_follow_config():
    cfg = parse_config(TINY)
    assert cfg.plan(seed=7).seed == 7
    assert cfg.blueprint().base_channel_widths == (8, 8, 4)


# -- exit codes ---------------------------------------------------------------------


def test_malformed_config_exit_2(tmp_path, capsys):
    cfg = write_config(tmp_path / "bad.yaml", {"training": {"learning_rat": 1e-3}})
    assert cli.main(["distill", "--config", cfg, "--out", str(tmp_path)]) == 2
    assert "training.learning_rat" in capsys.readouterr().err


def test_unknown_method_exit_2(tmp_path):
    cfg = write_config(tmp_path / "c.yaml")
    assert cli.main(["baseline", "--config", cfg, "--method", "gcc", "--out", str(tmp_path)]) == 2


def test_unknown_verb_exit_2():
    assert cli.main(["fly"]) == 2


def test_bad_fraction_exit_2(tmp_path):
    cfg = write_config(tmp_path / "c.yaml")
    assert cli.main(["distill", "--config", cfg, "--fraction", "abc", "--out", str(tmp_path)]) == 2


def test_missing_teacher_exit_4(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.yaml")
    assert cli.main(["distill", "--config", cfg, "--out", str(tmp_path / "empty")]) == 4
    assert "train-teacher" in capsys.readouterr().err


def test_skip_without_checkpoints_exit_4(tmp_path):
    cfg = write_config(tmp_path / "c.yaml")
    assert cli.main(["train-teacher", "--skip", "--config", cfg, "--out", str(tmp_path)]) == 4


def test_divergence_exit_3(workspace, monkeypatch):
    root, cfg = workspace

    def boom(*args, **kwargs):
        raise DivergenceError("stage2 generator loss diverged (value nan)")

    monkeypatch.setattr(cli, "run_sdakd", boom)
    assert cli.main(["distill", "--config", cfg, "--out", str(root / "out")]) == 3


# -- verbs ---------------------------------------------------------------------


def test_train_teacher_prints_checkpoints(workspace, capsys):
    root, cfg = workspace
    out = root / "out" / "teacher" / "seed0"
    assert (out / "teacher_g.npz").exists() and (out / "teacher_d.npz").exists()
    assert load_config(out / "config.yaml") == parse_config(TINY)
    assert cli.main(["train-teacher", "--skip", "--config", cfg, "--out", str(root / "out")]) == 0
    assert str(out / "teacher_g.npz") in capsys.readouterr().out


def test_distill_row_label_and_stored_config(workspace, capsys):
    root, cfg = workspace
    assert cli.main(["distill", "--config", cfg, "--out", str(root / "out"), "--fraction", "1/2"]) == 0
    (row,) = rows_from(capsys.readouterr().out)
    assert row["label"] == "SDAKD (1/2, 1/2)"
    run_dir = Path(row["provenance"])
    assert (run_dir / "summary.json").exists()
    assert load_config(run_dir / "config.yaml") == parse_config(TINY)


def test_distill_sweep_three_rows(workspace, capsys):
    root, cfg = workspace
    assert cli.main(["distill", "--sweep", "--config", cfg, "--out", str(root / "out")]) == 0
    rows = rows_from(capsys.readouterr().out)
    assert [r["generator_fraction"] for r in rows] == ["1/2", "1/4", "1/8"]


def test_distill_repeat_identical(workspace, tmp_path, capsys):
    root, cfg = workspace
    teacher = str(root / "out" / "teacher" / "seed0")
    summaries = []
    for name in ("a", "b"):
        assert cli.main(["distill", "--config", cfg, "--out", str(tmp_path / name), "--teacher", teacher]) == 0
        row = rows_from(capsys.readouterr().out)[0]
        summaries.append({k: v for k, v in row.items() if k != "provenance"})
    assert summaries[0] == summaries[1]


def test_baseline_scratch_row(workspace, capsys):
    root, cfg = workspace
    assert cli.main(["baseline", "--method", "scratch", "--fraction", "1/4", "--config", cfg, "--out", str(root / "out")]) == 0
    (row,) = rows_from(capsys.readouterr().out)
    assert row["label"] == "Scratch - (1/4, 1/4)"


def test_ablate_four_rows(workspace, capsys):
    root, cfg = workspace
    assert cli.main(["ablate", "--config", cfg, "--out", str(root / "out")]) == 0
    rows = rows_from(capsys.readouterr().out)
    assert [r["label"] for r in rows] == ["Ablation 1", "Ablation 2", "Ablation 3", "SDAKD (1/4, 1/4)"]
    assert all(isinstance(r["val_score"], float) and isinstance(r["test_score"], float) for r in rows)


def test_diagnose_writes_histograms_and_balance(workspace, capsys):
    root, cfg = workspace
    out = root / "out"
    assert cli.main(["ablate", "--config", cfg, "--out", str(out)]) == 0
    capsys.readouterr()
    runs = [str(out / "ablate" / "C1_4" / "sdakd" / "seed0"), str(out / "ablate" / "C1_4" / "ablation3" / "seed0")]
    assert cli.main(["diagnose", "--config", cfg, "--out", str(out), "--run", runs[0], "--run", runs[1]]) == 0
    records = [json.loads(l) for l in (out / "diagnose" / "balance.jsonl").read_text().splitlines()]
    kinds = {r["discriminator"] for r in records}
    assert "student discriminator" in kinds and "discriminator the student trained against" in kinds
    assert (out / "diagnose" / "histograms.png").stat().st_size > 0
    csv = next((out / "diagnose").glob("*.csv")).read_text().splitlines()
    assert csv[0] == "bin_low,bin_high,count" and len(csv) == 21
    assert sum(int(l.split(",")[2]) for l in csv[1:]) == 20


def test_diagnose_missing_run_exit_4(workspace, tmp_path):
    _, cfg = workspace
    assert cli.main(["diagnose", "--config", cfg, "--out", str(tmp_path), "--run", str(tmp_path / "nothing")]) == 4


def test_speedtest_four_rows(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.yaml")
    assert cli.main(["speedtest", "--config", cfg, "--passes", "2"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 6
    assert "none (1.00x)" in lines[2]


def test_report_rows_carry_provenance(workspace, capsys):
    root, cfg = workspace
    out = root / "out"
    assert cli.main(["baseline", "--method", "omgd_style", "--config", cfg, "--out", str(out)]) == 0
    capsys.readouterr()
    assert cli.main(["report", "--out", str(out)]) == 0
    rows = rows_from(capsys.readouterr().out)
    assert rows and all((Path(r["provenance"]) / "summary.json").exists() for r in rows)
    assert len({r["provenance"] for r in rows}) == len(rows)
    assert (out / "report.jsonl").exists()


def test_report_empty_root_exit_4(tmp_path):
    assert cli.main(["report", "--out", str(tmp_path)]) == 4


def test_env_var_sets_output_root(tmp_path, monkeypatch):
    monkeypatch.setenv("SDAKD_OUT", str(tmp_path / "env"))
    assert cli.output_root(None) == tmp_path / "env"
    assert cli.output_root(str(tmp_path / "flag")) == tmp_path / "flag"
    monkeypatch.delenv("SDAKD_OUT")
    assert cli.output_root(None) == Path("runs")
