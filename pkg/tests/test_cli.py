"""Experiment runner tests: configuration, training runs, CLI verbs."""

import json
import pathlib
import subprocess
import sys
import warnings
from types import SimpleNamespace

import pytest

import tinys2st.cli as cli
import tinys2st.training as training
from tinys2st.config import ConfigError, ExperimentConfig, load_config


def run_quiet(fn, *args, **kwargs):
    """Call a run function with decode-cap warnings silenced.

    Models trained for a handful of steps babble until the evaluation
    cap cuts them off, which is expected here and not worth the noise.
    """
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        return fn(*args, **kwargs)


def read_metrics(path):
    """Metrics records with the wall-clock field dropped.

    wall_ms measures the host machine, not the computation, so every
    reproducibility check compares records without it.
    """
    records = []
    for line in pathlib.Path(path).read_text().splitlines():
        rec = json.loads(line)
        del rec["wall_ms"]
        records.append(rec)
    return records


# -- configuration ------------------------------------------------------------


def test_config_defaults():
    cfg = ExperimentConfig()
    assert cfg.recipe == "scratch"
    assert cfg.preset == "base"
    assert cfg.pretrain_kind is None
    assert cfg.seed == 0 and cfg.world_seed == 0
    assert cfg.batch_size == 8


def test_config_rejects_unknown_names():
    with pytest.raises(ConfigError, match="unknown recipe"):
        ExperimentConfig(recipe="distill")
    with pytest.raises(ConfigError, match="unknown preset"):
        ExperimentConfig(preset="huge")


def test_variant_only_for_decoder_pretraining():
    cfg = ExperimentConfig(recipe="decoder_pretrain", variant="text_to_text")
    assert cfg.pretrain_kind == "mt"
    with pytest.raises(ConfigError, match="needs a variant"):
        ExperimentConfig(recipe="decoder_pretrain")
    with pytest.raises(ConfigError, match="unknown MT variant"):
        ExperimentConfig(recipe="decoder_pretrain", variant="speech_to_text")
    with pytest.raises(ConfigError, match="variant only applies"):
        ExperimentConfig(recipe="scratch", variant="text_to_text")


def test_tau_only_for_sampled_recipes():
    assert ExperimentConfig(recipe="multitask", tau=5.0).tau == 5.0
    assert ExperimentConfig(recipe="augment", tau=1.0).tau == 1.0
    with pytest.raises(ConfigError, match="needs a sampling"):
        ExperimentConfig(recipe="multitask")
    with pytest.raises(ConfigError, match="tau must be >= 1"):
        ExperimentConfig(recipe="augment", tau=0.5)
    with pytest.raises(ConfigError, match="tau only applies"):
        ExperimentConfig(recipe="scratch", tau=5.0)


def test_budgets_must_be_positive():
    with pytest.raises(ConfigError, match="step budgets"):
        ExperimentConfig(finetune_steps=0)
    with pytest.raises(ConfigError, match="batch_size"):
        ExperimentConfig(batch_size=0)
    with pytest.raises(ConfigError, match="peak_lr"):
        ExperimentConfig(peak_lr=0.0)
    with pytest.raises(ConfigError, match="warmup"):
        ExperimentConfig(warmup=0)


def test_decoder_dropout_follows_recipe():
    # Fine-tuning that mixes in extra supervision regularizes less.
    for recipe, kw in [("multitask", {"tau": 5.0}), ("augment", {"tau": 5.0})]:
        assert ExperimentConfig(recipe=recipe, **kw).dec_dropout == 0.1
    for recipe, kw in [("scratch", {}), ("encoder_pretrain_speech", {}),
                       ("encoder_pretrain_speech_text", {}),
                       ("decoder_pretrain", {"variant": "text_to_text"})]:
        cfg = ExperimentConfig(recipe=recipe, **kw)
        assert cfg.dec_dropout == 0.3
        assert cfg.enc_dropout == 0.1


def test_pretrain_kind_per_recipe():
    kinds = {"scratch": None, "encoder_pretrain_speech": "w2v",
             "encoder_pretrain_speech_text": "mslam", "multitask": "mslam",
             "augment": "mslam"}
    for recipe, kind in kinds.items():
        kw = {"tau": 5.0} if kind == "mslam" and recipe != \
            "encoder_pretrain_speech_text" else {}
        assert ExperimentConfig(recipe=recipe, **kw).pretrain_kind == kind


def test_load_config_toml_with_overrides(tmp_path):
    path = tmp_path / "exp.toml"
    path.write_text('recipe = "multitask"\ntau = 5\nseed = 3\n'
                    'finetune_steps = 40\n')
    cfg = load_config(str(path))
    assert (cfg.recipe, cfg.tau, cfg.seed) == ("multitask", 5.0, 3)
    assert cfg.finetune_steps == 40
    # Flags win over the file.
    cfg = load_config(str(path), {"seed": 7, "tau": 2.0})
    assert (cfg.seed, cfg.tau) == (7, 2.0)


def test_load_config_rejects_bad_input(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(str(tmp_path / "missing.toml"))
    bad = tmp_path / "bad.toml"
    bad.write_text("recipe = [unclosed\n")
    with pytest.raises(ConfigError, match="malformed TOML"):
        load_config(str(bad))
    unknown = tmp_path / "unknown.toml"
    unknown.write_text("learning_rate = 0.1\n")
    with pytest.raises(ConfigError, match="unknown config key"):
        load_config(str(unknown))
    typed = tmp_path / "typed.toml"
    typed.write_text('seed = "zero"\n')
    with pytest.raises(ConfigError, match="must be an integer"):
        load_config(str(typed))
    with pytest.raises(ConfigError, match="unknown config key"):
        load_config(None, {"lr": 0.1})


def test_config_hash_covers_fields_not_paths():
    a = ExperimentConfig(out_dir="runs/a")
    b = ExperimentConfig(out_dir="runs/b")
    assert a.config_hash() == b.config_hash()
    assert ExperimentConfig(seed=1).config_hash() != a.config_hash()
    assert len(a.config_hash()) == 12


# -- training runs ------------------------------------------------------------


@pytest.fixture(scope="module")
def scratch_run(tmp_path_factory):
    """A tiny completed scratch run shared by the read-only tests."""
    out = tmp_path_factory.mktemp("runs") / "scratch"
    cfg = ExperimentConfig(recipe="scratch", finetune_steps=6, batch_size=2,
                           out_dir=str(out))
    result = run_quiet(training.run, cfg)
    return SimpleNamespace(cfg=cfg, result=result, out=out)


def test_run_writes_all_artifacts(scratch_run):
    assert scratch_run.result.complete
    assert scratch_run.result.global_step == 6
    out = scratch_run.out
    for name in ("checkpoint.bin", "checkpoint.manifest", "metrics.jsonl",
                 "report.json", "report.csv"):
        assert (out / name).exists(), name
    report = scratch_run.result.report
    assert set(report.aggregates) == {"all", "high", "mid", "low"}
    assert (out / "report.csv").read_text() == report.to_csv()


def test_metrics_records_are_ordered_and_complete(scratch_run):
    records = read_metrics(scratch_run.out / "metrics.jsonl")
    assert [r["step"] for r in records] == list(range(1, 7))
    for rec in records:
        assert rec["stage"] == "finetune" and rec["task"] == "s2st"
        assert {"loss", "lr", "phoneme_ce", "mel_l2", "dur_l2"} <= set(rec)
        assert rec["loss"] > 0 and rec["lr"] > 0


def test_manifest_describes_the_run(scratch_run):
    manifest = dict(
        line.split("=", 1)
        for line in (scratch_run.out / "checkpoint.manifest").read_text().splitlines()
    )
    assert manifest["stage"] == "done"
    assert manifest["global_step"] == "6"
    assert manifest["recipe"] == "scratch"
    assert manifest["config_hash"] == scratch_run.cfg.config_hash()


def test_rerunning_a_finished_run_only_reevaluates(scratch_run):
    before = (scratch_run.out / "metrics.jsonl").read_bytes()
    report_before = (scratch_run.out / "report.json").read_bytes()
    result = run_quiet(training.run, scratch_run.cfg)
    assert result.complete
    assert (scratch_run.out / "metrics.jsonl").read_bytes() == before
    assert (scratch_run.out / "report.json").read_bytes() == report_before


def test_same_config_reproduces_bit_for_bit(scratch_run, tmp_path):
    import dataclasses

    cfg = dataclasses.replace(scratch_run.cfg, out_dir=str(tmp_path / "twin"))
    result = run_quiet(training.run, cfg)
    assert read_metrics(cfg.out_dir + "/metrics.jsonl") == \
        read_metrics(scratch_run.out / "metrics.jsonl")
    assert pathlib.Path(cfg.out_dir, "report.json").read_bytes() == \
        (scratch_run.out / "report.json").read_bytes()
    assert result.report == scratch_run.result.report


def test_interrupted_run_resumes_bit_exactly(tmp_path):
    """Stopping inside each stage and resuming matches the straight run."""
    straight = ExperimentConfig(recipe="encoder_pretrain_speech",
                                pretrain_steps=6, finetune_steps=5,
                                batch_size=2, out_dir=str(tmp_path / "straight"))
    run_quiet(training.run, straight)

    import dataclasses

    split = dataclasses.replace(straight, out_dir=str(tmp_path / "split"))
    partial = training.run(split, stop_after=4)       # mid-pretrain
    assert not partial.complete and partial.global_step == 4
    assert partial.report is None
    partial = training.run(split, stop_after=8)       # mid-fine-tune
    assert not partial.complete and partial.global_step == 8
    final = run_quiet(training.run, split)
    assert final.complete and final.global_step == 11

    assert read_metrics(split.out_dir + "/metrics.jsonl") == \
        read_metrics(straight.out_dir + "/metrics.jsonl")
    assert pathlib.Path(split.out_dir, "report.json").read_bytes() == \
        pathlib.Path(straight.out_dir, "report.json").read_bytes()


def test_resume_refuses_a_different_config(tmp_path):
    import dataclasses

    cfg = ExperimentConfig(recipe="encoder_pretrain_speech", pretrain_steps=4,
                           finetune_steps=3, batch_size=2,
                           out_dir=str(tmp_path / "r"))
    training.run(cfg, stop_after=2)
    changed = dataclasses.replace(cfg, seed=7)
    with pytest.raises(training.RunError, match="refusing to resume"):
        training.run(changed)
    with pytest.raises(training.RunError, match="stop_after must be >= 1"):
        training.run(cfg, stop_after=0)


def test_pretrain_stage_checkpoints_and_feeds_finetune(tmp_path):
    pre_cfg = ExperimentConfig(recipe="encoder_pretrain_speech",
                               pretrain_steps=5, finetune_steps=4,
                               batch_size=2, out_dir=str(tmp_path / "pre"))
    pre = training.run_pretrain(pre_cfg)
    assert not pre.complete and pre.global_step == 5

    import dataclasses

    ft_cfg = dataclasses.replace(pre_cfg, out_dir=str(tmp_path / "ft"))
    ft = run_quiet(training.run_finetune, ft_cfg, init=pre.checkpoint)
    assert ft.complete and ft.global_step == 4
    assert ft.report.aggregates.keys() == {"all", "high", "mid", "low"}

    # The two-stage path must equal the single run() with the same config.
    # run() numbers fine-tune steps globally (after pretraining); the
    # standalone stage numbers them from 1. Everything else is identical.
    whole = dataclasses.replace(pre_cfg, out_dir=str(tmp_path / "whole"))
    result = run_quiet(training.run, whole)
    finetune_half = [r for r in read_metrics(whole.out_dir + "/metrics.jsonl")
                     if r["stage"] == "finetune"]
    standalone = read_metrics(ft_cfg.out_dir + "/metrics.jsonl")
    assert [r.pop("step") for r in finetune_half] == [6, 7, 8, 9]
    assert [r.pop("step") for r in standalone] == [1, 2, 3, 4]
    assert finetune_half == standalone
    assert result.report == ft.report


def test_finetune_init_validation(tmp_path, scratch_run):
    with pytest.raises(ConfigError, match="has no pretraining stage"):
        training.run_pretrain(ExperimentConfig(recipe="scratch"))
    with pytest.raises(ConfigError, match="does not take an init"):
        training.run_finetune(ExperimentConfig(recipe="scratch"), init="x")
    cfg = ExperimentConfig(recipe="encoder_pretrain_speech", pretrain_steps=4,
                           finetune_steps=3, batch_size=2,
                           out_dir=str(tmp_path / "v"))
    with pytest.raises(ConfigError, match="pass one with --init"):
        training.run_finetune(cfg)
    with pytest.raises(training.RunError, match="no checkpoint at"):
        training.run_finetune(cfg, init=str(tmp_path / "nowhere"))
    # A fine-tuned checkpoint cannot seed pretraining transfer.
    with pytest.raises(training.RunError, match="does not provide"):
        training.run_finetune(cfg, init=str(scratch_run.result.checkpoint))

    pre = training.run_pretrain(cfg)
    import dataclasses

    other = dataclasses.replace(cfg, recipe="encoder_pretrain_speech_text",
                                out_dir=str(tmp_path / "w"))
    with pytest.raises(training.RunError, match="does not provide"):
        training.run_finetune(other, init=pre.checkpoint)


def test_evaluate_checkpoint_round_trips(scratch_run, tmp_path):
    report = run_quiet(training.evaluate_checkpoint,
                       str(scratch_run.result.checkpoint),
                       out_dir=str(tmp_path / "reeval"))
    assert report.per_language == scratch_run.result.report.per_language
    assert report.aggregates == scratch_run.result.report.aggregates
    assert report.metadata["config_hash"] == scratch_run.cfg.config_hash()
    assert (tmp_path / "reeval" / "report.json").exists()

    with pytest.raises(training.RunError, match="no checkpoint at"):
        training.evaluate_checkpoint(str(tmp_path / "nowhere"))


def test_evaluate_checkpoint_needs_a_translation_model(tmp_path):
    cfg = ExperimentConfig(recipe="encoder_pretrain_speech", pretrain_steps=3,
                           finetune_steps=3, batch_size=2,
                           out_dir=str(tmp_path / "p"))
    pre = training.run_pretrain(cfg)
    with pytest.raises(training.RunError, match="no speech-to-speech model"):
        training.evaluate_checkpoint(str(pre.checkpoint))


# -- command line ---------------------------------------------------------------


def test_cli_maps_config_errors_to_exit_1(tmp_path, capsys):
    for argv in (["run", "--recipe", "distill"],
                 ["run", "--recipe", "scratch", "--tau", "5"],
                 ["run", "--recipe", "decoder_pretrain"],
                 ["run", "--recipe", "multitask"],
                 ["pretrain", "--recipe", "scratch"],
                 ["run", "--config", str(tmp_path / "none.toml")]):
        assert cli.main(argv) == 1, argv
        assert "config error" in capsys.readouterr().err


def test_cli_usage_errors_exit_1():
    with pytest.raises(SystemExit) as exc:
        cli.main(["frobnicate"])
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        cli.main(["eval"])  # --checkpoint is required
    assert exc.value.code == 1


def test_cli_run_stop_and_resume(tmp_path, capsys):
    out = tmp_path / "cli_run"
    argv = ["run", "--recipe", "scratch", "--finetune-steps", "5",
            "--batch-size", "2", "--quiet", "--out", str(out)]
    assert cli.main(argv + ["--stop-after", "2"]) == 0
    assert "stopped at step 2" in capsys.readouterr().out
    assert run_quiet(cli.main, argv) == 0
    stdout = capsys.readouterr().out
    assert stdout.startswith("Avg,")
    assert f"report written to {out}" in stdout
    records = read_metrics(out / "metrics.jsonl")
    assert [r["step"] for r in records] == list(range(1, 6))


def test_cli_eval_verb(scratch_run, capsys):
    code = run_quiet(cli.main,
                     ["eval", "--checkpoint", str(scratch_run.result.checkpoint)])
    assert code == 0
    assert capsys.readouterr().out.startswith("Avg,")

    assert cli.main(["eval", "--checkpoint", "/nonexistent/stem"]) == 2
    assert "no checkpoint" in capsys.readouterr().err


def test_cli_compare_fixture_rows(capsys):
    assert cli.main(["compare", "fixture:prior_sota",
                     "fixture:aug_tau5_1_8b_113m"]) == 0
    out = capsys.readouterr().out
    assert "+13.6" in out and "+113%" in out   # overall average
    assert "+16.7" in out and "+398%" in out   # low-resource average


def test_cli_compare_encoder_only_vs_augmented(capsys):
    # The weakest transfer beats nothing; augmentation rescues the language
    # the encoder-only run barely translates.
    assert cli.main(["compare", "fixture:enc_speech_text",
                     "fixture:aug_tau5"]) == 0
    out = capsys.readouterr().out
    id_row = next(line for line in out.splitlines() if line.split()[0] == "id")
    assert id_row.split() == ["id", "1.3", "18.5", "+17.2", "+1323%"]


def test_cli_compare_writes_json(tmp_path, capsys):
    dest = tmp_path / "diff.json"
    assert cli.main(["compare", "fixture:baseline", "fixture:scratch",
                     "--json", str(dest)]) == 0
    capsys.readouterr()
    payload = json.loads(dest.read_text())
    assert payload["aggregates"]["all"]["delta"] == pytest.approx(1.4)
    assert payload["aggregates"]["all"]["percent"] == pytest.approx(16.09, abs=0.01)


def test_cli_compare_rejects_bad_reports(tmp_path, capsys):
    assert cli.main(["compare", "fixture:nope", "fixture:baseline"]) == 2
    assert "unknown fixture row" in capsys.readouterr().err
    assert cli.main(["compare", str(tmp_path / "a.json"),
                     "fixture:baseline"]) == 2
    assert "no report at" in capsys.readouterr().err


def test_cli_fixtures_verb(capsys):
    assert cli.main(["fixtures"]) == 0
    out = capsys.readouterr().out
    assert "checked 107 stated aggregates" in out
    assert "all bundled tables agree" in out


def test_console_script_is_installed():
    proc = subprocess.run([sys.executable, "-m", "tinys2st.cli", "fixtures"],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert "all bundled tables agree" in proc.stdout
