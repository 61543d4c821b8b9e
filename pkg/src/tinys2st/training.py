"""Recipe execution: optional pre-training, transfer, fine-tuning, eval.

A run executes its recipe's stages in order (pretrain -> finetune for the
pre-trained recipes, finetune alone for scratch), then evaluates on every
language's test split and writes the report next to the checkpoint:

    out_dir/checkpoint.bin + .manifest   resumable state (model + Adam)
    out_dir/metrics.jsonl                one record per training step
    out_dir/report.json / report.csv     final evaluation

Every batch draw and dropout mask comes from a generator derived from
(config seed, step-domain, stage, step), so a step's randomness does not
depend on how the process got there; split-and-resume reproduces a
straight run bit-exactly, and the metrics file is append-only. Records
carry wall-clock milliseconds, the one field that legitimately differs
between reruns; everything else is deterministic given the config.
"""

from __future__ import annotations

import json
import math
import os
import time
from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np

from . import __version__
from . import checkpoint as ckpt
from . import datagen as dg
from . import evalkit as ek
from . import models as M
from . import tensor as T
from .config import ExperimentConfig
from .optim import Adam, inverse_sqrt_lr


class RunError(RuntimeError):
    """Runtime failure (bad checkpoint, incompatible init); exit code 2."""


@dataclass
class RunPaths:
    out_dir: str

    @property
    def stem(self) -> str:
        return os.path.join(self.out_dir, "checkpoint")

    @property
    def metrics(self) -> str:
        return os.path.join(self.out_dir, "metrics.jsonl")

    @property
    def report_json(self) -> str:
        return os.path.join(self.out_dir, "report.json")

    @property
    def report_csv(self) -> str:
        return os.path.join(self.out_dir, "report.csv")


@dataclass
class RunResult:
    checkpoint: str
    report: Optional[ek.EvalReport]
    global_step: int
    complete: bool


_WORLDS: dict = {}


def world_and_data(world_seed: int):
    """The toy world and datasets for a seed, cached per process."""
    if world_seed not in _WORLDS:
        world = dg.build_world(dg.WorldConfig(), seed=world_seed)
        _WORLDS[world_seed] = (world, dg.build_datasets(world, seed=world_seed))
    return _WORLDS[world_seed]


# -- model construction and transfer -------------------------------------------


def build_pretrain_model(cfg: ExperimentConfig, world):
    preset = M.PRESETS[cfg.preset]
    kind = cfg.pretrain_kind
    if kind == "w2v":
        return M.W2vBert(preset, world.config.mel_bins, cfg.seed,
                         dropout=cfg.enc_dropout)
    if kind == "mslam":
        return M.MSlam(preset, world.config.mel_bins, world.phoneme_vocab,
                       world.text_vocab, cfg.seed, dropout=cfg.enc_dropout)
    if kind == "mt":
        return M.MtModel(preset, cfg.variant, world.phoneme_vocab,
                         world.text_vocab, cfg.seed, dropout=cfg.enc_dropout)
    return None


def build_finetune_model(cfg: ExperimentConfig, world):
    preset = M.PRESETS[cfg.preset]
    s2st = M.S2stModel(preset, world.config.mel_bins, world.phoneme_vocab,
                       cfg.seed, dropout=cfg.enc_dropout,
                       dec_dropout=cfg.dec_dropout)
    if cfg.recipe == "multitask":
        return M.MultiTaskModel(s2st, world.text_vocab, cfg.seed)
    return s2st


def apply_transfer(cfg: ExperimentConfig, target, source) -> None:
    """Move pretrained parameters into the fine-tuning model."""
    s2st = target.s2st if isinstance(target, M.MultiTaskModel) else target
    if cfg.pretrain_kind == "mt":
        M.transfer_decoder(s2st, source)
    else:
        M.transfer_encoder(s2st, source)
    if isinstance(target, M.MultiTaskModel) and isinstance(source, M.MSlam):
        # The MT task's text embedding is part of the shared encoder too.
        M._apply_transfer(source, target, [("text_embed.", "src_embed.")])
    if cfg.freeze_lower_encoder:
        M.set_lower_encoder_trainable(s2st, False)


def _mt_sequences(world, variant: str, batch):
    if variant == "text_to_text":
        return [ex.src_text for ex in batch], [ex.tgt_text for ex in batch]
    if variant == "text_to_phoneme":
        return [ex.src_text for ex in batch], [ex.tgt_phonemes for ex in batch]
    src = []
    for ex in batch:
        lang = world.language(ex.lang)
        src.append(lang.phonemes_of(np.asarray(ex.src_text) - lang.word_offset))
    return src, [ex.tgt_phonemes for ex in batch]


# -- per-stage step functions ---------------------------------------------------

StepFn = Callable[[int, np.random.Generator], Tuple[str, object]]


def _pretrain_step_fn(cfg: ExperimentConfig, world, data, model) -> StepFn:
    kind = cfg.pretrain_kind
    if kind == "w2v":
        def fn(step, rng):
            batch = dg.draw_batch(data.speech, 1.0, cfg.batch_size, rng)
            return "speech", model.step_loss([ex.spec for ex in batch], rng)
        return fn
    if kind == "mslam":
        pools = {"speech": data.speech, "text": data.text, "paired": data.paired}

        def fn(step, rng):
            task = ("speech", "text", "paired")[(step - 1) % 3]
            batch = dg.draw_batch(pools[task], 1.0, cfg.batch_size, rng)
            if task == "speech":
                feed = [ex.spec for ex in batch]
            elif task == "text":
                feed = [ex.text for ex in batch]
            else:
                feed = batch
            return task, model.step_loss(task, feed, rng)
        return fn

    def fn(step, rng):
        batch = dg.draw_batch(data.mt, 1.0, cfg.batch_size, rng)
        src, tgt = _mt_sequences(world, cfg.variant, batch)
        return "mt", model.step_loss(src, tgt, rng)
    return fn


def _finetune_step_fn(cfg: ExperimentConfig, world, data, model) -> StepFn:
    real = {lang.name: data.s2st[lang.name]["train"] for lang in world.languages}
    if cfg.recipe == "multitask":
        tasks = dg.schedule_tasks(cfg.finetune_steps, cfg.seed)

        def fn(step, rng):
            task = tasks[step - 1]
            if task == "s2st":
                batch = dg.draw_batch(real, 1.0, cfg.batch_size, rng)
            else:
                batch = dg.draw_batch(data.mt, cfg.tau, cfg.batch_size, rng)
            bundle, _ = model.step_loss(task, batch, rng)
            return task, bundle
        return fn
    if cfg.recipe == "augment":
        synth = dg.augment(data.mt, world, cfg.seed)

        def fn(step, rng):
            # Temperature on the synthetic side only; the real side keeps
            # the same empirical language sampling as every other recipe.
            batch = dg.draw_mixed_batch(real, synth, cfg.tau, cfg.batch_size,
                                        rng, tau_both_sides=False)
            return "s2st", model.step_loss(batch, rng)
        return fn

    def fn(step, rng):
        batch = dg.draw_batch(real, 1.0, cfg.batch_size, rng)
        return "s2st", model.step_loss(batch, rng)
    return fn


# -- the run itself ---------------------------------------------------------------


def _write_metrics(handle, step, stage, task, bundle, lr, wall_ms):
    record = {"step": step, "stage": stage, "task": task,
              "loss": bundle.value(), "lr": lr, "wall_ms": wall_ms}
    for key, value in bundle.components.items():
        record[key] = float(value)
    handle.write(json.dumps(record, sort_keys=True) + "\n")
    handle.flush()


def _train_stage(cfg, stage, offset, steps, global_step, model, opt, step_fn,
                 metrics, stop_after, echo) -> Tuple[int, bool]:
    """Run a stage from wherever global_step left it. Returns (step, stopped)."""
    stage_code = 0 if stage == "pretrain" else 1
    for local in range(global_step - offset + 1, steps + 1):
        rng = dg.rng_for(cfg.seed, dg.D_STEP, stage_code, local)
        began = time.perf_counter()
        opt.zero_grad()
        task, bundle = step_fn(local, rng)
        T.backward(bundle.total)
        lr = inverse_sqrt_lr(local, cfg.peak_lr, cfg.warmup)
        opt.step(lr)
        wall_ms = (time.perf_counter() - began) * 1000.0
        global_step = offset + local
        _write_metrics(metrics, global_step, stage, task, bundle, lr, wall_ms)
        if echo and (local % 100 == 0 or local == steps):
            echo(f"{stage} step {local}/{steps} {task} loss {bundle.value():.4f}")
        if stop_after is not None and global_step >= stop_after:
            return global_step, True
    return global_step, False


def _manifest(cfg: ExperimentConfig, stage: str, global_step: int) -> dict:
    manifest = {
        "config_hash": cfg.config_hash(),
        "version": __version__,
        "stage": stage,
        "global_step": global_step,
        "recipe": cfg.recipe,
        "preset": cfg.preset,
        "seed": cfg.seed,
        "world_seed": cfg.world_seed,
    }
    if cfg.variant is not None:
        manifest["variant"] = cfg.variant
    if cfg.tau is not None:
        manifest["tau"] = cfg.tau
    return manifest


def evaluate(cfg: ExperimentConfig, model, world, data) -> ek.EvalReport:
    s2st = model.s2st if isinstance(model, M.MultiTaskModel) else model
    split = {lang.name: data.s2st[lang.name]["test"] for lang in world.languages}
    metadata = {"recipe": cfg.recipe, "config_hash": cfg.config_hash(),
                "seed": cfg.seed, "preset": cfg.preset}
    if cfg.variant is not None:
        metadata["variant"] = cfg.variant
    if cfg.tau is not None:
        metadata["tau"] = cfg.tau
    return ek.evaluate_model(s2st, split, world.oracle,
                             ek.GroupAssignment.from_world(world),
                             metadata=metadata)


def _write_report(paths: RunPaths, report: ek.EvalReport) -> None:
    with open(paths.report_json, "w", encoding="utf-8") as f:
        f.write(report.to_json() + "\n")
    with open(paths.report_csv, "w", encoding="utf-8") as f:
        f.write(report.to_csv())


def run(cfg: ExperimentConfig, stop_after: Optional[int] = None,
        echo=None) -> RunResult:
    """Execute the recipe end to end, resuming from out_dir's checkpoint.

    `stop_after` halts (with a checkpoint) once that many total training
    steps exist; a later `run` with the same config picks up from there.
    """
    paths = RunPaths(cfg.out_dir)
    os.makedirs(cfg.out_dir, exist_ok=True)
    world, data = world_and_data(cfg.world_seed)
    pre_steps = cfg.pretrain_steps if cfg.pretrain_kind else 0
    total = pre_steps + cfg.finetune_steps
    if stop_after is not None and stop_after < 1:
        raise RunError("stop_after must be >= 1")

    resume_stage, resume_state, resume_opt = None, None, None
    global_step = 0
    if ckpt.checkpoint_exists(paths.stem):
        state, opt_state, manifest = ckpt.load_checkpoint(paths.stem)
        if manifest.get("config_hash") != cfg.config_hash():
            raise RunError(
                f"checkpoint in {cfg.out_dir} was written under a different "
                "configuration; refusing to resume"
            )
        resume_stage, resume_state, resume_opt = manifest["stage"], state, opt_state
        global_step = int(manifest["global_step"])

    if resume_stage == "done":
        model = build_finetune_model(cfg, world)
        model.load_state_dict(resume_state)
        model.eval()
        report = evaluate(cfg, model, world, data)
        _write_report(paths, report)
        return RunResult(paths.stem, report, global_step, True)

    metrics = open(paths.metrics, "a", encoding="utf-8")
    try:
        pretrain_model = None
        if cfg.pretrain_kind and (global_step < pre_steps or
                                  resume_stage == "pretrain"):
            pretrain_model = build_pretrain_model(cfg, world)
            opt = Adam(pretrain_model.named_parameters())
            if resume_stage == "pretrain":
                pretrain_model.load_state_dict(resume_state)
                if resume_opt:
                    opt.load_state_dict(resume_opt)
            step_fn = _pretrain_step_fn(cfg, world, data, pretrain_model)
            global_step, stopped = _train_stage(
                cfg, "pretrain", 0, pre_steps, global_step, pretrain_model,
                opt, step_fn, metrics, stop_after, echo)
            ckpt.save_checkpoint(paths.stem, pretrain_model, opt,
                                 _manifest(cfg, "pretrain", global_step))
            if stopped and global_step < total:
                return RunResult(paths.stem, None, global_step, False)

        model = build_finetune_model(cfg, world)
        if resume_stage == "finetune":
            model.load_state_dict(resume_state)
            opt = Adam(model.named_parameters())
            if resume_opt:
                opt.load_state_dict(resume_opt)
        else:
            if cfg.pretrain_kind:
                apply_transfer(cfg, model, pretrain_model)
            elif cfg.freeze_lower_encoder:
                M.set_lower_encoder_trainable(model, False)
            opt = Adam(model.named_parameters())
        step_fn = _finetune_step_fn(cfg, world, data, model)
        global_step, stopped = _train_stage(
            cfg, "finetune", pre_steps, cfg.finetune_steps, global_step,
            model, opt, step_fn, metrics, stop_after, echo)
        if stopped and global_step < total:
            ckpt.save_checkpoint(paths.stem, model, opt,
                                 _manifest(cfg, "finetune", global_step))
            return RunResult(paths.stem, None, global_step, False)
        ckpt.save_checkpoint(paths.stem, model, opt,
                             _manifest(cfg, "done", global_step))
    finally:
        metrics.close()

    model.eval()
    report = evaluate(cfg, model, world, data)
    _write_report(paths, report)
    return RunResult(paths.stem, report, global_step, True)


def run_pretrain(cfg: ExperimentConfig, echo=None) -> RunResult:
    """The pretraining stage alone; errors for recipes without one."""
    from .config import ConfigError

    if cfg.pretrain_kind is None:
        raise ConfigError(f"recipe {cfg.recipe!r} has no pretraining stage")
    return run(cfg, stop_after=cfg.pretrain_steps, echo=echo)


def run_finetune(cfg: ExperimentConfig, init: Optional[str] = None,
                 echo=None) -> RunResult:
    """Fine-tune (plus eval) only, transferring from an `init` checkpoint.

    `init` points at the checkpoint stem of a completed pretraining stage
    with a compatible recipe, preset, and world. Scratch takes no init.
    """
    from .config import ConfigError

    paths = RunPaths(cfg.out_dir)
    os.makedirs(cfg.out_dir, exist_ok=True)
    world, data = world_and_data(cfg.world_seed)

    if cfg.pretrain_kind is None:
        if init is not None:
            raise ConfigError("recipe 'scratch' does not take an init checkpoint")
        pretrain_model = None
    else:
        if init is None:
            raise ConfigError(f"recipe {cfg.recipe!r} fine-tunes from a "
                              "pretraining checkpoint; pass one with --init")
        if not ckpt.checkpoint_exists(init):
            raise RunError(f"no checkpoint at {init!r}")
        state, _, manifest = ckpt.load_checkpoint(init)
        from .config import PRETRAIN_KIND
        init_kind = PRETRAIN_KIND.get(manifest.get("recipe", ""))
        compatible = (
            manifest.get("stage") in ("pretrain", "done")
            and init_kind == cfg.pretrain_kind
            and manifest.get("preset") == cfg.preset
            and manifest.get("world_seed") == str(cfg.world_seed)
        )
        if not compatible:
            raise RunError(
                f"init checkpoint {init!r} (recipe "
                f"{manifest.get('recipe')!r}, preset {manifest.get('preset')!r}, "
                f"stage {manifest.get('stage')!r}) does not provide "
                f"{cfg.pretrain_kind!r} pretraining for this config"
            )
        if manifest.get("stage") == "done":
            raise RunError(f"init checkpoint {init!r} holds a fine-tuned "
                           "model, not a pretraining stage")
        pretrain_model = build_pretrain_model(cfg, world)
        pretrain_model.load_state_dict(state)

    model = build_finetune_model(cfg, world)
    if pretrain_model is not None:
        apply_transfer(cfg, model, pretrain_model)
    elif cfg.freeze_lower_encoder:
        M.set_lower_encoder_trainable(model, False)
    opt = Adam(model.named_parameters())
    step_fn = _finetune_step_fn(cfg, world, data, model)
    with open(paths.metrics, "w", encoding="utf-8") as metrics:
        global_step, _ = _train_stage(
            cfg, "finetune", 0, cfg.finetune_steps, 0, model, opt, step_fn,
            metrics, None, echo)
    ckpt.save_checkpoint(paths.stem, model, opt,
                         _manifest(cfg, "done", global_step))
    model.eval()
    report = evaluate(cfg, model, world, data)
    _write_report(paths, report)
    return RunResult(paths.stem, report, global_step, True)


def evaluate_checkpoint(stem: str, out_dir: Optional[str] = None) -> ek.EvalReport:
    """Rebuild the model a checkpoint holds and score it on the test split."""
    if not ckpt.checkpoint_exists(stem):
        raise RunError(f"no checkpoint at {stem!r}")
    state, _, manifest = ckpt.load_checkpoint(stem)
    if manifest.get("stage") not in ("finetune", "done"):
        raise RunError(
            f"checkpoint {stem!r} holds stage {manifest.get('stage')!r}, "
            "which has no speech-to-speech model to evaluate"
        )
    cfg = ExperimentConfig(
        recipe=manifest["recipe"],
        preset=manifest["preset"],
        variant=manifest.get("variant"),
        tau=float(manifest["tau"]) if "tau" in manifest else None,
        seed=int(manifest["seed"]),
        world_seed=int(manifest["world_seed"]),
        out_dir=out_dir or os.path.dirname(stem) or ".",
    )
    world, data = world_and_data(cfg.world_seed)
    model = build_finetune_model(cfg, world)
    model.load_state_dict(state)
    model.eval()
    report = evaluate(cfg, model, world, data)
    # The manifest's hash covers the run's full config; the one rebuilt
    # above only covers what the checkpoint needs to rebuild the model.
    report.metadata["config_hash"] = manifest["config_hash"]
    if out_dir is not None:
        paths = RunPaths(out_dir)
        os.makedirs(out_dir, exist_ok=True)
        _write_report(paths, report)
    return report
