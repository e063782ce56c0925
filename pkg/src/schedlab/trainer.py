"""Phase-structured training: alpha schedules, Adam with warmup + linear
decay, optimizer reset at phase boundaries, checkpointing, CSV logging."""
from __future__ import annotations

import json
import math
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import objectives as obj
from .corpus import Corpus
from .model import ModelConfig, ModelState, forward_ssl_batch, forward_vgs_batch, init_model, load_model, save_model
from .optim import AdamState, adam_step, zero_grads
from .tensor import NonFiniteError, Tape, backward


class TrainerError(Exception):
    pass


@dataclass
class PhaseSpec:
    name: str
    alpha: float
    epochs: int
    reset_optimizer: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise TrainerError("phase must run for at least one epoch")
        if not 0.0 <= self.alpha <= 1.0:
            raise TrainerError(f"alpha must be in [0, 1], got {self.alpha}")


@dataclass
class ScheduleSpec:
    phases: list[PhaseSpec]
    seed: int
    batch_size: int = 32
    lr0: float = 1e-4
    warmup_fraction: float = 0.1
    checkpoint_period: int = 5
    restart_lr_on_reset: bool = True
    loss: obj.LossConfig = field(default_factory=obj.LossConfig)
    log_inactive_loss: bool = True
    inactive_loss_every: int = 8
    wall_clock: bool = True
    label: str = ""

    def __post_init__(self):
        if not 0.0 < self.warmup_fraction < 1.0:
            raise TrainerError("warmup fraction must be in (0, 1)")

    @property
    def total_epochs(self) -> int:
        return sum(p.epochs for p in self.phases)


# the nine training variants: three base mixes and six two-phase schedules
VARIANT_NAMES = (
    "VGS", "W2V2", "VGS+",
    "(W2V2, VGS+)", "(VGS, VGS+)",
    "(W2V2, VGS)", "(VGS, W2V2)",
    "(VGS+, W2V2)", "(VGS+, VGS)",
)

_BASE_ALPHA = {"VGS": 1.0, "W2V2": 0.0, "VGS+": 0.5}


def variant_preset(name: str, seed: int = 0, total_epochs: int = 70,
                   pretrain_epochs: int = 20, **schedule_kw) -> ScheduleSpec:
    """Build the phase list for one of the nine named variants.

    Base variants are a single phase; scheduled variants are a pretraining
    phase followed by a main phase that resets the optimizer on entry.
    Default epoch counts (70 total; 20 + 50 for scheduled runs) can be
    overridden for desk-scale runs.
    """
    name = name.strip()
    if name in _BASE_ALPHA:
        phases = [PhaseSpec(name, _BASE_ALPHA[name], total_epochs)]
        label = name
    else:
        stripped = name.strip("()")
        parts = [p.strip() for p in stripped.split(",")]
        if len(parts) != 2 or any(p not in _BASE_ALPHA for p in parts) or parts[0] == parts[1]:
            raise TrainerError(
                f"unknown variant {name!r}; valid variants: {', '.join(VARIANT_NAMES)}")
        canonical = f"({parts[0]}, {parts[1]})"
        if canonical not in VARIANT_NAMES:
            raise TrainerError(
                f"unknown variant {name!r}; valid variants: {', '.join(VARIANT_NAMES)}")
        phases = [
            PhaseSpec(parts[0], _BASE_ALPHA[parts[0]], pretrain_epochs),
            PhaseSpec(parts[1], _BASE_ALPHA[parts[1]], total_epochs - pretrain_epochs,
                      reset_optimizer=True),
        ]
        label = canonical
    return ScheduleSpec(phases=phases, seed=seed, label=label, **schedule_kw)


def lr_at(step: int, total_steps: int, warmup_fraction: float, lr0: float) -> float:
    """Linear warmup to lr0 over ceil(wf * total) steps, then linear decay to 0."""
    if total_steps <= 0:
        raise TrainerError("total_steps must be positive")
    w = math.ceil(warmup_fraction * total_steps)
    if step < w:
        return lr0 * step / w
    return lr0 * (total_steps - step) / (total_steps - w)


@dataclass
class TrainLogRow:
    epoch: int
    phase: str
    alpha: float
    loss_av: float
    loss_aud_r: float
    loss_aud_d: float
    loss_combined: float
    lr: float
    seconds: float


LOG_HEADER = "epoch,phase,alpha,loss_av,loss_aud_r,loss_aud_d,loss_combined,lr,seconds"


def _fmt_row(r: TrainLogRow) -> str:
    return (f"{r.epoch},{r.phase},{r.alpha:.4f},{r.loss_av:.8f},{r.loss_aud_r:.8f},"
            f"{r.loss_aud_d:.8f},{r.loss_combined:.8f},{r.lr:.10g},{r.seconds:.3f}")


def _step_rng(seed: int, epoch: int, step: int, channel: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), epoch, step, channel]))


def _lr_segments(phases: list[PhaseSpec], restart: bool) -> list[tuple[int, int]]:
    """Group consecutive phases into lr-schedule segments, split at
    optimizer resets when the schedule restarts there. Returns
    (start_epoch, n_epochs) pairs (start 0-based)."""
    segments = []
    start = 0
    acc = 0
    for i, ph in enumerate(phases):
        if restart and ph.reset_optimizer and acc > 0:
            segments.append((start, acc))
            start += acc
            acc = 0
        acc += ph.epochs
    segments.append((start, acc))
    return segments


def run_schedule(schedule: ScheduleSpec, corpus: Corpus, model_config: ModelConfig,
                 out_dir, init_state: ModelState | None = None) -> ModelState:
    """Train a model through the schedule's phases over the corpus train split.

    Writes ``run.json`` (resolved config), ``train_log.csv``, and
    checkpoints ``ckpt_<epoch>/`` every checkpoint period, at every phase
    boundary, and for the initial model (epoch 0).
    """
    os.makedirs(out_dir, exist_ok=True)
    run_cfg = {
        "schema_version": 1,
        "schedule": {
            "phases": [asdict(p) for p in schedule.phases],
            "seed": schedule.seed, "batch_size": schedule.batch_size,
            "lr0": schedule.lr0, "warmup_fraction": schedule.warmup_fraction,
            "checkpoint_period": schedule.checkpoint_period,
            "restart_lr_on_reset": schedule.restart_lr_on_reset,
            "loss": asdict(schedule.loss),
            "log_inactive_loss": schedule.log_inactive_loss,
            "inactive_loss_every": schedule.inactive_loss_every,
            "wall_clock": schedule.wall_clock,
            "label": schedule.label,
        },
        "model_config": asdict(model_config),
        "corpus_seed": corpus.seed,
    }
    with open(os.path.join(out_dir, "run.json"), "w", encoding="utf-8") as f:
        json.dump(run_cfg, f, sort_keys=True, separators=(",", ":"), indent=None)

    state = init_state if init_state is not None else init_model(model_config, schedule.seed)
    state.set_requires_grad(True)
    adam = AdamState.for_params(state.params, lr0=schedule.lr0)

    train_caps = [u for u in corpus.utterances if u.image_id in set(corpus.train_images)]
    if not train_caps:
        raise TrainerError("corpus has no training captions")
    steps_per_epoch = math.ceil(len(train_caps) / schedule.batch_size)
    segments = _lr_segments(schedule.phases, schedule.restart_lr_on_reset)

    def seg_for_epoch(epoch0: int):
        for s, n in segments:
            if s <= epoch0 < s + n:
                return s, n
        raise TrainerError("epoch outside schedule")

    save_model(state, os.path.join(out_dir, "ckpt_0"), extra={"epoch": 0})
    log_path = os.path.join(out_dir, "train_log.csv")
    log_f = open(log_path, "w", encoding="utf-8")
    log_f.write(LOG_HEADER + "\n")

    lcfg = schedule.loss
    epoch = 0
    try:
        for ph_i, phase in enumerate(schedule.phases):
            if phase.reset_optimizer and ph_i > 0:
                adam.reset()
            alpha = phase.alpha
            for _ in range(phase.epochs):
                t0 = time.perf_counter()
                order_rng = np.random.default_rng(
                    np.random.SeedSequence([int(schedule.seed), 0xD0, epoch]))
                order = order_rng.permutation(len(train_caps))
                sums = {"av": 0.0, "aud_r": 0.0, "aud_d": 0.0, "comb": 0.0}
                counts = {"av": 0, "aud_r": 0, "aud_d": 0}
                seg_start, seg_epochs = seg_for_epoch(epoch)
                last_lr = 0.0
                for step in range(steps_per_epoch):
                    idx = order[step * schedule.batch_size:(step + 1) * schedule.batch_size]
                    batch = [train_caps[i] for i in idx]
                    frames = [u.frames for u in batch]
                    scenes = [corpus.scenes[u.image_id].tokens for u in batch]
                    image_ids = [u.image_id for u in batch]

                    ssl_rng = _step_rng(schedule.seed, epoch, step, 1)
                    vgs_rng = _step_rng(schedule.seed, epoch, step, 2)
                    dis_rng = _step_rng(schedule.seed, epoch, step, 3)

                    l_av = l_r = l_d = None
                    with Tape() as tape:
                        if alpha > 0.0:
                            a_emb, v_emb = forward_vgs_batch(
                                state, frames, scenes, rng=vgs_rng, train=True)
                            l_av = obj.loss_av(a_emb, v_emb,
                                               obj.build_duplicate_mask(image_ids), lcfg.tau)
                        if alpha < 1.0:
                            ssl = forward_ssl_batch(state, frames, ssl_rng, train=True)
                            l_r = obj.loss_aud_contrastive(
                                ssl.c, ssl.q, ssl.mask, ssl.valid,
                                lcfg.distractors, lcfg.kappa, dis_rng)
                            probs = ssl.soft[ssl.mask & ssl.valid]
                            l_d = obj.loss_aud_diversity(
                                probs, model_config.groups, model_config.entries)
                        combined, report = obj.combined_loss(
                            alpha, l_av, l_r, l_d, lcfg.diversity_weight)
                        if not math.isfinite(report.combined):
                            save_model(state, os.path.join(out_dir, "ckpt_diverged"),
                                       extra={"epoch": epoch + 1})
                            raise NonFiniteError(
                                f"non-finite loss at epoch {epoch + 1} step {step}")
                        zero_grads(state.params)
                        backward(tape, combined)

                    global_step = epoch * steps_per_epoch + step
                    local = global_step - seg_start * steps_per_epoch
                    last_lr = lr_at(local, seg_epochs * steps_per_epoch,
                                    schedule.warmup_fraction, schedule.lr0)
                    adam_step(state.params, adam, last_lr)

                    # diagnostic value of the inactive loss (no gradients),
                    # sampled every few steps to keep the epoch cheap
                    diag = (schedule.log_inactive_loss
                            and step % max(1, schedule.inactive_loss_every) == 0)
                    if diag and report.loss_av is None:
                        a_emb, v_emb = forward_vgs_batch(state, frames, scenes)
                        report.loss_av = obj.loss_av(
                            a_emb, v_emb, obj.build_duplicate_mask(image_ids), lcfg.tau).item()
                    if diag and report.loss_aud_r is None:
                        ssl = forward_ssl_batch(state, frames, _step_rng(schedule.seed, epoch, step, 1))
                        report.loss_aud_r = obj.loss_aud_contrastive(
                            ssl.c, ssl.q, ssl.mask, ssl.valid, lcfg.distractors,
                            lcfg.kappa, _step_rng(schedule.seed, epoch, step, 3)).item()
                        report.loss_aud_d = obj.loss_aud_diversity(
                            ssl.soft[ssl.mask & ssl.valid],
                            model_config.groups, model_config.entries).item()

                    for key, val in (("av", report.loss_av),
                                     ("aud_r", report.loss_aud_r),
                                     ("aud_d", report.loss_aud_d)):
                        if val is not None:
                            sums[key] += val
                            counts[key] += 1
                    sums["comb"] += report.combined

                epoch += 1
                dt = time.perf_counter() - t0 if schedule.wall_clock else 0.0
                row = TrainLogRow(epoch, phase.name, alpha,
                                  sums["av"] / max(1, counts["av"]),
                                  sums["aud_r"] / max(1, counts["aud_r"]),
                                  sums["aud_d"] / max(1, counts["aud_d"]),
                                  sums["comb"] / steps_per_epoch,
                                  last_lr, dt)
                log_f.write(_fmt_row(row) + "\n")
                log_f.flush()
                is_boundary = epoch == sum(p.epochs for p in schedule.phases[:ph_i + 1])
                if epoch % schedule.checkpoint_period == 0 or is_boundary:
                    save_model(state, os.path.join(out_dir, f"ckpt_{epoch}"),
                               extra={"epoch": epoch})
    finally:
        log_f.close()
    return state


def available_checkpoints(run_dir) -> list[int]:
    out = []
    for name in os.listdir(run_dir):
        if name.startswith("ckpt_") and name[5:].isdigit():
            out.append(int(name[5:]))
    return sorted(out)


def load_checkpoint(run_dir, epoch: int) -> ModelState:
    path = os.path.join(run_dir, f"ckpt_{epoch}")
    if not os.path.isdir(path):
        avail = available_checkpoints(run_dir)
        raise TrainerError(f"no checkpoint for epoch {epoch} in {run_dir}; "
                           f"available epochs: {avail}")
    return load_model(path)
