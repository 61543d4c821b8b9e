"""Training objectives and masking plans.

All losses return scalar `Tensor`s built from autodiff primitives, so one
`backward` call covers any mixture of them. Log-space code uses LOG_ZERO
(-1e30) instead of -inf; exp(LOG_ZERO) is exactly 0.0, which keeps every
intermediate finite.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import LOG_ZERO, Tensor


@dataclass
class LossBundle:
    """A scalar objective plus detached per-component values for logging."""

    total: Tensor
    components: dict = field(default_factory=dict)

    def value(self) -> float:
        return self.total.item()


def cross_entropy(logits: Tensor, targets: np.ndarray, mask: Optional[np.ndarray] = None) -> Tensor:
    """Mean negative log-likelihood over (optionally masked) positions."""
    targets = np.asarray(targets)
    if targets.shape != logits.shape[:-1]:
        raise ValueError(f"targets {targets.shape} vs logits {logits.shape}")
    nll = -T.gather_last(T.log_softmax(logits), targets)
    if mask is None:
        return T.tmean(nll)
    mask = np.asarray(mask, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        raise ValueError("cross_entropy mask selects no positions")
    kept = T.masked_fill(nll, ~mask, 0.0)
    return kept.sum() * Tensor(1.0 / count)


def _norm(x: Tensor, eps: float = 1e-8) -> Tensor:
    return T.power(T.tsum(x * x, axis=-1, keepdims=True) + Tensor(eps), 0.5)


def contrastive_loss(queries: Tensor, positives: Tensor, distractors: Tensor,
                     temperature: float = 0.1,
                     exclude_identical: bool = False) -> Tensor:
    """InfoNCE over cosine similarities.

    queries/positives are (N, D); distractors are (N, K, D). Each query is
    scored against its positive plus its K distractors; the loss is the
    mean cross-entropy of picking the positive. Uniform similarities give
    exactly log(K + 1).

    With exclude_identical, distractors that equal the positive vector
    exactly are dropped from the softmax. Quantized targets share codes
    across frames of the same sound, so a sampled negative can literally
    be the positive; scoring it would put a floor under the loss.
    """
    if temperature <= 0.0:
        raise ValueError("temperature must be positive")
    if queries.shape != positives.shape or queries.ndim != 2:
        raise ValueError(f"queries {queries.shape} vs positives {positives.shape}")
    n, d = queries.shape
    if distractors.shape[0] != n or distractors.shape[2] != d:
        raise ValueError(f"distractors {distractors.shape} incompatible with ({n}, ., {d})")
    cand = T.concat([positives.reshape(n, 1, d), distractors], axis=1)  # (N, K+1, D)
    q = queries.reshape(n, 1, d)
    dots = T.tsum(q * cand, axis=-1)  # (N, K+1)
    sims = T.div(dots, (_norm(q) * _norm(cand)).reshape(dots.shape))
    logits = sims * Tensor(1.0 / temperature)
    if exclude_identical:
        dup = np.all(distractors.data == positives.data[:, None, :], axis=2)
        dup = np.concatenate([np.zeros((n, 1), dtype=bool), dup], axis=1)
        if dup.any():
            logits = T.masked_fill(logits, dup, T.LOG_ZERO)
    return cross_entropy(logits, np.zeros(n, dtype=np.int64))


def mlm_loss(logits: Tensor, target_ids: np.ndarray, mask: np.ndarray) -> Tensor:
    """Cross-entropy restricted to masked positions."""
    return cross_entropy(logits, target_ids, mask)


@dataclass
class MaskingPlan:
    """Boolean mask over a padded batch plus the span starts that made it."""

    mask: np.ndarray
    starts: list


def _span_cover(valid: np.ndarray, rng: np.random.Generator, mask_rate: float,
                span: int) -> MaskingPlan:
    """Place random spans per row until at least mask_rate of it is covered.

    Masked positions are always a subset of valid ones and every row masks
    at least one position; the realized fraction overshoots mask_rate by
    less than one span.
    """
    valid = np.asarray(valid, dtype=bool)
    b, t = valid.shape
    mask = np.zeros((b, t), dtype=bool)
    starts = []
    for i in range(b):
        length = int(valid[i].sum())
        want = max(1, int(round(mask_rate * length)))
        row_starts = []
        while mask[i].sum() < want:
            s = int(rng.integers(0, length))
            mask[i, s : min(s + span, length)] = True
            row_starts.append(s)
        starts.append(np.array(row_starts))
    return MaskingPlan(mask=mask, starts=starts)


FRAME_MASK_RATE = 0.15
FRAME_MASK_SPAN = 2
TEXT_MASK_RATE = 0.15
TEXT_MASK_SPAN = 3


def frame_mask_plan(valid: np.ndarray, rng: np.random.Generator,
                    mask_rate: float = FRAME_MASK_RATE,
                    span: int = FRAME_MASK_SPAN) -> MaskingPlan:
    """Speech-frame masking: short spans covering ~mask_rate of each row."""
    return _span_cover(valid, rng, mask_rate, span)


def span_text_mask(valid: np.ndarray, rng: np.random.Generator,
                   mask_rate: float = TEXT_MASK_RATE,
                   span: int = TEXT_MASK_SPAN) -> MaskingPlan:
    """Text span masking: longer spans, same coverage rule as speech."""
    return _span_cover(valid, rng, mask_rate, span)


class CtcInfeasibleError(ValueError):
    """Raised when the target cannot fit in the given number of frames."""


def _ctc_single(log_probs: Tensor, targets: np.ndarray, blank: int) -> Tensor:
    t_frames, vocab = log_probs.shape
    targets = np.asarray(targets, dtype=np.int64)
    length = targets.size
    if np.any(targets == blank):
        raise ValueError("targets may not contain the blank symbol")
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        raise IndexError("target id out of vocabulary range")
    repeats = int((targets[1:] == targets[:-1]).sum()) if length > 1 else 0
    if t_frames < length + repeats:
        raise CtcInfeasibleError(
            f"{length} labels with {repeats} repeats need at least "
            f"{length + repeats} frames, got {t_frames}"
        )

    ext = np.full(2 * length + 1, blank, dtype=np.int64)
    ext[1::2] = targets
    s = ext.size
    # skip transitions may not jump over a repeated label or onto a blank
    allow_skip = np.zeros(s, dtype=bool)
    if s > 2:
        allow_skip[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])

    ext_lp = T.transpose(T.gather_rows(T.transpose(log_probs, 0, 1), ext), 0, 1)  # (T, S)
    row0 = T.slice_axis(ext_lp, 0, 0, 1).reshape(s)
    alpha = T.masked_fill(row0, np.arange(s) >= 2, LOG_ZERO)
    lz1 = Tensor([LOG_ZERO])
    lz2 = Tensor([LOG_ZERO, LOG_ZERO])
    for t in range(1, t_frames):
        stay = alpha
        step = T.concat([lz1, T.slice_axis(alpha, 0, 0, s - 1)], axis=0)
        paths = T.logaddexp(stay, step)
        if s > 2:
            skip = T.concat([lz2, T.slice_axis(alpha, 0, 0, s - 2)], axis=0)
            skip = T.masked_fill(skip, ~allow_skip, LOG_ZERO)
            paths = T.logaddexp(paths, skip)
        alpha = paths + T.slice_axis(ext_lp, 0, t, t + 1).reshape(s)
    tail = T.slice_axis(alpha, 0, s - 2, s) if s >= 2 else alpha
    total = T.logsumexp(tail, axis=0)
    return Tensor(0.0) - total


def ctc_loss(log_probs, targets, blank: int) -> Tensor:
    """Negative log-probability of all alignments collapsing to the target.

    `log_probs` is a (T, V) Tensor of per-frame log-distributions, or a
    list of them; `targets` correspondingly one id array or a list. The
    batched form returns the mean over examples.
    """
    if isinstance(log_probs, Tensor):
        return _ctc_single(log_probs, targets, blank)
    losses = [_ctc_single(lp, tg, blank) for lp, tg in zip(log_probs, targets)]
    stacked = T.concat([l.reshape(1) for l in losses], axis=0)
    return T.tmean(stacked)


def mel_l2(frames: Tensor, target: np.ndarray, frame_mask: np.ndarray) -> Tensor:
    """Mean squared error per mel entry over valid frames."""
    target = np.asarray(target, dtype=np.float64)
    if target.shape != frames.shape:
        raise ValueError(f"target frames {target.shape} vs predicted {frames.shape}")
    mask = np.asarray(frame_mask, dtype=bool)
    count = int(mask.sum()) * frames.shape[-1]
    if count == 0:
        raise ValueError("no valid frames")
    diff = frames - Tensor(target)
    sq = T.masked_fill(diff * diff, ~mask[..., None], 0.0)
    return sq.sum() * Tensor(1.0 / count)


def duration_l2(log_dur: Tensor, target_dur: np.ndarray, token_mask: np.ndarray) -> Tensor:
    """Mean squared error between predicted and log of true durations."""
    target_dur = np.asarray(target_dur)
    mask = np.asarray(token_mask, dtype=bool)
    if np.any(target_dur[mask] < 1):
        raise ValueError("durations must be >= 1 at real tokens")
    count = int(mask.sum())
    if count == 0:
        raise ValueError("no valid tokens")
    ref = np.where(mask, np.log(np.maximum(target_dur, 1)), 0.0)
    diff = log_dur - Tensor(ref)
    sq = T.masked_fill(diff * diff, ~mask, 0.0)
    return sq.sum() * Tensor(1.0 / count)


def s2st_loss(phoneme_logits: Tensor, phoneme_targets: np.ndarray, token_mask: np.ndarray,
              frames: Tensor, target_frames: np.ndarray, frame_mask: np.ndarray,
              log_dur: Tensor, target_dur: np.ndarray, dur_token_mask: np.ndarray,
              w_mel: float = 1.0, w_dur: float = 1.0) -> LossBundle:
    """Composite S2ST objective: phoneme CE + mel L2 + duration L2."""
    ce = cross_entropy(phoneme_logits, phoneme_targets, token_mask)
    mel = mel_l2(frames, target_frames, frame_mask)
    dur = duration_l2(log_dur, target_dur, dur_token_mask)
    total = ce + Tensor(w_mel) * mel + Tensor(w_dur) * dur
    return LossBundle(
        total=total,
        components={
            "phoneme_ce": ce.item(),
            "mel_l2": mel.item(),
            "dur_l2": dur.item(),
        },
    )
