"""Evaluation harness: oracle transcription, corpus BLEU, and report tables.

Synthesized audio is transcribed by inverting the TTS oracle (nearest
template per frame, then run lengths divided by per-phoneme durations),
so translation quality reduces to BLEU between phoneme sequences. Scores
are averaged per resource group exactly the way the bundled reference
tables do it: unweighted means over high, mid, and low groups plus an
overall mean, computed in full precision and displayed at one decimal.

The package ships three reference result tables as CSV fixtures
(per-language scores plus two aggregate views). `check_fixtures`
recomputes every aggregate from the per-language scores and confirms the
tables agree with their own arithmetic.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from collections import Counter
from dataclasses import dataclass, field
from importlib.resources import files
from typing import Dict, List, Optional, Tuple

import numpy as np

from .datagen import GROUPS, TtsOracle

FIXTURE_LANGUAGES = (
    "fr", "de", "ca", "es",
    "fa", "it", "ru", "zh", "pt",
    "nl", "tr", "et", "mn", "ar", "lv", "sl", "sv", "cy", "ta", "ja", "id",
)

FIXTURE_GROUPS = {
    "fr": "high", "de": "high", "ca": "high", "es": "high",
    "fa": "mid", "it": "mid", "ru": "mid", "zh": "mid", "pt": "mid",
    "nl": "low", "tr": "low", "et": "low", "mn": "low", "ar": "low",
    "lv": "low", "sl": "low", "sv": "low", "cy": "low", "ta": "low",
    "ja": "low", "id": "low",
}

# The bundled per-language scores carry one decimal, so a recomputed mean
# of four of them can sit up to 0.05 from the full-precision mean, and the
# stored aggregate is itself rounded, for a worst case of 0.1. Exactly one
# bundled entry lands in that outer band (the small tau_aug=5.0 row's high
# group: 33.575 recomputed vs 33.5 stored); everything else agrees within
# 0.05.
AGGREGATE_TOL = 0.05
ROUNDING_TOL = 0.1
ROUNDING_EXCEPTIONS = (("table1", "aug_tau5", "high"), ("table2", "aug_tau5", "high"))


@dataclass(frozen=True)
class GroupAssignment:
    """Total map from language name to resource group."""

    assignment: Dict[str, str]

    def __post_init__(self):
        bad = {g for g in self.assignment.values() if g not in GROUPS}
        if bad:
            raise ValueError(f"unknown resource groups: {sorted(bad)}")

    def group_of(self, lang: str) -> str:
        try:
            return self.assignment[lang]
        except KeyError:
            raise ValueError(f"language {lang!r} has no resource group") from None

    @classmethod
    def fixture(cls) -> "GroupAssignment":
        return cls(dict(FIXTURE_GROUPS))

    @classmethod
    def from_world(cls, world) -> "GroupAssignment":
        return cls({lang.name: lang.group for lang in world.languages})


@dataclass
class EvalReport:
    """Per-language BLEU plus group means; rounding happens only at display."""

    per_language: Dict[str, float]
    aggregates: Dict[str, float]
    metadata: Dict[str, object] = field(default_factory=dict)

    def to_csv(self) -> str:
        langs = list(self.per_language)
        lines = [",".join(["Avg"] + langs)]
        row = [f"{self.aggregates['all']:.1f}"]
        row += [f"{self.per_language[l]:.1f}" for l in langs]
        lines.append(",".join(row))
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps(
            {
                "per_language": self.per_language,
                "aggregates": self.aggregates,
                "metadata": self.metadata,
            },
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        raw = json.loads(text)
        return cls(raw["per_language"], raw["aggregates"], raw.get("metadata", {}))


def oracle_asr(spec: np.ndarray, oracle: TtsOracle) -> np.ndarray:
    """Transcribe a spectrogram back to phonemes via nearest templates.

    Each frame snaps to the closest template row; consecutive runs of the
    same phoneme are divided by that phoneme's duration to recover repeat
    counts. Exact inverse of synthesis at noise 0.
    """
    spec = np.asarray(spec, dtype=np.float64)
    if spec.ndim != 2 or spec.shape[0] == 0:
        raise ValueError("cannot transcribe an empty spectrogram")
    cands = oracle.templates[oracle.phoneme_ids]
    if spec.shape[1] != cands.shape[1]:
        raise ValueError(
            f"frame width {spec.shape[1]} does not match oracle templates "
            f"of width {cands.shape[1]}"
        )
    d2 = ((spec[:, None, :] - cands[None, :, :]) ** 2).sum(axis=2)
    ids = oracle.phoneme_ids[np.argmin(d2, axis=1)]

    out: List[int] = []
    start = 0
    for t in range(1, ids.size + 1):
        if t == ids.size or ids[t] != ids[start]:
            p = int(ids[start])
            reps = max(1, round((t - start) / int(oracle.durations[p])))
            out.extend([p] * reps)
            start = t
    return np.array(out, dtype=np.int64)


def _ngrams(seq: tuple, n: int) -> Counter:
    return Counter(seq[i : i + n] for i in range(len(seq) - n + 1))


def bleu(hypotheses: List, references: List, max_n: int = 4) -> float:
    """Corpus BLEU in [0, 100]: clipped n-gram precisions pooled over the
    corpus, geometric mean, brevity penalty, no smoothing."""
    if len(hypotheses) != len(references):
        raise ValueError(
            f"{len(hypotheses)} hypotheses against {len(references)} references"
        )
    if not hypotheses:
        raise ValueError("empty hypothesis list")
    hyps = [tuple(h) for h in hypotheses]
    refs = [tuple(r) for r in references]
    if any(len(r) == 0 for r in refs):
        raise ValueError("empty reference")

    hyp_len = sum(len(h) for h in hyps)
    ref_len = sum(len(r) for r in refs)
    if hyp_len == 0:
        return 0.0

    log_prec = 0.0
    for n in range(1, max_n + 1):
        matched = total = 0
        for h, r in zip(hyps, refs):
            counts = _ngrams(h, n)
            ref_counts = _ngrams(r, n)
            matched += sum(min(c, ref_counts[g]) for g, c in counts.items())
            total += max(0, len(h) - n + 1)
        if matched == 0:
            return 0.0
        log_prec += math.log(matched / total)

    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(log_prec / max_n)


def _language_order(langs, groups: GroupAssignment) -> List[str]:
    if all(l in FIXTURE_LANGUAGES for l in langs):
        return [l for l in FIXTURE_LANGUAGES if l in langs]
    return sorted(langs, key=lambda l: (GROUPS.index(groups.group_of(l)), l))


def aggregate(per_language: Dict[str, float], groups: GroupAssignment,
              metadata: Optional[Dict] = None) -> EvalReport:
    """Unweighted per-group and overall means of per-language scores."""
    if not per_language:
        raise ValueError("no per-language scores to aggregate")
    order = _language_order(per_language, groups)
    per = {l: float(per_language[l]) for l in order}
    agg = {"all": float(np.mean(list(per.values())))}
    for g in GROUPS:
        members = [per[l] for l in order if groups.group_of(l) == g]
        if members:
            agg[g] = float(np.mean(members))
    return EvalReport(per, agg, dict(metadata or {}))


def relative_change(new: float, baseline: float) -> Tuple[float, float]:
    """Absolute delta and percent change against a positive baseline."""
    if baseline <= 0:
        raise ValueError(f"baseline must be positive, got {baseline}")
    delta = new - baseline
    return delta, 100.0 * delta / baseline


def evaluate_model(model, split: Dict[str, list], oracle: TtsOracle,
                   groups: GroupAssignment, metadata: Optional[Dict] = None,
                   batch_size: int = 8, max_len: Optional[int] = None) -> EvalReport:
    """Greedy-decode a test split, synthesize, transcribe, and score BLEU.

    The decode length cap defaults to four times the median reference
    length; hypotheses that hit the cap are truncated and counted in the
    report metadata.
    """
    langs = [l for l in split if split[l]]
    ref_lens = [len(ex.tgt_phonemes) for l in langs for ex in split[l]]
    if not ref_lens:
        raise ValueError("empty test split")
    if max_len is None:
        max_len = int(math.ceil(4 * float(np.median(ref_lens))))

    truncated = 0
    per_language = {}
    for lang in langs:
        examples = split[lang]
        transcripts, refs = [], []
        for at in range(0, len(examples), batch_size):
            chunk = examples[at : at + batch_size]
            hyps, synths = model.translate([ex.src_spec for ex in chunk],
                                           max_len=max_len)
            for hyp, synth in zip(hyps, synths):
                if len(hyp) >= max_len:
                    truncated += 1
                if len(hyp) == 0:
                    transcripts.append(np.zeros(0, dtype=np.int64))
                else:
                    transcripts.append(oracle_asr(synth, oracle))
            refs += [ex.tgt_phonemes for ex in chunk]
        per_language[lang] = bleu(transcripts, refs)

    if truncated:
        warnings.warn(f"{truncated} hypotheses hit the decode cap of {max_len}")
    md = {"examples": len(ref_lens), "max_len": max_len, "truncated": truncated}
    md.update(metadata or {})
    return aggregate(per_language, groups, metadata=md)


def compare_reports(a: EvalReport, b: EvalReport, decimals: int = 1) -> Dict:
    """Per-language and per-aggregate (delta, percent) from report a to b.

    Values are rounded to display precision first so diffs of the bundled
    tables match their published one-decimal arithmetic. Percent is None
    where the baseline is not positive.
    """
    if set(a.per_language) != set(b.per_language):
        raise ValueError("reports cover different language sets")

    def diff(x, y):
        x, y = round(x, decimals), round(y, decimals)
        if x > 0:
            return relative_change(y, x)
        return y - x, None

    return {
        "per_language": {l: diff(a.per_language[l], b.per_language[l])
                         for l in a.per_language},
        "aggregates": {k: diff(a.aggregates[k], b.aggregates[k])
                       for k in a.aggregates if k in b.aggregates},
    }


def _read_fixture(name: str) -> List[Dict[str, str]]:
    text = files("tinys2st").joinpath(f"fixtures/{name}.csv").read_text()
    return list(csv.DictReader(text.splitlines()))


def load_fixture_scores() -> Dict[str, Dict]:
    """Per-language score table keyed by row id."""
    out = {}
    for rec in _read_fixture("table3"):
        out[rec["row"]] = {
            "label": rec["label"],
            "encoder": rec["encoder"],
            "decoder": rec["decoder"],
            "avg": float(rec["avg"]),
            "per_language": {l: float(rec[l]) for l in FIXTURE_LANGUAGES},
        }
    return out


def load_fixture_aggregates() -> List[Dict]:
    """Stated aggregate rows from the two summary tables."""
    out = []
    for table in ("table1", "table2"):
        for rec in _read_fixture(table):
            out.append({
                "table": table,
                "row": rec["row"],
                "label": rec["label"],
                "stated": {k: float(rec[k]) for k in ("avg", "high", "mid", "low")},
            })
    return out


def fixture_report(row: str) -> EvalReport:
    """EvalReport built from one bundled per-language row."""
    scores = load_fixture_scores()
    if row not in scores:
        raise ValueError(f"unknown fixture row {row!r}; "
                         f"choose from {sorted(scores)}")
    rec = scores[row]
    md = {"row": row, "label": rec["label"],
          "encoder": rec["encoder"], "decoder": rec["decoder"]}
    return aggregate(rec["per_language"], GroupAssignment.fixture(), metadata=md)


def check_fixtures() -> Tuple[List[Dict], List[Dict]]:
    """Recompute every bundled aggregate from per-language scores.

    Returns (entries, failures). Each entry records table, row, column,
    stated and recomputed values, and their deviation. Failures are
    entries beyond AGGREGATE_TOL, except the documented double-rounding
    entries which are allowed up to ROUNDING_TOL.
    """
    scores = load_fixture_scores()
    key_of = {"avg": "all"}
    entries, failures = [], []

    def push(table, row, column, stated, computed):
        dev = abs(computed - stated)
        entry = {"table": table, "row": row, "column": column,
                 "stated": stated, "computed": computed, "deviation": dev}
        entries.append(entry)
        tol = AGGREGATE_TOL
        if (table, row, column) in ROUNDING_EXCEPTIONS:
            tol = ROUNDING_TOL
        if dev > tol + 1e-9:
            failures.append(entry)

    for row, rec in scores.items():
        report = aggregate(rec["per_language"], GroupAssignment.fixture())
        push("table3", row, "avg", rec["avg"], report.aggregates["all"])
    for rec in load_fixture_aggregates():
        report = aggregate(scores[rec["row"]]["per_language"],
                           GroupAssignment.fixture())
        for col, stated in rec["stated"].items():
            push(rec["table"], rec["row"], col,
                 stated, report.aggregates[key_of.get(col, col)])
    return entries, failures
