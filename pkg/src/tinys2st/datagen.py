"""Synthetic multilingual corpus with a deterministic TTS oracle.

The toy world has six source languages in three resource groups (high,
mid, low) plus one shared target language. Each language owns a small
prefix-free lexicon over a phoneme inventory that mixes a shared pool
with a few private phonemes, so a phoneme stream segments into words in
exactly one way; translation is a bijective word map plus an optional
self-inverse adjacent-swap reordering, so every sentence has exactly one
correct translation.

The TTS oracle renders a phoneme sequence by repeating a per-phoneme mel
template for a per-phoneme duration (1 to 4 frames) and optionally adding
Gaussian noise. Templates are lattice points with pairwise distance at
least 1.0, so nearest-template classification inverts synthesis exactly
when the noise is small.

All randomness flows through numpy SeedSequence paths, which makes corpus
generation, masking, and batch draws reproducible step by step.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from . import tensor as T

PAD, BOS, EOS = 0, 1, 2
N_PHONEME_SPECIALS = 3
TEXT_PAD, TEXT_BOS, TEXT_EOS, TEXT_MASK = 0, 1, 2, 3
N_TEXT_SPECIALS = 4

# seed-path domain codes; anything deriving randomness picks one
D_WORLD, D_S2ST, D_MT, D_SPEECH, D_TEXT, D_PAIRED, D_AUG, D_MODEL, D_STEP, D_EVAL = range(10)

GROUPS = ("high", "mid", "low")
SPLITS = ("train", "dev", "test")


def rng_for(seed: int, *path: int) -> np.random.Generator:
    """Stateless generator for a (seed, domain, ...) path."""
    return np.random.default_rng(np.random.SeedSequence([int(seed)] + [int(p) for p in path]))


@dataclass(frozen=True)
class ToyLanguage:
    name: str
    group: str
    corpus_size: int
    phonemes: tuple
    lexicon: tuple          # word id -> tuple of phoneme ids
    word_offset: int        # global text-token id of this language's word 0
    word_map: tuple         # local word id -> target word id
    swap_adjacent: bool

    def phonemes_of(self, words: np.ndarray) -> np.ndarray:
        return np.concatenate([np.array(self.lexicon[w], dtype=np.int64) for w in words])

    def translate(self, words: np.ndarray) -> np.ndarray:
        mapped = np.array([self.word_map[w] for w in words], dtype=np.int64)
        if self.swap_adjacent:
            for i in range(0, mapped.size - 1, 2):
                mapped[i], mapped[i + 1] = mapped[i + 1], mapped[i]
        return mapped


@dataclass
class TtsOracle:
    """Deterministic phonemes -> spectrogram renderer and its inverse data."""

    templates: np.ndarray    # (phoneme_vocab, mel_bins); special rows unused
    durations: np.ndarray    # (phoneme_vocab,) int frames per phoneme
    noise_level: float
    phoneme_ids: np.ndarray  # ids that own a template

    def synthesize(self, phonemes: np.ndarray, rng: Optional[np.random.Generator] = None) -> np.ndarray:
        phonemes = np.asarray(phonemes, dtype=np.int64)
        if phonemes.size == 0:
            raise ValueError("cannot synthesize an empty phoneme sequence")
        known = np.isin(phonemes, self.phoneme_ids)
        if not known.all():
            raise KeyError(f"phonemes without templates: {sorted(set(phonemes[~known].tolist()))}")
        spec = np.repeat(self.templates[phonemes], self.durations[phonemes], axis=0)
        if rng is not None and self.noise_level > 0.0:
            spec = spec + rng.normal(0.0, self.noise_level, size=spec.shape)
        return spec

    def frames_for(self, phonemes: np.ndarray) -> int:
        return int(self.durations[np.asarray(phonemes, dtype=np.int64)].sum())


@dataclass(frozen=True)
class S2stExample:
    lang: str
    src_text: np.ndarray
    tgt_text: np.ndarray
    src_phonemes: np.ndarray
    tgt_phonemes: np.ndarray
    src_spec: np.ndarray
    tgt_spec: np.ndarray
    tgt_durations: np.ndarray
    synthetic: bool = False


@dataclass(frozen=True)
class MtExample:
    lang: str
    src_text: np.ndarray
    tgt_text: np.ndarray
    tgt_phonemes: np.ndarray


@dataclass(frozen=True)
class SpeechExample:
    lang: str
    phonemes: np.ndarray
    spec: np.ndarray


@dataclass(frozen=True)
class TextExample:
    lang: str
    text: np.ndarray


@dataclass(frozen=True)
class PairedExample:
    lang: str
    phonemes: np.ndarray
    spec: np.ndarray
    text: np.ndarray


@dataclass
class WorldConfig:
    mel_bins: int = 8
    shared_phonemes: int = 8
    private_phonemes: int = 3
    words_per_lang: int = 10
    word_len_min: int = 1
    word_len_max: int = 2
    sent_len_min: int = 2
    sent_len_max: int = 5
    high_size: int = 160
    mid_size: int = 56
    low_size: int = 20
    dev_size: int = 8
    test_size: int = 16
    mt_factor: int = 10
    speech_factor: int = 6
    text_factor: int = 6
    paired_size: int = 12
    noise_level: float = 0.1

    def group_size(self, group: str) -> int:
        return {"high": self.high_size, "mid": self.mid_size, "low": self.low_size}[group]


@dataclass
class ToyWorld:
    config: WorldConfig
    languages: List[ToyLanguage]
    target: ToyLanguage
    oracle: TtsOracle
    phoneme_vocab: int
    text_vocab: int
    seed: int

    def language(self, name: str) -> ToyLanguage:
        for lang in self.languages + [self.target]:
            if lang.name == name:
                return lang
        raise KeyError(name)


@dataclass
class Datasets:
    s2st: Dict[str, Dict[str, list]]
    mt: Dict[str, list]
    speech: Dict[str, list]
    text: Dict[str, list]
    paired: Dict[str, list]


def _make_lexicon(rng: np.random.Generator, phonemes, n_words: int,
                  len_min: int, len_max: int) -> tuple:
    """Distinct prefix-free words over the language's phonemes.

    Every phoneme is used, and no word is a prefix of another, so any
    concatenation of words segments in exactly one way. That keeps
    sentence translation a function of the phoneme stream: without it a
    third of the corpus can carry contradictory labels for identical
    inputs, which caps what any model can learn from speech alone.
    """
    phonemes = [int(p) for p in phonemes]
    order = [int(p) for p in rng.permutation(phonemes)]
    if n_words * len_max < len(phonemes):
        raise ValueError(
            f"{n_words} words cannot cover {len(phonemes)} phonemes at length {len_max}"
        )

    def clashes(w, words):
        return any(w[: len(v)] == v or v[: len(w)] == w for v in words)

    # coverage words all have length len_max, so they are prefix-free
    # among themselves as long as they are distinct
    words = []
    for i in range(0, len(order), len_max):
        chunk = order[i : i + len_max]
        while len(chunk) < len_max:
            chunk.append(int(rng.choice(phonemes)))
        words.append(tuple(chunk))

    attempts = 0
    while len(words) < n_words:
        length = int(rng.integers(len_min, len_max + 1))
        w = tuple(int(x) for x in rng.choice(phonemes, size=length))
        if not clashes(w, words):
            words.append(w)
        attempts += 1
        if attempts > 10000:
            raise RuntimeError("lexicon sampling failed to find enough distinct words")
    rng.shuffle(words)
    return tuple(words)


def _make_templates(rng: np.random.Generator, count: int, mel_bins: int) -> np.ndarray:
    """Lattice rows with pairwise L2 distance >= 1.0."""
    rows = np.zeros((count, mel_bins))
    for p in range(count):
        rows[p, p % mel_bins] = 1.0 + p // mel_bins
    return rows[rng.permutation(count)]


def build_world(cfg: WorldConfig, seed: int) -> ToyWorld:
    rng = rng_for(seed, D_WORLD)
    n_src = 6
    shared = list(range(N_PHONEME_SPECIALS, N_PHONEME_SPECIALS + cfg.shared_phonemes))
    next_id = N_PHONEME_SPECIALS + cfg.shared_phonemes

    names = ["high_a", "high_b", "mid_a", "mid_b", "low_a", "low_b"]
    groups = ["high", "high", "mid", "mid", "low", "low"]
    privates = []
    for _ in range(n_src + 1):  # one extra block for the target language
        privates.append(list(range(next_id, next_id + cfg.private_phonemes)))
        next_id += cfg.private_phonemes
    phoneme_vocab = next_id

    n_real = phoneme_vocab - N_PHONEME_SPECIALS
    templates = np.zeros((phoneme_vocab, cfg.mel_bins))
    templates[N_PHONEME_SPECIALS:] = _make_templates(rng, n_real, cfg.mel_bins)
    durations = np.zeros(phoneme_vocab, dtype=np.int64)
    durations[N_PHONEME_SPECIALS:] = rng.integers(1, 5, size=n_real)
    oracle = TtsOracle(
        templates=templates,
        durations=durations,
        noise_level=cfg.noise_level,
        phoneme_ids=np.arange(N_PHONEME_SPECIALS, phoneme_vocab),
    )

    target_phonemes = tuple(shared + privates[n_src])
    target_lexicon = _make_lexicon(rng, target_phonemes, cfg.words_per_lang,
                                   cfg.word_len_min, cfg.word_len_max)

    languages = []
    word_offset = N_TEXT_SPECIALS
    for i, (name, group) in enumerate(zip(names, groups)):
        lex = _make_lexicon(rng, tuple(shared + privates[i]), cfg.words_per_lang,
                            cfg.word_len_min, cfg.word_len_max)
        languages.append(ToyLanguage(
            name=name,
            group=group,
            corpus_size=cfg.group_size(group),
            phonemes=tuple(shared + privates[i]),
            lexicon=lex,
            word_offset=word_offset,
            word_map=tuple(int(x) for x in rng.permutation(cfg.words_per_lang)),
            swap_adjacent=bool(i % 2),
        ))
        word_offset += cfg.words_per_lang

    target = ToyLanguage(
        name="tgt",
        group="high",
        corpus_size=cfg.high_size,
        phonemes=target_phonemes,
        lexicon=target_lexicon,
        word_offset=word_offset,
        word_map=tuple(range(cfg.words_per_lang)),
        swap_adjacent=False,
    )
    word_offset += cfg.words_per_lang

    return ToyWorld(
        config=cfg,
        languages=languages,
        target=target,
        oracle=oracle,
        phoneme_vocab=phoneme_vocab,
        text_vocab=word_offset,
        seed=seed,
    )


def _draw_sentence(rng: np.random.Generator, cfg: WorldConfig) -> np.ndarray:
    n = int(rng.integers(cfg.sent_len_min, cfg.sent_len_max + 1))
    return rng.integers(0, cfg.words_per_lang, size=n)


def _s2st_example(world: ToyWorld, lang: ToyLanguage, rng: np.random.Generator,
                  synthetic: bool = False, src_words: Optional[np.ndarray] = None) -> S2stExample:
    cfg = world.config
    words = _draw_sentence(rng, cfg) if src_words is None else np.asarray(src_words)
    tgt_words = lang.translate(words)
    src_ph = lang.phonemes_of(words)
    tgt_ph = world.target.phonemes_of(tgt_words)
    return S2stExample(
        lang=lang.name,
        src_text=words + lang.word_offset,
        tgt_text=tgt_words + world.target.word_offset,
        src_phonemes=src_ph,
        tgt_phonemes=tgt_ph,
        src_spec=world.oracle.synthesize(src_ph, rng),
        tgt_spec=world.oracle.synthesize(tgt_ph),
        tgt_durations=world.oracle.durations[tgt_ph].copy(),
        synthetic=synthetic,
    )


def build_datasets(world: ToyWorld, seed: int) -> Datasets:
    cfg = world.config
    s2st: Dict[str, Dict[str, list]] = {}
    mt: Dict[str, list] = {}
    speech: Dict[str, list] = {}
    text: Dict[str, list] = {}
    paired: Dict[str, list] = {}

    for li, lang in enumerate(world.languages):
        s2st[lang.name] = {}
        for si, split in enumerate(SPLITS):
            count = {"train": lang.corpus_size, "dev": cfg.dev_size, "test": cfg.test_size}[split]
            rng = rng_for(seed, D_S2ST, li, si)
            s2st[lang.name][split] = [_s2st_example(world, lang, rng) for _ in range(count)]

        rng = rng_for(seed, D_MT, li)
        rows = []
        for _ in range(lang.corpus_size * cfg.mt_factor):
            words = _draw_sentence(rng, cfg)
            tgt_words = lang.translate(words)
            rows.append(MtExample(
                lang=lang.name,
                src_text=words + lang.word_offset,
                tgt_text=tgt_words + world.target.word_offset,
                tgt_phonemes=world.target.phonemes_of(tgt_words),
            ))
        mt[lang.name] = rows

    for li, lang in enumerate(world.languages + [world.target]):
        rng = rng_for(seed, D_SPEECH, li)
        pool = []
        for _ in range(lang.corpus_size * cfg.speech_factor):
            words = _draw_sentence(rng, cfg)
            ph = lang.phonemes_of(words)
            pool.append(SpeechExample(lang.name, ph, world.oracle.synthesize(ph, rng)))
        speech[lang.name] = pool

        rng = rng_for(seed, D_TEXT, li)
        text[lang.name] = [
            TextExample(lang.name, _draw_sentence(rng, cfg) + lang.word_offset)
            for _ in range(lang.corpus_size * cfg.text_factor)
        ]

        rng = rng_for(seed, D_PAIRED, li)
        rows = []
        for _ in range(cfg.paired_size):
            words = _draw_sentence(rng, cfg)
            ph = lang.phonemes_of(words)
            rows.append(PairedExample(lang.name, ph, world.oracle.synthesize(ph, rng),
                                      words + lang.word_offset))
        paired[lang.name] = rows

    return Datasets(s2st=s2st, mt=mt, speech=speech, text=text, paired=paired)


def augment(mt_pools: Dict[str, list], world: ToyWorld, seed: int) -> Dict[str, list]:
    """Turn MT rows into synthetic S2ST rows by synthesizing both sides.

    Source speech is rendered at the oracle's configured noise level (the
    "synthetic voice"); target speech is clean, like the real corpus.
    Unknown phonemes raise KeyError straight from the oracle.
    """
    out: Dict[str, list] = {}
    for li, (name, rows) in enumerate(sorted(mt_pools.items())):
        lang = world.language(name)
        rng = rng_for(seed, D_AUG, li)
        pool = []
        for row in rows:
            words = np.asarray(row.src_text) - lang.word_offset
            pool.append(_s2st_example(world, lang, rng, synthetic=True, src_words=words))
        out[name] = pool
    return out


# -- sampling ---------------------------------------------------------------


def temperature_probs(counts, tau: float):
    """p_l proportional to (n_l / N) ** (1 / tau).

    tau=1 recovers the empirical distribution; tau -> inf approaches
    uniform. Accepts a dict (returns a dict) or an array (returns an
    array). Counts must be positive and tau >= 1.
    """
    if tau < 1.0:
        raise ValueError(f"tau must be >= 1, got {tau}")
    keys = None
    if isinstance(counts, dict):
        keys = sorted(counts)
        arr = np.array([counts[k] for k in keys], dtype=np.float64)
    else:
        arr = np.asarray(counts, dtype=np.float64)
    if arr.size == 0 or np.any(arr <= 0):
        raise ValueError("counts must be positive")
    p = (arr / arr.sum()) ** (1.0 / tau)
    p = p / p.sum()
    return dict(zip(keys, p)) if keys is not None else p


def schedule_tasks(num_steps: int, seed: int) -> list:
    """Fair-coin order of 's2st' and 'mt' steps for multi-task training."""
    rng = rng_for(seed, D_STEP)
    return ["s2st" if x < 0.5 else "mt" for x in rng.random(num_steps)]


def draw_batch(pools: Dict[str, list], tau: float, batch_size: int,
               rng: np.random.Generator) -> list:
    """Sample a batch: language by temperature, example uniform within."""
    names = sorted(pools)
    if not names:
        raise ValueError("no pools to sample from")
    probs = temperature_probs({n: len(pools[n]) for n in names}, tau)
    pvec = np.array([probs[n] for n in names])
    picks = rng.choice(len(names), size=batch_size, p=pvec)
    out = []
    for k in picks:
        pool = pools[names[k]]
        out.append(pool[int(rng.integers(0, len(pool)))])
    return out


def draw_mixed_batch(real: Dict[str, list], synth: Dict[str, list], tau: float,
                     batch_size: int, rng: np.random.Generator,
                     tau_both_sides: bool = True) -> list:
    """50/50 coin between real and synthetic, temperature within each side."""
    real_tau = tau if tau_both_sides else 1.0
    out = []
    for _ in range(batch_size):
        if rng.random() < 0.5:
            out.extend(draw_batch(real, real_tau, 1, rng))
        else:
            out.extend(draw_batch(synth, tau, 1, rng))
    return out


# -- persistence --------------------------------------------------------------

_ARRAY_FIELDS = {
    "s2st": ("src_text", "tgt_text", "src_phonemes", "tgt_phonemes",
             "src_spec", "tgt_spec", "tgt_durations"),
    "mt": ("src_text", "tgt_text", "tgt_phonemes"),
    "speech": ("phonemes", "spec"),
    "text": ("text",),
    "paired": ("phonemes", "spec", "text"),
}
_CLASSES = {"s2st": S2stExample, "mt": MtExample, "speech": SpeechExample,
            "text": TextExample, "paired": PairedExample}


def _pool_iter(data: Datasets):
    for lang, by_split in sorted(data.s2st.items()):
        for split, rows in sorted(by_split.items()):
            yield "s2st", lang, split, rows
    for kind in ("mt", "speech", "text", "paired"):
        for lang, rows in sorted(getattr(data, kind).items()):
            yield kind, lang, None, rows


def save_corpus(data: Datasets, directory: str):
    """Write a corpus directory: index.jsonl plus one tensor file per pool."""
    os.makedirs(directory, exist_ok=True)
    index_path = os.path.join(directory, "index.jsonl")
    with open(index_path, "w", encoding="utf-8") as idx:
        for kind, lang, split, rows in _pool_iter(data):
            stem = f"{kind}_{lang}" + (f"_{split}" if split else "")
            named = {}
            for i, row in enumerate(rows):
                for fname in _ARRAY_FIELDS[kind]:
                    named[f"{i}.{fname}"] = np.asarray(getattr(row, fname), dtype=np.float64)
                if kind == "s2st":
                    named[f"{i}.synthetic"] = np.array(1.0 if row.synthetic else 0.0)
            T.save_tensors(os.path.join(directory, stem + ".bin"), named)
            rec = {"kind": kind, "lang": lang, "split": split, "count": len(rows),
                   "file": stem + ".bin"}
            idx.write(json.dumps(rec) + "\n")


def load_corpus(directory: str) -> Datasets:
    index_path = os.path.join(directory, "index.jsonl")
    data = Datasets(s2st={}, mt={}, speech={}, text={}, paired={})
    int_fields = {"src_text", "tgt_text", "src_phonemes", "tgt_phonemes",
                  "tgt_durations", "phonemes", "text"}
    with open(index_path, encoding="utf-8") as idx:
        for line in idx:
            rec = json.loads(line)
            kind, lang, split = rec["kind"], rec["lang"], rec["split"]
            named = T.load_tensors(os.path.join(directory, rec["file"]))
            rows = []
            for i in range(rec["count"]):
                kwargs = {"lang": lang}
                for fname in _ARRAY_FIELDS[kind]:
                    arr = named[f"{i}.{fname}"]
                    if fname in int_fields:
                        arr = arr.astype(np.int64)
                    kwargs[fname] = arr
                if kind == "s2st":
                    kwargs["synthetic"] = bool(named[f"{i}.synthetic"])
                rows.append(_CLASSES[kind](**kwargs))
            if kind == "s2st":
                data.s2st.setdefault(lang, {})[split] = rows
            else:
                getattr(data, kind)[lang] = rows
    return data
