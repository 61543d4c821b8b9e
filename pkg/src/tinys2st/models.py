"""Model families and parameter transfer.

Four families share block shapes so weights can move between them:

* `W2vBert` - speech-only pretraining: a Conformer feature stack split
  into a contrastive network and a context network, a vector quantizer
  providing targets, and a masked-prediction head.
* `MSlam` - speech+text pretraining on top of the same speech core, adding
  a text embedding into the context network, a span-masked text head, a
  CTC head on paired speech, and a translation-LM path over concatenated
  speech and text.
* `MtModel` - text (or phoneme) machine translation with the same decoder
  geometry as the S2ST model.
* `S2stModel` - the direct speech-to-speech model: speech encoder, ONE
  cross-attention module shared by every decoder block, an autoregressive
  phoneme decoder, and a duration-based spectrogram synthesizer fed by the
  decoder's states and attention context.

`MultiTaskModel` wraps an `S2stModel` with a text-input path through the
upper (context) encoder blocks so a text MT task can fine-tune the shared
attention and decoder without touching speech-only parameters.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from . import nn
from . import tensor as T
from .datagen import (
    BOS,
    EOS,
    PAD,
    TEXT_MASK,
    TEXT_PAD,
    D_MODEL,
    MtExample,
    S2stExample,
    rng_for,
)
from .nn import Module, Tensor, pad_stack
from .objectives import (
    FRAME_MASK_SPAN,
    LossBundle,
    contrastive_loss,
    cross_entropy,
    ctc_loss,
    frame_mask_plan,
    s2st_loss,
    span_text_mask,
)


@dataclass(frozen=True)
class ModelPreset:
    name: str
    enc_dim: int = 32
    enc_blocks: int = 2
    contrastive_blocks: int = 1
    dec_dim: int = 32
    dec_blocks: int = 2
    heads: int = 4
    ff_expansion: int = 2
    conv_kernel: int = 3
    codebook_size: int = 16
    synth_dim: int = 32
    synth_layers: int = 1


PRESETS = {
    "base": ModelPreset("base"),
    "large": ModelPreset(
        "large",
        enc_dim=64,
        enc_blocks=4,
        contrastive_blocks=2,
        dec_dim=48,
        dec_blocks=3,
        synth_dim=48,
        synth_layers=2,
    ),
}


def prep_token_batch(seqs: List[np.ndarray], bos: int = BOS, eos: int = EOS,
                     pad: int = PAD):
    """Teacher-forcing arrays: inputs [bos + seq], targets [seq + eos]."""
    b = len(seqs)
    lmax = max(len(s) for s in seqs)
    dec_in = np.full((b, lmax + 1), pad, dtype=np.int64)
    targets = np.full((b, lmax + 1), pad, dtype=np.int64)
    ce_mask = np.zeros((b, lmax + 1), dtype=bool)
    for i, s in enumerate(seqs):
        n = len(s)
        dec_in[i, 0] = bos
        dec_in[i, 1 : n + 1] = s
        targets[i, :n] = s
        targets[i, n] = eos
        ce_mask[i, : n + 1] = True
    return dec_in, targets, ce_mask


def greedy_decode(decoder: nn.TokenDecoder, attention: nn.MultiHeadAttention,
                  memory: Tensor, mem_mask: np.ndarray, max_len: int = 24,
                  bos: int = BOS, eos: int = EOS) -> List[np.ndarray]:
    """Batched argmax decoding until EOS (ties break to the lowest id)."""
    b = memory.shape[0]
    tokens = np.full((b, 1), bos, dtype=np.int64)
    done = np.zeros(b, dtype=bool)
    outs: List[list] = [[] for _ in range(b)]
    with T.no_grad():
        for _ in range(max_len):
            logits, _, _ = decoder(tokens, memory, attention, mem_mask)
            nxt = logits.data[:, -1, :].argmax(axis=1)
            for i in range(b):
                if done[i]:
                    continue
                if nxt[i] == eos:
                    done[i] = True
                else:
                    outs[i].append(int(nxt[i]))
            if done.all():
                break
            tokens = np.concatenate([tokens, nxt[:, None]], axis=1)
    return [np.array(o, dtype=np.int64) for o in outs]


class SpeechEncoder(Module):
    """Linear feature extractor plus a Conformer stack."""

    def __init__(self, mel_bins: int, preset: ModelPreset, rng, dropout: float = 0.0):
        super().__init__()
        self.mel_bins = mel_bins
        self.dim = preset.enc_dim
        self.feature = nn.Linear(mel_bins, preset.enc_dim, rng)
        self.blocks = [
            nn.ConformerBlock(preset.enc_dim, preset.heads, preset.ff_expansion,
                              preset.conv_kernel, rng, dropout)
            for _ in range(preset.enc_blocks)
        ]

    def features(self, spec: Tensor) -> Tensor:
        return T.swish(self.feature(spec))

    def run_blocks(self, x: Tensor, valid: np.ndarray, lo: int, hi: Optional[int],
                   rng=None) -> Tensor:
        for block in self.blocks[lo:hi]:
            x = block(x, key_mask=valid, rng=rng)
        return x

    def __call__(self, spec: Tensor, valid: np.ndarray, rng=None) -> Tensor:
        return self.run_blocks(self.features(spec), valid, 0, None, rng)


class W2vBert(Module):
    """Speech-only pretraining: contrastive + quantized masked prediction."""

    NUM_DISTRACTORS = 4
    DIVERSITY_WEIGHT = 0.1

    def __init__(self, preset: ModelPreset, mel_bins: int, seed: int,
                 dropout: float = 0.0):
        super().__init__()
        rng = rng_for(seed, D_MODEL, 1)
        self.preset = preset
        self.split = preset.contrastive_blocks
        self.encoder = SpeechEncoder(mel_bins, preset, rng, dropout)
        self.quantizer = nn.VectorQuantizer(preset.codebook_size, preset.enc_dim, rng)
        self.mlm_head = nn.Linear(preset.enc_dim, preset.codebook_size, rng)
        self.mask_embed = nn.param(rng.normal(0.0, 0.1, size=preset.enc_dim))

    def step_loss(self, specs: List[np.ndarray], rng) -> LossBundle:
        usable = [s for s in specs if s.shape[0] >= FRAME_MASK_SPAN]
        if len(usable) < len(specs):
            warnings.warn(
                f"skipping {len(specs) - len(usable)} utterance(s) shorter "
                f"than one mask span ({FRAME_MASK_SPAN} frames)"
            )
        if not usable:
            raise ValueError("every utterance in the batch is too short to mask")
        x, valid = pad_stack(usable)
        b, t = valid.shape
        dim = self.encoder.dim
        feats = self.encoder.features(Tensor(x))
        plan = frame_mask_plan(valid, rng)
        mask3 = plan.mask[..., None]
        masked_feats = T.masked_fill(feats, mask3, 0.0) + Tensor(mask3.astype(float)) * self.mask_embed

        clean = self.encoder.run_blocks(feats, valid, 0, self.split, rng)
        masked = self.encoder.run_blocks(masked_feats, valid, 0, self.split, rng)

        vidx = np.flatnonzero(valid.ravel())
        vmap = np.full(valid.size, -1, dtype=np.int64)
        vmap[vidx] = np.arange(vidx.size)
        clean_valid = T.gather_rows(clean.reshape((-1, dim)), vidx)
        ids, _, targets, perplexity, div_loss = self.quantizer.quantize(clean_valid)

        midx = np.flatnonzero(plan.mask.ravel())
        q_idx = vmap[midx]
        queries = T.gather_rows(masked.reshape((-1, dim)), midx)
        positives = T.gather_rows(targets, q_idx)

        row_valid = [vmap[i * t + np.flatnonzero(valid[i])] for i in range(b)]
        didx = np.empty((midx.size, self.NUM_DISTRACTORS), dtype=np.int64)
        for j, fi in enumerate(midx):
            row = fi // t
            cands = row_valid[row]
            cands = cands[cands != vmap[fi]]
            if cands.size == 0:
                cands = np.array([vmap[fi]])
            didx[j] = rng.choice(cands, size=self.NUM_DISTRACTORS, replace=True)
        distractors = T.gather_rows(targets, didx.ravel()).reshape(
            (midx.size, self.NUM_DISTRACTORS, dim)
        )
        loss_c = contrastive_loss(queries, positives, distractors,
                                  exclude_identical=True)

        ctx = self.encoder.run_blocks(masked, valid, self.split, None, rng)
        logits = self.mlm_head(ctx).reshape((-1, self.preset.codebook_size))
        loss_m = cross_entropy(T.gather_rows(logits, midx), ids[q_idx])

        total = loss_c + loss_m + Tensor(self.DIVERSITY_WEIGHT) * div_loss
        return LossBundle(total, {
            "contrastive": loss_c.item(),
            "mlm": loss_m.item(),
            "diversity": div_loss.item(),
            "code_perplexity": perplexity,
        })


class MSlam(Module):
    """Speech+text pretraining sharing the w2v-BERT core.

    Text enters the context network (the upper Conformer blocks); paired
    data adds a translation-LM pass over concatenated speech and text and
    a CTC head from speech context states to phonemes (blank = last id).
    """

    def __init__(self, preset: ModelPreset, mel_bins: int, phoneme_vocab: int,
                 text_vocab: int, seed: int, dropout: float = 0.0):
        super().__init__()
        rng = rng_for(seed, D_MODEL, 2)
        self.core = W2vBert(preset, mel_bins, seed, dropout)
        self.text_vocab = text_vocab
        self.ctc_blank = phoneme_vocab
        self.text_embed = nn.Embedding(text_vocab, preset.enc_dim, rng)
        self.span_head = nn.Linear(preset.enc_dim, text_vocab, rng)
        self.ctc_head = nn.Linear(preset.enc_dim, phoneme_vocab + 1, rng)
        self._pos = nn.sinusoid_table(nn.TokenDecoder.MAX_LEN, preset.enc_dim)

    def _context_over(self, x: Tensor, valid: np.ndarray, rng=None) -> Tensor:
        return self.core.encoder.run_blocks(x, valid, self.core.split, None, rng)

    def text_mlm_loss(self, texts: List[np.ndarray], rng) -> Tensor:
        ids, valid = pad_stack(texts, pad_value=TEXT_PAD)
        plan = span_text_mask(valid, rng)
        inp = np.where(plan.mask, TEXT_MASK, ids)
        emb = self.text_embed(inp) + Tensor(self._pos[: ids.shape[1]])
        h = self._context_over(emb, valid, rng)
        return cross_entropy(self.span_head(h), ids, plan.mask)

    def tlm_losses(self, rows, rng):
        """Masked-text loss over [speech ; text], plus CTC when speech exists."""
        ids, tvalid = pad_stack([r.text for r in rows], pad_value=TEXT_PAD)
        plan = span_text_mask(tvalid, rng)
        inp = np.where(plan.mask, TEXT_MASK, ids)
        emb = self.text_embed(inp) + Tensor(self._pos[: ids.shape[1]])

        ts = max(r.spec.shape[0] for r in rows)
        if ts > 0:
            x, svalid = pad_stack([r.spec for r in rows])
            feats = self.core.encoder.features(Tensor(x))
            srep = self.core.encoder.run_blocks(feats, svalid, 0, self.core.split, rng)
        else:
            srep = Tensor(np.zeros((len(rows), 0, self.core.encoder.dim)))
            svalid = np.zeros((len(rows), 0), dtype=bool)

        joint = T.concat([srep, emb], axis=1)
        jvalid = np.concatenate([svalid, tvalid], axis=1)
        h = self._context_over(joint, jvalid, rng)
        text_h = T.slice_axis(h, 1, ts, ts + ids.shape[1])
        tlm = cross_entropy(self.span_head(text_h), ids, plan.mask)

        ctc = None
        if ts > 0:
            speech_h = T.slice_axis(h, 1, 0, ts)
            lp = T.log_softmax(self.ctc_head(speech_h))
            per_row = []
            for i, r in enumerate(rows):
                row = T.slice_axis(lp, 0, i, i + 1).reshape(lp.shape[1:])
                per_row.append(T.slice_axis(row, 0, 0, r.spec.shape[0]))
            ctc = ctc_loss(per_row, [r.phonemes for r in rows], self.ctc_blank)
        return tlm, ctc

    def step_loss(self, kind: str, batch, rng) -> LossBundle:
        """One pretraining step on a homogeneous batch tagged by kind.

        speech -> w2v-BERT losses; text -> span-masked MLM; paired ->
        w2v-BERT losses on the audio plus TLM and CTC.
        """
        if kind == "speech":
            return self.core.step_loss(batch, rng)
        if kind == "text":
            loss = self.text_mlm_loss(batch, rng)
            return LossBundle(loss, {"span_bert": loss.item()})
        if kind == "paired":
            speech = self.core.step_loss([r.spec for r in batch], rng)
            tlm, ctc = self.tlm_losses(batch, rng)
            total = speech.total + tlm
            components = dict(speech.components)
            components["tlm"] = tlm.item()
            if ctc is not None:
                total = total + ctc
                components["ctc"] = ctc.item()
            return LossBundle(total, components)
        raise ValueError(f"unknown batch kind {kind!r}")

    def ctc_decode(self, specs: List[np.ndarray]) -> List[np.ndarray]:
        """Greedy CTC transcription: argmax per frame, collapse, drop blanks."""
        was_training = self.training
        self.eval()
        try:
            with T.no_grad():
                x, valid = pad_stack(specs)
                feats = self.core.encoder.features(Tensor(x))
                h = self.core.encoder.run_blocks(feats, valid, 0, None)
                ids = self.ctc_head(h).data.argmax(axis=2)
        finally:
            self.train(was_training)
        outs = []
        for i, s in enumerate(specs):
            row = ids[i, : s.shape[0]]
            keep = np.concatenate([[True], row[1:] != row[:-1]])
            row = row[keep]
            outs.append(row[row != self.ctc_blank].astype(np.int64))
        return outs


class S2stModel(Module):
    """Direct S2ST: encoder -> shared attention -> phoneme decoder -> synthesizer."""

    def __init__(self, preset: ModelPreset, mel_bins: int, phoneme_vocab: int,
                 seed: int, dropout: float = 0.1, dec_dropout: Optional[float] = None):
        super().__init__()
        rng = rng_for(seed, D_MODEL, 3)
        dec_dropout = dropout if dec_dropout is None else dec_dropout
        self.preset = preset
        self.phoneme_vocab = phoneme_vocab
        self.encoder = SpeechEncoder(mel_bins, preset, rng, dropout)
        self.attention = nn.MultiHeadAttention(preset.dec_dim, preset.enc_dim,
                                               preset.dec_dim, preset.heads, rng)
        self.decoder = nn.TokenDecoder(phoneme_vocab, preset.dec_dim, preset.heads,
                                       preset.ff_expansion, preset.dec_blocks, rng,
                                       dec_dropout)
        self.synthesizer = nn.DurationSynthesizer(3 * preset.dec_dim, preset.synth_dim,
                                                  mel_bins, preset.ff_expansion,
                                                  preset.synth_layers, rng, dec_dropout)

    def encode(self, specs: List[np.ndarray], rng=None):
        x, valid = pad_stack(specs)
        return self.encoder(Tensor(x), valid, rng), valid

    def synth_feats(self, ctxs: Tensor, states: Tensor, tokens: np.ndarray) -> Tensor:
        """Per-token synthesizer input: context, state, and the embedding
        of the phoneme being rendered."""
        return T.concat([ctxs, states, self.decoder.embed(tokens)], axis=-1)

    def step_loss(self, batch, rng=None) -> LossBundle:
        memory, mem_mask = self.encode([ex.src_spec for ex in batch], rng)
        tgt_seqs = [ex.tgt_phonemes for ex in batch]
        dec_in, targets, ce_mask = prep_token_batch(tgt_seqs)
        logits, states, ctxs = self.decoder(dec_in, memory, self.attention, mem_mask, rng)

        b, width = dec_in.shape
        synth_mask = np.zeros((b, width), dtype=bool)
        durs = np.zeros((b, width), dtype=np.int64)
        for i, ex in enumerate(batch):
            n = len(ex.tgt_phonemes)
            synth_mask[i, :n] = True
            durs[i, :n] = ex.tgt_durations
        feats = self.synth_feats(ctxs, states, targets)
        frames, log_dur, frame_mask = self.synthesizer(feats, durs, synth_mask, rng)
        tgt_frames, tgt_fmask = pad_stack([ex.tgt_spec for ex in batch])
        if not np.array_equal(tgt_fmask, frame_mask):
            raise AssertionError("teacher durations disagree with target frame counts")
        return s2st_loss(logits, targets, ce_mask, frames, tgt_frames, frame_mask,
                         log_dur, durs, synth_mask)

    def translate(self, specs: List[np.ndarray], max_len: int = 24):
        """Greedy phoneme decode, then free-run synthesis for each input."""
        was_training = self.training
        self.eval()
        try:
            memory, mem_mask = self.encode(specs)
            hyps = greedy_decode(self.decoder, self.attention, memory, mem_mask, max_len)
            dec_in, targets, _ = prep_token_batch(hyps)
            with T.no_grad():
                _, states, ctxs = self.decoder(dec_in, memory, self.attention, mem_mask)
                synth_mask = np.zeros(dec_in.shape, dtype=bool)
                for i, h in enumerate(hyps):
                    synth_mask[i, : len(h)] = True
                feats = self.synth_feats(ctxs, states, targets)
                frames, _, frame_mask = self.synthesizer(feats, None, synth_mask)
            specs_out = [frames.data[i][frame_mask[i]] for i in range(len(specs))]
            return hyps, specs_out
        finally:
            self.train(was_training)


class MtModel(Module):
    """Machine translation with the S2ST decoder geometry.

    Variants: text_to_text, text_to_phoneme, phoneme_to_phoneme. The
    encoder reuses the context-network shape (Conformer blocks over
    embeddings plus positions) so mSLAM context blocks transfer onto it
    name-for-name.
    """

    VARIANTS = ("text_to_text", "text_to_phoneme", "phoneme_to_phoneme")

    def __init__(self, preset: ModelPreset, variant: str, phoneme_vocab: int,
                 text_vocab: int, seed: int, dropout: float = 0.1):
        super().__init__()
        if variant not in self.VARIANTS:
            raise ValueError(f"unknown MT variant {variant!r}")
        rng = rng_for(seed, D_MODEL, 4)
        self.preset = preset
        self.variant = variant
        in_vocab = phoneme_vocab if variant == "phoneme_to_phoneme" else text_vocab
        out_vocab = text_vocab if variant == "text_to_text" else phoneme_vocab
        self.in_vocab, self.out_vocab = in_vocab, out_vocab
        self.src_embed = nn.Embedding(in_vocab, preset.enc_dim, rng)
        self.encoder_blocks = [
            nn.ConformerBlock(preset.enc_dim, preset.heads, preset.ff_expansion,
                              preset.conv_kernel, rng, dropout)
            for _ in range(preset.enc_blocks - preset.contrastive_blocks)
        ]
        self.attention = nn.MultiHeadAttention(preset.dec_dim, preset.enc_dim,
                                               preset.dec_dim, preset.heads, rng)
        self.decoder = nn.TokenDecoder(out_vocab, preset.dec_dim, preset.heads,
                                       preset.ff_expansion, preset.dec_blocks, rng,
                                       dropout)
        self._pos = nn.sinusoid_table(nn.TokenDecoder.MAX_LEN, preset.enc_dim)

    def encode(self, seqs: List[np.ndarray], rng=None):
        ids, valid = pad_stack(seqs, pad_value=TEXT_PAD)
        x = self.src_embed(ids) + Tensor(self._pos[: ids.shape[1]])
        for block in self.encoder_blocks:
            x = block(x, key_mask=valid, rng=rng)
        return x, valid

    def step_loss(self, src_seqs, tgt_seqs, rng=None) -> LossBundle:
        memory, mem_mask = self.encode(src_seqs, rng)
        dec_in, targets, ce_mask = prep_token_batch(tgt_seqs)
        logits, _, _ = self.decoder(dec_in, memory, self.attention, mem_mask, rng)
        ce = cross_entropy(logits, targets, ce_mask)
        return LossBundle(ce, {"mt_ce": ce.item()})

    def translate(self, src_seqs, max_len: int = 24):
        was_training = self.training
        self.eval()
        try:
            memory, mem_mask = self.encode(src_seqs)
            return greedy_decode(self.decoder, self.attention, memory, mem_mask, max_len)
        finally:
            self.train(was_training)


class MultiTaskModel(Module):
    """S2ST plus a text-MT task through the shared decoder.

    MT batches route text embeddings through the upper (context) encoder
    blocks into the shared attention and decoder; speech-only parameters
    (feature extractor, lower blocks, synthesizer) never see MT gradients,
    and the text embedding never sees S2ST gradients.
    """

    TASKS = ("s2st", "mt")

    def __init__(self, s2st: S2stModel, text_vocab: int, seed: int):
        super().__init__()
        rng = rng_for(seed, D_MODEL, 5)
        self.s2st = s2st
        self.text_vocab = text_vocab
        self.src_embed = nn.Embedding(text_vocab, s2st.preset.enc_dim, rng)
        self._pos = nn.sinusoid_table(nn.TokenDecoder.MAX_LEN, s2st.preset.enc_dim)

    def s2st_step(self, batch, rng) -> LossBundle:
        return self.s2st.step_loss(batch, rng)

    def mt_step(self, batch, rng) -> LossBundle:
        ids, valid = pad_stack([ex.src_text for ex in batch], pad_value=TEXT_PAD)
        x = self.src_embed(ids) + Tensor(self._pos[: ids.shape[1]])
        split = self.s2st.preset.contrastive_blocks
        memory = self.s2st.encoder.run_blocks(x, valid, split, None, rng)
        dec_in, targets, ce_mask = prep_token_batch([ex.tgt_phonemes for ex in batch])
        logits, _, _ = self.s2st.decoder(dec_in, memory, self.s2st.attention, valid, rng)
        ce = cross_entropy(logits, targets, ce_mask)
        return LossBundle(ce, {"mt_ce": ce.item()})

    def touched_parameters(self, task: str) -> set:
        """Names of the parameters a task's gradients may reach."""
        split = self.s2st.preset.contrastive_blocks
        names = set()
        for name, _ in self.named_parameters():
            if task == "s2st":
                if not name.startswith("src_embed."):
                    names.add(name)
            else:
                if name.startswith("src_embed."):
                    names.add(name)
                elif name.startswith(("s2st.attention.", "s2st.decoder.")):
                    names.add(name)
                elif name.startswith("s2st.encoder.blocks."):
                    block = int(name.split(".")[3])
                    if block >= split:
                        names.add(name)
        return names

    def step_loss(self, task: str, batch, rng):
        """Run one task batch; returns (LossBundle, touched parameter names)."""
        if task not in self.TASKS:
            raise ValueError(f"unknown task {task!r}")
        want = S2stExample if task == "s2st" else MtExample
        if any(not isinstance(ex, want) for ex in batch):
            raise ValueError("mixed-task batch: every example must match the task tag")
        fn = self.s2st_step if task == "s2st" else self.mt_step
        return fn(batch, rng), self.touched_parameters(task)


# -- parameter transfer -------------------------------------------------------


@dataclass
class TransferReport:
    """Names copied into the target and source names left behind."""

    copied: list
    skipped: list

    def counts(self):
        return len(self.copied), len(self.skipped)


def _apply_transfer(source: Module, target: Module, rules, exclude=()) -> TransferReport:
    src_named = dict(source.named_parameters())
    tgt_named = dict(target.named_parameters())
    copied, skipped = [], []
    for name, p in src_named.items():
        if any(name.startswith(e) for e in exclude):
            skipped.append(name)
            continue
        tname = None
        for sp, tp in rules:
            if name.startswith(sp):
                tname = tp + name[len(sp):]
                break
        if tname is None or tname not in tgt_named:
            skipped.append(name)
            continue
        tgt = tgt_named[tname]
        if tgt.data.shape != p.data.shape:
            raise ValueError(
                f"transfer shape mismatch: {name} {p.data.shape} -> {tname} {tgt.data.shape}"
            )
        tgt.data[...] = p.data
        copied.append(tname)
    return TransferReport(copied, skipped)


def transfer_encoder(target: Module, source: Module) -> TransferReport:
    """Copy a pretrained encoder into an S2ST or MT model.

    S2ST targets take the speech encoder (feature extractor plus all
    Conformer blocks); MT targets take the text side of an mSLAM model
    (text embedding plus the context blocks, renumbered from zero).
    """
    if isinstance(target, S2stModel):
        if isinstance(source, W2vBert):
            rules = [("encoder.", "encoder.")]
        elif isinstance(source, MSlam):
            rules = [("core.encoder.", "encoder.")]
        else:
            raise TypeError(f"cannot transfer an encoder from {type(source).__name__}")
        return _apply_transfer(source, target, rules)
    if isinstance(target, MtModel):
        if not isinstance(source, MSlam):
            raise TypeError("an MT encoder can only come from an mSLAM model")
        split = source.core.split
        rules = [
            (f"core.encoder.blocks.{split + i}.", f"encoder_blocks.{i}.")
            for i in range(len(target.encoder_blocks))
        ]
        if target.variant != "phoneme_to_phoneme" and source.text_vocab == target.in_vocab:
            rules.append(("text_embed.", "src_embed."))
        return _apply_transfer(source, target, rules)
    raise TypeError(f"cannot transfer an encoder into {type(target).__name__}")


def transfer_decoder(target: S2stModel, source: MtModel) -> TransferReport:
    """Copy an MT decoder (and its shared attention) into an S2ST model.

    Embedding and output head move only when the MT variant already speaks
    phonemes; a text-vocabulary decoder transfers its blocks alone.
    """
    exclude = ()
    if source.out_vocab != target.phoneme_vocab:
        exclude = ("decoder.embed.", "decoder.out_head.")
    rules = [("attention.", "attention."), ("decoder.", "decoder.")]
    return _apply_transfer(source, target, rules, exclude)


def transfer_multitask_text(target: MultiTaskModel, source: MtModel) -> TransferReport:
    """Bring an MT model's source-text embedding into the multi-task wrapper."""
    if source.variant == "phoneme_to_phoneme":
        return TransferReport([], [n for n, _ in source.named_parameters()])
    return _apply_transfer(source, target, [("src_embed.", "src_embed.")])


def set_lower_encoder_trainable(model: S2stModel, trainable: bool) -> None:
    """Freeze or unfreeze the speech-specific lower encoder.

    Covers the feature extractor and the contrastive blocks; frozen
    parameters keep grad None so the optimizer leaves them alone.
    """
    split = model.preset.contrastive_blocks
    lower = [model.encoder.feature] + model.encoder.blocks[:split]
    for module in lower:
        for _, p in module.named_parameters():
            p.requires_grad = trainable
            if not trainable:
                p.grad = None
