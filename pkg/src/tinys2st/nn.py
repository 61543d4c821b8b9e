"""Neural building blocks: Conformer encoder pieces, Transformer decoder
pieces, a vector quantizer, and the duration-based synthesizer.

Everything follows a pre-norm residual layout. Variable-length batches are
padded to the longest element and carry a boolean validity mask; attention
blocks padded keys with a large negative additive constant and the
convolution branch zeroes padded frames first, so a padded forward matches
the unpadded forward exactly on real positions.

Modules are plain objects holding `tensor.Tensor` parameters; parameter
discovery walks attributes (and lists of modules) in insertion order, which
keeps checkpoint name layouts stable.
"""

from __future__ import annotations

import math
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor

NEG_INF = T.LOG_ZERO


def param(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    std = math.sqrt(2.0 / (fan_in + fan_out))
    return rng.normal(0.0, std, size=shape if shape is not None else (fan_in, fan_out))


class Module:
    """Base class: parameter discovery, train/eval mode, state dicts.

    Every Tensor attribute counts as a parameter (frozen ones included, so
    checkpoints stay complete); constants belong in plain numpy arrays.
    """

    def __init__(self):
        self.training = True

    def named_parameters(self, prefix: str = ""):
        for name, val in vars(self).items():
            if isinstance(val, Tensor):
                yield prefix + name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(prefix + name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self):
        seen, out = set(), []
        for _, p in self.named_parameters():
            if id(p) not in seen:
                seen.add(id(p))
                out.append(p)
        return out

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True):
        for m in self._modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def _modules(self):
        out = [self]
        for val in vars(self).values():
            if isinstance(val, Module):
                out.extend(val._modules())
            elif isinstance(val, (list, tuple)):
                for item in val:
                    if isinstance(item, Module):
                        out.extend(item._modules())
        return out

    def state_dict(self) -> dict:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict, strict: bool = True):
        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            if missing or extra:
                raise KeyError(f"state dict mismatch: missing={missing} extra={extra}")
        for name, p in own.items():
            if name not in state:
                continue
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise ValueError(
                    f"shape mismatch for {name!r}: checkpoint {arr.shape} vs model {p.data.shape}"
                )
            p.data[...] = arr

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, zero_init=False):
        super().__init__()
        self.in_dim = in_dim
        self.out_dim = out_dim
        if zero_init:
            self.weight = param(np.zeros((in_dim, out_dim)))
        else:
            self.weight = param(glorot(rng, in_dim, out_dim))
        self.bias = param(np.zeros(out_dim))

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"Linear expected last dim {self.in_dim}, got {x.shape}")
        return T.matmul(x, self.weight) + self.bias


class Embedding(Module):
    def __init__(self, vocab: int, dim: int, rng: np.random.Generator):
        super().__init__()
        self.vocab = vocab
        self.weight = param(rng.normal(0.0, 1.0 / math.sqrt(dim), size=(vocab, dim)))

    def __call__(self, ids: np.ndarray) -> Tensor:
        return T.embedding(self.weight, np.asarray(ids))


class LayerNorm(Module):
    """Normalize the last axis, then apply a learned scale and shift."""

    def __init__(self, dim: int):
        super().__init__()
        self.gain = param(np.ones(dim))
        self.bias = param(np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x) * self.gain + self.bias


class FeedForward(Module):
    """Two-layer MLP with swish, used half-weighted inside Conformer blocks."""

    def __init__(self, dim: int, expansion: int, rng, dropout: float = 0.0, zero_out=False):
        super().__init__()
        self.lin1 = Linear(dim, dim * expansion, rng)
        self.lin2 = Linear(dim * expansion, dim, rng, zero_init=zero_out)
        self.dropout = dropout

    def __call__(self, x: Tensor, rng: Optional[np.random.Generator] = None) -> Tensor:
        h = T.swish(self.lin1(x))
        h = self.lin2(h)
        if self.training and self.dropout > 0.0:
            h = T.dropout(h, self.dropout, _need_rng(rng))
        return h


def _need_rng(rng):
    if rng is None:
        raise ValueError("training-mode forward needs an rng for dropout")
    return rng


def sinusoid_table(length: int, dim: int) -> np.ndarray:
    """Fixed sin/cos position table, (length, dim)."""
    pos = np.arange(length)[:, None]
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    table = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return table.astype(np.float64)


class MultiHeadAttention(Module):
    """Scaled dot-product attention with separate query and memory widths.

    `attn_mask` (Tq, Tk) blocks future positions when True; `key_mask`
    (B, Tk) marks VALID keys. Returns the projected context and the
    attention weights (which rows always sum to 1).
    """

    def __init__(self, q_dim: int, kv_dim: int, dim: int, heads: int, rng):
        super().__init__()
        if dim % heads != 0:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.wq = Linear(q_dim, dim, rng)
        self.wk = Linear(kv_dim, dim, rng)
        self.wv = Linear(kv_dim, dim, rng)
        self.wo = Linear(dim, dim, rng)

    def __call__(
        self,
        query: Tensor,
        memory: Tensor,
        attn_mask: Optional[np.ndarray] = None,
        key_mask: Optional[np.ndarray] = None,
    ):
        squeeze = query.ndim == 2
        if squeeze:
            query = query.reshape((1,) + query.shape)
            memory = memory.reshape((1,) + memory.shape)
        b, tq, _ = query.shape
        tk = memory.shape[1]
        h, hd = self.heads, self.head_dim

        def split(x, t):
            return T.transpose(x.reshape(b, t, h, hd), 1, 2)  # (B, H, T, hd)

        q = split(self.wq(query), tq)
        k = split(self.wk(memory), tk)
        v = split(self.wv(memory), tk)
        scores = T.matmul(q, T.transpose(k, 2, 3)) * Tensor(1.0 / math.sqrt(hd))
        if attn_mask is not None:
            scores = T.masked_fill(scores, attn_mask[None, None, :, :], NEG_INF)
        if key_mask is not None:
            blocked = ~np.asarray(key_mask, dtype=bool)
            scores = T.masked_fill(scores, blocked[:, None, None, :], NEG_INF)
        weights = T.softmax(scores)
        ctx = T.matmul(weights, v)
        ctx = T.transpose(ctx, 1, 2).reshape(b, tq, self.dim)
        out = self.wo(ctx)
        if squeeze:
            out = out.reshape(out.shape[1:])
        return out, weights


class ConvModule(Module):
    """Depthwise conv over time, then swish and a pointwise projection."""

    def __init__(self, dim: int, kernel: int, rng, dropout: float = 0.0):
        super().__init__()
        self.kernel = param(glorot(rng, kernel, dim, shape=(kernel, dim)))
        self.pointwise = Linear(dim, dim, rng)
        self.dropout = dropout

    def __call__(self, x: Tensor, rng=None) -> Tensor:
        h = T.depthwise_conv1d(x, self.kernel)
        h = self.pointwise(T.swish(h))
        if self.training and self.dropout > 0.0:
            h = T.dropout(h, self.dropout, _need_rng(rng))
        return h


class ConformerBlock(Module):
    """Half FFN, self-attention, convolution, half FFN, final norm."""

    def __init__(self, dim: int, heads: int, ff_expansion: int, conv_kernel: int, rng,
                 dropout: float = 0.0):
        super().__init__()
        self.ln_ff1 = LayerNorm(dim)
        self.ff1 = FeedForward(dim, ff_expansion, rng, dropout)
        self.ln_attn = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, dim, dim, heads, rng)
        self.ln_conv = LayerNorm(dim)
        self.conv = ConvModule(dim, conv_kernel, rng, dropout)
        self.ln_ff2 = LayerNorm(dim)
        self.ff2 = FeedForward(dim, ff_expansion, rng, dropout)
        self.ln_out = LayerNorm(dim)
        self.dropout = dropout

    def __call__(self, x: Tensor, key_mask: Optional[np.ndarray] = None, rng=None) -> Tensor:
        half = Tensor(0.5)
        x = x + half * self.ff1(self.ln_ff1(x), rng)
        attn_out, _ = self.attn(self.ln_attn(x), self.ln_attn(x), key_mask=key_mask)
        if self.training and self.dropout > 0.0:
            attn_out = T.dropout(attn_out, self.dropout, _need_rng(rng))
        x = x + attn_out
        conv_in = self.ln_conv(x)
        if key_mask is not None:
            # padded frames must not leak into their neighbours' receptive field
            conv_in = T.masked_fill(conv_in, ~np.asarray(key_mask, bool)[..., None], 0.0)
        x = x + self.conv(conv_in, rng)
        x = x + half * self.ff2(self.ln_ff2(x), rng)
        return self.ln_out(x)


class TransformerDecoderBlock(Module):
    """Pre-norm causal self-attention + externally-owned cross-attention + FFN.

    The cross-attention module is passed in at call time so one attention
    instance can serve every block of a decoder stack.
    """

    def __init__(self, dim: int, heads: int, ff_expansion: int, rng, dropout: float = 0.0):
        super().__init__()
        self.ln_self = LayerNorm(dim)
        self.self_attn = MultiHeadAttention(dim, dim, dim, heads, rng)
        self.ln_cross = LayerNorm(dim)
        self.ln_ff = LayerNorm(dim)
        self.ff = FeedForward(dim, ff_expansion, rng, dropout)
        self.dropout = dropout

    def __call__(self, x: Tensor, memory: Tensor, cross_attn: MultiHeadAttention,
                 mem_mask: Optional[np.ndarray] = None, rng=None):
        length = x.shape[-2]
        causal = np.triu(np.ones((length, length), dtype=bool), k=1)
        h = self.ln_self(x)
        sa, _ = self.self_attn(h, h, attn_mask=causal)
        if self.training and self.dropout > 0.0:
            sa = T.dropout(sa, self.dropout, _need_rng(rng))
        x = x + sa
        ctx, _ = cross_attn(self.ln_cross(x), memory, key_mask=mem_mask)
        if self.training and self.dropout > 0.0:
            ctx = T.dropout(ctx, self.dropout, _need_rng(rng))
        x = x + ctx
        x = x + self.ff(self.ln_ff(x), rng)
        return x, ctx


class TokenDecoder(Module):
    """Autoregressive Transformer decoder over a token vocabulary.

    Owns embeddings, position table, blocks, and the output head, but not
    the cross-attention: that is owned by the enclosing model and shared
    across blocks (and with the synthesizer).
    """

    MAX_LEN = 512

    def __init__(self, vocab: int, dim: int, heads: int, ff_expansion: int,
                 num_blocks: int, rng, dropout: float = 0.0):
        super().__init__()
        self.vocab = vocab
        self.dim = dim
        self.embed = Embedding(vocab, dim, rng)
        self.blocks = [
            TransformerDecoderBlock(dim, heads, ff_expansion, rng, dropout)
            for _ in range(num_blocks)
        ]
        self.out_norm = LayerNorm(dim)
        self.out_head = Linear(dim, vocab, rng)
        self._pos = sinusoid_table(self.MAX_LEN, dim)

    def __call__(self, tokens: np.ndarray, memory: Tensor, cross_attn: MultiHeadAttention,
                 mem_mask: Optional[np.ndarray] = None, rng=None):
        tokens = np.asarray(tokens)
        squeeze = tokens.ndim == 1
        if squeeze:
            tokens = tokens[None, :]
            memory = memory.reshape((1,) + memory.shape) if memory.ndim == 2 else memory
        length = tokens.shape[1]
        if length > self.MAX_LEN:
            raise ValueError(f"sequence length {length} exceeds position table {self.MAX_LEN}")
        x = self.embed(tokens) + Tensor(self._pos[:length])
        ctx = None
        for block in self.blocks:
            x, ctx = block(x, memory, cross_attn, mem_mask=mem_mask, rng=rng)
        states = self.out_norm(x)
        logits = self.out_head(states)
        if squeeze:
            return logits.reshape(logits.shape[1:]), states.reshape(states.shape[1:]), ctx.reshape(ctx.shape[1:])
        return logits, states, ctx


class VectorQuantizer(Module):
    """Nearest-neighbour quantizer with a straight-through estimator.

    `temperature` only shapes the soft assignment used by the diversity
    regularizer; code selection itself is a hard argmin (first index wins
    ties). `quantize` returns:
      ids        - chosen code per row (numpy int)
      codes      - codebook rows with gradients passed straight through to
                   the inputs
      targets    - codebook rows selected differentiably (trains the
                   codebook when used as a prediction target)
      diversity  - hard-assignment perplexity, in [1, codebook_size]
      div_loss   - (C - soft perplexity) / C, a scalar Tensor to minimize
    """

    def __init__(self, codebook_size: int, dim: int, rng, temperature: float = 1.0):
        super().__init__()
        self.codebook_size = codebook_size
        self.dim = dim
        self.codebook = param(rng.normal(0.0, 1.0 / math.sqrt(dim), size=(codebook_size, dim)))
        self.temperature = temperature

    def quantize(self, latents: Tensor):
        if latents.shape[-1] != self.dim:
            raise ValueError(f"quantizer dim {self.dim}, got {latents.shape}")
        lead = latents.shape[:-1]
        flat = latents.reshape((-1, self.dim)) if latents.ndim != 2 else latents
        z, c = flat.data, self.codebook.data
        d2 = (z * z).sum(1)[:, None] + (c * c).sum(1)[None, :] - 2.0 * z @ c.T
        ids = d2.argmin(axis=1)

        sel = T.embedding(self.codebook, ids)
        codes = flat + Tensor(sel.data - flat.data)  # straight-through
        targets = sel

        counts = np.bincount(ids, minlength=self.codebook_size).astype(np.float64)
        p = counts / counts.sum()
        nz = p[p > 0]
        diversity = float(np.exp(-(nz * np.log(nz)).sum()))

        # soft assignment keeps the codebook trainable even for unused codes
        dist_t = (
            T.tsum(flat * flat, axis=-1, keepdims=True)
            + T.tsum(self.codebook * self.codebook, axis=-1)
            - Tensor(2.0) * T.matmul(flat, T.transpose(self.codebook, 0, 1))
        )
        probs = T.softmax(dist_t * Tensor(-1.0 / self.temperature))
        pbar = T.tmean(probs, axis=0)
        entropy = -(pbar * T.log(pbar + Tensor(1e-12))).sum()
        soft_perp = T.exp(entropy)
        div_loss = (Tensor(float(self.codebook_size)) - soft_perp) * Tensor(
            1.0 / self.codebook_size
        )

        ids = ids.reshape(lead)
        if len(lead) != 1:
            codes = codes.reshape(lead + (self.dim,))
            targets = targets.reshape(lead + (self.dim,))
        return ids, codes, targets, diversity, div_loss


class DurationSynthesizer(Module):
    """Non-autoregressive spectrogram head driven by per-token durations.

    Consumes per-token features (the caller concatenates the decoder's
    attention context, hidden state, and the embedding of the phoneme
    being rendered), predicts a log-duration per token, upsamples token
    features by repetition (teacher durations when given, rounded
    predictions otherwise), and decodes each frame to mel bins.
    """

    def __init__(self, in_dim: int, dim: int, mel_bins: int, ff_expansion: int,
                 num_layers: int, rng, dropout: float = 0.0):
        super().__init__()
        self.dim = dim
        self.mel_bins = mel_bins
        self.in_proj = Linear(in_dim, dim, rng)
        self.token_norms = [LayerNorm(dim) for _ in range(num_layers)]
        self.token_ffs = [FeedForward(dim, ff_expansion, rng, dropout) for _ in range(num_layers)]
        self.ln_dur = LayerNorm(dim)
        self.dur_head = Linear(dim, 1, rng)
        self.frame_norms = [LayerNorm(dim) for _ in range(num_layers)]
        self.frame_ffs = [FeedForward(dim, ff_expansion, rng, dropout) for _ in range(num_layers)]
        self.ln_out = LayerNorm(dim)
        self.mel_head = Linear(dim, mel_bins, rng)

    def __call__(self, feats: Tensor,
                 durations: Optional[np.ndarray] = None,
                 token_mask: Optional[np.ndarray] = None, rng=None):
        """Returns (frames, log_durations, frame_mask).

        `feats` is (B, L, in_dim). `durations` (B, L) int teacher values;
        when None, uses max(1, round(exp(predicted))) at valid tokens.
        `token_mask` (B, L) marks real tokens; padded tokens get
        duration 0.
        """
        h = T.swish(self.in_proj(feats))
        for norm, ff in zip(self.token_norms, self.token_ffs):
            h = h + ff(norm(h), rng)
        log_dur = self.dur_head(self.ln_dur(h))
        log_dur = log_dur.reshape(log_dur.shape[:-1])  # (B, L)

        b, length = log_dur.shape
        if token_mask is None:
            token_mask = np.ones((b, length), dtype=bool)
        if durations is None:
            counts = np.maximum(1, np.rint(np.exp(log_dur.data))).astype(np.int64)
        else:
            counts = np.asarray(durations, dtype=np.int64)
            if counts.shape != (b, length):
                raise ValueError(f"durations shape {counts.shape} vs tokens {(b, length)}")
            if np.any(counts[token_mask] < 1):
                raise ValueError("teacher durations must be >= 1 at real tokens")
        counts = np.where(token_mask, counts, 0)

        totals = counts.sum(axis=1)
        fmax = max(1, int(totals.max()))
        idx = np.zeros((b, fmax), dtype=np.int64)
        frame_mask = np.zeros((b, fmax), dtype=bool)
        for i in range(b):
            idx[i, : totals[i]] = np.repeat(np.arange(length), counts[i])
            frame_mask[i, : totals[i]] = True

        f = T.gather_rows(h, idx)
        for norm, ff in zip(self.frame_norms, self.frame_ffs):
            f = f + ff(norm(f), rng)
        frames = self.mel_head(self.ln_out(f))
        return frames, log_dur, frame_mask


def pad_stack(arrays, pad_value: float = 0.0):
    """Stack variable-length arrays: (B, Lmax, ...) plus a validity mask."""
    arrays = [np.asarray(a) for a in arrays]
    lmax = max(a.shape[0] for a in arrays)
    tail = arrays[0].shape[1:]
    out = np.full((len(arrays), lmax) + tail, pad_value, dtype=arrays[0].dtype)
    mask = np.zeros((len(arrays), lmax), dtype=bool)
    for i, a in enumerate(arrays):
        out[i, : a.shape[0]] = a
        mask[i, : a.shape[0]] = True
    return out, mask
