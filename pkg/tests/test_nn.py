"""Block-level checks: gradients, masking, causality, quantizer, synthesizer."""

import numpy as np
import pytest

from tinys2st import nn
from tinys2st import tensor as T
from tinys2st.tensor import Tensor


def rng_of(seed):
    return np.random.default_rng(seed)


def test_linear_shape_error_names_both_shapes():
    lin = nn.Linear(4, 3, rng_of(0))
    with pytest.raises(ValueError, match=r"4.*\(2, 5\)"):
        lin(Tensor(np.zeros((2, 5))))


def test_attention_weights_rows_sum_to_one():
    rng = rng_of(1)
    mha = nn.MultiHeadAttention(8, 6, 8, 2, rng)
    q = Tensor(rng.normal(size=(2, 4, 8)))
    m = Tensor(rng.normal(size=(2, 5, 6)))
    key_mask = np.array([[True] * 5, [True, True, True, False, False]])
    out, weights = mha(q, m, key_mask=key_mask)
    assert out.shape == (2, 4, 8)
    assert np.allclose(weights.data.sum(axis=-1), 1.0, atol=1e-12)
    # padded keys receive zero attention
    assert np.all(weights.data[1, :, :, 3:] == 0.0)


def test_attention_grad_check():
    rng = rng_of(2)
    mha = nn.MultiHeadAttention(6, 6, 6, 2, rng)
    q = Tensor(rng.normal(size=(1, 3, 6)))
    m = Tensor(rng.normal(size=(1, 4, 6)))
    w = Tensor(rng.normal(size=(1, 3, 6)))
    err = T.grad_check(lambda: (mha(q, m)[0] * w).sum(), mha.parameters(), max_entries=8)
    assert err <= 1e-4


def test_conformer_block_grad_check():
    rng = rng_of(3)
    block = nn.ConformerBlock(8, 2, 2, 3, rng)
    x = Tensor(rng.normal(size=(2, 4, 8)))
    w = Tensor(rng.normal(size=(2, 4, 8)))
    err = T.grad_check(lambda: (block(x) * w).sum(), block.parameters(), max_entries=4)
    assert err <= 1e-4


def test_conformer_residual_identity_when_projections_zeroed():
    rng = rng_of(4)
    block = nn.ConformerBlock(8, 2, 2, 3, rng).eval()
    for lin in (block.ff1.lin2, block.attn.wo, block.conv.pointwise, block.ff2.lin2):
        lin.weight.data[:] = 0.0
        lin.bias.data[:] = 0.0
    x = rng.normal(size=(2, 5, 8))
    out = block(Tensor(x))
    assert np.array_equal(out.data, T.layer_norm(Tensor(x)).data)


def test_conformer_padding_is_invisible_to_real_positions():
    rng = rng_of(5)
    blocks = [nn.ConformerBlock(8, 2, 2, 3, rng).eval() for _ in range(2)]
    x_long = rng.normal(size=(6, 8))
    x_short = rng.normal(size=(3, 8))
    padded, mask = nn.pad_stack([x_long, x_short])

    h = Tensor(padded)
    for b in blocks:
        h = b(h, key_mask=mask)

    alone = Tensor(x_short[None])
    for b in blocks:
        alone = b(alone, key_mask=np.ones((1, 3), dtype=bool))

    assert np.allclose(h.data[1, :3], alone.data[0], atol=1e-10, rtol=0)


def test_decoder_block_grad_check():
    rng = rng_of(6)
    block = nn.TransformerDecoderBlock(8, 2, 2, rng)
    cross = nn.MultiHeadAttention(8, 6, 8, 2, rng)
    x = Tensor(rng.normal(size=(1, 3, 8)))
    mem = Tensor(rng.normal(size=(1, 4, 6)))
    w = Tensor(rng.normal(size=(1, 3, 8)))
    params = block.parameters() + cross.parameters()
    err = T.grad_check(lambda: (block(x, mem, cross)[0] * w).sum(), params, max_entries=4)
    assert err <= 1e-4


def test_decoder_is_causal():
    rng = rng_of(7)
    dec = nn.TokenDecoder(11, 8, 2, 2, 2, rng).eval()
    cross = nn.MultiHeadAttention(8, 8, 8, 2, rng)
    mem = Tensor(rng.normal(size=(5, 8)))
    base = np.array([1, 4, 7, 2, 9])
    logits_a, _, _ = dec(base, mem, cross)
    for t in range(4):
        other = base.copy()
        other[t + 1 :] = (other[t + 1 :] + 3) % 11
        logits_b, _, _ = dec(other, mem, cross)
        assert np.allclose(logits_a.data[: t + 1], logits_b.data[: t + 1], atol=1e-10)
        assert not np.allclose(logits_a.data[t + 1 :], logits_b.data[t + 1 :], atol=1e-6)


def test_decoder_rejects_overlong_sequences():
    rng = rng_of(8)
    dec = nn.TokenDecoder(5, 8, 2, 2, 1, rng)
    cross = nn.MultiHeadAttention(8, 8, 8, 2, rng)
    mem = Tensor(rng.normal(size=(3, 8)))
    with pytest.raises(ValueError, match="length"):
        dec(np.zeros(nn.TokenDecoder.MAX_LEN + 1, dtype=int), mem, cross)


def test_quantizer_codes_and_straight_through():
    rng = rng_of(9)
    vq = nn.VectorQuantizer(4, 3, rng)
    vq.codebook.data[:] = np.array(
        [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
    )
    latents = Tensor(np.array([[0.9, 0.1, 0.0], [0.0, 0.05, 0.1], [0.1, 0.9, 0.1]]),
                     requires_grad=True)
    ids, codes, targets, diversity, _ = vq.quantize(latents)
    assert ids.tolist() == [1, 0, 2]
    assert np.array_equal(codes.data, vq.codebook.data[ids])
    grads = T.backward((codes * codes).sum())
    # straight-through: all code gradient lands on the inputs
    assert grads[latents].shape == latents.shape
    assert latents in grads
    assert 1.0 <= diversity <= 4.0


def test_quantizer_tie_breaks_to_first_code():
    rng = rng_of(10)
    vq = nn.VectorQuantizer(3, 2, rng)
    vq.codebook.data[:] = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 5.0]])
    ids, _, _, _, _ = vq.quantize(Tensor([[1.0, 0.1]]))
    assert ids.tolist() == [0]


def test_quantizer_uniform_usage_hits_max_perplexity():
    rng = rng_of(11)
    vq = nn.VectorQuantizer(4, 2, rng)
    vq.codebook.data[:] = np.array([[0, 0], [0, 4], [4, 0], [4, 4]], dtype=float)
    latents = Tensor(np.array([[0, 0], [0, 4], [4, 0], [4, 4]], dtype=float))
    ids, _, _, diversity, _ = vq.quantize(latents)
    assert sorted(ids.tolist()) == [0, 1, 2, 3]
    assert diversity == pytest.approx(4.0, abs=1e-12)


def test_quantizer_targets_train_codebook():
    rng = rng_of(12)
    vq = nn.VectorQuantizer(4, 3, rng)
    latents = Tensor(rng.normal(size=(5, 3)))
    _, _, targets, _, div_loss = vq.quantize(latents)
    loss = (targets * targets).sum() + div_loss
    grads = T.backward(loss)
    assert vq.codebook in grads
    assert np.any(grads[vq.codebook] != 0.0)


def test_quantizer_diversity_loss_grad_check():
    rng = rng_of(13)
    vq = nn.VectorQuantizer(4, 3, rng)
    latents = Tensor(rng.normal(size=(6, 3)), requires_grad=True)
    err = T.grad_check(lambda: vq.quantize(latents)[4], [vq.codebook, latents])
    assert err <= 1e-4


def test_synthesizer_teacher_frame_count_is_exact():
    rng = rng_of(14)
    syn = nn.DurationSynthesizer(12, 8, 5, 2, 1, rng).eval()
    feats = Tensor(rng.normal(size=(2, 3, 12)))
    durations = np.array([[1, 2, 3], [2, 1, 0]])
    token_mask = np.array([[True, True, True], [True, True, False]])
    frames, log_dur, frame_mask = syn(feats, durations, token_mask)
    assert frames.shape == (2, 6, 5)
    assert log_dur.shape == (2, 3)
    assert frame_mask.sum(axis=1).tolist() == [6, 3]


def test_synthesizer_free_run_durations_are_at_least_one():
    rng = rng_of(15)
    syn = nn.DurationSynthesizer(12, 8, 5, 2, 1, rng).eval()
    feats = Tensor(rng.normal(size=(1, 4, 12)))
    frames, log_dur, frame_mask = syn(feats)
    assert frame_mask.sum() >= 4  # each token emits at least one frame


def test_synthesizer_rejects_bad_teacher_durations():
    rng = rng_of(16)
    syn = nn.DurationSynthesizer(12, 8, 5, 2, 1, rng).eval()
    feats = Tensor(rng.normal(size=(1, 2, 12)))
    with pytest.raises(ValueError, match="durations"):
        syn(feats, np.array([[1, 0]]), np.array([[True, True]]))


def test_synthesizer_grad_check():
    rng = rng_of(17)
    syn = nn.DurationSynthesizer(8, 6, 3, 2, 1, rng).eval()
    feats = Tensor(rng.normal(size=(1, 2, 8)))
    dur = np.array([[2, 1]])
    w = Tensor(rng.normal(size=(1, 3, 3)))

    def loss():
        frames, log_dur, _ = syn(feats, dur)
        return (frames * w).sum() + (log_dur * log_dur).sum()

    err = T.grad_check(loss, syn.parameters(), max_entries=4)
    assert err <= 1e-4


def test_module_state_dict_round_trip(tmp_path):
    rng = rng_of(18)
    block = nn.ConformerBlock(8, 2, 2, 3, rng)
    names = [n for n, _ in block.named_parameters()]
    assert names == [n for n, _ in block.named_parameters()]  # stable order
    state = block.state_dict()
    path = tmp_path / "block.bin"
    T.save_tensors(path, state)
    loaded = T.load_tensors(path)

    other = nn.ConformerBlock(8, 2, 2, 3, rng_of(99))
    other.load_state_dict(loaded)
    for (_, a), (_, b) in zip(block.named_parameters(), other.named_parameters()):
        assert np.array_equal(a.data, b.data)


def test_load_state_dict_strictness():
    rng = rng_of(19)
    lin = nn.Linear(3, 2, rng)
    with pytest.raises(KeyError, match="missing"):
        lin.load_state_dict({"weight": np.zeros((3, 2))})
    with pytest.raises(ValueError, match="shape mismatch"):
        lin.load_state_dict({"weight": np.zeros((2, 3)), "bias": np.zeros(2)})


def test_train_eval_mode_propagates():
    rng = rng_of(20)
    block = nn.ConformerBlock(8, 2, 2, 3, rng, dropout=0.5)
    block.eval()
    assert not block.ff1.training
    x = Tensor(rng.normal(size=(1, 3, 8)))
    a = block(x).data
    b = block(x).data
    assert np.array_equal(a, b)  # no dropout noise in eval mode


def test_dropout_requires_rng_in_training():
    rng = rng_of(21)
    ff = nn.FeedForward(4, 2, rng, dropout=0.5)
    with pytest.raises(ValueError, match="rng"):
        ff(Tensor(np.zeros((2, 4))))


def test_sinusoid_table_shape_and_range():
    tab = nn.sinusoid_table(16, 8)
    assert tab.shape == (16, 8)
    assert np.all(np.abs(tab) <= 1.0)
    assert not np.allclose(tab[0], tab[1])


def test_pad_stack_masks():
    a = np.ones((3, 2))
    b = np.ones((5, 2)) * 2
    out, mask = nn.pad_stack([a, b])
    assert out.shape == (2, 5, 2)
    assert mask.tolist() == [[True] * 3 + [False] * 2, [True] * 5]
    assert np.all(out[0, 3:] == 0.0)
