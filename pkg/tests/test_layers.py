import logging
import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from dgtts.layers import (
    FFTBlock,
    FFTStack,
    MultiHeadAttention,
    VarianceAdaptor,
    VarianceTargets,
    adaln_modulate,
    inference_durations,
    length_regulate,
    sequence_mask,
    sinusoidal_embedding,
    sinusoidal_step_embedding,
)


def test_sinusoidal_embedding_layout():
    e = sinusoidal_embedding(torch.tensor([0, 3]), 8)
    assert e.shape == (2, 8)
    torch.testing.assert_close(e[0], torch.tensor([0.0] * 4 + [1.0] * 4))
    # first half sin(pos * f_i), second half cos, f_i = 10000^(-i/half)
    for i in range(4):
        f = 10000 ** (-i / 4)
        assert e[1, i].item() == pytest.approx(math.sin(3 * f))
        assert e[1, 4 + i].item() == pytest.approx(math.cos(3 * f))


def test_step_embedding_distinguishes_steps_and_rejects_odd_dim():
    e = sinusoidal_step_embedding(torch.arange(1, 5), 16)
    assert torch.cdist(e, e).fill_diagonal_(1.0).min() > 0.1
    with pytest.raises(ValueError):
        sinusoidal_step_embedding(1, 7)


def test_length_regulate_basic_and_zero():
    h = torch.arange(6.0).reshape(3, 2)
    out, n = length_regulate(h, torch.tensor([2, 0, 1]))
    assert int(n) == 3
    torch.testing.assert_close(out, torch.tensor([[0.0, 1.0], [0.0, 1.0], [4.0, 5.0]]))


def test_length_regulate_all_zero_warns(caplog):
    with caplog.at_level(logging.WARNING):
        out, n = length_regulate(torch.ones(2, 3), torch.tensor([0, 0]))
    assert out.shape == (0, 3) and int(n) == 0
    assert "zero" in caplog.text


def test_length_regulate_errors():
    with pytest.raises(ValueError, match="nonnegative"):
        length_regulate(torch.ones(2, 3), torch.tensor([1, -1]))
    with pytest.raises(ValueError):
        length_regulate(torch.ones(2, 3), torch.tensor([1, 1, 1]))


@given(d=st.lists(st.lists(st.integers(0, 5), min_size=3, max_size=3), min_size=1, max_size=4))
@settings(max_examples=50, deadline=None)
def test_batched_length_regulate_matches_per_item(d):
    durations = torch.tensor(d)
    h = torch.randn(len(d), 3, 4)
    out, lens = length_regulate(h, durations)
    assert lens.tolist() == [sum(r) for r in d]
    for i in range(len(d)):
        single, n = length_regulate(h[i], durations[i])
        torch.testing.assert_close(out[i, :int(n)], single)
        assert torch.all(out[i, int(n):] == 0)


def test_inference_durations_clamp_and_mask():
    log_d = torch.tensor([[-5.0, math.log(3.4), math.log(2.6), 0.0]])
    mask = torch.tensor([[True, True, True, False]])
    assert inference_durations(log_d, mask).tolist() == [[1, 3, 3, 0]]


def test_attention_ignores_padding():
    torch.manual_seed(0)
    attn = MultiHeadAttention(8, 2)
    x = torch.randn(1, 5, 8)
    mask = sequence_mask(torch.tensor([3]), 5)
    y = attn(x, mask)
    x2 = x.clone()
    x2[:, 3:] = torch.randn(1, 2, 8) * 100
    torch.testing.assert_close(attn(x2, mask)[:, :3], y[:, :3])


def test_fft_block_shape_and_hidden_check():
    blk = FFTBlock(8, 2, 3, 16)
    out = blk(torch.randn(2, 5, 8), sequence_mask(torch.tensor([5, 2]), 5))
    assert out.shape == (2, 5, 8)
    assert torch.all(out[1, 2:] == 0)
    with pytest.raises(ValueError, match="hidden"):
        blk(torch.randn(2, 5, 6))


def test_fft_stack_padding_invariance():
    torch.manual_seed(1)
    stack = FFTStack(2, 8, 2, 3, 16)
    x = torch.randn(1, 4, 8)
    a = stack(x[:, :3], sequence_mask(torch.tensor([3]), 3))
    b = stack(x, sequence_mask(torch.tensor([3]), 4))
    torch.testing.assert_close(a, b[:, :3])


def test_variance_adaptor_teacher_forcing_and_inference():
    torch.manual_seed(2)
    va = VarianceAdaptor(8, 16, 3)
    h = torch.randn(1, 3, 8)
    mask = torch.ones(1, 3, dtype=torch.bool)
    tgt = VarianceTargets(torch.tensor([[2, 1, 3]]), torch.randn(1, 3), torch.randn(1, 3))
    out = va(h, mask, tgt)
    assert out.frames.shape == (1, 6, 8) and out.mel_lens.tolist() == [6]
    va.eval()
    out2 = va(h, mask)
    assert int(out2.mel_lens[0]) == int(inference_durations(out2.log_d_hat, mask).sum())
    va.train()
    with pytest.raises(ValueError, match="targets"):
        va(h, mask)


def test_adaln_modulate():
    h = torch.randn(2, 5, 4)
    gamma, beta = torch.full((4,), 2.0), torch.full((4,), 0.5)
    out = adaln_modulate(h, gamma, beta)
    torch.testing.assert_close(out.mean(-1), torch.full((2, 5), 0.5))
    ref = torch.nn.functional.layer_norm(h, (4,), gamma, beta, eps=1e-5)
    torch.testing.assert_close(out, ref)
    with pytest.raises(ValueError, match="channels"):
        adaln_modulate(h, torch.ones(3), torch.ones(4))
