import sys

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from dgtts.losses import (
    LossReport,
    feature_matching_loss,
    generator_total_loss,
    lsgan_d_loss,
    lsgan_g_adv_loss,
    masked_mean,
    reconstruction_loss,
)
from dgtts.models import DiscriminatorOutput


def _out(u, c, mask=None):
    return DiscriminatorOutput(u, c, logit_mask=mask)


def test_masked_mean_layouts():
    x = torch.arange(12.0).reshape(1, 3, 4)  # [B, C, L]
    mask = torch.tensor([[True, True, False, False]])
    assert masked_mean(x, mask).item() == pytest.approx((0 + 1 + 4 + 5 + 8 + 9) / 6)
    y = x.transpose(1, 2)  # [B, L, C]
    assert masked_mean(y, mask, time_dim=1).item() == pytest.approx((0 + 1 + 4 + 5 + 8 + 9) / 6)
    assert masked_mean(torch.tensor([[1.0, 3.0, 100.0]]), torch.tensor([[True, True, False]])).item() == 2.0
    assert masked_mean(x, None).item() == pytest.approx(5.5)


def test_lsgan_known_values():
    real = _out(torch.full((1, 1, 3), 0.5), torch.full((1, 1, 3), 1.0))
    fake = _out(torch.full((1, 1, 3), 0.5), torch.zeros(1, 1, 3))
    assert lsgan_d_loss(real, fake).item() == pytest.approx(0.25 + 0.25 + 0 + 0)
    assert lsgan_g_adv_loss(fake).item() == pytest.approx(0.25 + 1.0)


def test_perfect_discriminator_has_zero_loss():
    ones, zeros = torch.ones(2, 1, 4), torch.zeros(2, 1, 4)
    assert lsgan_d_loss(_out(ones, ones), _out(zeros, zeros)).item() == 0.0
    assert lsgan_g_adv_loss(_out(ones, ones)).item() == 0.0


def test_padding_excluded_from_adversarial_loss():
    mask = torch.tensor([[True, True, False]])
    logits = torch.tensor([[[1.0, 1.0, 50.0]]])
    assert lsgan_g_adv_loss(_out(logits, logits, mask)).item() == 0.0


@given(st.integers(1, 4), st.integers(1, 6))
@settings(max_examples=20, deadline=None)
def test_feature_matching_zero_on_identical(n, length):
    feats = [torch.randn(2, 3, length) for _ in range(n)]
    assert feature_matching_loss(feats, [f.clone() for f in feats]).item() == 0.0


def test_feature_matching_sums_layers_and_checks_shapes():
    a = [torch.zeros(1, 2, 3), torch.zeros(1, 1, 2)]
    b = [torch.ones(1, 2, 3), torch.full((1, 1, 2), 2.0)]
    assert feature_matching_loss(a, b).item() == pytest.approx(3.0)
    with pytest.raises(ValueError, match="shape"):
        feature_matching_loss(a, [b[0], torch.ones(1, 1, 3)])
    with pytest.raises(ValueError, match="length"):
        feature_matching_loss(a, b[:1])


@given(recon=st.floats(1e-3, 1e3), shift=st.floats(1e-3, 10))
@settings(max_examples=60, deadline=None)
def test_lambda_fm_balances_reconstruction(recon, shift):
    feats = [torch.randn(1, 2, 5) for _ in range(3)]
    fm = feature_matching_loss(feats, [f + shift for f in feats])
    r = torch.tensor(recon)
    total, lam = generator_total_loss(torch.tensor(0.25), r, fm)
    assert abs(lam * fm.item() - recon) <= 2 * sys.float_info.epsilon * recon
    assert total.item() == pytest.approx(0.25 + 2 * recon, rel=1e-14)


def test_lambda_fm_is_constant_for_backprop_and_zero_when_fm_zero():
    w = torch.tensor(2.0, requires_grad=True)
    fm = w * 1.5
    recon = w ** 2
    total, lam = generator_total_loss(torch.tensor(0.0), recon, fm)
    (g,) = torch.autograd.grad(total, [w])
    # d/dw [w^2 + lam * 1.5 w] with lam fixed = 2w + 1.5 lam
    assert g.item() == pytest.approx(2 * 2.0 + 1.5 * lam)
    _, lam0 = generator_total_loss(torch.tensor(0.0), recon, torch.tensor(0.0))
    assert lam0 == 0.0


def test_reconstruction_loss_terms():
    x0 = torch.zeros(1, 3, 2)
    pred = torch.ones(1, 3, 2)
    mel_mask = torch.tensor([[True, True, False]])
    d = torch.tensor([[2, 1]])
    tok = torch.tensor([[True, True]])
    log_d_hat = torch.log(d.double()) + 1.0
    r = reconstruction_loss(pred, x0, log_d_hat, d, torch.zeros(1, 2), torch.ones(1, 2), torch.zeros(1, 2),
                            torch.zeros(1, 2), mel_mask, tok)
    assert r.mel.item() == 1.0
    assert r.duration.item() == pytest.approx(1.0)
    assert r.pitch.item() == 1.0 and r.energy.item() == 0.0
    assert r.total.item() == pytest.approx(1.0 + 0.1 + 0.1)
    with pytest.raises(ValueError, match="pitch"):
        reconstruction_loss(pred, x0, log_d_hat, d, torch.zeros(1, 3), torch.ones(1, 2), torch.zeros(1, 2),
                            torch.zeros(1, 2))


def test_loss_report_row_matches_columns():
    r = LossReport(L_D=1.0, skipped=True)
    assert len(r.row()) == len(LossReport.columns())
    assert r.row()[-1] == 1
