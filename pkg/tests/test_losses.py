import math

import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings, strategies as st

from ledcnet.config import FocalParams
from ledcnet.decoder import DecoderOutput
from ledcnet.errors import DataError, ParameterError
from ledcnet.losses import combined_loss, focal_loss, focal_term


def test_hand_value():
    # -0.25 * 0.5**2 * ln 0.5
    assert abs(float(focal_term(0.5, FocalParams())) - 0.043322) < 1e-6
    assert abs(float(focal_term(0.9, FocalParams(gamma=1, alpha=0.5)))
               - (-0.5 * 0.1 * math.log(0.9))) < 1e-15


def test_reduces_to_cross_entropy_with_ignore():
    g = torch.Generator().manual_seed(0)
    logits = torch.randn(2, 4, 5, 5, generator=g, dtype=torch.float64)
    target = torch.randint(0, 4, (2, 5, 5), generator=g)
    target[0, :2] = 255
    got = focal_loss(logits, target, FocalParams(gamma=0, alpha=1))
    torch.testing.assert_close(got, F.cross_entropy(logits, target, ignore_index=255))


def test_all_ignored_is_zero_with_gradient():
    logits = torch.randn(1, 3, 4, 4, requires_grad=True)
    loss = focal_loss(logits, torch.full((1, 4, 4), 255))
    assert loss.item() == 0.0
    loss.backward()
    assert torch.equal(logits.grad, torch.zeros_like(logits))


def test_clamp_keeps_extremes_finite():
    logits = torch.tensor([[[[1e4]], [[-1e4]]]], requires_grad=True)
    loss = focal_loss(logits, torch.tensor([[[1]]]), FocalParams(gamma=0, alpha=1))
    assert abs(loss.item() - (-math.log(1e-7))) < 1e-3
    loss.backward()
    assert torch.isfinite(logits.grad).all()


def test_bad_targets_name_the_pixel():
    target = torch.zeros(2, 3, 3, dtype=torch.long)
    target[1, 2, 0] = 7
    with pytest.raises(DataError, match=r"\(1, 2, 0\)"):
        focal_loss(torch.randn(2, 3, 3, 3), target)
    with pytest.raises(DataError):
        focal_loss(torch.randn(2, 3, 3, 3), torch.zeros(2, 3, 4, dtype=torch.long))


def test_combined_weights_aux_term():
    g = torch.Generator().manual_seed(1)
    coarse = torch.randn(1, 3, 4, 4, generator=g)
    refined = torch.randn(1, 3, 4, 4, generator=g)
    target = torch.randint(0, 3, (1, 4, 4), generator=g)
    out = DecoderOutput(coarse, refined)
    expect = focal_loss(refined, target) + 0.4 * focal_loss(coarse, target)
    torch.testing.assert_close(combined_loss(out, target), expect)
    torch.testing.assert_close(combined_loss(out, target, aux_weight=0), focal_loss(refined, target))
    with pytest.raises(ParameterError):
        combined_loss(out, target, aux_weight=-0.1)


@settings(max_examples=30, deadline=None)
@given(st.floats(0, 5), st.floats(0.01, 1), st.integers(0, 2**16))
def test_focal_bounded_by_weighted_ce(gamma, alpha, seed):
    g = torch.Generator().manual_seed(seed)
    logits = torch.randn(1, 3, 4, 4, generator=g, dtype=torch.float64)
    target = torch.randint(0, 3, (1, 4, 4), generator=g)
    loss = float(focal_loss(logits, target, FocalParams(gamma, alpha)))
    assert 0 <= loss <= alpha * float(F.cross_entropy(logits, target)) + 1e-12
