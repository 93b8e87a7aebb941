import math

import pytest
import torch
from helpers import fd_gradient, rel_err

from atmseg.encoders import EncoderConfig, ShapeError, build_visual_encoder
from atmseg.hasf import (
    CrossFuse,
    DecodeStep,
    HasfConfig,
    HasfDecoder,
    MultiHeadAttention,
    SelfEnhance,
    TextProjector,
    dice_focal_loss,
    dice_focal_terms,
    sinusoidal_2d,
)


@pytest.fixture(autouse=True)
def _float64():
    prev = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    torch.manual_seed(0)
    yield
    torch.set_default_dtype(prev)


def _pyramid(size=32, batch=2):
    cfg = EncoderConfig(image_size=size)
    enc = build_visual_encoder(cfg)
    return cfg, enc(torch.randn(batch, 1, size, size))


def test_decoder_shapes():
    cfg, pyr = _pyramid()
    dec = HasfDecoder(cfg.widths, cfg.text_width, 20, HasfConfig())
    logits, feats = dec(pyr, torch.randn(2, 30, cfg.text_width), torch.tensor([30, 12]))
    assert logits.shape == (2, 20, 32, 32) and feats.shape == (2, 16, 32, 32)


def test_alpha_zero_matches_text_free_path():
    cfg, pyr = _pyramid()
    dec = HasfDecoder(cfg.widths, cfg.text_width, 20, HasfConfig(alpha_init=0.0))
    with_text, _ = dec(pyr, torch.randn(2, 30, cfg.text_width), torch.tensor([30, 30]))
    without, _ = dec(pyr, None)
    assert torch.equal(with_text, without)


def test_alpha_nonzero_uses_text():
    cfg, pyr = _pyramid()
    dec = HasfDecoder(cfg.widths, cfg.text_width, 20, HasfConfig(alpha_init=0.5))
    t = torch.randn(2, 30, cfg.text_width)
    assert not torch.allclose(dec(pyr, t)[0], dec(pyr, None)[0])


def test_shared_alpha():
    dec = HasfDecoder(EncoderConfig().widths, 64, 20, HasfConfig(shared_alpha=True, alpha_init=0.3))
    assert dec.alpha.numel() == 1 and dec.stage_alpha(4).item() == pytest.approx(0.3)
    assert HasfDecoder(EncoderConfig().widths, 64, 20, HasfConfig()).alpha.numel() == 5


@pytest.mark.parametrize("text_pe", [False, True])
def test_cross_attention_token_permutation(text_pe):
    ca = CrossFuse(32, 4, text_pe=text_pe)
    x, pe = torch.randn(2, 16, 32), sinusoidal_2d(4, 4, 32)
    t = torch.randn(2, 8, 32)
    perm = torch.randperm(8)
    a = ca(x, pe, t, 1.0)
    b = ca(x, pe, t[:, perm], 1.0)
    # attention is a set operation over keys; only the positional code breaks symmetry
    assert torch.allclose(a, b, atol=1e-12) != text_pe


def test_self_attention_permutation_equivariant():
    sa = SelfEnhance(32, 4)
    x, pe = torch.randn(1, 16, 32), sinusoidal_2d(4, 4, 32)
    perm = torch.randperm(16)
    assert torch.allclose(sa(x, pe)[:, perm], sa(x[:, perm], pe[perm]), atol=1e-12)


def test_self_attention_rejects_nonfinite():
    sa = SelfEnhance(8, 2)
    x = torch.zeros(1, 4, 8)
    x[0, 1, 2] = float("nan")
    with pytest.raises(FloatingPointError):
        sa(x, torch.zeros(4, 8))


def test_explicit_attention_matches_sdpa():
    mha = MultiHeadAttention(16, 4)
    q, kv = torch.randn(2, 5, 16), torch.randn(2, 7, 16)
    fast = mha(q, kv, kv)
    slow, w = mha(q, kv, kv, return_weights=True)
    assert torch.allclose(fast, slow, atol=1e-12)
    assert w.shape == (2, 4, 5, 7) and torch.allclose(w.sum(-1), torch.ones(2, 4, 5))


def test_text_projector_ignores_padding():
    proj = TextProjector(8, 16, max_tokens=12, num_tokens=4)
    g = torch.randn(1, 10, 8)
    noisy = g.clone()
    noisy[:, 6:] = torch.randn(1, 4, 8)
    a, b = proj(g, torch.tensor([6])), proj(noisy, torch.tensor([6]))
    assert a.shape == (1, 4, 16) and torch.equal(a, b)
    assert proj(torch.randn(1, 20, 8)).shape == (1, 4, 16)  # truncated
    assert (a >= 0).all()


def test_sinusoidal_2d():
    pe = sinusoidal_2d(3, 5, 8)
    assert pe.shape == (15, 8)
    # row code in the first half, column code in the second
    assert torch.equal(pe[5, :4], pe[9, :4]) and torch.equal(pe[1, 4:], pe[6, 4:])


def test_decode_step_shape_error_names_stage():
    step = DecodeStep(3, 64, 32)
    with pytest.raises(ShapeError, match="stage 3"):
        step(torch.zeros(1, 64, 4, 4), torch.zeros(1, 32, 9, 9))


def test_config_validation():
    with pytest.raises(ValueError):
        HasfConfig(num_heads=3).validate([16, 32])
    with pytest.raises(ValueError):
        HasfConfig(num_heads=2).validate([18])
    with pytest.raises(ValueError):
        HasfConfig(norm="batch").validate([16])


def test_focal_reference_values():
    # p_t = 1/2 everywhere: gamma=0, alpha=1 gives log 2; gamma=2, alpha=0.25 gives log(2)/16
    probs = torch.full((1, 2, 4, 4), 0.5)
    target = torch.zeros(1, 4, 4, dtype=torch.long)
    _, focal = dice_focal_terms(probs, target, gamma=0.0, alpha=1.0)
    assert focal.item() == pytest.approx(math.log(2), abs=1e-12)
    _, focal = dice_focal_terms(probs, target)
    assert focal.item() == pytest.approx(math.log(2) / 16, abs=1e-12)


def test_dice_perfect_and_disjoint():
    target = torch.zeros(1, 4, 4, dtype=torch.long)
    target[0, :2] = 1
    onehot = torch.nn.functional.one_hot(target, 2).permute(0, 3, 1, 2).double()
    dice, focal = dice_focal_terms(onehot, target)
    assert dice.item() == pytest.approx(0.0, abs=1e-12) and focal.item() < 1e-12
    dice, _ = dice_focal_terms(1 - onehot, target)
    # each class: (0 + eps) / (16 + eps)
    assert dice.item() == pytest.approx(1 - 1e-5 / (16 + 1e-5), abs=1e-12)


def test_dice_focal_gradient_fd():
    logits = torch.randn(2, 4, 8, 8)
    target = torch.randint(0, 4, (2, 8, 8))
    fn = lambda z: dice_focal_loss(torch.softmax(z, 1), target)
    z = logits.clone().requires_grad_(True)
    fn(z).backward()
    assert rel_err(z.grad, fd_gradient(fn, logits.clone())) < 1e-4


def test_self_enhance_identity_with_zero_value_path():
    sa = SelfEnhance(16, 4)
    with torch.no_grad():
        sa.attn.v.weight.zero_()
        sa.attn.v.bias.zero_()
        sa.attn.out.bias.zero_()
    x = torch.randn(2, 9, 16)
    assert torch.equal(sa(x, sinusoidal_2d(3, 3, 16)), x)


def test_cross_fuse_zero_text_and_value():
    ca = CrossFuse(16, 4)
    with torch.no_grad():
        ca.attn.v.weight.zero_()
        ca.attn.v.bias.zero_()
        ca.attn.out.bias.zero_()
    x = torch.randn(2, 9, 16)
    # LayerNorm of an all-zero row is its bias, zero at init
    assert torch.equal(ca(x, sinusoidal_2d(3, 3, 16), torch.zeros(2, 4, 16), 1.0), x)


def test_alpha_gradient_fd():
    ca = CrossFuse(16, 4)
    x, pe, t = torch.randn(1, 9, 16), sinusoidal_2d(3, 3, 16), torch.randn(1, 4, 16)
    w = torch.randn(1, 9, 16)
    fn = lambda a: (ca(x, pe, t, a) * w).sum()
    alpha = torch.tensor(0.3, requires_grad=True)
    fn(alpha).backward()
    assert rel_err(alpha.grad.reshape(1), fd_gradient(fn, torch.tensor([0.3])).reshape(1)) < 1e-4
