import numpy as np
import pytest
import torch

from atmseg.encoders import (
    EncoderConfig,
    HashTextEncoder,
    PretrainedTextEncoder,
    ShapeError,
    TextEmbedding,
    build_visual_encoder,
    encode_image,
    sinusoidal_1d,
    stack_embeddings,
)


@pytest.mark.parametrize("size", [64, 96])
def test_tiny_pyramid_shapes(size):
    cfg = EncoderConfig(image_size=size)
    pyr = build_visual_encoder(cfg)(torch.zeros(2, 1, size, size))
    assert len(pyr) == 6
    for i, (f, c) in enumerate(zip(pyr.stages, cfg.widths)):
        assert f.shape == (2, c, size // 2**i, size // 2**i)


def test_encode_image_checks_size():
    cfg = EncoderConfig(image_size=64)
    enc = build_visual_encoder(cfg)
    assert encode_image(np.zeros((64, 64)), enc, cfg)[5].shape == (1, 256, 2, 2)
    with pytest.raises(ShapeError):
        encode_image(np.zeros((96, 96)), enc, cfg)
    with pytest.raises(ShapeError):
        enc(torch.zeros(1, 1, 70, 70))
    with pytest.raises(ShapeError):
        enc(torch.zeros(1, 3, 64, 64))


def test_config_validation():
    with pytest.raises(ShapeError):
        EncoderConfig(image_size=100).validate()
    with pytest.raises(ValueError):
        EncoderConfig(visual_widths=(16, 32)).validate()
    with pytest.raises(ValueError):
        EncoderConfig(backend="vit").validate()


def test_hash_encoder_deterministic():
    a, b = HashTextEncoder(64, seed=0), HashTextEncoder(64, seed=0)
    ea, eb = a.encode("It contains lumbar vertebra L1."), b.encode("It contains lumbar vertebra L1.")
    assert ea.tokens.shape == (5, 64)
    assert torch.equal(ea.tokens, eb.tokens)
    other = HashTextEncoder(64, seed=1).encode("It contains lumbar vertebra L1.")
    assert not torch.equal(ea.tokens, other.tokens)


def test_hash_encoder_distinguishes_names():
    enc = HashTextEncoder(64)
    l1 = enc.encode("It contains lumbar vertebra L1.").tokens
    l2 = enc.encode("It contains lumbar vertebra L2.").tokens
    assert torch.equal(l1[:3], l2[:3]) and not torch.equal(l1[4], l2[4])


def test_hash_encoder_dtype_and_empty():
    enc = HashTextEncoder(32).to(torch.float64)
    assert enc.encode("spine").tokens.dtype == torch.float64
    assert list(enc.parameters()) == []
    with pytest.raises(ValueError):
        enc.encode("   ")


def test_sinusoidal_table():
    pe = sinusoidal_1d(4, 6, dtype=torch.float64)
    assert torch.equal(pe[0], torch.tensor([0.0, 1, 0, 1, 0, 1], dtype=torch.float64))
    assert abs(pe[1, 0].item() - np.sin(1.0)) < 1e-15
    assert abs(pe[3, 3].item() - np.cos(3 / 10000 ** (2 / 6))) < 1e-15


def test_stack_embeddings_pad_and_truncate():
    embs = [TextEmbedding(torch.ones(3, 4)), TextEmbedding(torch.full((7, 4), 2.0))]
    out = stack_embeddings(embs, 5)
    assert out.shape == (2, 5, 4)
    assert out[0, 3:].abs().sum() == 0 and out[1, 4, 0] == 2
    with pytest.raises(ShapeError):
        stack_embeddings([TextEmbedding(torch.ones(3, 4)), TextEmbedding(torch.ones(3, 5))], 5)


def test_swin_adapter_shapes():
    pytest.importorskip("monai")
    cfg = EncoderConfig(image_size=64, backend="external", swin_feature_size=12)
    pyr = build_visual_encoder(cfg)(torch.randn(1, 1, 64, 64))
    for i, (f, c) in enumerate(zip(pyr.stages, cfg.widths)):
        assert f.shape == (1, c, 64 // 2**i, 64 // 2**i)


def _tiny_bert(tmp_path):
    transformers = pytest.importorskip("transformers")
    words = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "it", "contains", "lumbar", "vertebra", "l1", "."]
    vocab = tmp_path / "vocab.txt"
    vocab.write_text("\n".join(words) + "\n")
    tok = transformers.BertTokenizer(str(vocab))
    cfg = transformers.BertConfig(
        vocab_size=len(words), hidden_size=24, num_hidden_layers=1, num_attention_heads=2, intermediate_size=32
    )
    torch.manual_seed(0)
    return transformers.BertModel(cfg), tok


def test_pretrained_adapter_with_local_model(tmp_path):
    model, tok = _tiny_bert(tmp_path)
    enc = PretrainedTextEncoder("local", 16, freeze=True, model=model, tokenizer=tok)
    emb = enc.encode("It contains lumbar vertebra L1.")
    # [CLS] + 6 word pieces + [SEP]
    assert emb.tokens.shape == (8, 16)
    assert all(not p.requires_grad for p in enc.model.parameters())
    emb.tokens.sum().backward()
    assert enc.bridge.weight.grad is not None


def test_zero_image_gives_zero_features():
    cfg = EncoderConfig(image_size=64)
    pyr = build_visual_encoder(cfg)(torch.zeros(1, 1, 64, 64))
    assert all(not f.any() for f in pyr.stages)
