import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mgmoe import tensor as T
from mgmoe import vocab
from mgmoe.data import make_sample
from mgmoe.decoders import (GroundingError, MaskDecoder, bilinear_matrix, decode_mask,
                            extract_seg_embedding, t_project, text_logits)
from mgmoe.losses import bce_loss, dice_loss
from mgmoe.model import ModelConfig, MultimodalModel, build_batch
from mgmoe.moe import RouterConfig
from mgmoe.nn import MLP2, Linear
from mgmoe.tensor import Tensor

from gradcases import check


def test_text_logits_zero_hidden_is_uniform(rng):
    head = Linear(8, vocab.VOCAB_SIZE, rng)
    head.bias.data[:] = 0
    logits = text_logits(head, Tensor(np.zeros((3, 8))))
    assert logits.shape == (3, 512)
    p = T.softmax(logits, axis=-1).data
    assert np.allclose(p, 1 / 512, rtol=0, atol=1e-15)


def test_extract_seg_row_is_bit_exact(rng):
    hidden = Tensor(rng.normal(size=(9, 4)))
    ids = [vocab.BOS, 10, 11, 12, 13, vocab.SEG, 14, 15, vocab.EOS]
    assert np.array_equal(extract_seg_embedding(hidden, ids).data, hidden.data[5])


def test_extract_seg_contract(rng):
    hidden = Tensor(rng.normal(size=(4, 4)))
    with pytest.raises(GroundingError):
        extract_seg_embedding(hidden, [1, 10, 11, 2])
    with pytest.raises(GroundingError):
        extract_seg_embedding(hidden, [1, vocab.SEG, vocab.SEG, 2])
    with pytest.raises(T.ShapeError):
        extract_seg_embedding(hidden, [1, vocab.SEG, 2])


def test_t_project_zero_and_shape(rng):
    proj = MLP2(16, 16, 8, rng)
    for name, p in proj.named_parameters():
        if name.endswith("bias"):
            p.data[:] = 0
    assert np.array_equal(t_project(proj, Tensor(np.zeros(16))).data, np.zeros(8))
    assert t_project(proj, Tensor(rng.normal(size=16))).shape == (8,)


def test_decode_mask_shape(rng):
    dec = MaskDecoder(8, (7, 7), 4, rng)
    pred = decode_mask(dec, Tensor(rng.normal(size=8)), Tensor(rng.normal(size=(49, 8))),
                       rng.uniform(size=(28, 28, 3)))
    assert pred.logits.shape == (28, 28) and pred.mask.dtype == bool
    with pytest.raises(T.ShapeError):
        decode_mask(dec, Tensor(rng.normal(size=8)), Tensor(rng.normal(size=(48, 8))))


def test_bilinear_rows_sum_to_one():
    m = bilinear_matrix(28, 7)
    assert np.allclose(m.sum(axis=1), 1.0, rtol=0, atol=1e-15)
    # an output pixel at a source center copies that source exactly
    assert np.allclose(bilinear_matrix(4, 2)[[0, 3]], [[1, 0], [0, 1]])


@settings(max_examples=50)
@given(st.integers(0, 10 ** 6), st.integers(0, 48))
def test_aligned_patch_holds_the_argmax(seed, j):
    rng = np.random.default_rng(seed)
    dec = MaskDecoder(8, (7, 7), 4, rng)
    # isolate the h . V_p[i] affinity term: no query refinement, no sub-pixel term
    for lin in (dec.affinity, dec.upscale, dec.hyper):
        lin.weight.data[:] = 0
        lin.bias.data[:] = 0
    u = rng.normal(size=8)
    u /= np.linalg.norm(u)
    vp = np.zeros((49, 8))
    vp[j] = 3.0 * u
    logits = decode_mask(dec, Tensor(2.0 * u), Tensor(vp)).logits
    r, c = np.unravel_index(np.argmax(logits), logits.shape)
    assert (r // 4, c // 4) == divmod(j, 7)


@settings(max_examples=50)
@given(st.integers(0, 10 ** 6))
def test_patch_logits_follow_patch_permutation(seed):
    rng = np.random.default_rng(seed)
    dec = MaskDecoder(6, (3, 3), 2, rng)
    h = Tensor(rng.normal(size=(1, 6)))
    vp = rng.normal(size=(1, 9, 6))
    perm = rng.permutation(9)
    a, _ = dec.patch_logits(h, Tensor(vp))
    b, _ = dec.patch_logits(h, Tensor(vp[:, perm]))
    assert np.allclose(b.data, a.data[:, perm], rtol=0, atol=1e-12)


def test_key_bias_gradient_vanishes(rng):
    dec = MaskDecoder(6, (2, 2), 2, rng, fine_dim=3)
    dec.k.bias.data[:] = rng.normal(size=6)
    h = Tensor(rng.normal(size=(2, 6)))
    vp = Tensor(rng.normal(size=(2, 4, 6)))
    gt = rng.random((2, 4, 4)) < 0.5
    loss = bce_loss(dec(h, vp), gt)
    T.backward(loss, leaves=[dec.k.bias, dec.q.bias])
    assert np.max(np.abs(dec.k.bias.grad)) < 1e-12
    assert np.max(np.abs(dec.q.bias.grad)) > 1e-6


def _grounding_model():
    cfg = ModelConfig(vision_dim=16, llm_dim=16, layers=1, pixel_dim=8, lora_r=2, lora_alpha=4.0,
                      prompt_samples=4)
    model = MultimodalModel(cfg, seed=3, moe=RouterConfig(top_k=2, capacity_factor=2.0))
    rng = np.random.default_rng(0)
    layer = model.moe_layers()[0]
    layer.router.weight.data[:] = rng.normal(0.0, 0.5, size=layer.router.weight.shape)
    for e in layer.experts:
        for ad in (e.lora1, e.lora2):
            ad.B.data[:] = rng.normal(0.0, 0.2, size=ad.B.shape)
    batch = build_batch([make_sample("grounding", s) for s in (11, 12)], cfg)
    return model, batch


def _mask_loss(model, batch):
    ml = model.mask_logits(batch, model.encode(batch))
    return T.add(bce_loss(ml, batch.gt_masks), dice_loss(ml, batch.gt_masks))


def test_mask_loss_reaches_every_component():
    with T.dtype_scope(np.float64):
        model, batch = _grounding_model()
        params = dict(model.named_parameters())
        for p in params.values():
            p.grad = None
        T.backward(_mask_loss(model, batch), leaves=list(params.values()))
        probes = ["blocks.0.ffn.router.weight",
                  "blocks.0.ffn.experts.0.lora1.B", "blocks.0.ffn.experts.1.lora1.B",
                  "blocks.0.ffn.experts.0.lora2.B", "blocks.0.ffn.experts.1.lora2.B",
                  "t_projector.fc1.weight", "pixel_encoder.embed.weight"]
        for name in probes:
            assert name in params, name
            p = params[name]
            assert np.any(p.grad != 0), name
            # central difference on the entry with the largest gradient
            idx = np.unravel_index(np.argmax(np.abs(p.grad)), p.shape)
            old = p.data[idx]
            eps = 1e-6
            p.data[idx] = old + eps
            up = float(_mask_loss(model, batch).data)
            p.data[idx] = old - eps
            down = float(_mask_loss(model, batch).data)
            p.data[idx] = old
            num = (up - down) / (2 * eps)
            assert abs(num - p.grad[idx]) <= 1e-4 * max(abs(num), 1e-8), name


@pytest.mark.parametrize("name", ["mask_decoder", "t_projector", "text_head"])
@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1))
def test_decoder_gradients(name, seed):
    assert check(name, seed) < 1e-4
