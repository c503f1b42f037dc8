from __future__ import annotations

import math

import numpy as np
import pytest
import torch

from vtbr.captions import PAD_ID
from vtbr.errors import CaptionLengthError, DimensionError
from vtbr.model import (
    BACKWARD,
    FORWARD,
    PARAM_GROUPS,
    ModelConfig,
    Projection,
    VTBRModel,
    decode_direction,
    global_pool,
    pad_batch,
    project,
    reverse_captions,
    zero_output_layer,
)

TINY = dict(vocab_size=12, image_height=8, image_width=4, stem_channels=3, stage_channels=(4, 4),
            stage_strides=(2, 1), hidden=8, layers=1, heads=2, ff_mult=2, max_len=12)


def tiny_model(seed=0, **kw) -> VTBRModel:
    torch.manual_seed(seed)
    return VTBRModel(ModelConfig(**{**TINY, **kw}))


def random_ids(rng, batch, lengths, vocab=12):
    seqs = [[0] + list(rng.integers(4, vocab, size=k)) + [1] for k in lengths]
    return pad_batch(seqs)


# backbone oracle ---------------------------------------------------------


def _conv(x, w, stride, pad):
    c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.zeros((c, h + 2 * pad, wd + 2 * pad))
    xp[:, pad:pad + h, pad:pad + wd] = x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((o, ho, wo))
    for oc in range(o):
        for i in range(ho):
            for j in range(wo):
                patch = xp[:, i * stride:i * stride + kh, j * stride:j * stride + kw]
                out[oc, i, j] = np.sum(patch * w[oc])
    return out


def _bn(x, bn):
    g = bn.weight.detach().double().numpy()
    b = bn.bias.detach().double().numpy()
    m = bn.running_mean.double().numpy()
    v = bn.running_var.double().numpy()
    return (x - m[:, None, None]) / np.sqrt(v[:, None, None] + bn.eps) * g[:, None, None] + b[:, None, None]


def _np(t):
    return t.detach().double().numpy()


def naive_backbone(backbone, image):
    conv, bn = backbone.stem[0], backbone.stem[1]
    x = np.maximum(_bn(_conv(image, _np(conv.weight), 1, 1), bn), 0)
    for block in backbone.stages:
        s = block.conv1.stride[0]
        out = np.maximum(_bn(_conv(x, _np(block.conv1.weight), s, 1), block.bn1), 0)
        out = _bn(_conv(out, _np(block.conv2.weight), 1, 1), block.bn2)
        if block.shortcut is None:
            skip = x
        else:
            skip = _bn(_conv(x, _np(block.shortcut[0].weight), s, 0), block.shortcut[1])
        x = np.maximum(out + skip, 0)
    return x


def test_backbone_matches_naive_convolution():
    torch.manual_seed(0)
    cfg = ModelConfig(vocab_size=8, image_height=16, image_width=8, stem_channels=4,
                      stage_channels=(4, 6, 8), stage_strides=(2, 2, 1), hidden=8, heads=2)
    model = VTBRModel(cfg)
    gen = torch.Generator().manual_seed(1)
    for m in model.visual.modules():
        if isinstance(m, torch.nn.BatchNorm2d):
            m.running_mean.copy_(torch.randn(m.num_features, generator=gen) * 0.1)
            m.running_var.copy_(torch.rand(m.num_features, generator=gen) + 0.5)
            m.weight.data.copy_(torch.rand(m.num_features, generator=gen) + 0.5)
            m.bias.data.copy_(torch.randn(m.num_features, generator=gen) * 0.1)
    model.eval()
    img = torch.rand(1, 3, 16, 8, generator=gen)
    got = _np(model.visual(img)[0])
    ref = naive_backbone(model.visual, img[0].double().numpy())
    assert got.shape == (8, 4, 2)
    assert np.max(np.abs(got - ref) / (np.abs(ref) + 1e-3)) < 1e-5


def test_backbone_zero_image_finite_and_deterministic():
    model = tiny_model().eval()
    z = torch.zeros(2, 3, 8, 4)
    out = model.visual(z)
    assert torch.isfinite(out).all()
    assert torch.equal(out[0], out[1])


def test_backbone_rejects_bad_shape():
    with pytest.raises(DimensionError):
        tiny_model().visual(torch.zeros(1, 3, 9, 4))


def test_projection_identity_and_zero():
    cfg = ModelConfig(**{**TINY, "stage_channels": (4, 8)})
    proj = Projection(cfg)
    feats = torch.randn(2, 8, 4, 2)
    with torch.no_grad():
        proj.linear.weight.copy_(torch.eye(8))
        proj.linear.bias.zero_()
    assert torch.allclose(proj(feats), feats.flatten(2).transpose(1, 2))
    with torch.no_grad():
        proj.linear.weight.zero_()
    assert torch.count_nonzero(proj(feats)) == 0


def test_projection_matches_matmul():
    model = tiny_model()
    feats = torch.randn(3, 4, 4, 2)
    mem = project(feats, model)
    w, b = _np(model.proj.linear.weight), _np(model.proj.linear.bias)
    flat = _np(feats).reshape(3, 4, 8).transpose(0, 2, 1)
    assert np.allclose(_np(mem), flat @ w.T + b, atol=1e-6)


def test_global_pool():
    assert torch.allclose(global_pool(torch.full((1, 5, 3, 2), 2.5)), torch.full((1, 5), 2.5))
    x = torch.randn(2, 5, 1, 1)
    assert torch.equal(global_pool(x), x[:, :, 0, 0])
    x = torch.randn(2, 5, 3, 4, dtype=torch.float64)
    ref = np.array([[x[b, c].numpy().sum() / 12 for c in range(5)] for b in range(2)])
    assert np.allclose(global_pool(x).numpy(), ref, atol=1e-7)


def test_reverse_captions_keeps_padding():
    ids = torch.tensor([[0, 5, 6, 1, PAD_ID], [0, 7, 1, PAD_ID, PAD_ID]])
    assert reverse_captions(ids).tolist() == [[1, 6, 5, 0, PAD_ID], [1, 7, 0, PAD_ID, PAD_ID]]


# decoder properties -------------------------------------------------------


@pytest.mark.parametrize("direction", [FORWARD, BACKWARD])
def test_causality(direction):
    model = tiny_model().eval()
    mem = torch.randn(1, 8, 8)
    ids = torch.tensor([[0, 4, 5, 6, 7, 8, 1]])
    base = decode_direction(mem, ids, direction, model)
    # in the reading order, perturb position j and check rows < j
    ordered = ids if direction == FORWARD else reverse_captions(ids)
    for j in range(1, ids.shape[1] - 1):
        pert = ordered.clone()
        pert[0, j] = 4 + (int(pert[0, j]) - 3) % 8
        back = pert if direction == FORWARD else reverse_captions(pert)
        out = decode_direction(mem, back, direction, model)
        assert torch.equal(out[0, :j], base[0, :j])
        assert not torch.allclose(out[0, j:], base[0, j:])


def test_memory_is_live_at_every_position():
    model = tiny_model().eval()
    mem = torch.randn(1, 8, 8)
    ids = torch.tensor([[0, 4, 5, 6, 1]])
    a = decode_direction(mem, ids, FORWARD, model)
    b = decode_direction(mem + torch.randn_like(mem), ids, FORWARD, model)
    assert ((a - b).abs().amax(-1) > 1e-6).all()


def test_palindrome_symmetry_with_shared_weights():
    model = tiny_model().eval()
    model.bwd.load_state_dict(model.fwd.state_dict())
    mem = torch.randn(1, 8, 8)
    pal = torch.tensor([[0, 4, 5, 6, 5, 4, 0]])
    # a palindrome must also read the same at its ends, so use SOS at both
    f = decode_direction(mem, pal, FORWARD, model)
    b = decode_direction(mem, pal, BACKWARD, model)
    assert torch.equal(f, b)
    # non-palindrome: backward equals forward on the reversed caption
    ids2 = torch.tensor([[0, 4, 5, 7, 1]])
    assert torch.equal(decode_direction(mem, ids2, BACKWARD, model),
                       decode_direction(mem, reverse_captions(ids2), FORWARD, model))


def test_caption_too_long():
    model = tiny_model()
    with pytest.raises(CaptionLengthError):
        decode_direction(torch.randn(1, 8, 8), torch.zeros(1, 13, dtype=torch.long), FORWARD, model)


# loss --------------------------------------------------------------------


@pytest.mark.parametrize("k", [1, 5, 9])
def test_uniform_logits_closed_form(k):
    model = tiny_model().double()
    zero_output_layer(model)
    rng = np.random.default_rng(k)
    ids = random_ids(rng, 3, [k] * 3)
    with torch.no_grad():
        out = model(torch.rand(3, 3, 8, 4, dtype=torch.float64), ids)
    assert abs(out.total.item() - 2 * (k + 1) * math.log(12)) < 1e-6
    assert abs(out.forward.item() - out.backward.item()) < 1e-6


def test_loss_example_value():
    model = tiny_model()
    zero_output_layer(model)
    ids = random_ids(np.random.default_rng(0), 1, [5])
    with torch.no_grad():
        total = model(torch.rand(1, 3, 8, 4), ids).total.item()
    assert total == pytest.approx(29.8181, abs=1e-3)


def test_loss_batch_order_invariant():
    model = tiny_model().eval()
    rng = np.random.default_rng(3)
    ids = random_ids(rng, 4, [2, 5, 3, 4])
    imgs = torch.rand(4, 3, 8, 4)
    perm = torch.tensor([2, 0, 3, 1])
    a = model(imgs, ids).total
    b = model(imgs[perm], ids[perm]).total
    assert torch.allclose(a, b, atol=1e-6)


def test_padding_does_not_change_loss():
    model = tiny_model().eval()
    ids = torch.tensor([[0, 4, 5, 1]])
    padded = torch.tensor([[0, 4, 5, 1, PAD_ID, PAD_ID]])
    img = torch.rand(1, 3, 8, 4)
    assert torch.allclose(model(img, ids).total, model(img, padded).total, atol=1e-6)


def finite_difference_check(trials=100, seed=0, eps=1e-4):
    """Max relative error between autograd and central differences over random parameter entries."""
    torch.manual_seed(seed)
    model = VTBRModel(ModelConfig(**TINY)).double()
    model.train()
    rng = np.random.default_rng(seed)
    ids = random_ids(rng, 2, [3, 5])
    imgs = torch.rand(2, 3, 8, 4, dtype=torch.float64, generator=torch.Generator().manual_seed(seed))

    def loss():
        return model(imgs, ids).total

    model.zero_grad()
    loss().backward()
    groups = model.named_groups()
    worst, per_group = 0.0, {g: 0 for g in PARAM_GROUPS}
    for t in range(trials):
        group = PARAM_GROUPS[t % len(PARAM_GROUPS)]
        name, p = groups[group][rng.integers(len(groups[group]))]
        idx = tuple(int(rng.integers(s)) for s in p.shape)
        analytic = float(p.grad[idx])
        with torch.no_grad():
            orig = float(p[idx])
            p[idx] = orig + eps
            up = float(loss())
            p[idx] = orig - eps
            down = float(loss())
            p[idx] = orig
        numeric = (up - down) / (2 * eps)
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-6)
        worst = max(worst, rel)
        per_group[group] += 1
    return worst, per_group


def test_gradients_match_finite_differences():
    worst, per_group = finite_difference_check(trials=100)
    assert all(v >= 20 for v in per_group.values())
    assert worst <= 1e-4, worst


def test_parameter_groups_partition():
    model = tiny_model()
    groups = model.named_groups()
    assert set(groups) == set(PARAM_GROUPS)
    total = sum(len(v) for v in groups.values())
    assert total == len(list(model.parameters()))
    # output layer is tied to the shared embedding table
    assert not any("out_weight" in n for n, _ in model.named_parameters())
