import numpy as np
import pytest
import torch
from torch.func import functional_call

from oracles import conv_stride_loop
from pmcr.encoder import Encoder, encode
from pmcr.errors import IndivisibleDims
from pmcr.linalg import grad_check


def _leaky(x, slope=0.1):
    return np.where(x > 0, x, slope * x)


def test_zero_image_zero_bias():
    enc = Encoder(seed=0)
    with torch.no_grad():
        for b in enc.biases:
            b.zero_()
    assert torch.all(encode(np.zeros((16, 16, 3)), enc) == 0)


def test_default_output_shape():
    out = Encoder(seed=1)(np.random.default_rng(0).uniform(size=(64, 64, 3)))
    assert out.shape == (32, 16, 16)


def test_batched_matches_single():
    enc = Encoder(seed=2)
    imgs = np.random.default_rng(1).uniform(size=(3, 16, 16, 3))
    batch = enc(imgs)
    for i in range(3):
        np.testing.assert_allclose(batch[i].detach(), enc(imgs[i]).detach(), atol=1e-12)


def test_toy_config_loop_oracle():
    enc = Encoder(out_dim=2, hidden=(3,), strides=(2, 1), seed=3)
    img = np.random.default_rng(2).normal(size=(8, 8, 3))
    out = enc(img).detach().numpy()
    w = [p.detach().numpy() for p in enc.weights]
    b = [p.detach().numpy() for p in enc.biases]
    h = _leaky(conv_stride_loop(img.transpose(2, 0, 1), w[0], b[0], 2, 1))
    ref = conv_stride_loop(h, w[1], b[1], 1, 1)
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_translation_covariance_interior():
    enc = Encoder(seed=4)
    rng = np.random.default_rng(3)
    img = rng.normal(size=(48, 48, 3))
    shifted = np.zeros_like(img)
    shifted[4:, 4:] = img[:-4, :-4]
    a = enc(img).detach()
    b = enc(shifted).detach()
    # stride product 4: a 4-pixel input shift moves interior outputs by one cell
    np.testing.assert_allclose(b[:, 4:10, 4:10], a[:, 3:9, 3:9], atol=1e-9)


def test_indivisible_dims():
    with pytest.raises(IndivisibleDims):
        Encoder(seed=0)(np.zeros((10, 12, 3)))


def test_deterministic_init():
    a, b = Encoder(seed=5), Encoder(seed=5)
    for p, q in zip(a.parameters(), b.parameters()):
        assert torch.equal(p, q)


@pytest.mark.parametrize("seed", range(5))
def test_grad_all_parameters(seed):
    enc = Encoder(out_dim=3, hidden=(2, 3), strides=(2, 2, 1), seed=seed)
    keys = {k: k.replace(".", "_") for k, _ in enc.named_parameters()}
    inputs = {keys[k]: v.detach() for k, v in enc.named_parameters()}
    inputs["img"] = torch.as_tensor(np.random.default_rng(seed).normal(size=(8, 8, 3)))

    def fn(img, **p):
        return functional_call(enc, {k: p[a] for k, a in keys.items()}, (img,))

    rep = grad_check(fn, inputs, max_entries=25, seed=seed)
    assert rep.passed(1e-3), rep.per_param
