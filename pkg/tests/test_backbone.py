import math

import numpy as np
import pytest
import torch

from protolang.backbone import (Augmenter, Backbone, BackboneConfig, ClassifierHead, PretrainSchedule, encode,
                                pretrain, pretrain_loss, to_tensor)
from protolang.data import LabeledImageDataset
from protolang.errors import ConfigurationError, ShapeError

from conftest import toy_dataset


def test_conv4_embedding_dim_by_pooling_arithmetic():
    side = 64
    for _ in range(4):
        side = side // 2
    assert side == 4
    assert BackboneConfig().embedding_dim == 64 * side * side == 1024
    torch.manual_seed(0)
    out = Backbone(BackboneConfig()).eval()(torch.rand(2, 3, 64, 64))
    assert out.shape == (2, 1024)


def test_conv4_structure():
    net = Backbone(BackboneConfig(resolution=16)).net.encoder
    assert len(net) == 4
    for block in net:
        kinds = [type(m).__name__ for m in block]
        assert kinds == ["Conv2d", "BatchNorm2d", "ReLU", "MaxPool2d"]
        assert block[0].out_channels == 64 and block[0].kernel_size == (3, 3)


def test_identical_images_identical_embeddings():
    bb = Backbone(BackboneConfig(resolution=16))
    img = np.random.default_rng(0).random((1, 16, 16, 3))
    emb = encode(np.concatenate([img, img]), bb)
    assert torch.equal(emb[0], emb[1])
    assert torch.equal(encode(img, bb), encode(img, bb))


def test_zero_image_finite():
    emb = encode(np.zeros((1, 16, 16, 3)), Backbone(BackboneConfig(resolution=16)))
    assert torch.isfinite(emb).all()


def test_wrong_resolution_is_shape_error():
    bb = Backbone(BackboneConfig(resolution=16))
    with pytest.raises(ShapeError):
        bb(torch.zeros(1, 3, 32, 32))
    with pytest.raises(ShapeError):
        bb(torch.zeros(3, 16, 16))


def test_unknown_architecture():
    with pytest.raises(ConfigurationError):
        BackboneConfig("vgg")


@pytest.mark.parametrize("arch,dim", [("resnet12", 640), ("resnet18", 512)])
def test_residual_backbones(arch, dim):
    bb = Backbone(BackboneConfig(arch, resolution=32)).eval()
    assert bb(torch.rand(2, 3, 32, 32)).shape == (2, dim)


def test_lr_schedule():
    s = PretrainSchedule()
    assert s.lr_at(0) == pytest.approx(0.05)
    assert s.lr_at(59) == pytest.approx(0.05)
    assert s.lr_at(60) == pytest.approx(0.005)
    assert s.lr_at(80) == pytest.approx(0.0005)


def test_initial_loss_near_uniform():
    torch.manual_seed(0)
    ds = toy_dataset(10, 8, res=16)
    bb = Backbone(BackboneConfig(resolution=16)).eval()
    head = ClassifierHead(bb.embedding_dim, 10)
    with torch.no_grad():
        head.fc.weight.mul_(0.01)
        loss = pretrain_loss(head(encode(ds.take(np.arange(len(ds))), bb)), torch.as_tensor(ds.labels))
    assert abs(loss.item() - math.log(10)) <= 0.05 * math.log(10)


def test_pretrain_separable_toy_reaches_low_loss():
    # two classes: dark vs bright images; a logistic fit separates them exactly
    rng = np.random.default_rng(0)
    dark = rng.uniform(0.0, 0.2, (16, 16, 16, 3))
    bright = rng.uniform(0.8, 1.0, (16, 16, 16, 3))
    ds = LabeledImageDataset(np.concatenate([dark, bright]), np.repeat([0, 1], 16), {0: "base", 1: "base"})
    torch.manual_seed(0)
    bb = Backbone(BackboneConfig(resolution=16))
    head = ClassifierHead(bb.embedding_dim, 2)
    curve = pretrain(bb, head, ds, PretrainSchedule(epochs=100, batch_size=32, augment=False), seed=0, log_every=0)
    assert curve[-1] < curve[0]
    assert min(curve) < 0.1


def test_pretrain_rejects_non_base():
    ds = toy_dataset(2, 4, splits={0: "base", 1: "novel"})
    with pytest.raises(ConfigurationError):
        pretrain(Backbone(BackboneConfig(resolution=16)), ClassifierHead(1, 2), ds)


def test_pretrain_loss_finite_difference():
    torch.manual_seed(0)
    v = torch.randn(6, 5, dtype=torch.float64)
    y = torch.tensor([0, 1, 2, 0, 1, 2])
    head = ClassifierHead(5, 3).double()
    loss = pretrain_loss(head(v), y)
    loss.backward()
    analytic = torch.cat([head.fc.weight.grad.flatten(), head.fc.bias.grad])
    params = [head.fc.weight, head.fc.bias]
    numeric = []
    h = 1e-6
    with torch.no_grad():
        for p in params:
            flat = p.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + h
                lp = pretrain_loss(head(v), y).item()
                flat[i] = old - h
                lm = pretrain_loss(head(v), y).item()
                flat[i] = old
                numeric.append((lp - lm) / (2 * h))
    numeric = torch.tensor(numeric, dtype=torch.float64)
    rel = (analytic - numeric).norm() / (analytic.norm() + numeric.norm())
    assert rel <= 1e-4


def test_pretrain_loss_shift_invariant():
    torch.manual_seed(1)
    logits = torch.randn(7, 4, dtype=torch.float64)
    y = torch.randint(0, 4, (7,))
    assert torch.allclose(pretrain_loss(logits, y), pretrain_loss(logits + 123.4, y), atol=1e-12)


def test_augmenter_own_stream_and_shape():
    x = torch.rand(4, 3, 16, 16)
    torch.manual_seed(5)
    before = torch.random.get_rng_state()
    a = Augmenter(3)(x)
    assert torch.equal(torch.random.get_rng_state(), before)
    assert a.shape == x.shape and a.min() >= 0 and a.max() <= 1
    assert torch.equal(Augmenter(3)(x), a)


def test_to_tensor_layout():
    arr = np.arange(2 * 4 * 5 * 3, dtype=np.float32).reshape(2, 4, 5, 3)
    t = to_tensor(arr)
    assert t.shape == (2, 3, 4, 5)
    assert t[1, 2, 3, 4] == arr[1, 3, 4, 2]
