import numpy as np
import pytest
import torch
import torch.nn as nn

from mrissl.encoders import (
    Bottleneck,
    ClassifierHead,
    ClassifierHeadSpec,
    Encoder,
    EncoderSpec,
    MLPHead,
    PredictionHeadSpec,
    ProjectionHeadSpec,
    ResidualBlockSpec,
    ShapeError,
    classify,
    encode,
    parameter_checksum,
    project,
    residual_block_forward,
)
from mrissl.metrics import cross_entropy
from oracles import batchnorm_eval, conv2d_naive


def randomize_bn(module: nn.Module, rng: np.random.Generator) -> None:
    for m in module.modules():
        if isinstance(m, nn.BatchNorm2d):
            c = m.num_features
            m.running_mean.copy_(torch.from_numpy(rng.normal(size=c)))
            m.running_var.copy_(torch.from_numpy(rng.uniform(0.5, 2.0, size=c)))
            m.weight.data.copy_(torch.from_numpy(rng.normal(1, 0.2, size=c)))
            m.bias.data.copy_(torch.from_numpy(rng.normal(0, 0.2, size=c)))


def bn_np(x, bn: nn.BatchNorm2d):
    return batchnorm_eval(x, bn.running_mean.numpy(), bn.running_var.numpy(), bn.weight.detach().numpy(),
                          bn.bias.detach().numpy(), bn.eps)


@pytest.mark.parametrize("spec", [ResidualBlockSpec(4, 2, 6, 2), ResidualBlockSpec(6, 3, 6, 1)])
def test_bottleneck_matches_naive_composition(spec):
    rng = np.random.default_rng(0)
    block = Bottleneck(spec).double().eval()
    randomize_bn(block, rng)
    x = rng.normal(size=(spec.in_channels, 7, 7))
    got = block(torch.from_numpy(x)[None])[0].detach().numpy()

    w = lambda conv: conv.weight.detach().numpy()
    h = np.maximum(bn_np(conv2d_naive(x, w(block.conv1)), block.bn1), 0)
    h = np.maximum(bn_np(conv2d_naive(h, w(block.conv2), spec.stride, 1), block.bn2), 0)
    h = bn_np(conv2d_naive(h, w(block.conv3)), block.bn3)
    if spec.identity_shortcut:
        skip = x
    else:
        skip = bn_np(conv2d_naive(x, w(block.shortcut[0]), spec.stride), block.shortcut[1])
    want = np.maximum(h + skip, 0)
    assert got.shape == want.shape
    assert np.abs(got - want).max() < 1e-6


def test_zero_residual_gives_relu_of_input():
    block = Bottleneck(ResidualBlockSpec(2, 1, 2, 1)).double().eval()
    for conv in (block.conv1, block.conv2, block.conv3):
        nn.init.zeros_(conv.weight)
    x = torch.tensor([-1.0, 2.0], dtype=torch.float64).view(1, 2, 1, 1).expand(1, 2, 3, 3).contiguous()
    out = residual_block_forward(x, block)
    assert torch.equal(out, torch.relu(x))
    assert out[0, :, 0, 0].tolist() == [0.0, 2.0]


def test_block_channel_mismatch():
    with pytest.raises(ShapeError):
        Bottleneck(ResidualBlockSpec(4, 2, 4))(torch.zeros(1, 3, 4, 4))


def test_tiny_encoder_shapes_and_purity():
    enc = Encoder(EncoderSpec.tiny()).eval()
    x = torch.randn(1, 3, 32, 32)
    assert encode(x, enc).shape == (1, 128)
    assert enc.feature_map(x).shape == (1, 128, 8, 8)
    dup = enc(torch.cat([x, x]))
    assert torch.equal(dup[0], dup[1])
    with pytest.raises(ShapeError):
        enc(torch.zeros(1, 3, 64, 64))
    with pytest.raises(ShapeError):
        enc(torch.zeros(1, 1, 32, 32))


def test_resnet50_layout_and_shapes():
    spec = EncoderSpec.resnet50()
    assert spec.feature_dim == 2048 and spec.input_resolution == 224 and spec.total_stride == 32
    assert [len(s) for s in spec.stages] == [3, 4, 6, 3]
    enc = Encoder(spec).eval()
    n_params = sum(p.numel() for p in enc.parameters())
    assert n_params == 23_508_032  # torchvision resnet50 without its fc layer
    with torch.no_grad():
        fmap = enc.feature_map(torch.randn(2, 3, 224, 224))
        assert fmap.shape == (2, 2048, 7, 7)
        assert enc(torch.randn(32, 3, 224, 224)).shape == (32, 2048)


def test_spec_roundtrip():
    for spec in (EncoderSpec.tiny(), EncoderSpec.resnet50()):
        assert EncoderSpec.from_dict(spec.to_dict()) == spec


def test_projection_head_examples():
    head = MLPHead(ProjectionHeadSpec())
    assert project(torch.randn(4, 2048), head).shape == (4, 128)
    for p in head.parameters():
        nn.init.zeros_(p)
    assert torch.equal(head(torch.randn(3, 2048)), torch.zeros(3, 128))
    with pytest.raises(ShapeError):
        head(torch.randn(2, 100))
    assert PredictionHeadSpec.for_projection(ProjectionHeadSpec()).widths == (128, 512, 128)


def test_projection_second_layer_is_affine_in_linear_region():
    torch.manual_seed(0)
    head = MLPHead(ProjectionHeadSpec((6, 8, 3))).double()
    h = torch.randn(1, 6, dtype=torch.float64)
    pre = head.net[0](h)
    # move only along directions that keep every hidden unit's sign
    d = torch.randn(1, 6, dtype=torch.float64) * 1e-4
    assert torch.equal(torch.sign(head.net[0](h + d)), torch.sign(pre))
    delta = head(h + d) - head(h)
    expected = head.net[2](torch.relu(head.net[0](h + d))) - head.net[2](torch.relu(pre))
    assert torch.allclose(delta, expected, atol=1e-12)
    w2 = head.net[2].weight
    assert torch.allclose(delta, (torch.relu(head.net[0](h + d)) - torch.relu(pre)) @ w2.T, atol=1e-12)


def test_classifier_examples():
    head = ClassifierHead(ClassifierHeadSpec(8, 17))
    nn.init.zeros_(head.fc.weight)
    p = classify(torch.randn(3, 8), head)
    assert torch.allclose(p, torch.full((3, 17), 1 / 17))
    head2 = ClassifierHead(ClassifierHeadSpec(8, 17))
    h = torch.randn(5, 8)
    assert torch.allclose(head2.probabilities(h).sum(1), torch.ones(5), atol=1e-6)
    logits = torch.zeros(1, 17)
    logits[0, 4] = 10
    assert torch.softmax(logits, -1)[0, 4] > 0.999
    shifted = head2(h) + 3.0
    assert torch.allclose(torch.softmax(shifted, -1), head2.probabilities(h), atol=1e-6)
    with pytest.raises(ShapeError):
        head2(torch.randn(2, 9))


def test_checksum_tracks_parameters():
    enc = Encoder(EncoderSpec.tiny())
    c = parameter_checksum(enc)
    assert c == parameter_checksum(enc)
    with torch.no_grad():
        enc.stem[0].weight[0, 0, 0, 0] += 1
    assert parameter_checksum(enc) != c


# -- gradient checks (float64, central differences) -------------------------------


def directional_fd_error(fn, tensors, n_dirs=3, eps=1e-6, seed=0):
    """Worst relative error between autograd and central differences along random directions."""
    gen = torch.Generator().manual_seed(seed)
    loss = fn()
    grads = torch.autograd.grad(loss, tensors)
    worst = 0.0
    for _ in range(n_dirs):
        dirs = [torch.randn(t.shape, generator=gen, dtype=t.dtype) for t in tensors]
        analytic = sum((g * d).sum() for g, d in zip(grads, dirs)).item()
        with torch.no_grad():
            for t, d in zip(tensors, dirs):
                t.add_(eps * d)
            up = fn().item()
            for t, d in zip(tensors, dirs):
                t.sub_(2 * eps * d)
            down = fn().item()
            for t, d in zip(tensors, dirs):
                t.add_(eps * d)
        numeric = (up - down) / (2 * eps)
        worst = max(worst, abs(analytic - numeric) / max(abs(numeric), abs(analytic), 1e-8))
    return worst


def test_tiny_encoder_gradients():
    torch.manual_seed(0)
    enc = Encoder(EncoderSpec.tiny()).double().train()
    x = torch.randn(2, 3, 32, 32, dtype=torch.float64, requires_grad=True)
    target = torch.randn(2, 128, dtype=torch.float64)
    fn = lambda: ((enc(x) - target) ** 2).sum()
    params = [x] + list(enc.parameters())
    # a small step keeps the probe from crossing ReLU kinks across ~10^5 units
    assert directional_fd_error(fn, params, eps=1e-7) < 1e-4


def test_projection_head_gradients():
    torch.manual_seed(1)
    head = MLPHead(ProjectionHeadSpec((16, 12, 8))).double()
    h = torch.randn(5, 16, dtype=torch.float64, requires_grad=True)
    target = torch.randn(5, 8, dtype=torch.float64)
    fn = lambda: ((head(h) - target) ** 2).sum()
    assert directional_fd_error(fn, [h] + list(head.parameters())) < 1e-4


def test_cross_entropy_gradients():
    torch.manual_seed(2)
    head = ClassifierHead(ClassifierHeadSpec(6, 5)).double()
    h = torch.randn(4, 6, dtype=torch.float64, requires_grad=True)
    y = torch.tensor([0, 3, 4, 1])
    fn = lambda: cross_entropy(head.probabilities(h), y)
    assert directional_fd_error(fn, [h] + list(head.parameters())) < 1e-4
