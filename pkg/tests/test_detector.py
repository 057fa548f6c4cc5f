import pytest
import torch

from usod.backbone import random_backbone
from usod.detector import (RAM, ChannelReducer, SaliencyDetector, count_parameters, detector_forward,
                           hybrid_loss, iou_loss, ssim)


@pytest.fixture(scope="module")
def detector18():
    torch.manual_seed(0)
    return SaliencyDetector(random_backbone("resnet18", 0)).eval()


def test_reducer_sizes_and_width():
    bb = random_backbone("resnet18", 0)
    red = ChannelReducer(bb.channels).eval()
    hs = red(bb(torch.randn(1, 3, 320, 320)))
    assert {i: tuple(h.shape[1:]) for i, h in hs.items()} == {
        1: (64, 80, 80), 2: (64, 80, 80), 3: (64, 40, 40), 4: (64, 20, 20), 5: (64, 10, 10)}
    with pytest.raises(ValueError):
        red(bb(torch.randn(1, 3, 64, 64), (3, 4, 5)))


def test_ram_probe_identical_inputs_halve():
    ram = RAM().double()
    h = torch.randn(2, 64, 9, 9, dtype=torch.float64)
    for branch in (0, 1):
        assert torch.allclose(ram.enhance(h, h, branch), h / 2, atol=1e-6)


def test_ram_zero_top_feature_uses_input_only():
    ram = RAM()
    h = torch.randn(1, 64, 6, 6)
    expected = h * torch.sigmoid(ram.att[0](h))
    assert torch.allclose(ram.enhance(h, torch.zeros_like(h), 0), expected)


def test_ram_output_size_and_errors():
    ram = RAM()
    out = ram(torch.randn(1, 64, 20, 20), torch.randn(1, 64, 10, 10), torch.randn(1, 64, 5, 5))
    assert out.shape == (1, 64, 20, 20)
    with pytest.raises(ValueError):
        ram(torch.randn(1, 32, 8, 8), torch.randn(1, 64, 8, 8), torch.randn(1, 64, 8, 8))


def test_forward_shape_and_determinism(detector18):
    x = torch.randn(2, 3, 96, 96)
    with torch.no_grad():
        a = detector_forward(detector18, x)
        b = detector_forward(detector18, x)
    assert a.prob.shape == (2, 1, 96, 96)
    assert torch.equal(a.prob, b.prob)
    assert torch.equal(a.prob, torch.sigmoid(a.logits))


def test_zero_local_branch_gives_half():
    model = SaliencyDetector(random_backbone("resnet18", 0)).eval()
    torch.nn.init.zeros_(model.ram_local.fuse.weight)
    torch.nn.init.zeros_(model.ram_local.fuse.bias)
    with torch.no_grad():
        pred = detector_forward(model, torch.randn(3, 64, 64))
    assert torch.all(pred.prob == 0.5)


def test_head_parameter_budget():
    ram = SaliencyDetector(random_backbone("resnet50", 0), use_ram=True)
    conv = SaliencyDetector(random_backbone("resnet50", 0), use_ram=False)
    ram_heads = sum(p.numel() for p in ram.head_parameters())
    conv_heads = sum(p.numel() for p in conv.head_parameters())
    # four 64->64 3x3 attention convolutions separate the two variants
    assert ram_heads - conv_heads == 4 * (64 * 64 * 9 + 64)
    assert ram_heads < 3_000_000
    assert count_parameters(ram.backbone) == 23_508_032
    assert count_parameters(ram) == 26_126_400


def test_hybrid_loss_perfect_fit():
    t = (torch.rand(2, 1, 32, 32) > 0.5).float()
    total, bce, l_ssim, l_iou = hybrid_loss(t.clone(), t)
    assert float(total) <= 1e-3
    assert float(bce) == 0.0 and abs(float(l_ssim)) < 1e-6 and float(l_iou) == 0.0


def test_hybrid_loss_worst_case():
    p, t = torch.ones(1, 1, 16, 16), torch.zeros(1, 1, 16, 16)
    total, bce, _, l_iou = hybrid_loss(p, t)
    assert float(bce) == pytest.approx(100.0)
    assert float(l_iou) == pytest.approx(1 - 1 / 257)


def test_ssim_loss_grows_with_offset():
    g = torch.Generator().manual_seed(3)
    t = torch.rand(1, 1, 32, 32, generator=g) * 0.5
    losses = [float(1 - ssim(t + c, t)) for c in (0.0, 0.05, 0.1, 0.2, 0.4)]
    assert losses[0] == pytest.approx(0.0, abs=1e-6)
    assert all(a < b for a, b in zip(losses, losses[1:]))


def test_hybrid_loss_gradient_matches_finite_differences():
    g = torch.Generator().manual_seed(11)
    logits = torch.randn(1, 1, 16, 16, generator=g, dtype=torch.float64)
    target = torch.rand(1, 1, 16, 16, generator=g, dtype=torch.float64)

    def f(z):
        return hybrid_loss(torch.sigmoid(z), target)[0]

    z = logits.clone().requires_grad_(True)
    f(z).backward()
    h = 1e-6
    for _ in range(20):
        d = torch.randn(logits.shape, generator=g, dtype=torch.float64)
        numeric = (float(f(logits + h * d)) - float(f(logits - h * d))) / (2 * h)
        analytic = float((z.grad * d).sum())
        assert abs(analytic - numeric) <= 1e-3 * max(abs(numeric), 1e-8)


def test_hybrid_loss_shapes():
    with pytest.raises(ValueError):
        hybrid_loss(torch.rand(1, 1, 4, 4), torch.rand(1, 1, 4, 5))
    total, *_ = hybrid_loss(torch.full((4, 4), 0.5), torch.full((4, 4), 0.5))
    assert torch.isfinite(total)
    assert float(iou_loss(torch.zeros(1, 1, 3, 3), torch.zeros(1, 1, 3, 3))) == 0.0
