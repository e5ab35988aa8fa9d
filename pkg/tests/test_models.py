from fractions import Fraction

import numpy as np
import pytest
import torch

from sdakd.models import (
    EPS,
    ArchitectureBlueprint,
    ScaledArchitecture,
    backbone_feature_map,
    build_discriminator,
    build_generator,
    conv_layers,
    count_parameters,
    discriminate,
    generate,
    load_network,
    read_checkpoint,
    save_checkpoint,
    scale_width,
)

BP = ArchitectureBlueprint()


def small_bp(**kw):
    base = dict(base_channel_widths=(8, 4, 4), num_residual_blocks=1, disc_channel_widths=(8, 8))
    base.update(kw)
    return ArchitectureBlueprint(**base)


@pytest.mark.parametrize(
    "widths, frac, expected",
    [
        ([64, 64, 64], Fraction(1, 2), [32, 32, 32]),
        ([64], Fraction(1), [64]),
        ([4], Fraction(1, 8), [1]),
        ([64, 128], Fraction(1, 2), [32, 64]),
    ],
)
def test_scale_width(widths, frac, expected):
    assert [scale_width(w, frac) for w in widths] == expected


def test_generator_widths_follow_fraction():
    arch = ScaledArchitecture(ArchitectureBlueprint(base_channel_widths=(64, 64, 64)), "1/2")
    assert arch.generator_widths == [32, 32, 32]
    assert ScaledArchitecture(BP, 1).generator_widths == list(BP.base_channel_widths)


def test_discriminator_widths_follow_fraction():
    bp = ArchitectureBlueprint(disc_channel_widths=(64, 128))
    d = build_discriminator(ScaledArchitecture(bp, "1/2"))
    assert [c.out_channels for _, c in conv_layers(d)] == [32, 64]
    d_full = build_discriminator(ScaledArchitecture(bp, 1))
    assert [c.out_channels for _, c in conv_layers(d_full)] == [64, 128]


@pytest.mark.parametrize("bad", [0, -0.5, 1.5, "0", "3/2"])
def test_invalid_fraction_rejected(bad):
    with pytest.raises(ValueError):
        build_generator(ScaledArchitecture(BP, bad), 0)


def test_invalid_blueprint_rejected():
    with pytest.raises(ValueError):
        ArchitectureBlueprint(upscale_factor=3)
    with pytest.raises(ValueError):
        ArchitectureBlueprint(base_channel_widths=(64, 0, 16))
    with pytest.raises(ValueError):
        ArchitectureBlueprint(base_channel_widths=(64, 32))  # 4x needs two upsampling widths


def test_two_layer_param_ratio_by_hand():
    # disc layers: 3->64 and 64->128, 3x3, with bias. At C=1/2: 3->32 and 32->64.
    bp = ArchitectureBlueprint(disc_channel_widths=(64, 128))
    teacher = conv_layers(build_discriminator(ScaledArchitecture(bp, 1)))
    student = conv_layers(build_discriminator(ScaledArchitecture(bp, "1/2")))
    hand_teacher = [64 * 3 * 9 + 64, 128 * 64 * 9 + 128]
    hand_student = [32 * 3 * 9 + 32, 64 * 32 * 9 + 64]
    assert [count_parameters(c) for _, c in teacher] == hand_teacher
    assert [count_parameters(c) for _, c in student] == hand_student
    ratios = [s / t for s, t in zip(hand_student, hand_teacher)]
    assert ratios[0] == pytest.approx(0.5)  # fixed image input: ratio C
    assert 0.25 <= ratios[1] <= 0.5


def test_parameter_count_is_pure_function_of_arch():
    arch = ScaledArchitecture(BP, "1/4")
    assert count_parameters(build_generator(arch, 0)) == count_parameters(build_generator(arch, 99))


@pytest.mark.parametrize("fracs", [("1/8", "1/4"), ("1/4", "1/2"), ("1/2", 1)])
def test_parameter_count_monotone_in_fraction(fracs):
    lo, hi = (ScaledArchitecture(BP, f) for f in fracs)
    assert count_parameters(build_generator(lo)) < count_parameters(build_generator(hi))
    assert count_parameters(build_discriminator(lo)) < count_parameters(build_discriminator(hi))


def test_deterministic_init():
    arch = ScaledArchitecture(small_bp(), 1)
    a, b, c = build_generator(arch, 5), build_generator(arch, 5), build_generator(arch, 6)
    for (_, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert torch.equal(pa, pb)
    assert not torch.equal(a.head.weight, c.head.weight)
    assert all(torch.count_nonzero(m.bias) == 0 for _, m in conv_layers(a))


def test_generate_shapes_and_range():
    g = build_generator(ScaledArchitecture(BP, "1/4"), 0)
    x = torch.randn(3, 3, 8, 8) * 5
    y = generate(g, x)
    assert y.shape == (3, 3, 32, 32)
    assert y.abs().max() <= 1


def test_generate_preserves_batch_order():
    g = build_generator(ScaledArchitecture(small_bp(), 1), 0).double()
    x = torch.randn(4, 3, 4, 4, dtype=torch.float64)
    batch = generate(g, x)
    single = torch.cat([generate(g, x[i : i + 1]) for i in range(4)])
    torch.testing.assert_close(batch, single, rtol=0, atol=1e-12)


def test_generate_bitwise_deterministic():
    x = torch.randn(2, 3, 8, 8, generator=torch.Generator().manual_seed(0))
    a = generate(build_generator(ScaledArchitecture(BP, "1/2"), 7), x)
    b = generate(build_generator(ScaledArchitecture(BP, "1/2"), 7), x)
    assert torch.equal(a, b)


def test_generate_rejects_wrong_channels():
    g = build_generator(ScaledArchitecture(small_bp(), 1), 0)
    with pytest.raises(ValueError):
        generate(g, torch.randn(1, 1, 8, 8))


def test_feature_map_channels_and_spatial():
    x = torch.randn(2, 3, 8, 8)
    t = backbone_feature_map(build_generator(ScaledArchitecture(BP, 1), 0), x)
    s = backbone_feature_map(build_generator(ScaledArchitecture(BP, "1/4"), 0), x)
    assert t.shape == (2, 64, 8, 8)
    assert s.shape == (2, 16, 8, 8)


def test_feature_map_hook_range():
    g = build_generator(ScaledArchitecture(small_bp(), 1), 0)
    x = torch.randn(1, 3, 4, 4)
    g.fm_hook_layer = 0
    torch.testing.assert_close(backbone_feature_map(g, x), g.head(x))
    g.fm_hook_layer = g.num_backbone_layers
    with pytest.raises(IndexError):
        backbone_feature_map(g, x)


def test_forward_with_features_matches_forward():
    g = build_generator(ScaledArchitecture(small_bp(), 1), 0)
    x = torch.randn(2, 3, 4, 4)
    sr, _ = g.forward_with_features(x)
    assert torch.equal(sr, g(x))


def test_discriminate_range_and_finiteness():
    d = build_discriminator(ScaledArchitecture(BP, 1), 0)
    p = discriminate(d, torch.randn(5, 3, 64, 64) * 10)
    assert p.shape == (5,)
    assert torch.isfinite(p).all()
    assert ((p >= EPS) & (p <= 1 - EPS)).all()


def test_discriminate_clamps_saturated_output():
    d = build_discriminator(ScaledArchitecture(small_bp(), 1), 0, input_size=16)
    x = torch.randn(3, 3, 16, 16)
    with torch.no_grad():
        d.head.bias.fill_(-200.0)  # raw sigmoid underflows far below EPS
    assert torch.all(discriminate(d, x) == torch.tensor(EPS))
    with torch.no_grad():
        d.head.bias.fill_(200.0)
    assert torch.all(discriminate(d, x) == torch.tensor(1 - EPS))


def test_discriminate_clamps_after_training_toward_zero():
    d = build_discriminator(ScaledArchitecture(small_bp(), 1), 0, input_size=16)
    x = torch.randn(4, 3, 16, 16)
    opt = torch.optim.SGD(d.parameters(), lr=1e4)
    # one huge step on a "these are fake" objective drives the logits to saturation
    loss = d.logits(x).mean()
    loss.backward()
    opt.step()
    with torch.no_grad():
        raw = torch.sigmoid(d.logits(x).double())
        p = discriminate(d, x)
    assert (raw < EPS).all()
    assert torch.all(p == torch.tensor(EPS))


def test_discriminate_rejects_wrong_resolution():
    d = build_discriminator(ScaledArchitecture(BP, 1), 0, input_size=64)
    with pytest.raises(ValueError):
        discriminate(d, torch.randn(1, 3, 32, 32))


@pytest.mark.parametrize("frac", [1, "1/2", "1/4", "1/8"])
def test_generator_feeds_hr_discriminator(frac):
    arch = ScaledArchitecture(BP, frac)
    sr = generate(build_generator(arch, 0), torch.randn(2, 3, 16, 16))
    assert discriminate(build_discriminator(arch, 0, input_size=64), sr).shape == (2,)


def test_checkpoint_roundtrip(tmp_path):
    g = build_generator(ScaledArchitecture(small_bp(), "1/2"), 4)
    path = save_checkpoint(tmp_path / "g.npz", g)
    meta, weights = read_checkpoint(path)
    assert meta["format"] == "sdakd-ckpt-v1"
    assert meta["channel_fraction"] == "1/2" and meta["seed"] == 4
    assert set(weights) == set(g.state_dict())
    g2 = load_network(path)
    x = torch.randn(1, 3, 4, 4)
    assert torch.equal(g(x), g2(x))


def test_checkpoint_rejects_foreign_archive(tmp_path):
    path = tmp_path / "other.npz"
    np.savez(path, w=np.zeros(3))
    with pytest.raises(ValueError):
        read_checkpoint(path)


def test_zero_tail_reproduces_bicubic_upsampling():
    g = build_generator(ScaledArchitecture(small_bp(), "1/2"), 4).double()
    torch.nn.init.zeros_(g.tail.weight)
    torch.nn.init.zeros_(g.tail.bias)
    x = torch.rand(2, 3, 8, 8, dtype=torch.float64) * 1.6 - 0.8
    up = torch.nn.functional.interpolate(x, scale_factor=4, mode="bicubic", align_corners=False)
    expected = up.clamp(-0.999, 0.999)
    assert torch.allclose(g(x), expected, atol=1e-12)


def test_without_image_skip_zero_tail_gives_zero_image():
    g = build_generator(ScaledArchitecture(small_bp(image_skip=False)), 4)
    torch.nn.init.zeros_(g.tail.weight)
    torch.nn.init.zeros_(g.tail.bias)
    assert torch.equal(g(torch.rand(1, 3, 8, 8)), torch.zeros(1, 3, 32, 32))


def test_image_skip_adds_no_parameters():
    with_skip = build_generator(ScaledArchitecture(small_bp()))
    without = build_generator(ScaledArchitecture(small_bp(image_skip=False)))
    assert count_parameters(with_skip) == count_parameters(without)
