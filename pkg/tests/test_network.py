from dataclasses import replace

import pytest
import torch

from digest_seg.losses import distillation_objective
from digest_seg.network import (
    MIN_ATTENTION_HIDDEN,
    CBAM3d,
    ChannelAttention3d,
    CheckpointMismatchError,
    NetworkConfig,
    build_network,
    count_parameters,
    init_student_from_teacher,
    load_checkpoint,
    save_checkpoint,
    sliding_window_predict,
    transferable_fraction,
)


def test_depth_four_shapes_on_32_cube():
    net = build_network(NetworkConfig(depth=4, base_width=8)).eval()
    with torch.no_grad():
        out = net(torch.randn(1, 4, 32, 32, 32))

    assert out.final.shape == (1, 3, 32, 32, 32)
    assert [tuple(a.shape[2:]) for a in out.aux] == [(8, 8, 8), (16, 16, 16), (32, 32, 32)]
    assert out.final is out.aux[-1]


@pytest.mark.parametrize("depth", [2, 3, 4])
def test_aux_count_is_depth_minus_one(depth):
    net = build_network(NetworkConfig(depth=depth, base_width=4)).eval()
    with torch.no_grad():
        out = net(torch.randn(1, 4, 16, 16, 16))
    assert len(out.aux) == depth - 1


def test_zero_input_gives_finite_probabilities(tiny_net_cfg):
    for use_cbam in (False, True):
        net = build_network(replace(tiny_net_cfg, use_cbam=use_cbam)).eval()
        with torch.no_grad():
            out = net(torch.zeros(1, 4, 16, 16, 16))
        for stage_map in out.aux:
            assert torch.isfinite(stage_map).all()
            assert stage_map.min() >= 0 and stage_map.max() <= 1


def test_eval_forward_is_deterministic(tiny_net_cfg):
    net = build_network(tiny_net_cfg).eval()
    x = torch.randn(1, 4, 16, 16, 16)
    with torch.no_grad():
        assert torch.equal(net(x).final, net(x).final)


def test_same_seed_gives_identical_parameters(tiny_net_cfg):
    a = build_network(tiny_net_cfg)
    b = build_network(tiny_net_cfg)
    for (name, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert torch.equal(pa, pb), name


def test_build_does_not_consume_global_rng(tiny_net_cfg):
    torch.manual_seed(123)
    expected = torch.rand(3)
    torch.manual_seed(123)
    build_network(tiny_net_cfg)
    assert torch.equal(torch.rand(3), expected)


def test_batch_samples_do_not_interact(tiny_net_cfg):
    net = build_network(replace(tiny_net_cfg, use_cbam=True)).double().eval()
    x = torch.randn(2, 4, 16, 16, 16, dtype=torch.float64)
    with torch.no_grad():
        together = net(x)
        first, second = net(x[:1]), net(x[1:])

    for z in range(len(together.aux)):
        torch.testing.assert_close(together.aux[z][:1], first.aux[z], rtol=0, atol=1e-10)
        torch.testing.assert_close(together.aux[z][1:], second.aux[z], rtol=0, atol=1e-10)


def test_attention_adds_parameters_only_to_encoders():
    teacher = build_network(NetworkConfig(use_cbam=False))
    student = build_network(NetworkConfig(use_cbam=True))

    assert count_parameters(student, "decoders") == count_parameters(teacher, "decoders")
    assert count_parameters(student, "encoders") > count_parameters(teacher, "encoders")
    assert count_parameters(student) - count_parameters(teacher) == sum(
        p.numel() for n, p in student.named_parameters() if ".attention." in n
    )


def test_teacher_and_student_outputs_share_shapes(tiny_net_cfg):
    teacher = build_network(tiny_net_cfg).eval()
    student = build_network(replace(tiny_net_cfg, use_cbam=True)).eval()
    x = torch.randn(1, 4, 16, 16, 16)
    with torch.no_grad():
        t, s = teacher(x), student(x)
    assert [a.shape for a in t.aux] == [a.shape for a in s.aux]


def test_non_divisible_axis_is_named(tiny_net_cfg):
    net = build_network(tiny_net_cfg)
    with pytest.raises(ValueError, match="axis H"):
        net(torch.zeros(1, 4, 16, 18, 16))


def test_wrong_channel_count_is_rejected(tiny_net_cfg):
    net = build_network(tiny_net_cfg)
    with pytest.raises(ValueError):
        net(torch.zeros(1, 3, 16, 16, 16))


@pytest.mark.parametrize(
    "kwargs", [{"depth": 1}, {"base_width": 1}, {"out_channels": 4}, {"norm_kind": "layer"}]
)
def test_invalid_config_is_rejected(kwargs):
    with pytest.raises(ValueError):
        build_network(NetworkConfig(**kwargs))


# ----- CBAM -----------------------------------------------------------------------


def test_cbam_keeps_zero_features_zero():
    block = CBAM3d(8)
    out = block(torch.zeros(2, 8, 4, 4, 4))
    assert out.shape == (2, 8, 4, 4, 4)
    assert torch.all(out == 0)


@pytest.mark.parametrize("shape", [(1, 2, 3, 5, 4), (2, 16, 4, 4, 4), (1, 6, 1, 7, 2)])
def test_cbam_preserves_shape(shape):
    block = CBAM3d(shape[1])
    assert block(torch.randn(*shape)).shape == shape


def test_cbam_attention_maps_lie_strictly_inside_unit_interval():
    torch.manual_seed(0)
    block = CBAM3d(8)
    for _ in range(10):
        channel, spatial = block.attention_maps(torch.randn(2, 8, 4, 4, 4))
        assert channel.shape == (2, 8, 1, 1, 1)
        assert spatial.shape == (2, 1, 4, 4, 4)
        for attention in (channel, spatial):
            assert attention.min() > 0 and attention.max() < 1


def test_cbam_needs_two_channels():
    with pytest.raises(ValueError):
        CBAM3d(1)


# ----- Student initialization -----------------------------------------------------


def test_copied_student_with_bypassed_attention_matches_teacher(tiny_net_cfg):
    teacher = build_network(tiny_net_cfg).eval()
    student = build_network(replace(tiny_net_cfg, use_cbam=True, seed=5)).eval()
    init_student_from_teacher(student, teacher)
    student.set_attention_bypass(True)

    x = torch.randn(1, 4, 16, 16, 16)
    with torch.no_grad():
        t, s = teacher(x), student(x)
    for a, b in zip(t.aux, s.aux):
        assert torch.equal(a, b)

    student.set_attention_bypass(False)
    with torch.no_grad():
        assert not torch.equal(student(x).final, t.final)


def test_copy_keeps_attention_initialization(tiny_net_cfg):
    teacher = build_network(tiny_net_cfg)
    student = build_network(replace(tiny_net_cfg, use_cbam=True, seed=5))
    before = {n: p.clone() for n, p in student.named_parameters() if ".attention." in n}

    init_student_from_teacher(student, teacher)

    for name, param in student.named_parameters():
        if name in before:
            assert torch.equal(param, before[name])


def test_copied_fraction_exceeds_ninety_percent():
    teacher = build_network(NetworkConfig())
    student = build_network(NetworkConfig(use_cbam=True))
    assert transferable_fraction(student, teacher) > 0.9


def test_mismatched_depth_lists_unmatched_names(tiny_net_cfg):
    teacher = build_network(replace(tiny_net_cfg, depth=4))
    student = build_network(replace(tiny_net_cfg, use_cbam=True))
    with pytest.raises(CheckpointMismatchError) as info:
        init_student_from_teacher(student, teacher)
    assert info.value.unmatched


def test_every_parameter_receives_gradient(sample_batch):
    image, target = sample_batch
    teacher = build_network(NetworkConfig()).eval()
    student = build_network(NetworkConfig(use_cbam=True))
    with torch.no_grad():
        teacher_out = teacher(image)

    total, _ = distillation_objective(teacher_out, student(image * 0.5), target)
    total.backward()

    params = list(student.parameters())
    nonzero = sum(1 for p in params if p.grad is not None and p.grad.norm() > 0)
    assert nonzero / len(params) >= 0.99
    assert all(p.grad is None for p in teacher.parameters())


@pytest.mark.parametrize("channels, hidden", [(4, MIN_ATTENTION_HIDDEN), (8, 2), (32, 8)])
def test_channel_attention_bottleneck_never_collapses(channels, hidden):
    attention = ChannelAttention3d(channels, reduction=4)
    assert attention.mlp[0].out_channels == hidden
    assert attention.mlp[2].in_channels == hidden


# ----- Checkpoints and inference --------------------------------------------------


def test_checkpoint_round_trip_reproduces_forward(tmp_path, tiny_net_cfg):
    net = build_network(replace(tiny_net_cfg, use_cbam=True)).eval()
    x = torch.randn(1, 4, 16, 16, 16)
    with torch.no_grad():
        before = net(x)

    save_checkpoint(tmp_path / "net.pt", net, phase="student", epoch=3, val_dice=0.5)
    loaded, meta = load_checkpoint(tmp_path / "net.pt")
    with torch.no_grad():
        after = loaded.eval()(x)

    assert meta == {"phase": "student", "epoch": 3, "val_dice": 0.5}
    assert loaded.config == net.config
    for a, b in zip(before.aux, after.aux):
        assert torch.equal(a, b)


def test_missing_checkpoint_is_reported(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "none.pt")


def test_checkpoint_version_is_checked(tmp_path, tiny_net_cfg):
    path = save_checkpoint(tmp_path / "net.pt", build_network(tiny_net_cfg), phase="teacher")
    payload = torch.load(path, weights_only=True)
    payload["format_version"] = 99
    torch.save(payload, path)
    with pytest.raises(ValueError, match="version"):
        load_checkpoint(path)


def test_sliding_window_with_full_window_equals_forward(tiny_net_cfg):
    net = build_network(tiny_net_cfg).eval()
    x = torch.randn(1, 4, 16, 16, 16)
    with torch.no_grad():
        direct = net(x).final
    assert torch.equal(sliding_window_predict(net, x, (16, 16, 16)), direct)


def test_sliding_window_covers_odd_and_small_volumes(tiny_net_cfg):
    net = build_network(tiny_net_cfg).eval()
    for shape in [(20, 24, 16), (12, 16, 16)]:
        out = sliding_window_predict(net, torch.randn(1, 4, *shape), (16, 16, 16), overlap=0.5)
        assert out.shape == (1, 3) + shape
        assert out.min() >= 0 and out.max() <= 1
