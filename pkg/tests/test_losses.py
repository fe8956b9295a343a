from dataclasses import replace

import pytest
import torch
from torch.autograd import gradcheck

from digest_seg.config import TrainConfig
from digest_seg.evaluation import dice_score
from digest_seg.losses import (
    LossReport,
    TrainingDivergenceError,
    dice_loss,
    distillation_objective,
    downsample_target,
    ds_transfer_loss,
    teacher_pretrain_loss,
    total_loss,
)
from digest_seg.network import NetworkConfig, StageOutputs, build_network
from digest_seg.optim import build_optimizer, set_learning_rate
from digest_seg.training import lr_schedule


def _map(values, shape=None):
    t = torch.tensor(values, dtype=torch.float32)
    return t.view(shape) if shape else t.view(1, 1, 1, 1, -1)


# ----- Transfer loss --------------------------------------------------------------


def test_identical_stage_maps_cost_nothing():
    maps = [torch.rand(2, 3, 2, 2, 2), torch.rand(2, 3, 4, 4, 4)]
    assert ds_transfer_loss(maps, [m.clone() for m in maps]).item() == 0.0


def test_two_voxel_hand_case():
    loss = ds_transfer_loss([_map([0.8, 0.2])], [_map([0.5, 0.5])], batch_size=1)
    assert abs(loss.item() - 0.3) < 1e-6


def test_stages_add_up():
    teacher = [torch.full((1, 3, 2, 2, 2), 0.5), torch.full((1, 3, 4, 4, 4), 0.5)]
    student = [torch.full((1, 3, 2, 2, 2), 0.4), torch.full((1, 3, 4, 4, 4), 0.75)]

    total = ds_transfer_loss(teacher, student)
    first = ds_transfer_loss(teacher[:1], student[:1])
    second = ds_transfer_loss(teacher[1:], student[1:])

    assert abs(first.item() - 0.1) < 1e-6
    assert abs(second.item() - 0.25) < 1e-6
    assert abs(total.item() - 0.35) < 1e-6


def test_transfer_loss_averages_over_batch():
    teacher = [torch.zeros(2, 1, 1, 1, 2)]
    student = [torch.tensor([0.2, 0.2, 0.4, 0.4]).view(2, 1, 1, 1, 2)]
    assert abs(ds_transfer_loss(teacher, student).item() - 0.3) < 1e-6


def test_transfer_loss_is_symmetric_and_non_negative():
    torch.manual_seed(0)
    a = [torch.rand(1, 3, 2, 2, 2) for _ in range(3)]
    b = [torch.rand(1, 3, 2, 2, 2) for _ in range(3)]
    ab, ba = ds_transfer_loss(a, b), ds_transfer_loss(b, a)
    assert ab.item() > 0
    assert torch.equal(ab, ba)


def test_transfer_gradient_reaches_only_the_student():
    teacher = [torch.rand(1, 3, 2, 2, 2, requires_grad=True)]
    student = [torch.rand(1, 3, 2, 2, 2, requires_grad=True)]
    ds_transfer_loss(teacher, student).backward()
    assert teacher[0].grad is None
    assert student[0].grad is not None and student[0].grad.abs().sum() > 0


def test_stage_mismatch_names_the_stage():
    teacher = [torch.zeros(1, 3, 2, 2, 2), torch.zeros(1, 3, 4, 4, 4)]
    student = [torch.zeros(1, 3, 2, 2, 2), torch.zeros(1, 3, 8, 8, 8)]
    with pytest.raises(ValueError, match="Stage 1"):
        ds_transfer_loss(teacher, student)
    with pytest.raises(ValueError):
        ds_transfer_loss(teacher, student[:1])


# ----- Dice loss ------------------------------------------------------------------


def test_perfect_binary_prediction_is_exactly_zero():
    target = torch.zeros(1, 3, 4, 4, 4)
    target[:, :, :2, :2, :2] = 1.0
    assert target[0, 0].sum() == 8
    assert dice_loss(target.clone(), target).item() == 0.0


def test_empty_prediction_and_target_is_zero():
    zeros = torch.zeros(1, 3, 2, 2, 2)
    assert dice_loss(zeros, zeros).item() == 0.0


def test_all_wrong_four_voxels_is_point_eight():
    pred = torch.ones(1, 3, 1, 2, 2)
    target = torch.zeros(1, 3, 1, 2, 2)
    assert abs(dice_loss(pred, target).item() - 0.8) < 1e-6


def test_strict_mode_drops_the_factor_two():
    target = torch.zeros(1, 3, 4, 4, 4)
    target[:, :, :2, :2, :2] = 1.0
    assert abs(dice_loss(target, target, strict=True).item() - 8 / 17) < 1e-6


@pytest.mark.parametrize("smoothing", [0.01, 1.0, 10.0])
def test_binary_match_is_zero_for_any_smoothing(smoothing):
    torch.manual_seed(1)
    target = (torch.rand(2, 3, 3, 3, 3) > 0.5).float()
    assert dice_loss(target, target, smoothing=smoothing).item() == 0.0


def test_dice_loss_is_bounded_and_permutation_invariant():
    torch.manual_seed(2)
    pred = torch.rand(1, 3, 4, 4, 4)
    target = (torch.rand(1, 3, 4, 4, 4) > 0.7).float()
    perm = torch.randperm(64)

    loss = dice_loss(pred, target)
    permuted = dice_loss(
        pred.flatten(2)[:, :, perm].view_as(pred), target.flatten(2)[:, :, perm].view_as(target)
    )

    assert 0.0 <= loss.item() <= 1.0
    assert abs(loss.item() - permuted.item()) < 1e-6


def test_dice_loss_domain_and_shape_errors():
    with pytest.raises(ValueError):
        dice_loss(torch.full((1, 3, 2, 2, 2), 1.5), torch.zeros(1, 3, 2, 2, 2))
    with pytest.raises(ValueError):
        dice_loss(torch.zeros(1, 3, 2, 2, 2), torch.zeros(1, 3, 2, 2, 4))


# ----- Gradient checks ------------------------------------------------------------


def test_dice_loss_gradient_matches_finite_differences():
    gen = torch.Generator().manual_seed(0)
    for _ in range(20):
        pred = (0.05 + 0.9 * torch.rand(1, 3, 2, 2, 4, generator=gen, dtype=torch.float64)).requires_grad_()
        target = (torch.rand(1, 3, 2, 2, 4, generator=gen, dtype=torch.float64) > 0.5).double()
        assert gradcheck(lambda p: dice_loss(p, target), (pred,), eps=1e-4, atol=1e-6, rtol=1e-3)


def test_transfer_loss_gradient_matches_finite_differences():
    gen = torch.Generator().manual_seed(1)
    for _ in range(20):
        teacher = [torch.rand(1, 3, 2, 2, 2, generator=gen, dtype=torch.float64) for _ in range(2)]
        student = []
        for t in teacher:
            s = torch.rand(t.shape, generator=gen, dtype=torch.float64)
            # * keep every |t - s| away from the kink at zero
            s = torch.where((t - s).abs() < 1e-2, t + 0.05, s)
            student.append(s.requires_grad_())
        assert gradcheck(
            lambda a, b: ds_transfer_loss(teacher, [a, b]), tuple(student), eps=1e-4, atol=1e-6, rtol=1e-3
        )


# ----- Teacher pretraining and total objective ------------------------------------


def test_perfect_deep_supervision_costs_nothing():
    target = torch.zeros(1, 3, 4, 4, 4)
    target[:, :, 1:3, 1:3, 1:3] = 1.0
    aux = [downsample_target(target, (2, 2, 2)), target.clone()]
    assert teacher_pretrain_loss(StageOutputs(final=aux[-1], aux=aux), target).item() == 0.0


def test_one_wrong_stage_contributes_its_weighted_share():
    target = torch.zeros(1, 3, 2, 4, 4)
    wrong = torch.ones(1, 3, 1, 2, 2)
    outputs = StageOutputs(final=target.clone(), aux=[wrong, target.clone()])

    loss = teacher_pretrain_loss(outputs, target)

    assert abs(loss.item() - 0.8 / 2) < 1e-6


def test_downsampled_targets_keep_thin_structures():
    target = torch.zeros(1, 3, 4, 4, 4)
    target[:, :, 1, 2, 3] = 1.0
    pooled = downsample_target(target, (2, 2, 2))
    assert pooled.sum() == 3
    assert pooled[0, :, 0, 1, 1].tolist() == [1.0, 1.0, 1.0]


def test_total_loss_is_unweighted_sum():
    assert total_loss(0.0, 0.0) == 0.0
    assert abs(total_loss(0.3, 0.5) - 0.8) < 1e-12


def test_report_total_matches_components(tiny_net_cfg, sample_batch):
    image, target = sample_batch
    teacher = build_network(tiny_net_cfg).eval()
    student = build_network(replace(tiny_net_cfg, use_cbam=True))
    with torch.no_grad():
        teacher_out = teacher(image)

    total, report = distillation_objective(teacher_out, student(image), target)

    assert abs(report.l_total - (report.l_ds + report.l_seg)) < 1e-6
    assert abs(total.item() - report.l_total) < 1e-6
    assert len(report.per_stage_ds) == tiny_net_cfg.depth - 1
    assert len(report.per_channel_dice) == 3
    assert abs(sum(report.per_stage_ds) - report.l_ds) < 1e-6
    assert 0.0 <= report.l_seg <= 1.0


def test_zero_transfer_weight_leaves_only_segmentation():
    aux_t = [torch.full((1, 3, 2, 2, 2), 0.9)]
    aux_s = [torch.full((1, 3, 2, 2, 2), 0.1)]
    target = torch.zeros(1, 3, 2, 2, 2)

    total, report = distillation_objective(
        StageOutputs(aux_t[-1], aux_t), StageOutputs(aux_s[-1], aux_s), target, ds_weight=0.0
    )

    assert report.l_ds == 0.0
    assert abs(total.item() - report.l_seg) < 1e-7


def test_non_finite_objective_is_divergence():
    nan_map = [torch.full((1, 3, 2, 2, 2), float("nan"))]
    ok_map = [torch.full((1, 3, 2, 2, 2), 0.5)]
    with pytest.raises(TrainingDivergenceError):
        distillation_objective(
            StageOutputs(nan_map[-1], nan_map), StageOutputs(ok_map[-1], ok_map), torch.zeros(1, 3, 2, 2, 2)
        )


def test_loss_report_rejects_non_finite_values():
    with pytest.raises(ValueError):
        LossReport(l_ds=float("inf"), l_seg=0.0, l_total=0.0)


@pytest.mark.slow
def test_teacher_overfits_single_phantom(sample_batch):
    image, target = sample_batch
    net = build_network(NetworkConfig(base_width=8, depth=4, seed=0))
    # * One schedule "epoch" per step: constant for 50 steps, then cosine to zero
    schedule = TrainConfig(epochs=200, cosine_decay_start_epoch=50, lr_initial=1e-2)
    optimizer = build_optimizer(net.parameters(), "adam", lr=schedule.lr_initial)

    losses = []
    for step in range(schedule.epochs):
        set_learning_rate(optimizer, lr_schedule(step, schedule))
        optimizer.zero_grad()
        loss = teacher_pretrain_loss(net(image), target)
        loss.backward()
        optimizer.step()
        losses.append(loss.item())

    net.eval()
    with torch.no_grad():
        final = net(image).final
    assert losses[49] < 0.5 * losses[0]
    assert dice_score(final[0, 2] > 0.5, target[0, 2]) >= 0.95
