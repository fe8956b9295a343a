import itertools

import numpy as np
import pytest

from digest_seg.data import (
    LabelFormatError,
    LabelVolume,
    MultiModalVolume,
    NestedTargets,
    PhantomSpec,
    generate_phantom,
    nested_targets,
)
from digest_seg.data.phantoms import case_seeds
from digest_seg.data.volumes import ED, ET, NCR


# ----- Phantoms ---------------------------------------------------------------------


def test_phantom_without_lesions_is_background_only():
    volume, labels = generate_phantom(PhantomSpec(num_lesions=0, noise_std=0.0, seed=4))

    assert not labels.labels.any()
    brain = volume.intensities[0] != 0
    assert brain.any()
    for channel in range(4):
        image = volume.intensities[channel]
        assert np.all(image[brain] == 100.0)
        assert np.all(image[~brain] == 0.0)


def test_phantom_same_seed_is_bitwise_identical():
    first = generate_phantom(PhantomSpec(seed=7, num_lesions=2))
    second = generate_phantom(PhantomSpec(seed=7, num_lesions=2))

    assert first[0].intensities.tobytes() == second[0].intensities.tobytes()
    assert first[1].labels.tobytes() == second[1].labels.tobytes()


def test_phantom_different_seeds_differ():
    a, _ = generate_phantom(PhantomSpec(seed=1))
    b, _ = generate_phantom(PhantomSpec(seed=2))
    assert not np.array_equal(a.intensities, b.intensities)


def test_phantom_labels_match_geometric_membership():
    radius = 5.0
    center = (19.5, 18.0, 21.0)
    spec = PhantomSpec(lesion_radius_range=(radius, radius), lesion_centers=(center,), seed=0)
    _, labels = generate_phantom(spec)

    expected = np.zeros(spec.volume_size, dtype=np.uint8)
    for idx in itertools.product(*(range(s) for s in spec.volume_size)):
        dist = np.sqrt(sum((i - c) ** 2 for i, c in zip(idx, center)))
        if dist <= spec.core_fraction * radius:
            expected[idx] = NCR
        elif dist <= spec.rim_fraction * radius:
            expected[idx] = ET
        elif dist <= radius:
            expected[idx] = ED

    for label in (NCR, ED, ET):
        assert (labels.labels == label).sum() == (expected == label).sum()
    assert np.array_equal(labels.labels, expected)


def test_phantom_core_is_visible_only_in_t1ce():
    spec = PhantomSpec(noise_std=0.0, lesion_radius_range=(8.0, 8.0), seed=5)
    volume, labels = generate_phantom(spec)
    lab = labels.labels

    t1, t1ce = volume.intensities[0], volume.intensities[1]
    assert t1[lab == NCR].mean() == t1[lab == ED].mean()
    assert t1ce[lab == ET].mean() > t1ce[lab == ED].mean() > t1ce[lab == NCR].mean()


def test_phantom_lesion_that_cannot_fit_is_rejected():
    spec = PhantomSpec(lesion_radius_range=(5.0, 5.0), lesion_centers=((2.0, 20.0, 20.0),))
    with pytest.raises(ValueError, match="cannot fit"):
        generate_phantom(spec)


@pytest.mark.parametrize(
    "kwargs",
    [
        {"lesion_radius_range": (5.0, 25.0)},
        {"lesion_radius_range": (0.0, 5.0)},
        {"noise_std": -1.0},
        {"num_lesions": -1},
        {"core_fraction": 0.7, "rim_fraction": 0.6},
    ],
)
def test_phantom_spec_rejects_invalid_parameters(kwargs):
    with pytest.raises(ValueError):
        PhantomSpec(**kwargs)


def test_phantom_nesting_holds_by_construction():
    for seed in range(5):
        _, labels = generate_phantom(PhantomSpec(seed=seed, num_lesions=2))
        targets = nested_targets(labels)
        assert not np.any(targets.et & ~targets.tc)
        assert not np.any(targets.tc & ~targets.wt)
        assert targets.wt.any()


def test_case_seeds_are_reproducible_and_distinct():
    seeds = case_seeds(11, 20)
    assert seeds == case_seeds(11, 20)
    assert len(set(seeds)) == 20


# ----- Volumes and nested targets -------------------------------------------------


def test_nested_targets_of_background_are_empty():
    targets = nested_targets(LabelVolume(np.zeros((4, 4, 4), dtype=np.uint8)))
    assert not targets.et.any() and not targets.tc.any() and not targets.wt.any()


def test_single_enhancing_voxel_is_in_all_regions():
    labels = np.zeros((4, 4, 4), dtype=np.uint8)
    labels[1, 2, 3] = ET
    targets = nested_targets(LabelVolume(labels))

    for region in (targets.et, targets.tc, targets.wt):
        assert region.sum() == 1
        assert region[1, 2, 3]


def test_nested_targets_match_per_voxel_definition():
    rng = np.random.default_rng(0)
    labels = rng.choice([0, 1, 2, 4], size=(6, 7, 5))
    targets = nested_targets(LabelVolume(labels))

    for idx in np.ndindex(labels.shape):
        value = labels[idx]
        assert targets.et[idx] == (value == 4)
        assert targets.tc[idx] == (value in (1, 4))
        assert targets.wt[idx] == (value in (1, 2, 4))


def test_nested_targets_stack_is_float_et_tc_wt():
    labels = np.array([[[0, 1], [2, 4]]], dtype=np.uint8)
    stacked = nested_targets(LabelVolume(labels)).stack()

    assert stacked.shape == (3, 1, 2, 2)
    assert stacked.dtype == np.float32
    assert stacked[:, 0, 1, 1].tolist() == [1.0, 1.0, 1.0]
    assert stacked[:, 0, 1, 0].tolist() == [0.0, 0.0, 1.0]
    assert stacked[:, 0, 0, 1].tolist() == [0.0, 1.0, 1.0]


def test_broken_nesting_is_rejected():
    et = np.array([True, False])
    tc = np.array([False, False])
    with pytest.raises(ValueError):
        NestedTargets(et=et, tc=tc, wt=tc)


def test_label_ids_outside_convention_are_rejected():
    with pytest.raises(LabelFormatError):
        LabelVolume(np.array([[[0, 3]]]))


def test_volume_requires_four_finite_channels():
    with pytest.raises(ValueError):
        MultiModalVolume(np.zeros((3, 2, 2, 2)))
    bad = np.zeros((4, 2, 2, 2))
    bad[0, 0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        MultiModalVolume(bad)


def test_volume_keeps_modality_order():
    volume = MultiModalVolume(np.zeros((4, 2, 2, 2)))
    assert volume.modality_names == ("T1", "T1ce", "T2", "FLAIR")
    assert volume.spatial_shape == (2, 2, 2)
