from dataclasses import replace

import numpy as np
import pytest
from scipy import stats

from imc_io import CANONICAL_CHANNELS, ClassLabel
from synthgen import (
    DEFAULT_BASELINES,
    ParameterError,
    TissueParams,
    generate_cohort,
    generate_tissue,
    load_ground_truth,
    save_ground_truth,
)


@pytest.fixture
def clean_tissue(small_tissue):
    return replace(small_tissue, noise_sd=0.0, fiber_intensity_sd=0.0, rrf_fraction=0.0)


def test_same_seed_gives_identical_stacks(small_tissue):
    first, _ = generate_tissue(small_tissue, "patient", seed=11)
    second, _ = generate_tissue(small_tissue, "patient", seed=11)
    for name in CANONICAL_CHANNELS:
        np.testing.assert_array_equal(first.channels[name], second.channels[name])


def test_different_seeds_give_different_geometry(small_tissue):
    _, a = generate_tissue(small_tissue, "control", seed=1)
    _, b = generate_tissue(small_tissue, "control", seed=2)
    assert not np.array_equal(a.fiber_label_mask, b.fiber_label_mask)


def test_control_subjects_carry_no_phenotype(small_tissue):
    params = replace(small_tissue, deficient_fiber_fraction=1.0, rrf_fraction=1.0)
    stack, truth = generate_tissue(params, ClassLabel.CONTROL, seed=3)
    assert stack.class_label is ClassLabel.CONTROL
    assert truth.deficient_fiber_ids == frozenset()
    assert truth.rrf_fiber_ids == frozenset()


def test_fully_deficient_patient_marks_every_fibre(small_tissue):
    _, truth = generate_tissue(replace(small_tissue, deficient_fiber_fraction=1.0), "patient", seed=3)
    assert truth.deficient_fiber_ids == truth.fiber_ids


def test_image_too_small_for_the_fibre_count_is_rejected():
    params = TissueParams(image_size=64, fiber_count=30, mean_fiber_diameter=80.0)
    with pytest.raises(ParameterError, match="cannot host"):
        generate_tissue(params, "control", seed=0)


def test_invalid_parameters_are_rejected():
    with pytest.raises(ParameterError):
        TissueParams(deficiency_factor=0.0)
    with pytest.raises(ParameterError):
        TissueParams(hole_fraction=1.5)
    with pytest.raises(ParameterError, match="Unknown tissue parameters"):
        TissueParams.from_dict({"fibre_count": 3})


def test_membrane_channel_is_bright_only_on_the_membrane(clean_tissue):
    stack, truth = generate_tissue(clean_tissue, "control", seed=5)
    np.testing.assert_array_equal(stack.channels["Dystrophin"] > 0, truth.membrane_mask)
    assert not stack.channels["VDAC1"][truth.membrane_mask].any()
    assert not stack.channels["VDAC1"][truth.hole_mask].any()


def test_deficient_channels_are_scaled_inside_deficient_fibres(clean_tissue):
    params = replace(clean_tissue, deficient_fiber_fraction=1.0, deficiency_factor=0.3)
    stack, truth = generate_tissue(params, "patient", seed=5)
    interior = (truth.fiber_label_mask > 0) & ~truth.membrane_mask

    ndufb8 = stack.channels["NDUFB8"][interior].astype(float).sum() / DEFAULT_BASELINES["NDUFB8"]
    vdac1 = stack.channels["VDAC1"][interior].astype(float).sum() / DEFAULT_BASELINES["VDAC1"]
    assert ndufb8 / vdac1 == pytest.approx(0.3, rel=0.01)


def test_subsarcolemmal_band_is_brighter_than_the_core(clean_tissue):
    stack, truth = generate_tissue(clean_tissue, "control", seed=8)
    core = (truth.fiber_label_mask > 0) & ~truth.membrane_mask & ~truth.subsarcolemmal_mask
    vdac1 = stack.channels["VDAC1"]
    assert vdac1[truth.subsarcolemmal_mask].mean() > vdac1[core].mean()


def test_cohort_assigns_ordered_subject_ids(small_tissue):
    cohort = generate_cohort(small_tissue, n_control=2, n_patient=3, seed=0)
    assert [stack.subject_id for stack, _ in cohort] == ["C01", "C02", "P01", "P02", "P03"]
    assert [stack.class_label for stack, _ in cohort].count(ClassLabel.PATIENT) == 3


def test_ground_truth_survives_disk(tmp_path, small_tissue):
    _, truth = generate_tissue(small_tissue, "patient", seed=4)
    save_ground_truth(truth, small_tissue, tmp_path, "P01")

    loaded, params = load_ground_truth(tmp_path, "P01")

    np.testing.assert_array_equal(loaded.fiber_label_mask, truth.fiber_label_mask)
    np.testing.assert_array_equal(loaded.membrane_mask, truth.membrane_mask)
    assert loaded.deficient_fiber_ids == truth.deficient_fiber_ids
    assert params == small_tissue


def test_deficient_fibres_are_separable_under_noise():
    params = TissueParams(image_size=256, fiber_count=30, mean_fiber_diameter=40.0)
    stack, truth = generate_tissue(params, "patient", seed=21)
    interior = (truth.fiber_label_mask > 0) & ~truth.membrane_mask

    def fibre_ratio(fiber_id):
        pixels = interior & (truth.fiber_label_mask == fiber_id)
        return stack.channels["NDUFB8"][pixels].mean() / stack.channels["VDAC1"][pixels].mean()

    deficient = [fibre_ratio(i) for i in truth.deficient_fiber_ids]
    normal = [fibre_ratio(i) for i in truth.fiber_ids - truth.deficient_fiber_ids]
    assert stats.mannwhitneyu(deficient, normal, alternative="less").pvalue < 0.01


def test_membrane_widens_with_every_thickness_step():
    params = TissueParams(image_size=160, fiber_count=12, mean_fiber_diameter=40.0, noise_sd=0.0, hole_fraction=0.0)
    counts = []
    for thickness in range(1, 7):
        _, truth = generate_tissue(replace(params, membrane_thickness=thickness), "control", seed=5)
        counts.append(int(truth.membrane_mask.sum()))

    assert all(wider > narrower for narrower, wider in zip(counts, counts[1:]))
    assert counts[3] / counts[1] == pytest.approx(2.0, rel=0.2)


def test_hole_pixels_stay_within_three_noise_sd():
    params = TissueParams(image_size=128, fiber_count=10, mean_fiber_diameter=30.0, noise_sd=50.0, hole_fraction=0.2)
    stack, truth = generate_tissue(params, "patient", seed=9)

    assert truth.hole_mask.any()
    for name in stack.channel_names:
        assert stack.channels[name][truth.hole_mask].max() <= 3 * params.noise_sd
