import itertools
import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rtwin.errors import MissingFileError, ShapeMismatchError, ValidationError
from rtwin.geometry import surface
from rtwin.grid_core import GridShape
from rtwin.phantom import ShiftEvent, apply_shift
from rtwin.surrogate import (
    DropoutMask,
    FeatureConfig,
    FeatureStack,
    KernelSurrogate,
    ParamVector,
    TrainConfig,
    featurize,
    grad_check,
    init_params,
    load_params,
    loss_and_gradient,
    masked_l1,
    preactivation,
    predict,
    predict_ensemble,
    save_params,
    train,
)
from conftest import random_record

FALLOFF = FeatureConfig.from_names(("falloff:9",))


@pytest.fixture(scope="module")
def falloff_stack(desk_patient):
    return featurize(desk_patient, FALLOFF)


def unit_params(dropout_rate=0.1):
    return ParamVector(np.ones(1), np.ones(1), dropout_rate, ("falloff:9",))


def test_unit_weights_reproduce_the_oracle_exactly(desk_patient, falloff_stack):
    prediction = predict(unit_params(), falloff_stack)
    assert prediction == desk_patient.reference_dose
    assert masked_l1(prediction, desk_patient.reference_dose, desk_patient.feasible) == 0.0


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-3.0, 3.0), min_size=3, max_size=3), st.integers(0, 1000))
def test_predictions_are_never_negative(desk_patient, weights, seed):
    cfg = FeatureConfig(distance_rois=("PTV",), smoothing_scales=(), falloff_widths=(9.0,), include_bias=True)
    stack = featurize(desk_patient, cfg)
    params = ParamVector(np.ones(3), np.array(weights), 0.3, cfg.names)
    assert np.all(predict(params, stack).values >= 0)
    assert np.all(predict(params, stack, seed).values >= 0)


def test_zero_dropout_pass_equals_deterministic_pass(falloff_stack):
    params = unit_params(dropout_rate=0.0)
    assert predict(params, falloff_stack, 17) == predict(params, falloff_stack)


def test_dropout_uses_inverted_scaling(falloff_stack):
    params = ParamVector(np.ones(1), np.ones(1), 0.5)
    mask = DropoutMask(3, np.array([True]))
    np.testing.assert_allclose(
        predict(params, falloff_stack, mask).values, 2.0 * falloff_stack.values[0]
    )


def test_ensemble_is_reproducible_and_thread_independent(desk_patient):
    cfg = FeatureConfig(smoothing_scales=(), falloff_widths=(6.0, 9.0, 12.0), include_bias=False)
    stack = featurize(desk_patient, cfg)
    params = init_params(cfg.names, dropout_rate=0.3, seed=2, low=1.0, high=2.0)
    seeds = list(range(10))
    serial = predict_ensemble(params, stack, seeds, threads=1)
    parallel = predict_ensemble(params, stack, seeds, threads=4)
    np.testing.assert_array_equal(serial.values, parallel.values)
    assert serial.seeds == tuple(seeds)
    assert predict(params, stack, 4) == predict(params, stack, 4)


def test_duplicate_ensemble_seeds_are_rejected(falloff_stack):
    with pytest.raises(ValidationError):
        predict_ensemble(unit_params(), falloff_stack, [1, 2, 1])


def test_training_from_the_true_weight_stays_put(desk_patient):
    trained, losses = train(unit_params(), [desk_patient], TrainConfig(learning_rate=1e-3))
    assert losses[0] < 1e-6
    np.testing.assert_array_equal(trained.decoder, [1.0])


def test_training_reduces_the_loss(desk_patient):
    start = ParamVector(np.ones(1), np.array([1.5]), 0.1, ("falloff:9",))
    cfg = TrainConfig(learning_rate=2e-4, iterations=2000, tolerance=0.0)
    trained, losses = train(start, [desk_patient], cfg)
    assert len(losses) == cfg.iterations + 1
    assert losses[-1] < 0.1 * losses[0]
    assert abs(trained.decoder[0] - 1.0) < 0.1
    np.testing.assert_array_equal(trained.encoder, start.encoder)


GRAD_FEATURES = FeatureConfig(distance_rois=("PTV", "SpinalCord"), smoothing_scales=(3.0,), include_bias=True)


@pytest.mark.parametrize("seed", range(50))
def test_analytic_gradient_matches_finite_differences(desk_patient, seed):
    rng = np.random.default_rng(seed)
    # sdf, sdf, ct, target, bias: positive activations kept below the oracle dose, away from kinks
    low = np.array([-0.1, -0.1, -0.5, 0.0, 1.5])
    high = np.array([0.1, 0.1, 0.5, 0.5, 2.5])
    params = ParamVector(rng.uniform(0.8, 1.2, 5), rng.uniform(low, high), 0.1, GRAD_FEATURES.names)
    assert grad_check(params, desk_patient, 1e-6, GRAD_FEATURES) < 1e-4


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_gradient_ignores_everything_outside_the_feasible_mask(seed):
    shape = GridShape(8, 8, 8, (3.0, 3.0, 3.0))
    record = random_record(shape, seed=seed % 1000)
    cfg = FeatureConfig(distance_rois=("PTV", "SpinalCord"), smoothing_scales=(3.0,), include_bias=True)
    stack = featurize(record, cfg)
    rng = np.random.default_rng(seed)
    params = ParamVector(rng.uniform(0.5, 1.5, cfg.n_features), rng.normal(size=cfg.n_features), 0.1, cfg.names)

    outside = ~record.feasible.membership
    reference = record.require_reference().values.copy()
    reference[outside] = rng.uniform(0, 100, outside.sum())
    values = stack.values.copy()
    values[:, outside] = rng.normal(size=(cfg.n_features, outside.sum()))
    changed_record = record.replace(reference_dose=record.reference_dose.with_values(reference))
    changed_stack = FeatureStack(shape, stack.names, values)

    loss, gradient = loss_and_gradient(params, record, stack)
    changed_loss, changed_gradient = loss_and_gradient(params, changed_record, changed_stack)
    assert changed_loss == loss
    np.testing.assert_array_equal(changed_gradient, gradient)


def test_param_file_round_trip(tmp_path):
    params = init_params(("falloff:9", "drift"), dropout_rate=0.3, seed=9, low=1.0, high=2.0)
    path = str(tmp_path / "params.csv")
    save_params(params, path)
    assert load_params(path) == params


def test_param_file_errors(tmp_path):
    with pytest.raises(MissingFileError):
        load_params(str(tmp_path / "absent.csv"))
    path = tmp_path / "params.csv"
    save_params(unit_params(), str(path))
    path.write_text(path.read_text().replace("format_version,0,1.0", "format_version,0,7.0"))
    with pytest.raises(ValidationError):
        load_params(str(path))


def test_param_vector_validation():
    with pytest.raises(ValidationError):
        ParamVector(np.ones(2), np.ones(3))
    with pytest.raises(ValidationError):
        ParamVector(np.ones(1), np.ones(1), dropout_rate=1.0)
    with pytest.raises(ValidationError):
        init_params(("a",), low=2.0, high=1.0)


def test_feature_names_and_stack_layout(desk_patient):
    cfg = FeatureConfig(
        distance_rois=("PTV",),
        smoothing_scales=(3.0,),
        falloff_widths=(9.0,),
        include_drift=True,
        include_bias=True,
    )
    assert cfg.names == ("sdf:PTV", "ct:3", "target:3", "falloff:9", "drift", "bias")
    stack = featurize(desk_patient, cfg)
    assert stack.values.shape == (6, 16, 16, 16)
    assert np.all(stack.values[4] == 0)
    assert np.all(stack.values[5] == 1)


def test_drift_channel_marks_the_moved_target(desk_patient):
    shifted = apply_shift(desk_patient, ShiftEvent(1, (6.0, 0.0, 0.0)))
    cfg = FeatureConfig(smoothing_scales=(), falloff_widths=(9.0,), include_drift=True, include_bias=False)
    drift = featurize(shifted, cfg, reference=desk_patient).values[1]
    moved = shifted.rois["PTV"].membership ^ desk_patient.rois["PTV"].membership
    np.testing.assert_array_equal(drift, desk_patient.prescription * moved)
    assert moved.any()


def test_missing_distance_roi_gives_a_zero_channel(desk_patient, caplog):
    with caplog.at_level(logging.WARNING):
        stack = featurize(desk_patient, FeatureConfig(distance_rois=("Larynx",)))
    assert np.all(stack.values[0] == 0)
    assert "Larynx" in caplog.text


def test_feature_config_validation():
    with pytest.raises(ValidationError):
        FeatureConfig(smoothing_scales=(), include_bias=False)
    with pytest.raises(ValidationError):
        FeatureConfig(smoothing_scales=(0.0,))


def test_kernel_surrogate_checks_its_feature_count():
    with pytest.raises(ShapeMismatchError):
        KernelSurrogate(unit_params(), FeatureConfig(falloff_widths=(6.0, 9.0)))
    surrogate = KernelSurrogate(unit_params(), FALLOFF)
    assert surrogate.feature_cfg.n_features == 1


def test_zero_weights_predict_zero_dose(falloff_stack):
    params = ParamVector(np.ones(1), np.zeros(1))
    assert np.all(predict(params, falloff_stack).values == 0)


def test_bias_only_features_are_all_ones(desk_patient):
    stack = featurize(desk_patient, FeatureConfig(smoothing_scales=()))
    assert stack.names == ("bias",)
    assert np.all(stack.values == 1.0)


def test_distance_feature_vanishes_on_the_roi_surface(desk_patient):
    stack = featurize(desk_patient, FeatureConfig(distance_rois=("PTV",), smoothing_scales=(), include_bias=False))
    shell = surface(desk_patient.rois["PTV"].membership)
    assert np.all(stack.values[0][shell] == 0)


def test_distance_feature_matches_a_brute_force_surface_search(record8):
    cfg = FeatureConfig(distance_rois=("PTV",), smoothing_scales=(), include_bias=False, distance_scale=1.0)
    stack = featurize(record8, cfg)
    membership = record8.rois["PTV"].membership
    shell = np.argwhere(surface(membership)) * 3.0
    for voxel in np.ndindex(membership.shape):
        nearest = np.sqrt(((shell - np.array(voxel) * 3.0) ** 2).sum(axis=1)).min()
        signed = -nearest if membership[voxel] else nearest
        assert stack.values[0][voxel] == pytest.approx(signed, abs=1e-9)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.0, 0.9))
def test_inverted_dropout_is_unbiased_over_all_patterns(seed, rate):
    rng = np.random.default_rng(seed)
    shape = GridShape(3, 3, 2)
    n_features = 4
    stack = FeatureStack(shape, tuple(f"f{i}" for i in range(n_features)), rng.normal(size=(n_features, *shape.dims)))
    params = ParamVector(rng.uniform(0.5, 2.0, n_features), rng.normal(size=n_features), rate)
    average = np.zeros(shape.dims)
    for pattern in itertools.product([False, True], repeat=n_features):
        kept = np.array(pattern)
        probability = np.prod(np.where(kept, 1.0 - rate, rate))
        average += probability * preactivation(params, stack, DropoutMask(0, kept))
    np.testing.assert_allclose(average, preactivation(params, stack), atol=1e-9)


def test_masked_l1_examples(record8):
    reference = record8.require_reference()
    feasible = record8.feasible
    assert masked_l1(reference, reference, feasible) == 0.0
    shifted = reference.with_values(reference.values + feasible.membership * 1.0)
    assert masked_l1(shifted, reference, feasible) == pytest.approx(1.0)

    rng = np.random.default_rng(5)
    pred = reference.with_values(rng.uniform(0, 70, reference.shape.dims))
    expected = np.abs(pred.values - reference.values)[feasible.membership].mean()
    assert masked_l1(pred, reference, feasible) == pytest.approx(expected, rel=1e-12)

    outside = pred.values.copy()
    outside[~feasible.membership] += 25.0
    assert masked_l1(pred.with_values(outside), reference, feasible) == masked_l1(pred, reference, feasible)


def test_unfrozen_training_may_move_the_encoder_and_frozen_never_does(desk_patient):
    start = ParamVector(np.array([1.0]), np.array([1.5]), 0.1, ("falloff:9",))
    cfg = TrainConfig(learning_rate=1e-4, iterations=20, tolerance=0.0)
    frozen, _ = train(start, [desk_patient], cfg, freeze_encoder=True)
    assert frozen.encoder.tobytes() == start.encoder.tobytes()
    unfrozen, _ = train(start, [desk_patient], cfg, freeze_encoder=False)
    assert unfrozen.encoder[0] != start.encoder[0]


def test_gradient_vanishes_at_the_fixed_point_and_steps_must_be_positive(desk_patient, falloff_stack):
    loss, gradient = loss_and_gradient(unit_params(), desk_patient, falloff_stack)
    assert loss == 0.0
    np.testing.assert_array_equal(gradient, [0.0])
    with pytest.raises(ValidationError):
        grad_check(unit_params(), desk_patient, 0.0)


@pytest.mark.parametrize(
    "cfg",
    [
        FeatureConfig(),
        FALLOFF,
        FeatureConfig(distance_rois=("PTV", "Brainstem"), smoothing_scales=(3.0, 4.5), include_drift=True),
        FeatureConfig(smoothing_scales=(), falloff_widths=(6.0, 12.0), include_drift=True, include_bias=False),
    ],
)
def test_feature_config_is_recovered_from_its_names(cfg):
    assert FeatureConfig.from_names(cfg.names) == cfg


@pytest.mark.parametrize(
    "names",
    [("f0",), ("bias", "sdf:PTV"), ("ct:wide", "target:wide"), ("sdf",), ("drift:2",), (), ("ct:3",)],
)
def test_unusable_feature_names_are_rejected(names):
    with pytest.raises(ValidationError):
        FeatureConfig.from_names(names)


def test_default_features_leave_out_the_phantom_kernel():
    assert FeatureConfig().names == ("ct:3", "target:3", "ct:9", "target:9", "bias")


def test_kernel_surrogate_from_saved_params_predicts_like_the_functions(desk_patient, tmp_path):
    path = str(tmp_path / "params.csv")
    save_params(unit_params(dropout_rate=0.5), path)
    surrogate = KernelSurrogate.from_params(load_params(path))
    assert surrogate.feature_cfg == FALLOFF
    features = surrogate.featurize(desk_patient)
    assert surrogate.predict(features) == desk_patient.reference_dose
    assert surrogate.predict(features, 3) == predict(unit_params(dropout_rate=0.5), features, 3)
    ensemble = surrogate.ensemble(features, [1, 2, 3])
    assert ensemble.seeds == (1, 2, 3)
    retrained = surrogate.with_params(ParamVector(np.ones(1), np.array([2.0]), 0.5, ("falloff:9",)))
    assert retrained.feature_cfg == surrogate.feature_cfg
    np.testing.assert_allclose(retrained.predict(features).values, 2.0 * desk_patient.reference_dose.values)
