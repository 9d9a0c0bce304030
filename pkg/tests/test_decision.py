import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rtwin.decision import (
    ActionSpec,
    ConstraintSpec,
    UtilityConfig,
    apply_action,
    max_ntcp,
    ntcp,
    parse_actions,
    parse_constraints,
    select_action,
    tcp,
    utility,
)
from rtwin.errors import InfeasibleActionError, ValidationError
from rtwin.grid_core import GridShape, MaskGrid, PatientRecord, Role, ScalarGrid
from rtwin.uq_metrics import DoseEnsemble, DvhMetricSpec

SHAPE = GridShape(4, 1, 1, (10.0, 10.0, 10.0))


def line_record(with_cord=True):
    rois = {"PTV": MaskGrid(SHAPE, [True, True, False, False])}
    roles = {"PTV": Role.TARGET}
    if with_cord:
        rois["SpinalCord"] = MaskGrid(SHAPE, [False, False, True, True])
        roles["SpinalCord"] = Role.OAR
    return PatientRecord(
        id="line",
        ct=ScalarGrid.zeros(SHAPE, unit="HU"),
        rois=rois,
        roles=roles,
        feasible=MaskGrid(SHAPE, np.ones(4, dtype=bool)),
    )


def ensemble(cord_doses, target=60.0):
    members = [ScalarGrid(SHAPE, [target, target, cord, cord]) for cord in cord_doses]
    return DoseEnsemble.from_members(members, seeds=range(len(members)))


CORD_MEAN = ConstraintSpec("cord", DvhMetricSpec("SpinalCord", "mean"), "<=", 20.0, 0.1)


def test_three_violations_in_ten_is_infeasible_at_alpha_one_tenth():
    with pytest.raises(InfeasibleActionError) as raised:
        select_action({"only": ensemble([10.0] * 7 + [30.0] * 3)}, line_record(), [CORD_MEAN], UtilityConfig())
    constraint, margin = raised.value.margins["only"]
    assert constraint == "cord"
    assert margin == pytest.approx(0.7 - 0.9)


def test_one_violation_in_ten_is_feasible():
    result = select_action(
        {"only": ensemble([10.0] * 9 + [30.0])}, line_record(), [CORD_MEAN], UtilityConfig()
    )
    assert result.chosen == "only"
    assert result.outcome("only").satisfaction == {"cord": 0.9}
    assert result.k == 10


def test_required_count_is_a_ceiling():
    assert CORD_MEAN.required(10) == 9
    assert CORD_MEAN.required(60) == 54
    assert CORD_MEAN.required(11) == 10


def test_poisson_tcp_closed_form():
    cfg = UtilityConfig()
    dose = ScalarGrid(SHAPE, [60.0, 60.0, 0.0, 0.0])
    expected = math.exp(-cfg.clonogens * math.exp(-cfg.alpha_rad * 60.0))
    assert tcp(dose, line_record().rois["PTV"], cfg) == pytest.approx(expected, rel=1e-12)


@pytest.mark.parametrize("model", ["lkb", "logistic"])
def test_ntcp_is_one_half_at_td50(model):
    cfg = UtilityConfig(ntcp_model=model)
    dose = ScalarGrid(SHAPE, [60.0, 60.0, cfg.td50, cfg.td50])
    assert ntcp(dose, line_record().rois["SpinalCord"], cfg) == pytest.approx(0.5, abs=1e-9)


@settings(max_examples=40)
@given(st.floats(0.0, 100.0), st.floats(0.0, 100.0))
def test_ntcp_grows_with_oar_dose(low, high):
    low, high = sorted((low, high))
    cord = line_record().rois["SpinalCord"]
    for model in ("lkb", "logistic"):
        cfg = UtilityConfig(ntcp_model=model)
        below = ntcp(ScalarGrid(SHAPE, [0, 0, low, low]), cord, cfg)
        above = ntcp(ScalarGrid(SHAPE, [0, 0, high, high]), cord, cfg)
        assert 0.0 <= below <= above <= 1.0


def test_max_ntcp_without_oars_is_zero():
    dose = ScalarGrid(SHAPE, [60.0, 60.0, 80.0, 80.0])
    assert max_ntcp(dose, line_record(with_cord=False), UtilityConfig()) == 0.0


def test_utility_combines_tcp_ntcp_and_uncertainty():
    cfg = UtilityConfig(ntcp_weight=2.0, uncertainty_weight=0.5)
    record = line_record()
    dose = ScalarGrid(SHAPE, [60.0, 60.0, 40.0, 40.0])
    expected = (
        tcp(dose, record.rois["PTV"], cfg)
        - 2.0 * ntcp(dose, record.rois["SpinalCord"], cfg)
        - 0.5 * 3.0
    )
    assert utility(dose, record, 3.0, cfg) == pytest.approx(expected)


def test_best_feasible_action_wins_and_ties_go_to_the_smallest_id():
    record = line_record()
    cold = ensemble([5.0] * 20, target=40.0)
    hot = ensemble([5.0] * 20, target=70.0)
    result = select_action({"hot_again": hot, "cold": cold, "hot": hot}, record, [CORD_MEAN], UtilityConfig())
    assert result.chosen == "hot"
    assert result.outcome("hot").mean_utility > result.outcome("cold").mean_utility


def test_infeasible_actions_are_skipped():
    record = line_record()
    hot_cord = ensemble([40.0] * 20, target=70.0)
    safe = ensemble([5.0] * 20, target=50.0)
    result = select_action({"hot": hot_cord, "safe": safe}, record, [CORD_MEAN], UtilityConfig())
    assert result.chosen == "safe"
    assert not result.outcome("hot").feasible
    assert result.to_dict()["actions"][0]["satisfaction"] == {"cord": 0.0}


def test_selection_is_thread_independent():
    rng = np.random.default_rng(3)
    record = line_record()
    candidates = {name: ensemble(rng.uniform(0, 30, 25), target=t) for name, t in (("a", 55.0), ("b", 65.0))}
    loose = ConstraintSpec("cord", DvhMetricSpec("SpinalCord", "mean"), "<=", 40.0, 0.1)
    serial = select_action(candidates, record, [loose], UtilityConfig(), threads=1)
    parallel = select_action(candidates, record, [loose], UtilityConfig(), threads=4)
    assert serial == parallel


def test_small_ensembles_are_flagged(caplog):
    with caplog.at_level(logging.WARNING):
        select_action({"only": ensemble([10.0] * 5)}, line_record(), [CORD_MEAN], UtilityConfig())
    assert "K=5" in caplog.text
    assert "coarse" in caplog.text


def test_apply_action_variants():
    dose = ScalarGrid(SHAPE, [60.0, 60.0, 20.0, 20.0])
    np.testing.assert_allclose(apply_action(dose, ActionSpec("up", scale=1.1)).flat(), [66, 66, 22, 22])
    factors = ScalarGrid(SHAPE, [1.0, 1.0, 0.5, 0.0], unit="1")
    masked = apply_action(dose, ActionSpec("spare", "spatial_mask", factors=factors))
    np.testing.assert_allclose(masked.flat(), [60, 60, 10, 0])
    library = [ScalarGrid(SHAPE, [50.0, 50.0, 5.0, 5.0])]
    assert apply_action(dose, ActionSpec("alt", "plan_select", plan_index=0), library) == library[0]
    with pytest.raises(ValidationError):
        apply_action(dose, ActionSpec("alt", "plan_select", plan_index=1), library)


def test_action_validation():
    with pytest.raises(ValidationError):
        ActionSpec("big", scale=1.5)
    with pytest.raises(ValidationError):
        ActionSpec("odd", kind="rotate")
    with pytest.raises(ValidationError):
        ActionSpec("spare", "spatial_mask", factors=ScalarGrid(SHAPE, [3.0] * 4, unit="1"))


def test_parse_actions_and_constraints():
    record = line_record()
    actions = parse_actions(
        [
            {"id": "identity"},
            {"id": "down10", "scale": 0.9},
            {"id": "alt", "kind": "plan_select", "index": 1},
            {"id": "spare", "kind": "spatial_mask", "roi": "SpinalCord", "factor": 0.8},
        ],
        record,
    )
    assert [a.kind for a in actions] == ["scale", "scale", "plan_select", "spatial_mask"]
    np.testing.assert_allclose(actions[3].factors.flat(), [1.0, 1.0, 0.8, 0.8])
    with pytest.raises(ValidationError):
        parse_actions([{"id": "a"}, {"id": "a", "scale": 0.9}])
    with pytest.raises(ValidationError):
        parse_actions([{"id": "spare", "kind": "spatial_mask", "roi": "SpinalCord"}])

    constraints = parse_constraints([{"id": "cord", "metric": "SpinalCord:D_0.1cc", "threshold": 45}])
    assert constraints[0].alpha == 0.1
    assert constraints[0].metric == DvhMetricSpec("SpinalCord", "Dcc", 0.1)
    with pytest.raises(ValidationError):
        parse_constraints([{"metric": "SpinalCord:mean"}])


def test_unit_scale_is_the_identity_and_scaling_is_linear():
    dose = ScalarGrid(SHAPE, [60.0, 60.0, 20.0, 0.0])
    assert apply_action(dose, ActionSpec.identity()) == dose
    assert apply_action(dose, ActionSpec("down", scale=0.9)).flat()[0] == pytest.approx(54.0)


def test_tcp_limits():
    target = line_record().rois["PTV"]
    dose = ScalarGrid(SHAPE, [30.0, 45.0, 0.0, 0.0])
    insensitive = UtilityConfig(alpha_rad=0.0, clonogens=50.0)
    assert tcp(dose, target, insensitive) == pytest.approx(math.exp(-50.0))
    sensitive = UtilityConfig(alpha_rad=0.3)
    assert tcp(ScalarGrid(SHAPE, [1e4, 1e4, 0.0, 0.0]), target, sensitive) == pytest.approx(1.0)


def test_lkb_ntcp_at_zero_dose():
    cfg = UtilityConfig(ntcp_model="lkb", m=0.2)
    dose = ScalarGrid.zeros(SHAPE)
    expected = 0.5 * math.erfc(1.0 / (0.2 * math.sqrt(2.0)))
    assert ntcp(dose, line_record().rois["SpinalCord"], cfg) == pytest.approx(expected, rel=1e-9)


def test_utility_weights():
    record = line_record()
    dose = ScalarGrid(SHAPE, [60.0, 60.0, 40.0, 40.0])
    plain = UtilityConfig(ntcp_weight=0.0, uncertainty_weight=0.0)
    assert utility(dose, record, 5.0, plain) == tcp(dose, record.rois["PTV"], plain)
    cautious = UtilityConfig(uncertainty_weight=1.0)
    assert utility(dose, record, 0.3, cautious) == pytest.approx(utility(dose, record, 0.2, cautious) - 0.1)


def test_utility_needs_a_target():
    record = line_record().replace(roles={"PTV": Role.OAR, "SpinalCord": Role.OAR})
    with pytest.raises(ValidationError):
        utility(ScalarGrid.zeros(SHAPE), record, 0.0, UtilityConfig())


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_selection_matches_a_brute_force_search(seed):
    rng = np.random.default_rng(seed)
    record = line_record()
    cfg = UtilityConfig(uncertainty_weight=0.0)
    constraint = ConstraintSpec("cord", DvhMetricSpec("SpinalCord", "mean"), "<=", 20.0, 0.2)
    candidates = {
        f"a{i}": ensemble(rng.uniform(0.0, 30.0, 5), target=float(rng.uniform(40.0, 80.0))) for i in range(3)
    }

    best, best_utility = None, -np.inf
    for action_id, candidate in candidates.items():
        members = candidate.members
        passing = sum(float(np.mean(m.flat()[2:])) <= 20.0 for m in members)
        mean_utility = float(np.mean([utility(m, record, 0.0, cfg) for m in members]))
        if passing >= 4 and mean_utility > best_utility:
            best, best_utility = action_id, mean_utility

    if best is None:
        with pytest.raises(InfeasibleActionError):
            select_action(candidates, record, [constraint], cfg)
    else:
        result = select_action(candidates, record, [constraint], cfg)
        assert result.chosen == best
        assert result.outcome(best).mean_utility == best_utility


def test_reverse_id_insertion_still_picks_the_smallest_id():
    same = ensemble([5.0] * 20, target=60.0)
    result = select_action({"b": same, "a": same}, line_record(), [CORD_MEAN], UtilityConfig())
    assert result.chosen == "a"
    assert [outcome.id for outcome in result.outcomes] == ["b", "a"]


def random_candidates(seed, k=20):
    """Three actions sharing one target spread, with their own target level and cord doses."""
    rng = np.random.default_rng(seed)
    spread = rng.normal(0.0, 2.0, k)
    candidates = {}
    for action_id in ("a", "b", "c"):
        level = rng.uniform(50.0, 70.0)
        cord = rng.uniform(0.0, rng.uniform(15.0, 25.0), k)
        members = [ScalarGrid(SHAPE, [level + s, level + s, c, c]) for s, c in zip(spread, cord, strict=True)]
        candidates[action_id] = DoseEnsemble.from_members(members, seeds=range(k))
    return candidates


def chosen_or_none(candidates, constraints, cfg):
    try:
        return select_action(candidates, line_record(), constraints, cfg).chosen
    except InfeasibleActionError:
        return None


def feasible_ids(candidates, constraints):
    try:
        result = select_action(candidates, line_record(), constraints, UtilityConfig())
    except InfeasibleActionError:
        return set()
    return {outcome.id for outcome in result.outcomes if outcome.feasible}


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_a_constant_utility_shift_keeps_the_choice(seed):
    candidates = random_candidates(seed)
    # equal target spread means an equal uncertainty penalty for every action
    plain = chosen_or_none(candidates, [CORD_MEAN], UtilityConfig(uncertainty_weight=0.0))
    shifted = chosen_or_none(candidates, [CORD_MEAN], UtilityConfig(uncertainty_weight=5.0))
    assert plain == shifted


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 0.5), st.floats(0.01, 0.5))
def test_feasible_set_grows_with_alpha(seed, first, second):
    low, high = sorted((first, second))
    candidates = random_candidates(seed)
    strict = feasible_ids(candidates, [ConstraintSpec("cord", DvhMetricSpec("SpinalCord", "mean"), "<=", 20.0, low)])
    loose = feasible_ids(candidates, [ConstraintSpec("cord", DvhMetricSpec("SpinalCord", "mean"), "<=", 20.0, high)])
    assert strict <= loose


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.permutations(["a", "b", "c"]))
def test_insertion_order_does_not_change_the_choice(seed, order):
    candidates = random_candidates(seed)
    candidates["d"] = candidates["b"]
    reordered = {action_id: candidates[action_id] for action_id in [*order, "d"][::-1]}
    assert chosen_or_none(reordered, [CORD_MEAN], UtilityConfig()) == chosen_or_none(
        candidates, [CORD_MEAN], UtilityConfig()
    )
    assert chosen_or_none(candidates, [CORD_MEAN], UtilityConfig()) != "d"
