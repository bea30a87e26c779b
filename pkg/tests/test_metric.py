import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import trees
from xml_prompting import (
    BOTTOM,
    HOLE,
    TOP,
    ConfigError,
    DegenerateSample,
    MetricConfig,
    NodeLabel,
    TopNotMetrizable,
    banach_iterate,
    distance,
    element,
    estimate_contraction,
    hole_filler,
    label_distance,
    path_weights,
)
from xml_prompting.utils import levenshtein, normalized_edit_distance


def step_tree(text: str) -> object:
    return element("plan", element("step", content=text, attrs={"index": "1"}))


def test_empty_tree_to_a_root_is_one():
    assert distance(BOTTOM, element("dialog")).value == 1.0


def test_single_text_edit_by_hand():
    """Weights 1 and 1/4 normalize to 0.8 and 0.2; one edit over 'abc'/'abd' is 2/7."""
    d = distance(step_tree("abc"), step_tree("abd"))
    assert d.value == pytest.approx(0.2 * 0.5 * 2 / 7)
    assert d.weights[()] == pytest.approx(0.8)


def test_max_normalized_text_distance():
    config = MetricConfig(text_distance="max_normalized")
    assert distance(step_tree("abc"), step_tree("abd"), config).value == pytest.approx(0.2 * 0.5 / 3)


def test_filling_a_slot_costs_half_its_weight():
    hole = NodeLabel("slot", {"group": "1"}, HOLE)
    assert label_distance(hole, hole.with_content("value 1")) == 0.5


def test_tag_change_is_total():
    assert label_distance(NodeLabel("plan"), NodeLabel("answer")) == 1.0
    assert label_distance(None, NodeLabel("answer")) == 1.0
    assert label_distance(None, None) == 0.0


def test_weights_stop_at_max_depth():
    deep = element("a", element("b", element("c")))
    weights = path_weights(deep, BOTTOM, MetricConfig(max_depth=1))
    assert set(weights) == {(), (1,)}
    assert sum(weights.values()) == pytest.approx(1.0)


def test_top_has_no_distance():
    with pytest.raises(TopNotMetrizable):
        distance(TOP, BOTTOM)


@pytest.mark.parametrize(
    "kwargs",
    [{"max_depth": 0}, {"weight_base": 0}, {"attribute_share": 1.5}, {"text_distance": "jaccard"}],
)
def test_invalid_metric_settings(kwargs):
    with pytest.raises(ConfigError):
        MetricConfig(**kwargs)


@given(trees(), trees())
def test_distance_is_a_symmetric_bounded_separating_function(a, b):
    d = distance(a, b).value
    assert 0.0 <= d <= 1.0
    assert d == pytest.approx(distance(b, a).value)
    assert (d == 0.0) == (a == b)


@given(trees(), trees(), trees())
def test_triangle_inequality(a, b, c):
    assert distance(a, c).value <= distance(a, b).value + distance(b, c).value + 1e-12


# --- contraction estimates ---------------------------------------------------------


def sample_pairs():
    return [
        (step_tree("abc"), step_tree("abd")),
        (element("plan"), step_tree("x")),
        (BOTTOM, element("dialog")),
    ]


def test_identity_has_ratio_one():
    estimate = estimate_contraction(lambda t: t, sample_pairs(), n_pairs=3)
    assert estimate.q == pytest.approx(1.0)
    assert estimate.positive_samples == 3


def test_constant_map_has_ratio_zero():
    estimate = estimate_contraction(lambda t: element("dialog"), sample_pairs(), n_pairs=3)
    assert estimate.q == 0.0
    assert estimate.witness is not None


def test_sampler_callable():
    pairs = iter(sample_pairs() * 2)
    estimate = estimate_contraction(lambda t: t, lambda: next(pairs), n_pairs=5)
    assert estimate.samples == 5


def test_equal_pairs_are_degenerate():
    with pytest.raises(DegenerateSample):
        estimate_contraction(lambda t: t, [(step_tree("a"), step_tree("a"))] * 4, n_pairs=4)


SCHEDULES = [
    [(1, 1), (2, 1), (3, 1), (4, 1)],
    [(1, 4), (1, 2), (1, 1)],
    [(1, 4), (1, 3)],
    [(2, 3), (1, 1)],
]


@pytest.mark.parametrize("schedule", SCHEDULES)
def test_hole_filler_moves_every_iterate_toward_its_fixed_point(schedule):
    """Each pass removes the filled group's share w of the distance, so the ratio stays within 1 - w."""
    family = hole_filler(schedule)
    report = banach_iterate(family.transformer, family.start)
    fixed = report.fixed_point
    assert fixed is not None
    for current in report.iterates:
        if current == fixed:
            continue
        filled = distance(current, family.transformer(current)).value
        remaining = distance(current, fixed).value
        assert 0 < filled <= remaining <= 1
        estimate = estimate_contraction(family.transformer, [(current, fixed)], n_pairs=1)
        assert estimate.q == pytest.approx(1 - filled / remaining)
        assert estimate.q <= 1 - filled + 1e-12


@pytest.mark.parametrize("schedule", SCHEDULES[:3])
def test_orbit_estimate_matches_the_analytic_factor(schedule):
    family = hole_filler(schedule)
    iterates = banach_iterate(family.transformer, family.start).iterates
    pairs = list(zip(iterates, iterates[1:]))
    estimate = estimate_contraction(family.transformer, pairs, n_pairs=len(pairs))
    assert estimate.q == pytest.approx(family.q)


# --- text distance ----------------------------------------------------------------


@pytest.mark.parametrize(
    "a,b,edits",
    [("kitten", "sitting", 3), ("", "abc", 3), ("flaw", "lawn", 2), ("ab", "ba", 2), ("same", "same", 0)],
)
def test_levenshtein(a, b, edits):
    assert levenshtein(a, b) == edits
    assert levenshtein(b, a) == edits


TEXT = st.text(alphabet="abc ", max_size=8)


@given(TEXT, TEXT, TEXT)
def test_normalized_edit_distance_is_a_metric(a, b, c):
    ab, bc, ac = (normalized_edit_distance(x, y) for x, y in ((a, b), (b, c), (a, c)))
    assert 0.0 <= ab <= 1.0
    assert (ab == 0.0) == (a == b)
    assert ab == normalized_edit_distance(b, a)
    assert ac <= ab + bc + 1e-12
    assert abs(len(a) - len(b)) <= levenshtein(a, b) <= max(len(a), len(b))


def test_max_normalization_breaks_the_triangle_inequality():
    def d(x, y):
        return normalized_edit_distance(x, y, "max_normalized")

    assert d("ab", "ba") > d("ab", "aba") + d("aba", "ba")
