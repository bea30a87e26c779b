import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import pattern_trees, refinement_pairs, trees
from xml_prompting import (
    BOTTOM,
    EMPTY,
    HOLE,
    TOP,
    LatticeConfig,
    Literal,
    MalformedXml,
    NodeLabel,
    NotConcrete,
    Pattern,
    TopUnserializable,
    XmlTree,
    element,
    embeds,
    join,
    meet,
    parse_document,
    parse_partial,
    pattern,
    refines,
    serialize,
    serialize_partial,
)

UNION = LatticeConfig(lgg="union")


def plan(*texts: str) -> XmlTree:
    return element(
        "plan", *[element("step", content=t, attrs={"index": str(i)}) for i, t in enumerate(texts, start=1)]
    )


# --- order ---------------------------------------------------------------


def test_bottom_and_top_bound_everything():
    """The empty tree is below and the conflict element above any tree."""
    tree = plan("Draft.")
    assert refines(BOTTOM, tree)
    assert refines(tree, TOP)
    assert not refines(TOP, tree)
    assert not refines(tree, BOTTOM)


def test_filling_a_hole_refines():
    """Replacing a hole with text is a refinement, the reverse is not."""
    open_step = element("step", content=HOLE, attrs={"index": "1"})
    filled = element("step", content="Check.", attrs={"index": "1"})
    assert refines(open_step, filled)
    assert not refines(filled, open_step)


def test_literal_refines_matching_pattern():
    loose = element("answer", content=pattern("yes|no"))
    assert refines(loose, element("answer", content="yes"))
    assert not refines(loose, element("answer", content="maybe"))


def test_adding_attributes_and_children_refines():
    small = plan("Draft.")
    bigger = plan("Draft.", "Verify.").with_label((), NodeLabel("plan", {"kind": "cove"}))
    assert refines(small, bigger)
    assert not refines(bigger, small)


def test_refinement_is_positional():
    """Inserting before an existing sibling shifts it, so only ``embeds`` accepts it."""
    original = element("plan", element("step", content="B"))
    inserted = element("plan", element("step", content="A"), element("step", content="B"))
    assert not refines(original, inserted)
    assert embeds(original, inserted)


def test_tag_mismatch_is_incomparable():
    assert not refines(element("plan"), element("answer"))
    assert not refines(element("answer"), element("plan"))


@given(trees())
def test_refines_is_reflexive(tree):
    assert refines(tree, tree)


@given(trees(), trees())
def test_refines_is_antisymmetric(a, b):
    if refines(a, b) and refines(b, a):
        assert a == b


@given(refinement_pairs(), trees())
def test_refines_is_transitive(pair, c):
    a, b = pair
    assert refines(a, b)
    if refines(b, c):
        assert refines(a, c)


# --- meet and join ---------------------------------------------------------


def test_meet_keeps_the_common_prefix():
    a = plan("Draft.", "Verify.")
    b = plan("Draft.", "Answer.", "Revise.")
    common = meet([a, b])
    assert common.child_count(()) == 2
    assert common[(1,)].content == Literal("Draft.")
    assert common[(2,)].content == HOLE


def test_meet_with_union_generalizes_to_a_pattern():
    a = element("answer", content="yes")
    b = element("answer", content="no")
    assert meet([a, b], UNION)[()].content == Pattern(("no", "yes"))


def test_join_conflict_is_top():
    assert join([element("answer", content="yes"), element("answer", content="no")]).is_top
    assert join([element("plan"), element("answer")]).is_top


def test_join_of_patterns_intersects():
    a = element("answer", content=pattern("yes|no|maybe"))
    b = element("answer", content=pattern("no|maybe|never"))
    assert join([a, b])[()].content == Pattern(("maybe", "no"))


def test_join_overlays_disjoint_children():
    left = element("prompt", element("task", content="Sum."))
    right = element("prompt", element("task", content=HOLE), element("guidelines", content="Short."))
    joined = join([left, right])
    assert joined[(1,)].content == Literal("Sum.")
    assert joined[(2,)].tag == "guidelines"


def test_empty_meet_and_join():
    assert meet([]).is_top
    assert join([]).is_bottom


@given(trees())
def test_meet_and_join_are_idempotent(a):
    assert meet([a, a]) == a
    assert join([a, a]) == a


@given(trees(), trees())
def test_meet_and_join_are_commutative(a, b):
    assert meet([a, b]) == meet([b, a])
    assert join([a, b]) == join([b, a])


@given(trees(), trees(), trees())
def test_meet_and_join_are_associative(a, b, c):
    assert meet([meet([a, b]), c]) == meet([a, meet([b, c])])
    assert join([join([a, b]), c]) == join([a, join([b, c])])


@given(trees(), trees())
def test_absorption(a, b):
    assert meet([a, join([a, b])]) == a
    assert join([a, meet([a, b])]) == a


@given(trees(), trees())
def test_meet_adjunction(a, b):
    assert refines(a, b) == (meet([a, b]) == a)
    assert refines(a, b) == (join([a, b]) == b)


@given(pattern_trees(), pattern_trees(), pattern_trees())
def test_union_meet_laws_with_patterns(a, b, c):
    assert meet([meet([a, b], UNION), c], UNION) == meet([a, meet([b, c], UNION)], UNION)
    assert meet([a, join([a, b], UNION)], UNION) == a
    assert refines(a, b, UNION) == (meet([a, b], UNION) == a)


@given(pattern_trees(), pattern_trees(), pattern_trees())
def test_meet_is_the_greatest_lower_bound(a, b, lower):
    m = meet([a, b], UNION)
    assert refines(m, a, UNION) and refines(m, b, UNION)
    if refines(lower, a, UNION) and refines(lower, b, UNION):
        assert refines(lower, m, UNION)


@given(trees(), trees(), trees())
def test_join_is_the_least_upper_bound(a, b, upper):
    j = join([a, b])
    assert refines(a, j) and refines(b, j)
    if refines(a, upper) and refines(b, upper):
        assert refines(j, upper)


def test_unknown_lgg_mode_is_rejected():
    with pytest.raises(ValueError):
        LatticeConfig(lgg="widest")


# --- documents ---------------------------------------------------------------


def test_parse_and_serialize_listing():
    text = (
        '<prompt><guidelines>Answer only after verification.</guidelines><dialog><turn role="assistant">'
        '<plan><step index="1">Draft answer A.</step></plan></turn></dialog></prompt>'
    )
    tree = parse_document(text)
    assert tree[()].tag == "prompt"
    assert tree[(2, 1, 1, 1)].attribute("index") == Literal("1")
    assert serialize(tree) == text


def test_whitespace_between_elements_is_ignored():
    tree = parse_document("<plan>\n  <step index='1'>A</step>\n</plan>\n")
    assert tree.child_count(()) == 1
    assert tree[()].content == Literal("")


def test_text_is_escaped_on_output():
    tree = element("answer", content="a & b", attrs={"note": 'say "hi"'})
    assert serialize(tree) == '<answer note="say &quot;hi&quot;">a &amp; b</answer>'
    assert parse_document(serialize(tree)) == tree


def test_indented_rendering():
    text = serialize(plan("A", "B"), indent=2)
    assert text == '<plan>\n  <step index="1">A</step>\n  <step index="2">B</step>\n</plan>'


@pytest.mark.parametrize(
    "text",
    [
        "<plan><step></plan>",
        '<plan a="1" a="2"/>',
        "<plan><step>A</step>stray<step>B</step></plan>",
        '<x:plan xmlns:x="urn:x"/>',
    ],
)
def test_malformed_documents(text):
    with pytest.raises(MalformedXml):
        parse_document(text)


def test_serialize_rejects_holes_and_top():
    with pytest.raises(NotConcrete):
        serialize(element("answer", content=HOLE))
    with pytest.raises(TopUnserializable):
        serialize(TOP)


def test_partial_markers_parse_back():
    tree = element(
        "turn",
        element("answer", content=pattern("yes|no")),
        element("step", content=HOLE),
        attrs={"role": HOLE},
    )
    text = serialize_partial(tree)
    assert "<hole/>" in text and "__HOLE__" in text and "<pattern " in text
    assert parse_document(text) == tree


def test_parse_partial_tracks_open_elements():
    partial = parse_partial('<dialog><turn role="assistant"><plan><step index="1">Dra')
    assert partial.open_paths == frozenset({(), (1,), (1, 1), (1, 1, 1)})
    assert partial.tree[(1, 1, 1)].content == HOLE
    assert partial.tree[(1, 1)].content == Literal("")
    assert not partial.is_open((2,))


def test_parse_partial_of_nothing_is_bottom():
    assert parse_partial("<dia").tree.is_bottom


@given(st.lists(st.sampled_from(["A", "B", "C"]), min_size=1, max_size=4))
def test_serialized_plans_round_trip(texts):
    tree = plan(*texts)
    assert parse_document(serialize(tree)) == tree


CONCRETE_CONTENT = (EMPTY, Literal(" "), Literal("x"), Literal("xy"), Literal(" x "))


@given(trees(contents=CONCRETE_CONTENT), st.sampled_from([None, 2]))
def test_concrete_trees_round_trip(tree, indent):
    assert parse_document(serialize(tree, indent=indent)) == tree


def test_whitespace_content_next_to_children_is_kept():
    tree = element("a", element("b"), content=" ")
    assert serialize(tree) == "<a> <b/></a>"
    assert parse_document("<a> <b/></a>")[()].content == Literal(" ")
    assert parse_document("<a> <b/> </a>")[()].content == EMPTY


def test_parse_partial_drops_indentation_of_open_elements():
    partial = parse_partial('<dialog>\n  <turn role="user">\n    <plan>')
    assert partial.tree[()].content == EMPTY
    assert partial.tree[(1,)].content == EMPTY
    assert partial.tree[(1, 1)].content == HOLE


@pytest.mark.parametrize("name", ["", "1step", "a b", "a<b", "step\n", "x:y", "-x"])
def test_node_labels_reject_invalid_names(name):
    with pytest.raises(ValueError):
        NodeLabel(name)
    with pytest.raises(ValueError):
        NodeLabel("step", {name: "1"})


@pytest.mark.parametrize("name", ["agent_output", "step", "_x", "a.b-c", "T2"])
def test_node_labels_accept_xml_names(name):
    assert NodeLabel(name, {name: "1"}).tag == name


def test_unsupported_tag_names_are_malformed():
    with pytest.raises(MalformedXml):
        parse_document("<café/>")
