from dataclasses import replace
from itertools import combinations, product

import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from conftest import FORMULA_ATOMS, fixture_path, formulas, trees
from xml_prompting import (
    HOLE,
    And,
    Atom,
    Const,
    CountChildren,
    EveryChild,
    EveryDescendant,
    FormulaSyntaxError,
    Keep,
    Mu,
    NegatedAtom,
    NonMonotoneFormula,
    NotSafetyShaped,
    Nu,
    Or,
    PartialTree,
    Prune,
    SomeChild,
    SomeDescendant,
    Unknown,
    Var,
    check_all,
    check_invariant,
    element,
    evaluate,
    load_invariants,
    parse_document,
    parse_formula,
    parse_invariants,
    pruning_filter,
)

SUPPORT = "tag=answer => count_children(tag=evidence & attr conf >= 0.8) >= 2"


def evidence(ref: str, conf: str):
    return element("evidence", attrs=[("ref", ref), ("conf", conf)])


def answered(*evidences):
    return element(
        "dialog",
        element(
            "turn",
            element("plan", element("step", content="Check.", attrs={"index": "1"})),
            element("answer", *evidences, content="42"),
            attrs={"role": "assistant"},
        ),
    )


def test_parse_guarded_formula():
    formula = parse_formula(SUPPORT)
    assert str(formula) == "(tag=answer => count_children((tag=evidence & attr conf >= 0.8)) >= 2)"
    assert isinstance(formula.right, CountChildren)


def test_two_confident_evidences_support_the_answer():
    verdict = check_invariant(parse_formula(SUPPORT), answered(evidence("a", "0.90"), evidence("b", "0.85")), "s")
    assert verdict.holds
    assert str(verdict) == "s: holds"


def test_one_evidence_is_not_enough():
    verdict = check_invariant(parse_formula(SUPPORT), answered(evidence("a", "0.90")), "s")
    assert not verdict
    assert verdict.path == (1, 2)
    assert str(verdict) == "s: violated at 1.2"


def test_low_confidence_does_not_count():
    verdict = check_invariant(parse_formula(SUPPORT), answered(evidence("a", "0.90"), evidence("b", "0.79")))
    assert not verdict


def test_no_answer_holds_vacuously():
    tree = element("dialog", element("turn", element("plan"), attrs={"role": "user"}))
    assert check_invariant(parse_formula(SUPPORT), tree)


def test_unguarded_formula_is_checked_at_the_root():
    formula = parse_formula("some_desc(tag=answer)")
    assert check_invariant(formula, answered())
    assert check_invariant(formula, element("dialog")).path == ()


def test_least_fixpoint_matches_descendant_modality():
    tree = answered(evidence("a", "0.90"))
    reach = evaluate(parse_formula("mu X. tag=evidence | some_child(X)"), tree)
    assert reach == evaluate(parse_formula("tag=evidence | some_desc(tag=evidence)"), tree)
    assert reach == {(), (1,), (1, 2), (1, 2, 1)}


def test_greatest_fixpoint():
    tree = element("plan", element("step", content="A"), element("todo"))
    no_todo_below = evaluate(parse_formula("nu X. !tag=todo & every_child(X)"), tree)
    assert no_todo_below == {(1,)}


def test_string_and_numeric_attributes():
    tree = element("answer", attrs={"format": "xml", "conf": "0.5"})
    assert evaluate(parse_formula('attr format = "xml"'), tree) == {()}
    assert evaluate(parse_formula("attr conf <= 0.5 & attr conf = 0.5"), tree) == {()}
    assert evaluate(parse_formula("attr missing >= 0"), tree) == frozenset()


@pytest.mark.parametrize(
    "source",
    [
        "tag=",
        "count_children(tag=a) >= x",
        "X",
        "some_child(tag=a) => tag=b",
        "!some_child(tag=a)",
    ],
)
def test_formula_syntax_errors(source):
    with pytest.raises(FormulaSyntaxError):
        parse_formula(source)


@pytest.mark.parametrize("source", ["nu X. !X", "mu X. X => tag=a"])
def test_negated_variables_are_rejected(source):
    with pytest.raises(NonMonotoneFormula):
        parse_formula(source)


def test_syntax_error_offset():
    with pytest.raises(FormulaSyntaxError) as e:
        parse_formula("tag=answer & & tag=plan")
    assert e.value.position == 13


# --- invariant files -------------------------------------------------------------


def test_builtin_invariants():
    (support,) = load_invariants("builtin:answer_support")
    (cites,) = load_invariants("builtin:answer_cites")
    tree = answered(evidence("a", "0.90"))
    assert [str(v) for v in check_all([support, cites], tree)] == [
        "answer_support: violated at 1.2",
        "answer_cites: holds",
    ]


def test_stanzas_and_comments():
    invariants = parse_invariants("# two rules\n[cites]\ntag=answer =>\n  count_children(tag=evidence) >= 1\n[plan]\nsome_desc(tag=plan)\n")
    assert [i.name for i in invariants] == ["cites", "plan"]


def test_single_formula_file_uses_default_name():
    (invariant,) = parse_invariants("some_desc(tag=plan)", "plan_present")
    assert invariant.name == "plan_present"


@pytest.mark.parametrize(
    "text",
    ["[a]\ntrue\n[a]\nfalse\n", "[empty]\n", "true\n[late]\nfalse\n"],
)
def test_bad_invariant_files(text):
    with pytest.raises(FormulaSyntaxError):
        parse_invariants(text)


def test_malformed_invariant_file_names_the_stanza():
    with pytest.raises(FormulaSyntaxError) as e:
        load_invariants(fixture_path("invariants", "malformed.inv"))
    assert "[broken]" in e.value.reason


# --- pruning ---------------------------------------------------------------------

PREFIX = '<dialog><turn role="user"><plan><step index="1">A</step></plan><answer format="xml">yes'


def test_open_answer_is_unknown():
    check = pruning_filter(parse_formula(SUPPORT), "support")
    assert check(PREFIX + '<evidence ref="a" conf="0.90"/>') is Unknown


def test_closed_answer_without_support_is_pruned():
    check = pruning_filter(parse_formula(SUPPORT), "support")
    assert check(PREFIX + '<evidence ref="a" conf="0.90"/></answer>') is Prune


def test_supported_document_is_kept():
    check = pruning_filter(parse_formula(SUPPORT))
    document = PREFIX + '<evidence ref="a" conf="0.90"/><evidence ref="b" conf="0.95"/></answer></turn></dialog>'
    assert check(document) is Keep
    assert check(parse_document(document)) is Keep


def test_empty_prefix_is_unknown():
    assert pruning_filter(parse_formula(SUPPORT))("<dia") is Unknown


def test_unresolved_attribute_is_not_pruned():
    check = pruning_filter(parse_formula("tag=evidence => attr conf >= 0.8"))
    tree = element("evidence", attrs={"conf": HOLE})
    assert check(tree) is not Prune


def test_least_fixpoints_cannot_prune():
    with pytest.raises(NotSafetyShaped):
        pruning_filter(parse_formula("mu X. tag=answer | some_child(X)"))


# --- oracle ------------------------------------------------------------------------


def brute_force(formula, tree, env=None):
    """Direct semantics; fixpoints by enumerating every node subset."""
    env = env or {}
    universe = frozenset(tree.nodes)
    if isinstance(formula, Atom):
        return frozenset(p for p in universe if formula.holds(tree[p]) is True)
    if isinstance(formula, NegatedAtom):
        return frozenset(p for p in universe if formula.atom.holds(tree[p]) is False)
    if isinstance(formula, Const):
        return universe if formula.value else frozenset()
    if isinstance(formula, And):
        return brute_force(formula.left, tree, env) & brute_force(formula.right, tree, env)
    if isinstance(formula, Or):
        return brute_force(formula.left, tree, env) | brute_force(formula.right, tree, env)
    if isinstance(formula, Var):
        return env[formula.name]
    if isinstance(formula, (Mu, Nu)):
        ordered = sorted(universe)
        subsets = [frozenset(c) for r in range(len(ordered) + 1) for c in combinations(ordered, r)]

        def step(s):
            return brute_force(formula.body, tree, dict(env, **{formula.var: s}))

        if isinstance(formula, Mu):
            return frozenset.intersection(*[s for s in subsets if step(s) <= s])
        return frozenset().union(*[s for s in subsets if s <= step(s)])
    inner = brute_force(formula.body, tree, env)
    out = set()
    for p in universe:
        kids = tree.children(p)
        below = tree.descendants(p)
        if isinstance(formula, SomeChild):
            keep = any(c in inner for c in kids)
        elif isinstance(formula, EveryChild):
            keep = all(c in inner for c in kids)
        elif isinstance(formula, SomeDescendant):
            keep = any(d in inner for d in below)
        elif isinstance(formula, EveryDescendant):
            keep = all(d in inner for d in below)
        else:
            keep = sum(1 for c in kids if c in inner) >= formula.k
        if keep:
            out.add(p)
    return frozenset(out)


@given(formulas(), trees(max_depth=2, max_children=2))
def test_evaluation_matches_the_subset_oracle(formula, tree):
    assert evaluate(formula, tree) == brute_force(formula, tree)


# --- pruning soundness ----------------------------------------------------------------

HOLE_FILLS = ("x", "0.9", "0.1")

EXTENSIONS = (
    (),
    (element("a"),),
    (element("b", attrs={"m": "0.9"}),),
    (element("a", element("b", attrs={"k": "x"}), attrs={"k": "x", "m": "0.1"}),),
    (element("b"), element("a", attrs={"k": "x", "m": "0.9"})),
)


def as_safety(formula):
    """Same formula with every least fixpoint read as a greatest one."""
    if isinstance(formula, (Mu, Nu)):
        return Nu(formula.var, as_safety(formula.body))
    if isinstance(formula, (And, Or)):
        return replace(formula, left=as_safety(formula.left), right=as_safety(formula.right))
    if hasattr(formula, "body"):
        return replace(formula, body=as_safety(formula.body))
    return formula


@st.composite
def safety_formulas(draw):
    body = as_safety(draw(formulas()))
    if draw(st.booleans()):
        guard = draw(st.sampled_from(FORMULA_ATOMS))
        return Or(NegatedAtom(guard), body, guard=guard)
    return body


@st.composite
def partial_trees(draw):
    """A tree whose rightmost spine is open down to a drawn depth."""
    tree = draw(trees(max_depth=2, max_children=2))
    if tree.is_bottom:
        return PartialTree(tree)
    spine = [()]
    while tree.children(spine[-1]):
        spine.append(tree.children(spine[-1])[-1])
    depth = draw(st.integers(min_value=0, max_value=min(2, len(spine))))
    return PartialTree(tree, frozenset(spine[:depth]))


def completions(partial):
    """Bounded refinements: attribute holes filled, subtrees appended under open elements."""
    holes = [(path, name) for path, name in partial.tree.holes() if name is not None]
    opens = sorted(partial.open_paths)
    for values in product(HOLE_FILLS, repeat=len(holes)):
        filled = partial.tree
        for (path, name), value in zip(holes, values):
            filled = filled.with_label(path, filled[path].with_attribute(name, value))
        for extension in product(EXTENSIONS, repeat=len(opens)):
            grown = filled
            for path, kids in zip(opens, extension):
                for kid in kids:
                    grown = grown.with_child(path, kid)
            yield grown


@given(safety_formulas(), partial_trees())
def test_pruning_is_sound_on_bounded_completions(formula, partial):
    assume(not partial.tree.is_bottom)
    assume(sum(1 for _, name in partial.tree.holes() if name is not None) <= 2)
    verdict = pruning_filter(formula)(partial)
    if verdict is Unknown:
        return
    outcomes = {check_invariant(formula, tree).holds for tree in completions(partial)}
    assert outcomes == {verdict is Keep}, (str(formula), verdict)
