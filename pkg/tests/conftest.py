import os

import pytest
from hypothesis import HealthCheck, settings
from hypothesis import strategies as st

from xml_prompting import (
    HOLE,
    And,
    Atom,
    Const,
    CountChildren,
    EveryChild,
    EveryDescendant,
    Formula,
    Literal,
    Mu,
    NegatedAtom,
    NodeLabel,
    Nu,
    Or,
    SomeChild,
    SomeDescendant,
    Var,
    XmlTree,
    pattern,
)

FIXTURES = os.path.join(os.path.dirname(__file__), "fixtures")

settings.register_profile(
    "ci",
    max_examples=200,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.register_profile(
    "acceptance",
    max_examples=10_000,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.filter_too_much],
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "ci"))

TAGS = ("a", "b")
LITERAL_CONTENT = (HOLE, Literal("x"), Literal("y"), Literal("xy"))
PATTERN_CONTENT = LITERAL_CONTENT + (pattern("x|y"), pattern("y|xy"), pattern("x|y|xy"))


def fixture_path(*parts: str) -> str:
    return os.path.join(FIXTURES, *parts)


@pytest.fixture
def fixtures_dir() -> str:
    return FIXTURES


@st.composite
def labels(draw, contents=LITERAL_CONTENT, tags=TAGS) -> NodeLabel:
    attrs = {}
    for name in ("k", "m"):
        if draw(st.booleans()):
            attrs[name] = draw(st.sampled_from(contents))
    return NodeLabel(draw(st.sampled_from(tags)), attrs, draw(st.sampled_from(contents)))


@st.composite
def trees(draw, max_depth: int = 3, max_children: int = 3, contents=LITERAL_CONTENT) -> XmlTree:
    """Random trees of depth at most ``max_depth`` (the root is depth 0)."""
    if draw(st.integers(min_value=0, max_value=9)) == 0:
        return XmlTree()
    nodes = {}

    def grow(path, depth):
        nodes[path] = draw(labels(contents))
        if depth >= max_depth:
            return
        for i in range(1, draw(st.integers(min_value=0, max_value=max_children)) + 1):
            grow(path + (i,), depth + 1)

    grow((), 0)
    return XmlTree(nodes)


def pattern_trees(max_depth: int = 3):
    return trees(max_depth=max_depth, contents=PATTERN_CONTENT)


@st.composite
def refinement_pairs(draw, max_depth: int = 3):
    """``(a, b)`` with ``refines(a, b)``: ``b`` grows ``a`` and fills some holes."""
    a = draw(trees(max_depth=max_depth))
    if a.is_bottom:
        return a, draw(trees(max_depth=max_depth))
    nodes = dict(a.nodes)
    for path, label in list(nodes.items()):
        if label.content == HOLE and draw(st.booleans()):
            nodes[path] = label.with_content(draw(st.sampled_from(LITERAL_CONTENT)))
        if draw(st.integers(min_value=0, max_value=3)) == 0:
            nodes[path] = nodes[path].with_attribute("n", "z")
    b = XmlTree(nodes)
    for path in a.paths():
        if len(path) < max_depth and draw(st.integers(min_value=0, max_value=3)) == 0:
            b = b.with_child(path, XmlTree({(): draw(labels())}))
    return a, b


FORMULA_ATOMS = (Atom(tag="a"), Atom(tag="b"), Atom(attr="k", value="x"), Atom(attr="m", op=">=", value=0.5))


@st.composite
def formulas(draw, depth: int = 3, variables: tuple = ()) -> Formula:
    """Closed formulas with positive variables and at most two nested fixpoints."""
    leaves = [st.sampled_from(FORMULA_ATOMS), st.sampled_from(FORMULA_ATOMS).map(NegatedAtom), st.just(Const(True))]
    if variables:
        leaves.append(st.sampled_from(variables).map(Var))
    if depth == 0:
        return draw(st.one_of(leaves))
    kind = draw(st.integers(min_value=0, max_value=10 if len(variables) < 2 else 8))
    sub = formulas(depth - 1, variables)
    if kind <= 2:
        return draw(st.one_of(leaves))
    if kind == 3:
        return And(draw(sub), draw(sub))
    if kind == 4:
        return Or(draw(sub), draw(sub))
    if kind == 5:
        return SomeChild(draw(sub))
    if kind == 6:
        return EveryChild(draw(sub))
    if kind == 7:
        return draw(st.sampled_from((SomeDescendant, EveryDescendant)))(draw(sub))
    if kind == 8:
        return CountChildren(draw(sub), draw(st.integers(min_value=0, max_value=2)))
    name = f"X{depth}"
    body = draw(formulas(depth - 1, variables + (name,)))
    return Mu(name, body) if kind == 9 else Nu(name, body)
