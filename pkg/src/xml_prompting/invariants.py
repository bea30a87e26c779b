"""Modal fixpoint formulas over trees, invariant checks and decode-time pruning.

Formula syntax::

    tag=answer                       attr conf >= 0.8      attr format = "xml"
    A & B    A | B    !atom          A => B  (A atomic, sugar for !A | B)
    some_child(F)  every_child(F)    some_desc(F)  every_desc(F)
    count_children(F) >= K           mu X. F       nu X. F

Modalities follow the child relation only. Fixpoint variables may not occur
under negation, so every formula denotes a monotone operator.
"""

import re
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from typing import Dict, FrozenSet, Iterable, List, Optional, Tuple, Union

from lark import Lark, v_args
from lark import Transformer as LarkTransformer
from lark.exceptions import UnexpectedInput, VisitError

from .classes import (
    BUILTIN_INVARIANTS,
    DECIMAL_REGEX,
    ROOT,
    STANZA_REGEX,
    DeweyPath,
    FormulaSyntaxError,
    Literal,
    NodeLabel,
    NonMonotoneFormula,
    NotSafetyShaped,
    PartialTree,
    Verdict,
    XmlPromptError,
    XmlTree,
)
from .lattice import parse_partial
from .utils import builtin_name, is_builtin, log, read_resource, read_text

NodeSet = FrozenSet[DeweyPath]

# --- AST -------------------------------------------------------------------


class Formula:
    __slots__ = ()


@dataclass(frozen=True)
class Atom(Formula):
    """``tag=NAME`` or ``attr NAME op VALUE``; numeric ops parse the attribute as a decimal."""

    tag: Optional[str] = None
    attr: Optional[str] = None
    op: str = "="
    value: Union[float, str, None] = None

    def holds(self, label: NodeLabel) -> Optional[bool]:
        """True, False or None when the attribute value is not known yet."""
        if self.tag is not None:
            return label.tag == self.tag
        current = label.attribute(self.attr)
        if current is None:
            return False
        if not isinstance(current, Literal):
            return None
        if isinstance(self.value, str):
            return current.text == self.value
        if not DECIMAL_REGEX.match(current.text):
            return False
        number = float(current.text)
        if self.op == ">=":
            return number >= self.value
        if self.op == "<=":
            return number <= self.value
        return number == self.value

    def __str__(self) -> str:
        if self.tag is not None:
            return f"tag={self.tag}"
        value = f'"{self.value}"' if isinstance(self.value, str) else f"{self.value:g}"
        return f"attr {self.attr} {self.op} {value}"


@dataclass(frozen=True)
class Const(Formula):
    value: bool

    def __str__(self) -> str:
        return "true" if self.value else "false"


@dataclass(frozen=True)
class NegatedAtom(Formula):
    atom: Atom

    def __str__(self) -> str:
        return f"!{self.atom}"


@dataclass(frozen=True)
class And(Formula):
    left: Formula
    right: Formula

    def __str__(self) -> str:
        return f"({self.left} & {self.right})"


@dataclass(frozen=True)
class Or(Formula):
    """Disjunction; ``guard`` is set when it was written as ``guard => right``."""

    left: Formula
    right: Formula
    guard: Optional[Formula] = field(default=None, compare=False)

    def __str__(self) -> str:
        if self.guard is not None:
            return f"({self.guard} => {self.right})"
        return f"({self.left} | {self.right})"


@dataclass(frozen=True)
class SomeChild(Formula):
    body: Formula

    def __str__(self) -> str:
        return f"some_child({self.body})"


@dataclass(frozen=True)
class EveryChild(Formula):
    body: Formula

    def __str__(self) -> str:
        return f"every_child({self.body})"


@dataclass(frozen=True)
class SomeDescendant(Formula):
    body: Formula

    def __str__(self) -> str:
        return f"some_desc({self.body})"


@dataclass(frozen=True)
class EveryDescendant(Formula):
    body: Formula

    def __str__(self) -> str:
        return f"every_desc({self.body})"


@dataclass(frozen=True)
class CountChildren(Formula):
    body: Formula
    k: int

    def __str__(self) -> str:
        return f"count_children({self.body}) >= {self.k}"


@dataclass(frozen=True)
class Var(Formula):
    name: str
    position: int = field(default=0, compare=False)

    def __str__(self) -> str:
        return self.name


@dataclass(frozen=True)
class Mu(Formula):
    var: str
    body: Formula

    def __str__(self) -> str:
        return f"mu {self.var}. {self.body}"


@dataclass(frozen=True)
class Nu(Formula):
    var: str
    body: Formula

    def __str__(self) -> str:
        return f"nu {self.var}. {self.body}"


ATOMIC = (Atom, NegatedAtom, Const)


def negate_atomic(formula: Formula) -> Formula:
    if isinstance(formula, Atom):
        return NegatedAtom(formula)
    if isinstance(formula, NegatedAtom):
        return formula.atom
    if isinstance(formula, Const):
        return Const(not formula.value)
    raise TypeError(f"Not an atomic formula: {formula}")


# --- parser ----------------------------------------------------------------

FORMULA_GRAMMAR = r"""
?start: formula

?formula: "mu" NAME "." formula                  -> mu
        | "nu" NAME "." formula                  -> nu
        | implication

?implication: disjunction
            | disjunction "=>" implication       -> implies

?disjunction: conjunction
            | disjunction "|" conjunction        -> or_

?conjunction: unary
            | conjunction "&" unary              -> and_

?unary: "!" unary                                -> not_
      | primary

?primary: "(" formula ")"
        | "tag" "=" NAME                         -> tag_atom
        | "attr" NAME ">=" NUMBER                -> attr_ge
        | "attr" NAME "<=" NUMBER                -> attr_le
        | "attr" NAME "=" NUMBER                 -> attr_num_eq
        | "attr" NAME "=" STRING                 -> attr_str_eq
        | "some_child" "(" formula ")"           -> some_child
        | "every_child" "(" formula ")"          -> every_child
        | "some_desc" "(" formula ")"            -> some_desc
        | "every_desc" "(" formula ")"           -> every_desc
        | "count_children" "(" formula ")" ">=" INT -> count_children
        | "true"                                 -> true_
        | "false"                                -> false_
        | NAME                                   -> var

NAME: /[A-Za-z_][A-Za-z0-9_\-]*/
NUMBER: /[+-]?(\d+(\.\d*)?|\.\d+)/
INT: /\d+/
STRING: /"(\\.|[^"\\\n])*"/
COMMENT: /#[^\n]*/

%import common.WS
%ignore WS
%ignore COMMENT
"""

__FORMULA_PARSER__ = Lark(FORMULA_GRAMMAR, parser="lalr", propagate_positions=True)


def __offset__(meta) -> int:
    return getattr(meta, "start_pos", 0) or 0


@v_args(meta=True)
class __FormulaBuilder__(LarkTransformer):
    def mu(self, meta, children):
        return Mu(str(children[0]), children[1])

    def nu(self, meta, children):
        return Nu(str(children[0]), children[1])

    def implies(self, meta, children):
        guard, body = children
        if isinstance(guard, Var):
            raise NonMonotoneFormula(guard.name)
        if not isinstance(guard, ATOMIC):
            raise FormulaSyntaxError(__offset__(meta), "the left side of '=>' must be atomic")
        return Or(negate_atomic(guard), body, guard=guard)

    def or_(self, meta, children):
        return Or(children[0], children[1])

    def and_(self, meta, children):
        return And(children[0], children[1])

    def not_(self, meta, children):
        operand = children[0]
        if isinstance(operand, Var):
            raise NonMonotoneFormula(operand.name)
        if not isinstance(operand, ATOMIC):
            raise FormulaSyntaxError(__offset__(meta), "negation applies to atoms only")
        return negate_atomic(operand)

    def tag_atom(self, meta, children):
        return Atom(tag=str(children[0]))

    def attr_ge(self, meta, children):
        return Atom(attr=str(children[0]), op=">=", value=float(children[1]))

    def attr_le(self, meta, children):
        return Atom(attr=str(children[0]), op="<=", value=float(children[1]))

    def attr_num_eq(self, meta, children):
        return Atom(attr=str(children[0]), op="=", value=float(children[1]))

    def attr_str_eq(self, meta, children):
        raw = re.sub(r"\\(.)", r"\1", str(children[1])[1:-1])
        return Atom(attr=str(children[0]), op="=", value=raw)

    def some_child(self, meta, children):
        return SomeChild(children[0])

    def every_child(self, meta, children):
        return EveryChild(children[0])

    def some_desc(self, meta, children):
        return SomeDescendant(children[0])

    def every_desc(self, meta, children):
        return EveryDescendant(children[0])

    def count_children(self, meta, children):
        return CountChildren(children[0], int(children[1]))

    def true_(self, meta, children):
        return Const(True)

    def false_(self, meta, children):
        return Const(False)

    def var(self, meta, children):
        return Var(str(children[0]), __offset__(meta))


def __check_bound__(formula: Formula, bound: FrozenSet[str] = frozenset()):
    if isinstance(formula, Var):
        if formula.name not in bound:
            raise FormulaSyntaxError(formula.position, f"variable '{formula.name}' is not bound by mu or nu")
    elif isinstance(formula, (Mu, Nu)):
        __check_bound__(formula.body, bound | {formula.var})
    elif isinstance(formula, (And, Or)):
        __check_bound__(formula.left, bound)
        __check_bound__(formula.right, bound)
    elif isinstance(formula, (SomeChild, EveryChild, SomeDescendant, EveryDescendant, CountChildren)):
        __check_bound__(formula.body, bound)


@lru_cache(maxsize=256)
def parse_formula(source: str) -> Formula:
    """Parses one formula.

    Raises:
        FormulaSyntaxError: With the character offset of the problem.
        NonMonotoneFormula: When a fixpoint variable occurs under negation.
    """
    try:
        tree = __FORMULA_PARSER__.parse(source)
    except UnexpectedInput as e:
        position = getattr(e, "pos_in_stream", None)
        if position is None:
            position = len(source)
        raise FormulaSyntaxError(position, str(e).strip().splitlines()[0] if str(e).strip() else "unexpected input")
    try:
        formula = __FormulaBuilder__().transform(tree)
    except VisitError as e:
        if isinstance(e.orig_exc, XmlPromptError):
            raise e.orig_exc
        raise
    __check_bound__(formula)
    return formula


# --- evaluation -------------------------------------------------------------


class __Evaluator__:
    """Two-valued evaluation over a finite tree.

    With ``open_paths`` given, ``optimistic`` selects the upper
    approximation over all refinements and otherwise the lower one.
    """

    def __init__(self, tree: XmlTree, open_paths: FrozenSet[DeweyPath] = frozenset(), optimistic: bool = False):
        self.tree = tree
        self.universe: NodeSet = frozenset(tree.nodes)
        self.open = open_paths
        self.optimistic = optimistic
        self.children: Dict[DeweyPath, Tuple[DeweyPath, ...]] = {p: tree.children(p) for p in self.universe}
        self.below: Dict[DeweyPath, List[DeweyPath]] = {p: [] for p in self.universe}
        for path in self.universe:
            for depth in range(len(path)):
                self.below[path[:depth]].append(path)
        self.growing = frozenset(
            p for p in self.universe if p in self.open or any(d in self.open for d in self.below[p])
        )

    def atom(self, atom: Atom, optimistic: bool) -> NodeSet:
        out = set()
        for path in self.universe:
            value = atom.holds(self.tree[path])
            if value or (value is None and optimistic):
                out.add(path)
        return frozenset(out)

    def run(self, formula: Formula, env: Dict[str, NodeSet]) -> NodeSet:
        if isinstance(formula, Atom):
            return self.atom(formula, self.optimistic)
        if isinstance(formula, NegatedAtom):
            return self.universe - self.atom(formula.atom, not self.optimistic)
        if isinstance(formula, Const):
            return self.universe if formula.value else frozenset()
        if isinstance(formula, And):
            return self.run(formula.left, env) & self.run(formula.right, env)
        if isinstance(formula, Or):
            return self.run(formula.left, env) | self.run(formula.right, env)
        if isinstance(formula, Var):
            return env[formula.name]
        if isinstance(formula, (Mu, Nu)):
            current = frozenset() if isinstance(formula, Mu) else self.universe
            for _ in range(len(self.universe) + 2):
                nxt = self.run(formula.body, dict(env, **{formula.var: current}))
                if nxt == current:
                    break
                current = nxt
            return current
        inner = self.run(formula.body, env)
        out = set()
        for path in self.universe:
            if self.__modal__(formula, path, inner):
                out.add(path)
        return frozenset(out)

    def __modal__(self, formula: Formula, path: DeweyPath, inner: NodeSet) -> bool:
        is_open = path in self.open
        if isinstance(formula, SomeChild):
            return any(c in inner for c in self.children[path]) or (self.optimistic and is_open)
        if isinstance(formula, EveryChild):
            return all(c in inner for c in self.children[path]) and (self.optimistic or not is_open)
        if isinstance(formula, SomeDescendant):
            return any(d in inner for d in self.below[path]) or (self.optimistic and path in self.growing)
        if isinstance(formula, EveryDescendant):
            return all(d in inner for d in self.below[path]) and (self.optimistic or path not in self.growing)
        if isinstance(formula, CountChildren):
            if self.optimistic and is_open:
                return True
            return sum(1 for c in self.children[path] if c in inner) >= formula.k
        raise TypeError(f"Unknown formula node {formula!r}")


def evaluate(formula: Formula, tree: XmlTree) -> NodeSet:
    """The set of node paths satisfying ``formula``."""
    if tree.is_top:
        raise ValueError("Formulas are not evaluated on the conflict element")
    return __Evaluator__(tree).run(formula, {})


def guard_scope(formula: Formula) -> Optional[Formula]:
    return formula.guard if isinstance(formula, Or) else None


def check_invariant(formula: Formula, tree: XmlTree, name: str = "") -> Verdict:
    """Checks a guarded formula at every node matching its guard, any other formula at the root.

    The verdict carries the first violating path in document order.
    """
    if tree.is_bottom:
        return Verdict(True, None, name)
    satisfied = evaluate(formula, tree)
    guard = guard_scope(formula)
    if guard is None:
        return Verdict(True, None, name) if ROOT in satisfied else Verdict(False, ROOT, name)
    for path in sorted(evaluate(guard, tree)):
        if path not in satisfied:
            return Verdict(False, path, name)
    return Verdict(True, None, name)


# --- invariant files ---------------------------------------------------------


@dataclass(frozen=True)
class Invariant:
    name: str
    formula: Formula

    def check(self, tree: XmlTree) -> Verdict:
        return check_invariant(self.formula, tree, self.name)


def parse_invariants(text: str, default_name: str = "invariant") -> List[Invariant]:
    """Reads ``[name]`` stanzas each holding one formula; ``#`` starts a comment line.

    A file without any stanza header holds a single formula named
    ``default_name``.
    """
    stanzas: List[Tuple[str, List[str]]] = []
    loose: List[str] = []
    for line in text.splitlines():
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        header = STANZA_REGEX.match(stripped)
        if header:
            stanzas.append((header.group("name"), []))
        elif stanzas:
            stanzas[-1][1].append(stripped)
        else:
            loose.append(stripped)
    if loose:
        if stanzas:
            raise FormulaSyntaxError(0, "formula text before the first [name] stanza")
        stanzas = [(default_name, loose)]
    invariants = []
    seen = set()
    for name, lines in stanzas:
        if name in seen:
            raise FormulaSyntaxError(0, f"invariant '{name}' is defined twice")
        seen.add(name)
        if not lines:
            raise FormulaSyntaxError(0, f"invariant '{name}' has no formula")
        try:
            formula = parse_formula(" ".join(lines))
        except FormulaSyntaxError as e:
            raise FormulaSyntaxError(e.position, f"[{name}] {e.reason}")
        invariants.append(Invariant(name, formula))
    return invariants


def load_invariants(reference: str) -> List[Invariant]:
    """Loads ``builtin:<name>`` or an invariant file path."""
    if is_builtin(reference):
        name = builtin_name(reference)
        if name not in BUILTIN_INVARIANTS:
            raise FormulaSyntaxError(0, f"unknown builtin invariant '{name}'")
        return parse_invariants(read_resource("invariants", BUILTIN_INVARIANTS[name]), name)
    invariants = parse_invariants(read_text(reference))
    log.debug(f"Loaded {len(invariants)} invariant(s) from {reference}")
    return invariants


def check_all(invariants: Iterable[Invariant], tree: XmlTree) -> List[Verdict]:
    return [invariant.check(tree) for invariant in invariants]


# --- pruning --------------------------------------------------------------


class Verdict3(Enum):
    PRUNE = "prune"
    KEEP = "keep"
    UNKNOWN = "unknown"


Prune = Verdict3.PRUNE
Keep = Verdict3.KEEP
Unknown = Verdict3.UNKNOWN


def __fixpoints__(formula: Formula) -> Iterable[Formula]:
    if isinstance(formula, (Mu, Nu)):
        yield formula
        yield from __fixpoints__(formula.body)
    elif isinstance(formula, (And, Or)):
        yield from __fixpoints__(formula.left)
        yield from __fixpoints__(formula.right)
    elif isinstance(formula, (SomeChild, EveryChild, SomeDescendant, EveryDescendant, CountChildren)):
        yield from __fixpoints__(formula.body)


class PruningFilter:
    """Decode-time three-valued check of a safety formula on partial trees.

    ``Prune`` means no refinement of the partial tree satisfies the formula,
    ``Keep`` means every refinement does, anything else is ``Unknown``.
    Open elements may still gain children; unresolved attribute values may
    take any value.
    """

    def __init__(self, formula: Formula, name: str = ""):
        if any(isinstance(f, Mu) for f in __fixpoints__(formula)):
            raise NotSafetyShaped("least fixpoints describe eventualities a prefix cannot refute")
        self.formula = formula
        self.name = name

    def __call__(self, partial: Union[PartialTree, XmlTree, str]) -> Verdict3:
        if isinstance(partial, str):
            partial = parse_partial(partial)
        elif isinstance(partial, XmlTree):
            partial = PartialTree(partial, frozenset())
        tree = partial.tree
        if tree.is_bottom:
            return Unknown
        upper = __Evaluator__(tree, partial.open_paths, optimistic=True)
        lower = __Evaluator__(tree, partial.open_paths, optimistic=False)
        possible = upper.run(self.formula, {})
        certain = lower.run(self.formula, {})
        guard = guard_scope(self.formula)
        if guard is None:
            if ROOT not in possible:
                return Prune
            return Keep if ROOT in certain else Unknown
        for path in sorted(lower.run(guard, {})):
            if path not in possible:
                log.debug(f"Pruning: {self.name or self.formula} fails for good at {path}")
                return Prune
        if not partial.open_paths and all(p in certain for p in tree.nodes):
            return Keep
        return Unknown


def pruning_filter(formula: Formula, name: str = "") -> PruningFilter:
    return PruningFilter(formula, name)
