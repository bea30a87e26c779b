"""Prompt transformers built from certified rewrite rules, plus Kleene and
Banach iteration drivers.

A pass evaluates every rule's guard on the tree as it was when the pass
started, in rule order and document order, and applies the actions to a
working copy. Certified actions only append children, join attribute values
or refine content, so every pass is inflationary. Rules whose guard stays
true under refinement and whose action joins a fixed value are also
monotone.
"""

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

from .classes import (
    BOTTOM,
    ENGINE_DEFAULTS,
    HOLE,
    ROOT,
    TOP,
    BudgetExceeded,
    ContentSpec,
    DeweyPath,
    EngineError,
    IterationReport,
    Literal,
    MonotonicityReport,
    NoContractionObserved,
    NodeLabel,
    RuleConflict,
    UncertifiedRule,
    XmlTree,
    as_content,
    element,
    pattern,
)
from .grammar import Grammar
from .lattice import DEFAULT_LATTICE, LatticeConfig, content_join, join, refines
from .metric import DEFAULT_METRIC, MetricConfig, distance
from .utils import log

Guard = Callable[[XmlTree, DeweyPath], bool]
ContentResolver = Union[str, ContentSpec, Callable[[XmlTree, DeweyPath], Optional[ContentSpec]]]

# --- guards --------------------------------------------------------------
#
# A guard is ``upward_closed`` when it keeps holding at a path once the tree
# is refined. Only such guards can take part in a monotone rule; plain
# callables count as not upward closed.


def upward_closed(guard: Guard) -> bool:
    return bool(getattr(guard, "upward_closed", False))


def is_root(tree: XmlTree, path: DeweyPath) -> bool:
    return path == ROOT


is_root.upward_closed = True


def tag_is(tag: str) -> Guard:
    def guard(tree: XmlTree, path: DeweyPath) -> bool:
        label = tree.label(path)
        return label is not None and label.tag == tag

    guard.upward_closed = True
    return guard


def lacks_child(tag: str) -> Guard:
    def guard(tree: XmlTree, path: DeweyPath) -> bool:
        return path in tree and all(tree[c].tag != tag for c in tree.children(path))

    guard.upward_closed = False
    return guard


def children_fewer_than(limit: int, tag: Optional[str] = None) -> Guard:
    def guard(tree: XmlTree, path: DeweyPath) -> bool:
        kids = tree.children(path)
        if tag is not None:
            kids = tuple(c for c in kids if tree[c].tag == tag)
        return path in tree and len(kids) < limit

    guard.upward_closed = False
    return guard


def at_path(target: DeweyPath) -> Guard:
    def guard(tree: XmlTree, path: DeweyPath) -> bool:
        return path == target

    guard.upward_closed = True
    return guard


def all_of(*guards: Guard) -> Guard:
    def guard(tree: XmlTree, path: DeweyPath) -> bool:
        return all(g(tree, path) for g in guards)

    guard.upward_closed = all(upward_closed(g) for g in guards)
    return guard


# --- changes and actions ---------------------------------------------------


@dataclass(frozen=True)
class Change:
    """One elementary edit proposed by an action.

    ``kind`` is ``content``, ``attribute``, ``append``, ``merge`` (join a
    whole subtree into the node at ``path``, root label included),
    ``replace_root`` (seed the empty tree) or ``replace``. ``replace`` swaps
    the whole tree and is only accepted from uncertified actions.
    """

    kind: str
    path: DeweyPath
    value: Union[ContentSpec, XmlTree, None] = None
    name: Optional[str] = None


class RewriteAction:
    """Base class of rule actions.

    ``certified`` actions never delete or generalize, so a pass is
    inflationary. ``monotone`` actions are in addition a join with a value
    that does not depend on the tree, so a pass over upward-closed guards
    is monotone.
    """

    certified = True
    monotone = False

    def changes(self, tree: XmlTree, path: DeweyPath) -> List[Change]:
        raise NotImplementedError


def __resolve__(resolver: ContentResolver, tree: XmlTree, path: DeweyPath) -> Optional[ContentSpec]:
    if callable(resolver):
        result = resolver(tree, path)
        return None if result is None else as_content(result)
    return as_content(resolver)


class ExpandChildren(RewriteAction):
    """Adds template children under the node.

    ``template`` is a tree whose root stands for the target node. In
    ``append`` mode the template children become new last children of a
    node with the template's tag, and the template seeds the empty tree. In
    ``merge`` mode the whole template is joined into the subtree at the
    node, so template child i meets node child i and a tag clash is a rule
    conflict; leave the template root's content as a hole unless it should
    be fixed too.
    """

    def __init__(
        self,
        template: Union[XmlTree, Callable[[XmlTree, DeweyPath], Optional[XmlTree]]],
        mode: str = "append",
    ):
        if mode not in ("append", "merge"):
            raise ValueError(f"Unknown ExpandChildren mode '{mode}'")
        self.template = template
        self.mode = mode
        self.monotone = mode == "merge" and not callable(template)

    def changes(self, tree: XmlTree, path: DeweyPath) -> List[Change]:
        template = self.template(tree, path) if callable(self.template) else self.template
        if template is None or template.is_bottom:
            return []
        if path not in tree:
            if path == ROOT and tree.is_bottom:
                return [Change("replace_root", ROOT, template)]
            return []
        if self.mode == "merge":
            return [Change("merge", path, template)]
        if tree[path].tag != template[ROOT].tag:
            return []
        return [Change("append", path, template.subtree(child)) for child in template.children(ROOT)]


class Annotate(RewriteAction):
    def __init__(self, name: str, spec: ContentResolver):
        self.name = name
        self.spec = spec
        self.monotone = not callable(spec)

    def changes(self, tree: XmlTree, path: DeweyPath) -> List[Change]:
        value = __resolve__(self.spec, tree, path)
        if value is None:
            return []
        return [Change("attribute", path, value, name=self.name)]


class FillHole(RewriteAction):
    """Joins the resolver's value into the node's content (or ``attribute``).

    Content that already refines the value is left alone; content that
    disagrees with it is a rule conflict.
    """

    def __init__(self, resolver: ContentResolver, attribute: Optional[str] = None):
        self.resolver = resolver
        self.attribute = attribute
        self.monotone = not callable(resolver)

    def changes(self, tree: XmlTree, path: DeweyPath) -> List[Change]:
        if path not in tree:
            return []
        value = __resolve__(self.resolver, tree, path)
        if value is None:
            return []
        if self.attribute is None:
            return [Change("content", path, value)]
        return [Change("attribute", path, value, name=self.attribute)]


class EnforceGrammar(RewriteAction):
    """Joins the node's content with the regular language of ``nonterminal``."""

    monotone = True

    def __init__(self, grammar: Grammar, nonterminal: str, attribute: Optional[str] = None):
        regex = grammar.regex_for(nonterminal)
        if regex is None:
            raise ValueError(f"Nonterminal '{nonterminal}' is recursive and has no regular form")
        self.grammar = grammar
        self.nonterminal = nonterminal
        self.attribute = attribute
        self.spec = pattern(regex)

    def changes(self, tree: XmlTree, path: DeweyPath) -> List[Change]:
        if path not in tree:
            return []
        if self.attribute is None:
            return [Change("content", path, self.spec)]
        return [Change("attribute", path, self.spec, name=self.attribute)]


EvidencePayload = Union[Tuple[str, float], Callable[[XmlTree, DeweyPath], Optional[Tuple[str, float]]]]


def evidence(ref: str, conf: float) -> XmlTree:
    return element("evidence", attrs=[("ref", ref), ("conf", f"{conf:.2f}")])


class InsertEvidence(RewriteAction):
    """Appends ``<evidence ref conf/>`` unless the node already cites ``ref``."""

    def __init__(self, payload: EvidencePayload):
        self.payload = payload

    def changes(self, tree: XmlTree, path: DeweyPath) -> List[Change]:
        if path not in tree:
            return []
        payload = self.payload(tree, path) if callable(self.payload) else self.payload
        if payload is None:
            return []
        ref, conf = payload
        for child in tree.children(path):
            label = tree[child]
            if label.tag == "evidence" and label.attribute("ref") == Literal(ref):
                return []
        return [Change("append", path, evidence(ref, conf))]


@dataclass(frozen=True)
class RewriteRule:
    name: str
    guard: Guard
    action: RewriteAction
    edit_budget: Optional[int] = None

    @property
    def monotone(self) -> bool:
        """Upward-closed guard, monotone action and no edit budget."""
        return self.edit_budget is None and upward_closed(self.guard) and getattr(self.action, "monotone", False)


# --- transformers ----------------------------------------------------------


def __graft__(tree: XmlTree, path: DeweyPath, subtree: XmlTree) -> XmlTree:
    n = len(path)
    nodes = {p: label for p, label in tree.nodes.items() if p[:n] != path}
    for p, label in subtree.nodes.items():
        nodes[path + p] = label
    return XmlTree(nodes, validate=False)


class Transformer:
    """An ordered rule list applied as a single pass or until local quiescence."""

    def __init__(
        self,
        rules: Sequence[RewriteRule] = (),
        pass_policy: str = "single",
        allow_uncertified: bool = False,
        lattice: LatticeConfig = DEFAULT_LATTICE,
        name: str = "transformer",
    ):
        if pass_policy not in ("single", "quiescence"):
            raise ValueError(f"Unknown pass policy '{pass_policy}'")
        for rule in rules:
            if not getattr(rule.action, "certified", False) and not allow_uncertified:
                raise UncertifiedRule(rule.name)
        self.rules: Tuple[RewriteRule, ...] = tuple(rules)
        self.pass_policy = pass_policy
        self.lattice = lattice
        self.name = name

    def __call__(self, tree: XmlTree) -> XmlTree:
        return self.apply(tree)

    def __repr__(self) -> str:
        return f"Transformer({self.name!r}, {len(self.rules)} rules, {self.pass_policy})"

    @property
    def monotone(self) -> bool:
        """A single pass of monotone rules; the quiescence policy never qualifies."""
        return self.pass_policy == "single" and all(rule.monotone for rule in self.rules)

    def apply(self, tree: XmlTree) -> XmlTree:
        """One application: a single pass, or passes until nothing changes.

        Raises:
            RuleConflict: When two writes to the same slot disagree.
        """
        if tree.is_top:
            return TOP
        if self.pass_policy == "single":
            return self.__pass__(tree)
        current = tree
        for _ in range(ENGINE_DEFAULTS["local_pass_limit"]):
            nxt = self.__pass__(current)
            if nxt == current:
                return current
            current = nxt
        log.warn(f"{self.name}: no local quiescence after {ENGINE_DEFAULTS['local_pass_limit']} passes")
        return current

    def __candidates__(self, snapshot: XmlTree) -> List[DeweyPath]:
        return [ROOT] if snapshot.is_bottom else snapshot.paths()

    def __pass__(self, snapshot: XmlTree) -> XmlTree:
        working = snapshot
        writers: Dict[tuple, str] = {}
        candidates = self.__candidates__(snapshot)
        for rule in self.rules:
            edits_per_level: Dict[int, int] = {}
            for path in candidates:
                if rule.edit_budget is not None and edits_per_level.get(len(path), 0) >= rule.edit_budget:
                    continue
                if not rule.guard(snapshot, path):
                    continue
                before = working
                for change in rule.action.changes(working, path):
                    working = self.__apply__(working, change, rule, writers)
                if working != before:
                    edits_per_level[len(path)] = edits_per_level.get(len(path), 0) + 1
        return working

    def __apply__(self, tree: XmlTree, change: Change, rule: RewriteRule, writers: Dict[tuple, str]) -> XmlTree:
        kind, path = change.kind, change.path
        if kind == "replace":
            if rule.action.certified:
                raise UncertifiedRule(rule.name)
            return change.value
        if kind == "replace_root":
            if not tree.is_bottom:
                return tree
            writers[("node", ROOT)] = rule.name
            return change.value
        label = tree.label(path)
        if label is None:
            return tree
        if kind == "append":
            return tree.with_child(path, change.value)
        if kind == "content":
            slot = ("content", path)
            joined = content_join(label.content, change.value, self.lattice)
            if joined is None:
                raise RuleConflict(writers.get(slot, "<tree>"), rule.name, path)
            if joined == label.content:
                return tree
            writers[slot] = rule.name
            return tree.with_label(path, label.with_content(joined))
        if kind == "attribute":
            slot = ("attribute", path, change.name)
            current = label.attribute(change.name)
            joined = change.value if current is None else content_join(current, change.value, self.lattice)
            if joined is None:
                raise RuleConflict(writers.get(slot, "<tree>"), rule.name, path)
            if joined == current:
                return tree
            writers[slot] = rule.name
            return tree.with_label(path, label.with_attribute(change.name, joined))
        if kind == "merge":
            slot = ("node", path)
            here = tree.subtree(path)
            merged = join([here, change.value], self.lattice)
            if merged.is_top:
                raise RuleConflict(writers.get(slot, "<tree>"), rule.name, path)
            if merged == here:
                return tree
            writers[slot] = rule.name
            return __graft__(tree, path, merged)
        raise EngineError(f"Unknown change kind '{kind}'", "apply")


class ComposedTransformer(Transformer):
    """Left-to-right composition; each part keeps its own pass policy."""

    def __init__(self, parts: Sequence[Transformer], name: str = "composed"):
        rules = tuple(rule for part in parts for rule in part.rules)
        super().__init__(rules, allow_uncertified=True, name=name)
        self.parts = tuple(parts)

    @property
    def monotone(self) -> bool:
        return all(getattr(part, "monotone", False) for part in self.parts)

    def apply(self, tree: XmlTree) -> XmlTree:
        for part in self.parts:
            tree = part.apply(tree)
        return tree


def compose(transformers: Sequence[Transformer]) -> Transformer:
    if not transformers:
        raise ValueError("compose needs at least one transformer")
    if len(transformers) == 1:
        return transformers[0]
    return ComposedTransformer(transformers, name="+".join(t.name for t in transformers))


IDENTITY = Transformer((), name="identity")


def __safe_apply__(transformer: Callable[[XmlTree], XmlTree], tree: XmlTree) -> XmlTree:
    try:
        return transformer(tree)
    except RuleConflict:
        return TOP


def check_monotone(
    transformer: Callable[[XmlTree], XmlTree],
    sampler: Union[Callable[[], Tuple[XmlTree, XmlTree]], Iterable[Tuple[XmlTree, XmlTree]]],
    n: int = 100,
    lattice: LatticeConfig = DEFAULT_LATTICE,
) -> MonotonicityReport:
    """Checks refines(T(a), T(b)) on sampled pairs with refines(a, b).

    A rule conflict counts as the top element for that side.
    """
    pairs = (sampler() for _ in range(n)) if callable(sampler) else iter(sampler)
    checked = 0
    for a, b in pairs:
        if checked >= n:
            break
        if not refines(a, b, lattice):
            log.debug("check_monotone: skipping an incomparable pair")
            continue
        checked += 1
        if not refines(__safe_apply__(transformer, a), __safe_apply__(transformer, b), lattice):
            log.warn(f"Monotonicity counterexample after {checked} pairs")
            return MonotonicityReport(False, checked, (a, b))
    return MonotonicityReport(True, checked)


def kleene_iterate(
    transformer: Callable[[XmlTree], XmlTree],
    start: XmlTree = BOTTOM,
    max_steps: int = ENGINE_DEFAULTS["budget"],
    post_fixed_points: Iterable[XmlTree] = (),
    lattice: LatticeConfig = DEFAULT_LATTICE,
) -> IterationReport:
    """Ascending chain start, T(start), T(T(start)), ... up to a fixed point.

    ``steps`` counts applications, so a start that is already fixed takes
    one step. Every given post-fixed point p (T(p) refines into p, a rule
    conflict counting as the top element) is checked to lie above the fixed
    point. The report records under ``monotone`` whether the transformer is certified
    (``true``), known not to be (``false``) or a plain callable
    (``unknown``).

    Raises:
        BudgetExceeded: Carrying the last iterate and the partial report.
    """
    report = IterationReport("kleene", iterates=[start])
    task = log.start(f"Kleene iteration (budget {max_steps})")
    certified = getattr(transformer, "monotone", None)
    report.extra["monotone"] = "unknown" if certified is None else str(bool(certified)).lower()
    if not certified:
        report.event("monotonicity_uncertified")
        log.debug("Kleene iteration over a transformer that is not certified monotone")
    current = start
    for step in range(1, max_steps + 1):
        nxt = transformer(current)
        report.steps = step
        if nxt == current:
            report.fixed_point = current
            report.converged_at = len(report.iterates) - 1
            break
        if not refines(current, nxt, lattice):
            report.event(f"non_inflationary step={step}")
        report.productive_steps += 1
        report.iterates.append(nxt)
        current = nxt
    else:
        log.finish(task, "budget exhausted", success=False)
        raise BudgetExceeded(max_steps, current, report)
    checked = violations = 0
    for candidate in post_fixed_points:
        if not refines(__safe_apply__(transformer, candidate), candidate, lattice):
            report.event("skipped a candidate that is not post-fixed")
            continue
        checked += 1
        if not refines(report.fixed_point, candidate, lattice):
            violations += 1
            report.event(f"lfp_violation candidate={checked}")
    if checked:
        report.extra["post_fixed_checked"] = checked
        report.extra["lfp_violations"] = violations
    log.finish(task, f"fixed point after {report.steps} steps")
    return report


def banach_iterate(
    transformer: Callable[[XmlTree], XmlTree],
    start: XmlTree,
    config: MetricConfig = DEFAULT_METRIC,
    eps: float = ENGINE_DEFAULTS["eps"],
    max_steps: int = ENGINE_DEFAULTS["budget"],
    beta: Optional[float] = None,
    strict: bool = False,
) -> IterationReport:
    """Iterates until consecutive iterates are within ``eps``.

    Records the consecutive distances, the observed contraction ratio
    ``q_hat`` (largest ratio of consecutive distances, 0 when there is none)
    and, when ``q_hat < 1``, the tail bound ``q_hat**n / (1 - q_hat) * d0``
    for every step together with a check of the observed distance to the
    final iterate against it. Ratios of 1 or more are reported as events.

    With ``beta`` set, each pass must resolve at least ``ceil((1 - beta) * H)``
    of the H holes present before it.

    With ``strict`` the run still goes to the end, then raises
    ``NoContractionObserved`` for the first ratio of 1 or more.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    report = IterationReport("banach", iterates=[start])
    task = log.start(f"Banach iteration (eps {eps:g}, budget {max_steps})")
    current = start
    for step in range(1, max_steps + 1):
        nxt = transformer(current)
        gap = distance(current, nxt, config).value
        report.steps = step
        report.distances.append(gap)
        report.iterates.append(nxt)
        if beta is not None:
            holes = len(current.holes())
            if holes:
                resolved = holes - len(nxt.holes())
                needed = math.ceil((1.0 - beta) * holes)
                if resolved < needed:
                    report.event(f"beta_shortfall step={step} resolved={resolved} needed={needed}")
        if gap > 0:
            report.productive_steps += 1
        previous, current = current, nxt
        if gap <= eps:
            if nxt == previous:
                report.fixed_point = nxt
            else:
                report.event(f"eps_converged step={step}")
            break
    else:
        report.event(f"budget_exhausted steps={max_steps}")

    ratios = []
    stalled: Optional[Tuple[int, float]] = None
    for n in range(1, len(report.distances)):
        before = report.distances[n - 1]
        if before > 0:
            ratio = report.distances[n] / before
            ratios.append(ratio)
            if ratio >= 1.0:
                report.event(f"no_contraction step={n + 1} ratio={ratio:.6g}")
                stalled = stalled or (n + 1, ratio)
                log.warn(f"No contraction observed at step {n + 1}: ratio {ratio:.6g}")
    report.q_hat = max(ratios, default=0.0)

    if report.fixed_point is not None:
        report.converged_at = report.iterates.index(report.fixed_point)
    if report.q_hat < 1.0 and report.distances:
        d0 = report.distances[0]
        q = report.q_hat
        report.bound_trace = [q ** n / (1.0 - q) * d0 for n in range(1, len(report.distances) + 1)]
        final = report.iterates[-1]
        bound_ok = True
        for n, iterate in enumerate(report.iterates):
            observed = distance(iterate, final, config).value
            bound = q ** n / (1.0 - q) * d0
            if observed > bound + eps:
                bound_ok = False
                report.event(f"bound_violation n={n} observed={observed:.12g} bound={bound:.12g}")
        report.extra["bound_ok"] = "true" if bound_ok else "false"
    log.finish(task, f"q_hat={report.q_hat:.6g}", success=report.converged)
    if strict and stalled is not None:
        raise NoContractionObserved(stalled[0], stalled[1], report)
    return report


# --- synthetic contraction family -----------------------------------------


@dataclass(frozen=True)
class HoleFiller:
    start: XmlTree
    transformer: Transformer
    q: float
    schedule: Tuple[Tuple[int, int], ...] = field(default=())


def __group_guard__(group: int) -> Guard:
    def guard(tree: XmlTree, path: DeweyPath) -> bool:
        label = tree.label(path)
        if label is None or label.tag != "slot" or label.attribute("group") != Literal(str(group)):
            return False
        for _, other in tree.items():
            if other.tag != "slot" or other.content != HOLE:
                continue
            earlier = other.attribute("group")
            if isinstance(earlier, Literal) and int(earlier.text) < group:
                return False
        return True

    return guard


def hole_filler(schedule: Sequence[Tuple[int, int]]) -> HoleFiller:
    """Synthetic family whose pass g fills the ``count`` holes of group g at ``depth``.

    The start tree is a chain of ``<level>`` nodes; holes are ``<slot>``
    children of the level node one above their depth. With the default
    weights the ratio of consecutive distances is
    ``count_{g+1} / count_g * 4 ** (depth_g - depth_{g+1})``; the returned
    ``q`` is the largest such ratio.

    Example:
        hole_filler([(1, 1), (2, 1), (3, 1), (4, 1)]).q == 0.25
    """
    if not schedule:
        raise ValueError("schedule must name at least one group")
    for depth, count in schedule:
        if depth < 1 or count < 1:
            raise ValueError(f"Invalid group (depth={depth}, count={count})")
    deepest = max(depth for depth, _ in schedule)
    nodes: Dict[DeweyPath, NodeLabel] = {}
    for level in range(deepest):
        nodes[(1,) * level] = NodeLabel("level", {"depth": str(level)})
    counters = {(1,) * level: (1 if level + 1 < deepest else 0) for level in range(deepest)}
    for group, (depth, count) in enumerate(schedule, start=1):
        parent = (1,) * (depth - 1)
        for _ in range(count):
            counters[parent] += 1
            nodes[parent + (counters[parent],)] = NodeLabel("slot", {"group": str(group)}, HOLE)
    start = XmlTree(nodes)
    rules = [
        RewriteRule(f"fill-group-{group}", __group_guard__(group), FillHole(Literal(f"value {group}")))
        for group in range(1, len(schedule) + 1)
    ]
    ratios = [
        (schedule[g + 1][1] / schedule[g][1]) * DEFAULT_METRIC.weight_base ** (schedule[g][0] - schedule[g + 1][0])
        for g in range(len(schedule) - 1)
    ]
    return HoleFiller(start, Transformer(rules, name="hole-filler"), max(ratios, default=0.0), tuple(schedule))
