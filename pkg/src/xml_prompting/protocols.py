"""Plan, verify and answer protocols executed as chains of transformer passes.

Every pass is an engine ``Transformer`` whose single rule fires at the node
doing the work (a dialog turn, a branch turn, or the closing ``<compare>``
/ ``<join>`` node). Passes only append children or add attributes, so each
snapshot refines the one before it. Rejected steps are never edited: the
verifier's counterexample stays under the step, the step is marked
``superseded`` and its replacement is appended with the next revision.
"""

import os
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

from .agents import (
    ChannelBus,
    Counterexample,
    Evidence,
    HttpProposer,
    Message,
    Proposer,
    ProposalRequest,
    ScriptedProposer,
    ScriptedVerifier,
    SeededRandomProposer,
    StubTool,
    ToolRegistry,
    VerificationRequest,
    Verifier,
)
from .classes import (
    MESSAGE_CONSUMED,
    NAME_REGEX,
    PROTOCOL_DEFAULTS,
    PROTOCOL_INVARIANTS,
    PROTOCOL_KINDS,
    ROOT,
    STEP_REVISION,
    STEP_SUPERSEDED,
    BranchFailure,
    ConfigError,
    DeweyPath,
    IterationReport,
    Literal,
    MalformedXml,
    NodeLabel,
    ProposerExhausted,
    ProtocolError,
    ProtocolViolation,
    RoundBudgetExceeded,
    ToolFailure,
    UnconsumedMessages,
    Verdict,
    VerifierRejectedAll,
    XmlTree,
    element,
)
from .config import HoleFillerSection, ProposerOptions, RunConfig, read_run_file
from .engine import Change, RewriteAction, RewriteRule, Transformer, at_path, banach_iterate, evidence, hole_filler
from .grammar import Grammar, Vocabulary, accepts, first_dead_position, load_grammar
from .invariants import Invariant, check_all, load_invariants
from .lattice import DEFAULT_LATTICE, LatticeConfig, join, parse_document, refines, serialize, serialize_partial
from .metric import DEFAULT_METRIC, MetricConfig, distance
from .utils import log, read_text, resolve_relative, write_text

CLOSINGS = ("compare", "join")

Support = List[Tuple[str, float]]


@dataclass
class ProtocolSpec:
    """Everything a run needs besides its proposers and verifier.

    ``skeleton`` overrides the default starting tree built from ``task``,
    ``guidelines`` and ``branches``.
    """

    kind: str
    grammar: Grammar
    invariants: Sequence[Invariant] = ()
    budget: int = PROTOCOL_DEFAULTS["budget"]
    retry_budget: int = PROTOCOL_DEFAULTS["retry_budget"]
    evidence_threshold: float = PROTOCOL_DEFAULTS["evidence_threshold"]
    step_min_evidence: int = PROTOCOL_DEFAULTS["step_min_evidence"]
    answer_min_evidence: int = PROTOCOL_DEFAULTS["answer_min_evidence"]
    branches: Tuple[str, ...] = ()
    skeleton: Optional[XmlTree] = None
    task: Optional[str] = None
    guidelines: Optional[str] = None
    closing: str = "compare"
    channel: str = "bus"
    concurrent: bool = False
    abort_on_total_rejection: bool = False
    max_tokens: int = PROTOCOL_DEFAULTS["max_tokens"]
    tools: Mapping[str, StubTool] = field(default_factory=dict)
    metric: MetricConfig = DEFAULT_METRIC
    lattice: LatticeConfig = DEFAULT_LATTICE

    def __post_init__(self):
        if self.kind not in PROTOCOL_KINDS:
            raise ConfigError(f"Unknown protocol kind '{self.kind}'", f"Choose one of: {', '.join(PROTOCOL_KINDS)}")
        if self.budget < 1:
            raise ConfigError(f"budget must be at least 1, got {self.budget}")
        if self.retry_budget < 1:
            raise ConfigError(f"retry_budget must be at least 1, got {self.retry_budget}")
        if not 0.0 <= self.evidence_threshold <= 1.0:
            raise ConfigError(f"evidence_threshold must lie in [0, 1], got {self.evidence_threshold}")
        if self.step_min_evidence < 0 or self.answer_min_evidence < 0:
            raise ConfigError("Evidence minimums cannot be negative")
        if self.closing not in CLOSINGS:
            raise ConfigError(f"Unknown closing '{self.closing}'", f"Choose one of: {', '.join(CLOSINGS)}")
        self.branches = tuple(self.branches)
        if len(set(self.branches)) != len(self.branches):
            raise ConfigError("Branch names must be unique")
        for name in self.branches:
            if not NAME_REGEX.match(name):
                raise ConfigError(f"Invalid branch name '{name}'")
        if self.kind in ("multibranch", "channel_exchange") and len(self.branches) < 2:
            raise ConfigError(f"{self.kind} needs at least two branches, got {len(self.branches)}")


@dataclass
class ProtocolResult:
    tree: XmlTree
    snapshots: List[XmlTree]
    report: IterationReport
    verdicts: List[Verdict] = field(default_factory=list)
    branch_snapshots: Dict[str, List[XmlTree]] = field(default_factory=dict)

    @property
    def answered(self) -> bool:
        return self.report.extra.get("answered") == "true"

    @property
    def complete(self) -> bool:
        """An answered protocol run, or a hole-filler iteration that reached its fixed point."""
        return self.report.converged


# --- tree helpers ------------------------------------------------------------------


def child(tree: XmlTree, path: DeweyPath, tag: str) -> Optional[DeweyPath]:
    """First child of ``path`` with ``tag``."""
    for kid in tree.children(path):
        if tree[kid].tag == tag:
            return kid
    return None


def __text__(label: NodeLabel, name: Optional[str] = None) -> Optional[str]:
    value = label.content if name is None else label.attribute(name)
    return value.text if isinstance(value, Literal) else None


def __number__(label: NodeLabel, name: str, default: Optional[int] = None) -> Optional[int]:
    raw = __text__(label, name)
    if raw is None:
        return default
    try:
        return int(raw)
    except ValueError:
        return default


def active_steps(tree: XmlTree, plan: DeweyPath) -> List[DeweyPath]:
    """Steps of ``plan`` that no later revision replaced."""
    return [
        kid
        for kid in tree.children(plan)
        if tree[kid].tag == "step" and __text__(tree[kid], STEP_SUPERSEDED) != "true"
    ]


def evidence_of(tree: XmlTree, path: DeweyPath, threshold: float = 0.0) -> Support:
    """``(ref, conf)`` of the evidence children of ``path`` with conf at least ``threshold``."""
    found = []
    for kid in tree.children(path):
        label = tree[kid]
        if label.tag != "evidence":
            continue
        ref, conf = __text__(label, "ref"), __text__(label, "conf")
        if ref is None or conf is None:
            continue
        try:
            value = float(conf)
        except ValueError:
            continue
        if value >= threshold:
            found.append((ref, value))
    return found


def __judged__(tree: XmlTree, step: DeweyPath) -> bool:
    return any(tree[kid].tag in ("evidence", "counterexample") for kid in tree.children(step))


def __dedupe__(support: Support) -> Support:
    seen = set()
    out = []
    for ref, conf in support:
        if ref not in seen:
            seen.add(ref)
            out.append((ref, conf))
    return out


def __safe_text__(text: str) -> str:
    return re.sub(r"[<>]", "", text)


# --- sessions and passes ---------------------------------------------------------------


class ProtocolSession:
    """State of one worker: the node it writes under, its proposer and its round."""

    def __init__(
        self,
        spec: ProtocolSpec,
        proposer: Proposer,
        verifier: Verifier,
        work: DeweyPath,
        branch: Optional[str] = None,
        report: Optional[IterationReport] = None,
    ):
        self.spec = spec
        self.proposer = proposer
        self.verifier = verifier
        self.work = work
        self.branch = branch
        self.report = report or IterationReport(spec.kind)
        self.round = 0
        self.hold_answer = False
        self.halted = False
        self.snapshots: List[XmlTree] = []
        self.extra_support: Callable[[XmlTree], Support] = lambda tree: []
        self.extra_gate: Callable[[XmlTree], bool] = lambda tree: True
        self.passes: List[Transformer] = [
            self.__transformer__("plan", PlanAction(self)),
            self.__transformer__("verify", VerifyAction(self)),
            self.__transformer__("answer", AnswerAction(self)),
        ]

    def __transformer__(self, name: str, action: RewriteAction) -> Transformer:
        label = f"{self.branch}:{name}" if self.branch else name
        return Transformer([RewriteRule(label, at_path(self.work), action)], name=label)

    def insert_pass(self, name: str, action: RewriteAction, before: str = "answer"):
        names = [t.name.split(":")[-1] for t in self.passes]
        self.passes.insert(names.index(before), self.__transformer__(name, action))

    @property
    def where(self) -> str:
        return f"branch '{self.branch}'" if self.branch else "dialog"

    def propose(
        self,
        tree: XmlTree,
        path: DeweyPath,
        site: str,
        start: str,
        index: Optional[int] = None,
        check: Optional[Callable[[XmlTree], Optional[str]]] = None,
    ) -> XmlTree:
        """Ask the proposer for a ``start`` fragment, retrying rejected drafts.

        Raises:
            ProposerExhausted: After ``retry_budget`` rejected attempts.
        """
        grammar = self.spec.grammar.with_start(start)
        reasons: List[str] = []
        for attempt in range(1, self.spec.retry_budget + 1):
            request = ProposalRequest(
                tree, path, grammar, site, self.round, attempt, self.branch, index, self.spec.max_tokens
            )
            text = self.proposer.propose(request)
            if not accepts(grammar, text):
                offset = first_dead_position(grammar, text)
                reasons.append(f"attempt {attempt}: not a {start} fragment (dead at offset {offset})")
                log.warn(f"{self.where}: rejected {site} draft {attempt}/{self.spec.retry_budget}")
                continue
            try:
                fragment = parse_document(text)
            except MalformedXml as e:
                reasons.append(f"attempt {attempt}: {e.reason}")
                continue
            problem = check(fragment) if check else None
            if problem:
                reasons.append(f"attempt {attempt}: {problem}")
                log.warn(f"{self.where}: rejected {site} draft {attempt}: {problem}")
                continue
            return fragment
        raise ProposerExhausted(path, self.spec.retry_budget, reasons)

    def support(self, tree: XmlTree) -> Support:
        plan = child(tree, self.work, "plan")
        found: Support = []
        if plan is not None:
            for step in active_steps(tree, plan):
                found.extend(evidence_of(tree, step, self.spec.evidence_threshold))
        found.extend(self.extra_support(tree))
        return __dedupe__(found)

    def gate_open(self, tree: XmlTree) -> bool:
        """Every active step carries enough qualifying evidence and so does the answer."""
        plan = child(tree, self.work, "plan")
        if plan is None:
            return False
        steps = active_steps(tree, plan)
        if not steps:
            return False
        for step in steps:
            if len(evidence_of(tree, step, self.spec.evidence_threshold)) < self.spec.step_min_evidence:
                return False
        if len(self.support(tree)) < self.spec.answer_min_evidence:
            return False
        return self.extra_gate(tree)

    def answered(self, tree: XmlTree) -> bool:
        return child(tree, self.work, "answer") is not None

    def run_round(self, tree: XmlTree) -> XmlTree:
        self.round += 1
        log.debug(f"{self.where}: round {self.round}")
        for transformer in self.passes:
            nxt = transformer(tree)
            if nxt != tree:
                self.snapshots.append(nxt)
                tree = nxt
            if self.halted:
                break
        return tree

    def run(self, tree: XmlTree) -> XmlTree:
        """Rounds until the answer exists, a tool failure halts the worker, or the budget ends.

        Raises:
            RoundBudgetExceeded: Carrying the last tree.
        """
        self.snapshots.append(tree)
        for _ in range(self.spec.budget):
            tree = self.run_round(tree)
            if self.answered(tree) or self.halted:
                return tree
        raise RoundBudgetExceeded(self.spec.budget, tree, self.branch, self.report)


class PlanAction(RewriteAction):
    """Requests the plan, then a replacement for every refuted step."""

    def __init__(self, session: ProtocolSession):
        self.session = session

    def changes(self, tree: XmlTree, path: DeweyPath) -> List[Change]:
        session = self.session
        plan = child(tree, path, "plan")
        if plan is None:
            fragment = session.propose(tree, path, "plan", "Plan", check=self.__fresh_plan__)
            return [Change("append", path, fragment)]
        out = []
        for step in active_steps(tree, plan):
            if child(tree, step, "counterexample") is None:
                continue
            label = tree[step]
            index = __number__(label, "index")
            revision = __number__(label, STEP_REVISION, 1)
            replacement = session.propose(
                tree, plan, "step", "Step", index=index, check=self.__replacement_check__(index)
            )
            fresh = replacement[ROOT].with_attribute(STEP_REVISION, str(revision + 1))
            out.append(Change("attribute", step, Literal("true"), name=STEP_SUPERSEDED))
            out.append(Change("append", plan, replacement.with_label(ROOT, fresh)))
            log.info(f"{session.where}: step {index} revised to revision {revision + 1}")
        return out

    @staticmethod
    def __fresh_plan__(fragment: XmlTree) -> Optional[str]:
        for path in fragment.children(ROOT):
            if fragment.children(path):
                return "a proposed plan cannot carry verification notes"
        return None

    @staticmethod
    def __replacement_check__(index: Optional[int]) -> Callable[[XmlTree], Optional[str]]:
        def check(fragment: XmlTree) -> Optional[str]:
            label = fragment[ROOT]
            if __number__(label, "index") != index:
                return f"replacement for step {index} has index {__text__(label, 'index')}"
            if label.attribute(STEP_SUPERSEDED) is not None:
                return "a replacement step cannot arrive superseded"
            if fragment.children(ROOT):
                return "a replacement step cannot carry verification notes"
            return None

        return check


class VerifyAction(RewriteAction):
    """Attaches evidence or a counterexample to every active step not judged yet."""

    def __init__(self, session: ProtocolSession):
        self.session = session

    def changes(self, tree: XmlTree, path: DeweyPath) -> List[Change]:
        session = self.session
        plan = child(tree, path, "plan")
        if plan is None:
            return []
        out = []
        judged = rejected = 0
        for step in active_steps(tree, plan):
            if __judged__(tree, step):
                continue
            label = tree[step]
            request = VerificationRequest(
                tree,
                step,
                session.round,
                session.branch,
                __number__(label, "index", 0) or 0,
                __text__(label) or "",
                __number__(label, STEP_REVISION, 1) or 1,
            )
            outcome = session.verifier.verify(request)
            judged += 1
            if isinstance(outcome, Evidence):
                out.append(Change("append", step, evidence(outcome.ref, outcome.conf)))
            elif isinstance(outcome, Counterexample):
                rejected += 1
                out.append(Change("append", step, element("counterexample", content=__safe_text__(outcome.text))))
            else:
                raise ProtocolError(f"Verifier returned {type(outcome).__name__}", "verify")
        if judged and rejected == judged:
            if session.spec.abort_on_total_rejection:
                raise VerifierRejectedAll(session.round)
            session.report.event(f"all_rejected where={session.branch or 'dialog'} round={session.round}")
            log.warn(f"{session.where}: every step was refuted in round {session.round}")
        return out


class AnswerAction(RewriteAction):
    """Emits the answer once the evidence gate is open, citing the supporting evidence."""

    def __init__(self, session: ProtocolSession):
        self.session = session

    def changes(self, tree: XmlTree, path: DeweyPath) -> List[Change]:
        session = self.session
        if session.hold_answer or session.answered(tree) or not session.gate_open(tree):
            return []
        answer = session.propose(tree, path, "answer", "Answer")
        cited = {ref for ref, _ in evidence_of(answer, ROOT)}
        for ref, conf in session.support(tree):
            if ref not in cited:
                answer = answer.with_child(ROOT, evidence(ref, conf))
        log.info(f"{session.where}: gate open, answer emitted in round {session.round}")
        return [Change("append", path, answer)]


class ToolCallAction(RewriteAction):
    """Requests a ``<toolcall>`` naming a registered tool once the plan exists."""

    def __init__(self, session: ProtocolSession, tools: ToolRegistry):
        self.session = session
        self.tools = tools

    def __check__(self, fragment: XmlTree) -> Optional[str]:
        function = child(fragment, ROOT, "function")
        name = __text__(fragment[function], "name") if function is not None else None
        if name not in self.tools:
            return f"unknown tool '{name}'"
        if child(fragment, ROOT, "counterexample") is not None:
            return "a proposed tool call cannot carry a counterexample"
        return None

    def changes(self, tree: XmlTree, path: DeweyPath) -> List[Change]:
        if child(tree, path, "plan") is None or child(tree, path, "toolcall") is not None:
            return []
        fragment = self.session.propose(tree, path, "toolcall", "ToolCall", check=self.__check__)
        return [Change("append", path, fragment)]


class InvokeAction(RewriteAction):
    """Runs the tool and embeds its fields in ``<agent_output>``.

    A failing tool leaves a counterexample under the tool call and halts
    the worker without an answer.
    """

    def __init__(self, session: ProtocolSession, tools: ToolRegistry):
        self.session = session
        self.tools = tools

    def changes(self, tree: XmlTree, path: DeweyPath) -> List[Change]:
        call = child(tree, path, "toolcall")
        if call is None or child(tree, path, "agent_output") is not None:
            return []
        if child(tree, call, "counterexample") is not None:
            return []
        function = child(tree, call, "function")
        name = __text__(tree[function], "name") or ""
        arguments = {
            __text__(tree[arg], "name") or "": __text__(tree[arg]) or ""
            for arg in tree.children(function)
            if tree[arg].tag == "arg"
        }
        task = log.start(f"Calling tool {name}")
        try:
            fields = self.tools[name](name, arguments)
        except ToolFailure as e:
            log.finish(task, e.reason, success=False)
            self.session.halted = True
            self.session.report.event(f"tool_failure tool={name}")
            return [Change("append", call, element("counterexample", content=__safe_text__(e.reason)))]
        log.finish(task)
        output = element(
            "agent_output",
            *[
                element(f.name, content=f.value, attrs=[("unit", f.unit)] if f.unit else None)
                for f in fields
            ],
            attrs={"source": name},
        )
        return [Change("append", path, output)]


# --- skeletons ---------------------------------------------------------------------


def __turn__() -> XmlTree:
    return element("turn", attrs={"role": "assistant"})


def default_skeleton(spec: ProtocolSpec) -> XmlTree:
    head = []
    if spec.task is not None:
        head.append(element("task", content=spec.task))
    if spec.guidelines is not None:
        head.append(element("guidelines", content=spec.guidelines))
    if spec.kind in ("plan_verify_answer", "tool_call"):
        return element("prompt", *head, element("dialog", __turn__()))
    body = []
    if spec.kind == "channel_exchange":
        body.append(element("channel", attrs={"name": spec.channel}))
    body.extend(element("branch", __turn__(), attrs={"name": name}) for name in spec.branches)
    return element("prompt", *head, *body)


def __skeleton__(spec: ProtocolSpec) -> XmlTree:
    return spec.skeleton if spec.skeleton is not None else default_skeleton(spec)


def dialog_turn(tree: XmlTree) -> DeweyPath:
    """First assistant turn without a plan."""
    for path in tree.find("turn"):
        if __text__(tree[path], "role") == "assistant" and child(tree, path, "plan") is None:
            return path
    raise ProtocolError("The skeleton has no open assistant turn", "run_protocol")


def branch_turns(tree: XmlTree, names: Sequence[str]) -> Dict[str, DeweyPath]:
    found: Dict[str, DeweyPath] = {}
    for path in tree.children(ROOT):
        label = tree[path]
        name = __text__(label, "name")
        if label.tag == "branch" and name in names:
            turn = child(tree, path, "turn")
            if turn is None:
                raise ProtocolError(f"Branch '{name}' has no turn", "run_protocol")
            found[name] = turn
    missing = [name for name in names if name not in found]
    if missing:
        raise ProtocolError(f"Skeleton lacks branches: {', '.join(missing)}", "run_protocol")
    return found


# --- reports -------------------------------------------------------------------------


def __report__(
    spec: ProtocolSpec, report: IterationReport, snapshots: List[XmlTree], answered: bool, rounds: int
) -> IterationReport:
    report.iterates = list(snapshots)
    report.steps = max(0, len(snapshots) - 1)
    report.distances = []
    monotone = True
    for n in range(1, len(snapshots)):
        before, after = snapshots[n - 1], snapshots[n]
        if not refines(before, after, spec.lattice):
            monotone = False
            report.event(f"non_monotone step={n}")
        report.distances.append(distance(before, after, spec.metric).value)
    report.productive_steps = sum(1 for gap in report.distances if gap > 0)
    if answered and snapshots:
        report.fixed_point = snapshots[-1]
        report.converged_at = len(snapshots) - 1
    report.extra["rounds"] = rounds
    report.extra["answered"] = "true" if answered else "false"
    report.extra["monotone"] = "true" if monotone else "false"
    return report


def __finish__(
    spec: ProtocolSpec,
    tree: XmlTree,
    snapshots: List[XmlTree],
    report: IterationReport,
    answered: bool,
    rounds: int,
    branch_snapshots: Optional[Dict[str, List[XmlTree]]] = None,
) -> ProtocolResult:
    """Checks the final tree against the grammar and every invariant.

    Raises:
        ProtocolViolation: When either check fails.
    """
    text = serialize(tree)
    if not accepts(spec.grammar, text):
        offset = first_dead_position(spec.grammar, text)
        raise ProtocolViolation(f"not accepted by {spec.grammar.name} (dead at offset {offset})")
    verdicts = check_all(spec.invariants, tree)
    for verdict in verdicts:
        if not verdict:
            raise ProtocolViolation(str(verdict))
    __report__(spec, report, snapshots, answered, rounds)
    return ProtocolResult(tree, list(snapshots), report, verdicts, dict(branch_snapshots or {}))


def __require__(spec: ProtocolSpec, kind: str):
    if spec.kind != kind:
        raise ProtocolError(f"Expected a {kind} spec, got {spec.kind}", f"run_{kind}")


Proposers = Union[Proposer, Mapping[str, Proposer]]


def __proposer_for__(proposers: Proposers, name: Optional[str]) -> Proposer:
    if isinstance(proposers, Proposer):
        return proposers
    if name is not None and name in proposers:
        return proposers[name]
    if "default" in proposers:
        return proposers["default"]
    raise ConfigError(f"No proposer for '{name}' and no default proposer")


# --- single-dialog protocols -------------------------------------------------------------


def run_plan_verify_answer(spec: ProtocolSpec, proposer: Proposer, verifier: Verifier) -> ProtocolResult:
    """Plan, verify and answer in rounds on the first open assistant turn.

    Raises:
        RoundBudgetExceeded: When the gate stays closed for ``budget`` rounds.
        ProposerExhausted: When a draft is rejected ``retry_budget`` times.
        VerifierRejectedAll: When configured to abort on a fully refuted round.
        ProtocolViolation: When the final tree fails its grammar or an invariant.
    """
    __require__(spec, "plan_verify_answer")
    task = log.start(f"Plan-verify-answer (budget {spec.budget})")
    tree = __skeleton__(spec)
    session = ProtocolSession(spec, proposer, verifier, dialog_turn(tree))
    try:
        tree = session.run(tree)
    except RoundBudgetExceeded as e:
        e.report = __report__(spec, session.report, session.snapshots, False, session.round)
        log.finish(task, "no answer within budget", success=False)
        raise
    result = __finish__(spec, tree, session.snapshots, session.report, True, session.round)
    log.finish(task, f"answered in {session.round} round(s)")
    return result


def run_tool_call(
    spec: ProtocolSpec,
    proposer: Proposer,
    tools: Optional[ToolRegistry] = None,
    verifier: Optional[Verifier] = None,
) -> ProtocolResult:
    """Plan, grammar-checked tool call, tool output, then the gated answer.

    The answer additionally waits for ``<agent_output>`` and cites the tool
    as evidence with confidence 1.00. A tool failure ends the run without an
    answer.
    """
    __require__(spec, "tool_call")
    registry = dict(spec.tools if tools is None else tools)
    if not registry:
        raise ConfigError("A tool_call run needs at least one tool stub")
    verifier = verifier or ScriptedVerifier.accept_all()
    task = log.start(f"Tool call (tools: {', '.join(sorted(registry))})")
    tree = __skeleton__(spec)
    session = ProtocolSession(spec, proposer, verifier, dialog_turn(tree))
    session.insert_pass("toolcall", ToolCallAction(session, registry))
    session.insert_pass("invoke", InvokeAction(session, registry))

    def tool_output(current: XmlTree) -> Optional[DeweyPath]:
        return child(current, session.work, "agent_output")

    def tool_support(current: XmlTree) -> Support:
        output = tool_output(current)
        if output is None:
            return []
        return [(__text__(current[output], "source") or "tool", 1.0)]

    session.extra_gate = lambda current: tool_output(current) is not None
    session.extra_support = tool_support
    try:
        tree = session.run(tree)
    except RoundBudgetExceeded as e:
        e.report = __report__(spec, session.report, session.snapshots, False, session.round)
        log.finish(task, "no answer within budget", success=False)
        raise
    answered = session.answered(tree)
    result = __finish__(spec, tree, session.snapshots, session.report, answered, session.round)
    log.finish(task, "answered" if answered else "tool failed", success=answered)
    return result


# --- branching protocols -------------------------------------------------------------------


def __run_branches__(
    spec: ProtocolSpec,
    sessions: Dict[str, ProtocolSession],
    tree: XmlTree,
    work: Callable[[ProtocolSession, XmlTree], XmlTree],
    report: IterationReport,
) -> Tuple[Dict[str, XmlTree], List[Tuple[str, Exception]]]:
    """Runs ``work`` for every branch on its own copy of ``tree``.

    Results and branch events are collected in branch order whatever the
    scheduling was.
    """
    names = list(sessions)
    results: Dict[str, XmlTree] = {}
    failures: List[Tuple[str, Exception]] = []

    def one(name: str) -> Tuple[str, Union[XmlTree, Exception]]:
        try:
            return name, work(sessions[name], tree)
        except Exception as e:
            return name, e

    if spec.concurrent:
        with ThreadPoolExecutor(max_workers=len(names)) as pool:
            outcomes = list(pool.map(one, names))
    else:
        outcomes = [one(name) for name in names]
    for name, outcome in outcomes:
        report.events.extend(sessions[name].report.events)
        sessions[name].report.events.clear()
        if isinstance(outcome, Exception):
            failures.append((name, outcome))
        else:
            results[name] = outcome
    return results, failures


def __join__(spec: ProtocolSpec, trees: Sequence[XmlTree]) -> XmlTree:
    joined = join(trees, spec.lattice)
    if joined.is_top:
        raise ProtocolError("Branch results conflict and cannot be joined", "join")
    return joined


def __branch_answer_support__(
    spec: ProtocolSpec, turns: Mapping[str, DeweyPath]
) -> Callable[[XmlTree], Support]:
    def support(tree: XmlTree) -> Support:
        found: Support = []
        for turn in turns.values():
            answer = child(tree, turn, "answer")
            if answer is not None:
                found.extend(evidence_of(tree, answer, spec.evidence_threshold))
        return found

    return support


def __closing__(
    spec: ProtocolSpec,
    proposers: Proposers,
    verifier: Verifier,
    tree: XmlTree,
    turns: Mapping[str, DeweyPath],
    report: IterationReport,
) -> Tuple[XmlTree, ProtocolSession]:
    """Appends the ``<compare>``/``<join>`` node and answers under it."""
    tree = tree.with_child(ROOT, element(spec.closing))
    path = (tree.child_count(ROOT),)
    session = ProtocolSession(
        spec, __proposer_for__(proposers, spec.closing), verifier, path, spec.closing, report
    )
    session.extra_support = __branch_answer_support__(spec, turns)
    return session.run(tree), session


def run_multibranch(spec: ProtocolSpec, proposers: Proposers, verifier: Verifier) -> ProtocolResult:
    """Independent plan-verify-answer per branch, joined, then a closing synthesis.

    Raises:
        BranchFailure: When any branch fails; ``last`` is the join of what
            the branches produced and no closing answer is emitted.
    """
    __require__(spec, "multibranch")
    task = log.start(f"Multi-branch run over {', '.join(spec.branches)}")
    skeleton = __skeleton__(spec)
    turns = branch_turns(skeleton, spec.branches)
    report = IterationReport(spec.kind)
    sessions = {
        name: ProtocolSession(spec, __proposer_for__(proposers, name), verifier, turns[name], name)
        for name in spec.branches
    }
    results, failures = __run_branches__(
        spec, sessions, skeleton, lambda session, tree: session.run(tree), report
    )
    if failures:
        partial = [results.get(name) or getattr(error, "last", None) for name, error in failures]
        last = __join__(spec, [skeleton, *results.values(), *[t for t in partial if t is not None]])
        for name, error in failures:
            report.event(f"branch_failed branch={name} error={error.__class__.__name__}")
        log.finish(task, f"{len(failures)} branch(es) failed", success=False)
        raise BranchFailure(failures, last)
    joined = __join__(spec, [skeleton, *[results[name] for name in spec.branches]])
    snapshots = [skeleton, joined]
    try:
        tree, closing = __closing__(spec, proposers, verifier, joined, turns, report)
    except RoundBudgetExceeded:
        log.finish(task, "closing synthesis ran out of rounds", success=False)
        raise
    snapshots.extend(closing.snapshots)
    branch_snapshots = {name: session.snapshots for name, session in sessions.items()}
    rounds = max(session.round for session in sessions.values()) + closing.round
    result = __finish__(spec, tree, snapshots, report, True, rounds, branch_snapshots)
    log.finish(task)
    return result


def __message_element__(message: Message, consumed: bool = False) -> XmlTree:
    attrs = [("id", message.id), ("from", message.sender), ("to", message.recipient)]
    if consumed:
        attrs.append((MESSAGE_CONSUMED, "true"))
    return element("message", content=__safe_text__(message.body), attrs=attrs)


def __find_channel__(tree: XmlTree, name: str) -> DeweyPath:
    for path in tree.find("channel"):
        if __text__(tree[path], "name") == name:
            return path
    raise ProtocolError(f"Skeleton has no channel named '{name}'", "run_channel_exchange")


def __post_message__(session: ProtocolSession, bus: ChannelBus, tree: XmlTree) -> XmlTree:
    def check(fragment: XmlTree) -> Optional[str]:
        sender = __text__(fragment[ROOT], "from")
        if sender != session.branch:
            return f"message claims to come from '{sender}'"
        if fragment[ROOT].attribute(MESSAGE_CONSUMED) is not None:
            return "a new message cannot arrive consumed"
        return None

    fragment = session.propose(tree, session.work, "message", "Message", check=check)
    label = fragment[ROOT]
    bus.post(
        Message(
            __text__(label, "id") or "",
            __text__(label, "from") or "",
            __text__(label, "to") or "",
            __text__(label) or "",
        )
    )
    return tree


def run_channel_exchange(spec: ProtocolSpec, proposers: Proposers, verifier: Verifier) -> ProtocolResult:
    """Branches plan and verify, post one message each, read their mail, answer, then join.

    Round 1 holds every answer back and ends with each branch posting to the
    bus. Later rounds first mark every message addressed to a branch as
    consumed, then run the branch rounds. The closing ``<join>`` only starts
    once every message was consumed.

    Raises:
        UnknownAddressee: When a message names a branch that does not exist.
        UnconsumedMessages: When the budget ends with unread messages.
        RoundBudgetExceeded: When a branch has no answer within the budget.
    """
    __require__(spec, "channel_exchange")
    task = log.start(f"Channel exchange over {', '.join(spec.branches)} (budget {spec.budget})")
    tree = __skeleton__(spec)
    turns = branch_turns(tree, spec.branches)
    channel = __find_channel__(tree, spec.channel)
    bus = ChannelBus(spec.branches)
    report = IterationReport(spec.kind)
    sessions = {
        name: ProtocolSession(spec, __proposer_for__(proposers, name), verifier, turns[name], name)
        for name in spec.branches
    }
    snapshots = [tree]

    def settle(current: XmlTree, work: Callable[[ProtocolSession, XmlTree], XmlTree]) -> XmlTree:
        results, failures = __run_branches__(spec, sessions, current, work, report)
        if failures:
            log.finish(task, f"branch '{failures[0][0]}' failed", success=False)
            raise failures[0][1]
        joined = __join__(spec, [current, *[results[name] for name in spec.branches]])
        if joined != current:
            snapshots.append(joined)
        return joined

    def first_round(session: ProtocolSession, current: XmlTree) -> XmlTree:
        session.hold_answer = True
        session.snapshots.append(current)
        current = session.run_round(current)
        current = __post_message__(session, bus, current)
        session.hold_answer = False
        return current

    tree = settle(tree, first_round)
    for message in bus.ordered():
        tree = tree.with_child(channel, __message_element__(message))
    snapshots.append(tree)
    report.event(f"posted messages={','.join(m.id for m in bus.ordered())}")

    rounds = 1
    while rounds < spec.budget and not all(s.answered(tree) for s in sessions.values()):
        rounds += 1
        tree = __consume__(tree, channel, bus, spec.branches)
        if tree != snapshots[-1]:
            snapshots.append(tree)
        tree = settle(tree, lambda session, current: session.run_round(current))

    for name in spec.branches:
        waiting = bus.pending(name)
        if waiting:
            log.finish(task, f"branch '{name}' left messages unread", success=False)
            raise UnconsumedMessages(name, [m.id for m in waiting], tree)
    for name, session in sessions.items():
        if not session.answered(tree):
            __report__(spec, report, snapshots, False, rounds)
            log.finish(task, f"branch '{name}' has no answer", success=False)
            raise RoundBudgetExceeded(spec.budget, tree, name, report)

    tree, closing = __closing__(spec, proposers, verifier, tree, turns, report)
    snapshots.extend(closing.snapshots)
    branch_snapshots = {name: session.snapshots for name, session in sessions.items()}
    result = __finish__(spec, tree, snapshots, report, True, rounds + closing.round, branch_snapshots)
    result.report.extra["consumed"] = ",".join(bus.consumed_ids)
    log.finish(task)
    return result


def __consume__(tree: XmlTree, channel: DeweyPath, bus: ChannelBus, branches: Sequence[str]) -> XmlTree:
    """Advances every branch cursor and marks what it read as consumed."""
    read = {m.id for name in branches for m in bus.consume(name)}
    for path in tree.children(channel):
        label = tree[path]
        if label.tag == "message" and __text__(label, "id") in read:
            tree = tree.with_label(path, label.with_attribute(MESSAGE_CONSUMED, "true"))
    return tree


# --- transcripts -----------------------------------------------------------------------------


def transcript_lines(result: ProtocolResult) -> List[str]:
    lines = result.report.to_lines()
    for verdict in result.verdicts:
        lines.append(f"verdict={verdict}")
    return lines


def write_transcript(directory: str, result: ProtocolResult) -> List[str]:
    """Writes ``snapshot-NNN.xml`` per snapshot and ``report.txt``; returns the paths."""
    written = []
    for n, snapshot in enumerate(result.snapshots):
        path = os.path.join(directory, f"snapshot-{n:03d}.xml")
        write_text(path, serialize_partial(snapshot) + "\n")
        written.append(path)
    report = os.path.join(directory, "report.txt")
    write_text(report, "\n".join(transcript_lines(result)) + "\n")
    written.append(report)
    log.done(f"Transcript with {len(result.snapshots)} snapshots written to {directory}")
    return written


# --- run files -------------------------------------------------------------------------------


@dataclass
class ProtocolRun:
    spec: ProtocolSpec
    proposers: Dict[str, Proposer]
    verifier: Verifier
    seed: int = 0
    hole_filler: Optional[HoleFillerSection] = None


def __build_proposer__(options: ProposerOptions, base: str, seed: int, endpoint: Optional[str]) -> Proposer:
    if options.kind == "scripted":
        if not options.fixture:
            raise ConfigError("A scripted proposer needs a fixture file")
        return ScriptedProposer.from_file(resolve_relative(options.fixture, base))
    if options.kind == "random":
        vocabulary = (
            Vocabulary.from_file(resolve_relative(options.vocabulary, base)) if options.vocabulary else None
        )
        return SeededRandomProposer(
            options.seed if options.seed is not None else seed, vocabulary, options.stop_probability
        )
    url = endpoint or options.endpoint
    if not url:
        raise ConfigError("An http proposer needs an endpoint", "Set endpoint in the run file or pass --endpoint")
    return HttpProposer(url, options.timeout)


def load_protocol(path: str, config: Optional[RunConfig] = None) -> ProtocolRun:
    """Build the spec, proposers and verifier a run file describes.

    Keys set in ``config`` (from a config file, the environment or flags)
    override the run file; the run file overrides built-in defaults.

    Raises:
        ConfigError: On schema violations or missing fixtures.
    """
    run = read_run_file(path)
    base = os.path.dirname(os.path.abspath(path))

    def pick(key: str, default):
        if config is not None and config.is_set(key):
            return getattr(config, key)
        value = getattr(run, key)
        return default if value is None else value

    grammar = load_grammar(resolve_relative(run.grammar, base))
    references = run.invariants if run.invariants is not None else PROTOCOL_INVARIANTS[run.kind]
    invariants = [inv for ref in references for inv in load_invariants(resolve_relative(ref, base))]
    skeleton = parse_document(read_text(resolve_relative(run.skeleton, base))) if run.skeleton else None
    seed = pick("seed", 0)
    spec = ProtocolSpec(
        kind=run.kind,
        grammar=grammar,
        invariants=invariants,
        budget=pick("budget", PROTOCOL_DEFAULTS["budget"]),
        retry_budget=pick("retry_budget", PROTOCOL_DEFAULTS["retry_budget"]),
        evidence_threshold=pick("evidence_threshold", PROTOCOL_DEFAULTS["evidence_threshold"]),
        step_min_evidence=pick("step_min_evidence", PROTOCOL_DEFAULTS["step_min_evidence"]),
        answer_min_evidence=pick("answer_min_evidence", PROTOCOL_DEFAULTS["answer_min_evidence"]),
        branches=tuple(run.branches),
        skeleton=skeleton,
        task=run.task,
        guidelines=run.guidelines,
        closing=run.closing or ("join" if run.kind == "channel_exchange" else "compare"),
        channel=run.channel,
        concurrent=run.concurrent,
        abort_on_total_rejection=run.abort_on_total_rejection,
        max_tokens=pick("max_tokens", PROTOCOL_DEFAULTS["max_tokens"]),
        tools=dict(run.tools),
        metric=config.metric() if config is not None else DEFAULT_METRIC,
        lattice=config.lattice() if config is not None else DEFAULT_LATTICE,
    )
    endpoint = config.endpoint if config is not None else None
    proposers: Dict[str, Proposer] = {}
    if run.kind != "hole_filler":
        proposers["default"] = __build_proposer__(run.proposer, base, seed, endpoint)
        for name, options in run.proposer.branches.items():
            proposers[name] = __build_proposer__(options, base, seed, endpoint)
    section = run.verifier
    verifier = ScriptedVerifier(
        section.conf, section.ref_prefix, section.reject, section.branches, section.reject_all
    )
    hole_options = run.hole_filler
    if hole_options is not None and config is not None and config.is_set("budget"):
        hole_options = hole_options.model_copy(update={"max_steps": config.budget})
    log.debug(f"Loaded {run.kind} run from {path}")
    return ProtocolRun(spec, proposers, verifier, seed, hole_options)


def run_hole_filler(options: HoleFillerSection, metric: MetricConfig = DEFAULT_METRIC) -> ProtocolResult:
    """Banach iteration of the synthetic hole-filler family."""
    family = hole_filler(options.schedule)
    report = banach_iterate(family.transformer, family.start, metric, options.eps, options.max_steps, options.beta)
    report.extra["q_analytic"] = f"{family.q:.12g}"
    return ProtocolResult(report.iterates[-1], list(report.iterates), report)


def run_protocol(run: ProtocolRun) -> ProtocolResult:
    spec = run.spec
    log.set_env(spec.kind)
    if spec.kind == "hole_filler":
        if run.hole_filler is None:
            raise ConfigError("A hole_filler run needs a schedule")
        return run_hole_filler(run.hole_filler, spec.metric)
    default = run.proposers["default"]
    if spec.kind == "plan_verify_answer":
        return run_plan_verify_answer(spec, default, run.verifier)
    if spec.kind == "tool_call":
        return run_tool_call(spec, default, verifier=run.verifier)
    if spec.kind == "multibranch":
        return run_multibranch(spec, run.proposers, run.verifier)
    return run_channel_exchange(spec, run.proposers, run.verifier)
