from typing import Any, Optional, Sequence, Tuple


class XmlPromptError(Exception):
    """Base exception class for every xml-prompting error.

    Attributes:
        message (str): The error message
        operation (str): The operation that failed
        details (str): Extra context rendered below the message (optional)
    """

    def __init__(self, message: str, operation: str, details: Optional[str] = None):
        self.message = message
        self.operation = operation
        self.details = details
        super().__init__(self.format_message())

    def format_message(self) -> str:
        full_message = self.message + f"\nOperation: {self.operation}"
        if self.details:
            full_message += f"\nDetails:\n{self.details}"
        return full_message


class ConfigError(XmlPromptError):
    def __init__(self, message: str, details: Optional[str] = None):
        super().__init__(message, "config", details)


# --- Trees ---------------------------------------------------------------


class TreeError(XmlPromptError):
    pass


class MalformedXml(TreeError):
    def __init__(self, position: Tuple[int, int], reason: str):
        self.position = position
        self.reason = reason
        super().__init__(
            f"Malformed XML at line {position[0]}, column {position[1]}: {reason}",
            "parse_document",
        )


class NotConcrete(TreeError):
    def __init__(self, path: Tuple[int, ...]):
        self.path = path
        super().__init__(
            f"Node {'.'.join(map(str, path)) or '<root>'} still holds a hole or pattern",
            "serialize",
        )


class TopUnserializable(TreeError):
    def __init__(self):
        super().__init__("The conflict element has no XML rendering", "serialize")


# --- Grammars ------------------------------------------------------------


class GrammarError(XmlPromptError):
    pass


class GrammarSyntaxError(GrammarError):
    def __init__(self, line: int, reason: str):
        self.line = line
        self.reason = reason
        super().__init__(f"Grammar syntax error on line {line}: {reason}", "compile_ebnf")


class UndefinedNonterminal(GrammarError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"Nonterminal '{name}' is referenced but never defined", "compile_ebnf")


class EmptyLanguage(GrammarError):
    def __init__(self, start: str):
        self.start = start
        super().__init__(f"Start symbol '{start}' derives no finite string", "initial_state")


class NonViableState(GrammarError):
    def __init__(self, consumed: int):
        self.consumed = consumed
        super().__init__(
            f"Parser state is dead after {consumed} characters", "token_mask"
        )


class DeadEnd(GrammarError):
    def __init__(self, step: int, prefix: str):
        self.step = step
        self.prefix = prefix
        super().__init__(
            f"No vocabulary token keeps the prefix viable at step {step}",
            "constrained_sample",
            f"Prefix: {prefix!r}",
        )


class PolicyViolation(GrammarError):
    def __init__(self, step: int, reason: str):
        self.step = step
        super().__init__(f"Policy misbehaved at step {step}: {reason}", "constrained_sample")


class VocabularyError(GrammarError):
    def __init__(self, reason: str):
        super().__init__(f"Invalid vocabulary: {reason}", "vocabulary")


class PatternError(GrammarError):
    def __init__(self, source: str, reason: str):
        self.source = source
        super().__init__(f"Cannot compile pattern {source!r}: {reason}", "compile_pattern")


# --- Metric --------------------------------------------------------------


class MetricError(XmlPromptError):
    pass


class TopNotMetrizable(MetricError):
    def __init__(self):
        super().__init__("Distance is undefined for the conflict element", "distance")


class DegenerateSample(MetricError):
    def __init__(self, pairs: int):
        self.pairs = pairs
        super().__init__(
            f"None of the {pairs} sampled pairs had a positive distance",
            "estimate_contraction",
        )


# --- Engine --------------------------------------------------------------


class EngineError(XmlPromptError):
    pass


class RuleConflict(EngineError):
    def __init__(self, first: str, second: str, path: Tuple[int, ...]):
        self.rules = (first, second)
        self.path = path
        super().__init__(
            f"Rules '{first}' and '{second}' write incompatible values at "
            f"{'.'.join(map(str, path)) or '<root>'}",
            "apply",
        )


class UncertifiedRule(EngineError):
    def __init__(self, rule: str):
        self.rule = rule
        super().__init__(
            f"Rule '{rule}' uses an action without a monotonicity certificate",
            "transformer",
        )


class BudgetExceeded(EngineError):
    def __init__(self, max_steps: int, last: Any, report: Any = None):
        self.max_steps = max_steps
        self.last = last
        self.report = report
        super().__init__(
            f"No fixed point within {max_steps} steps", "kleene_iterate"
        )


class NoContractionObserved(EngineError):
    def __init__(self, step: int, ratio: float, report: Any = None):
        self.step = step
        self.ratio = ratio
        self.report = report
        super().__init__(
            f"Observed ratio {ratio:.6f} >= 1 at step {step}", "banach_iterate"
        )


# --- Formulas ------------------------------------------------------------


class FormulaError(XmlPromptError):
    pass


class FormulaSyntaxError(FormulaError):
    def __init__(self, position: int, reason: str):
        self.position = position
        self.reason = reason
        super().__init__(
            f"Formula syntax error at offset {position}: {reason}", "parse_formula"
        )


class NonMonotoneFormula(FormulaError):
    def __init__(self, variable: str):
        self.variable = variable
        super().__init__(
            f"Fixpoint variable '{variable}' occurs under negation", "parse_formula"
        )


class NotSafetyShaped(FormulaError):
    def __init__(self, reason: str):
        super().__init__(
            f"Formula cannot drive a pruning filter: {reason}", "pruning_filter"
        )


# --- Protocols -----------------------------------------------------------


class ProtocolError(XmlPromptError):
    pass


class RoundBudgetExceeded(ProtocolError):
    def __init__(self, rounds: int, last: Any, branch: Optional[str] = None, report: Any = None):
        self.rounds = rounds
        self.last = last
        self.branch = branch
        self.report = report
        where = f" in branch '{branch}'" if branch else ""
        super().__init__(
            f"No gated answer after {rounds} rounds{where}", "run_protocol"
        )


class ProposerExhausted(ProtocolError):
    def __init__(self, path: Tuple[int, ...], attempts: int, reasons: Sequence[str] = ()):
        self.path = path
        self.attempts = attempts
        super().__init__(
            f"Proposer produced no acceptable fragment for "
            f"{'.'.join(map(str, path)) or '<root>'} after {attempts} attempts",
            "propose",
            "\n".join(reasons) or None,
        )


class VerifierRejectedAll(ProtocolError):
    def __init__(self, round_number: int):
        self.round = round_number
        super().__init__(
            f"Every step received a counterexample in round {round_number}",
            "verify",
        )


class ToolFailure(ProtocolError):
    def __init__(self, tool: str, reason: str):
        self.tool = tool
        self.reason = reason
        super().__init__(f"Tool '{tool}' failed: {reason}", "tool_call")


class UnknownAddressee(ProtocolError):
    def __init__(self, message_id: str, addressee: str):
        self.message_id = message_id
        self.addressee = addressee
        super().__init__(
            f"Message '{message_id}' is addressed to unknown branch '{addressee}'",
            "channel",
        )


class UnconsumedMessages(ProtocolError):
    def __init__(self, branch: str, pending: Sequence[str], last: Any = None):
        self.branch = branch
        self.pending = tuple(pending)
        self.last = last
        super().__init__(
            f"Branch '{branch}' finished with unread messages: {', '.join(pending)}",
            "channel",
        )


class BranchFailure(ProtocolError):
    def __init__(self, failures: Sequence[Tuple[str, Exception]], last: Any = None):
        self.failures = tuple(failures)
        self.last = last
        super().__init__(
            f"{len(self.failures)} branch(es) failed, refusing to join",
            "run_multibranch",
            "\n".join(f"{name}: {err.__class__.__name__}" for name, err in self.failures),
        )


class ProtocolViolation(ProtocolError):
    def __init__(self, reason: str):
        super().__init__(f"Final tree rejected: {reason}", "run_protocol")
