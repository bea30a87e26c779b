"""EBNF grammars, an incremental character-level recognizer and token masks.

Grammar sources use a small EBNF dialect::

    grammar ReasoningXML
      Plan = "<plan>" Step+ "</plan>" ;
      Step = "<step index=\\"[0-9]+\\">" TEXT "</step>" ;
      TEXT = {any UTF-8 chars except '<' and '>'} ;
    end

Inside a quoted terminal, ``\\"`` toggles between literal characters and a
regular expression for an attribute value; in that regex ``\\|`` is the
alternation bar. Character classes ``[...]``, ``/regex/`` terminals and
``{any ... except 'c' ...}`` classes are regular terminals as well.

Recognition is an Earley parser over characters whose regular terminals
carry an automaton state inside the item, so a ``ParserState`` can be
advanced one chunk at a time and asked which vocabulary tokens keep it
viable.
"""

import re
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Dict, FrozenSet, Iterable, List, Optional, Sequence, Set, Tuple, Union

import numpy as np
from lark import Lark, Token
from lark import Transformer as LarkTransformer
from lark.exceptions import UnexpectedInput, VisitError

from .classes import (
    BUILTIN_GRAMMARS,
    DeadEnd,
    EmptyLanguage,
    GrammarSyntaxError,
    NonViableState,
    PatternError,
    PolicyViolation,
    SampleResult,
    UndefinedNonterminal,
    VocabularyError,
    XmlPromptError,
)
from .utils import (
    Automaton,
    builtin_name,
    compile_pattern,
    escape_literal,
    is_builtin,
    log,
    read_resource,
    read_text,
    unescape_token,
)

START_SYMBOL = "$start"

META_GRAMMAR = r"""
start: header? rule+ footer?
header: "grammar" NAME
footer: "end"
rule: NAME "=" expansion ";"
expansion: sequence ("|" sequence)*
sequence: item*
item: atom QUANT?
atom: NAME                -> ref
    | STRING              -> literal
    | CHARCLASS           -> charclass
    | REGEXP              -> regexp
    | BRACECLASS          -> braceclass
    | "(" expansion ")"   -> group

QUANT: "+" | "*" | "?"
NAME: /[A-Za-z_][A-Za-z0-9_]*/
STRING: /"(\\.|[^"\\\n])*"/
CHARCLASS: /\[(\\.|[^\]\\\n])+\]/
REGEXP: /\/(\\.|[^\/\\\n])+\//
BRACECLASS: /\{[^}\n]*\}/
COMMENT: /#[^\n]*/

%import common.WS
%ignore WS
%ignore COMMENT
"""

__META_PARSER__ = Lark(META_GRAMMAR, parser="lalr")

__BRACE_ANY__ = re.compile(r"^any\b(?P<rest>.*)$", re.S)
__BRACE_EXCLUDED__ = re.compile(r"'(\\.|[^'])'")

# Grammar AST nodes are tuples:
#   ("alt", (seq, ...)) ("seq", (node, ...)) ("rep", node, "+"|"*"|"?")
#   ("ref", name, line) ("char", ch) ("regex", source, line)
Node = tuple


class CharTerminal:
    __slots__ = ("char",)

    def __init__(self, char: str):
        self.char = char

    def __repr__(self) -> str:
        return f"{self.char!r}"


class RegexTerminal:
    __slots__ = ("automaton",)

    def __init__(self, automaton: Automaton):
        self.automaton = automaton

    def __repr__(self) -> str:
        return f"/{self.automaton.source}/"


Symbol = Union[str, CharTerminal, RegexTerminal]


@dataclass(frozen=True)
class Rule:
    lhs: str
    rhs: Tuple[Symbol, ...]


# --- front-end ---------------------------------------------------------------


def __class_escape__(char: str) -> str:
    return "\\" + char if char in "\\]^-[" else char


def __brace_regex__(text: str, line: int) -> str:
    description = text[1:-1].strip()
    match = __BRACE_ANY__.match(description)
    if not match:
        raise GrammarSyntaxError(line, f"unsupported character class {text}")
    rest = match.group("rest")
    if "except" not in rest:
        return r"[\s\S]*"
    excluded = [m[1:] if m.startswith("\\") else m for m in __BRACE_EXCLUDED__.findall(rest)]
    if not excluded:
        raise GrammarSyntaxError(line, f"no excluded characters listed in {text}")
    return "[^" + "".join(__class_escape__(c) for c in excluded) + "]*"


def __decode_literal__(token: Token) -> Node:
    raw = str(token)[1:-1]
    line = token.line or 0
    items: List[Node] = []
    regex: List[str] = []
    in_value = False
    i = 0
    while i < len(raw):
        ch = raw[i]
        if ch == "\\" and i + 1 < len(raw):
            nxt = raw[i + 1]
            i += 2
            if nxt == '"':
                if in_value:
                    items.append(("regex", "".join(regex), line))
                    regex = []
                items.append(("char", '"'))
                in_value = not in_value
            elif in_value:
                regex.append("|" if nxt == "|" else "\\" + nxt)
            else:
                items.append(("char", {"n": "\n", "t": "\t"}.get(nxt, nxt)))
            continue
        if in_value:
            regex.append(ch)
        else:
            items.append(("char", ch))
        i += 1
    if in_value:
        raise GrammarSyntaxError(line, f"unterminated attribute value pattern in {token}")
    return ("seq", tuple(items))


class __EbnfBuilder__(LarkTransformer):
    def start(self, children):
        name = None
        rules = []
        for child in children:
            if child[0] == "header":
                name = child[1]
            elif child[0] == "rule":
                rules.append(child)
        return name, rules

    def header(self, children):
        return ("header", str(children[0]))

    def footer(self, children):
        return ("footer",)

    def rule(self, children):
        name = children[0]
        return ("rule", str(name), children[1], name.line or 0)

    def expansion(self, children):
        return ("alt", tuple(children))

    def sequence(self, children):
        return ("seq", tuple(children))

    def item(self, children):
        if len(children) == 2:
            return ("rep", children[0], str(children[1]))
        return children[0]

    def ref(self, children):
        return ("ref", str(children[0]), children[0].line or 0)

    def literal(self, children):
        return __decode_literal__(children[0])

    def charclass(self, children):
        return ("regex", str(children[0]), children[0].line or 0)

    def regexp(self, children):
        return ("regex", str(children[0])[1:-1].replace("\\/", "/"), children[0].line or 0)

    def braceclass(self, children):
        token = children[0]
        return ("regex", __brace_regex__(str(token), token.line or 0), token.line or 0)

    def group(self, children):
        return children[0]


def __references__(node: Node) -> Iterable[Tuple[str, int]]:
    kind = node[0]
    if kind == "ref":
        yield node[1], node[2]
    elif kind in ("alt", "seq"):
        for child in node[1]:
            yield from __references__(child)
    elif kind == "rep":
        yield from __references__(node[1])


class __Lowering__:
    """Rewrites EBNF operators into plain context-free rules."""

    def __init__(self):
        self.rules: List[Rule] = []
        self.counter = 0

    def fresh(self, kind: str) -> str:
        self.counter += 1
        return f"{kind}#{self.counter}"

    def lower(self, node: Node) -> Tuple[Symbol, ...]:
        kind = node[0]
        if kind == "seq":
            out: List[Symbol] = []
            for child in node[1]:
                out.extend(self.lower(child))
            return tuple(out)
        if kind == "alt":
            if len(node[1]) == 1:
                return self.lower(node[1][0])
            name = self.fresh("group")
            for alternative in node[1]:
                self.rules.append(Rule(name, self.lower(alternative)))
            return (name,)
        if kind == "rep":
            body = self.lower(node[1])
            quantifier = node[2]
            name = self.fresh({"?": "opt", "*": "star", "+": "plus"}[quantifier])
            if quantifier == "?":
                self.rules += [Rule(name, body), Rule(name, ())]
            elif quantifier == "*":
                self.rules += [Rule(name, ()), Rule(name, (name,) + body)]
            else:
                self.rules += [Rule(name, body), Rule(name, (name,) + body)]
            return (name,)
        if kind == "ref":
            return (node[1],)
        if kind == "char":
            return (CharTerminal(node[1]),)
        try:
            return (RegexTerminal(compile_pattern(node[1])),)
        except PatternError as e:
            raise GrammarSyntaxError(node[2], e.message)


# --- recognizer --------------------------------------------------------------

# Items are (rule index, dot, origin column, automaton state or None).
Item = Tuple[int, int, int, object]


class Column:
    __slots__ = ("items", "waiting", "chars", "regexes", "accepting")

    def __init__(self, items, waiting, chars, regexes, accepting):
        self.items: FrozenSet[Item] = items
        self.waiting: Dict[str, List[Item]] = waiting
        self.chars: Dict[str, List[Item]] = chars
        self.regexes: List[Tuple[Item, Automaton]] = regexes
        self.accepting: bool = accepting


DEAD_COLUMN = Column(frozenset(), {}, {}, [], False)


class Grammar:
    """Compiled grammar with a designated start nonterminal.

    Only productive rules take part in recognition, so a nonempty Earley
    column always has an accepting continuation.
    """

    def __init__(
        self,
        name: str,
        start: str,
        definitions: Dict[str, Node],
        rules: Sequence[Rule],
        source: str = "",
    ):
        if start not in definitions:
            raise UndefinedNonterminal(start)
        self.name = name
        self.start = start
        self.definitions = definitions
        self.source = source
        self.__user_rules__ = tuple(rules)
        self.__fragments__: Dict[str, "Grammar"] = {}
        self.rules: Tuple[Rule, ...] = (Rule(START_SYMBOL, (start,)),) + self.__user_rules__
        self.__entry__ = tuple(
            tuple(
                s.automaton.initial if isinstance(s, RegexTerminal) else None
                for s in rule.rhs
            )
            + (None,)
            for rule in self.rules
        )
        self.nullable = self.__nullable__()
        self.productive = self.__productive__()
        by_lhs: Dict[str, List[int]] = {}
        for index, rule in enumerate(self.rules):
            if all(self.__symbol_productive__(s) for s in rule.rhs):
                by_lhs.setdefault(rule.lhs, []).append(index)
        self.by_lhs: Dict[str, Tuple[int, ...]] = {k: tuple(v) for k, v in by_lhs.items()}
        self.__warn_unreachable__()

    @property
    def nonterminals(self) -> Tuple[str, ...]:
        return tuple(self.definitions)

    def __symbol_productive__(self, symbol: Symbol) -> bool:
        if isinstance(symbol, str):
            return symbol in self.productive
        if isinstance(symbol, RegexTerminal):
            return not symbol.automaton.empty
        return True

    def __nullable__(self) -> Set[str]:
        nullable: Set[str] = set()
        changed = True
        while changed:
            changed = False
            for rule in self.rules:
                if rule.lhs in nullable:
                    continue
                if all(
                    (isinstance(s, str) and s in nullable)
                    or (isinstance(s, RegexTerminal) and s.automaton.nullable)
                    for s in rule.rhs
                ):
                    nullable.add(rule.lhs)
                    changed = True
        return nullable

    def __productive__(self) -> Set[str]:
        productive: Set[str] = set()
        changed = True
        while changed:
            changed = False
            for rule in self.rules:
                if rule.lhs in productive:
                    continue
                if all(
                    (s in productive) if isinstance(s, str) else
                    (not s.automaton.empty if isinstance(s, RegexTerminal) else True)
                    for s in rule.rhs
                ):
                    productive.add(rule.lhs)
                    changed = True
        return productive

    def __warn_unreachable__(self):
        reached = {START_SYMBOL}
        frontier = [START_SYMBOL]
        while frontier:
            lhs = frontier.pop()
            for index in self.by_lhs.get(lhs, ()):
                for symbol in self.rules[index].rhs:
                    if isinstance(symbol, str) and symbol not in reached:
                        reached.add(symbol)
                        frontier.append(symbol)
        for name in self.definitions:
            if name not in self.productive:
                log.warn(f"Grammar {self.name}: nonterminal '{name}' is unproductive and was pruned")
            elif name not in reached:
                log.debug(f"Grammar {self.name}: nonterminal '{name}' is unreachable from {self.start}")

    def with_start(self, nonterminal: str) -> "Grammar":
        """The same grammar recognizing fragments derived from ``nonterminal``."""
        if nonterminal == self.start:
            return self
        fragment = self.__fragments__.get(nonterminal)
        if fragment is None:
            fragment = Grammar(self.name, nonterminal, self.definitions, self.__user_rules__, self.source)
            self.__fragments__[nonterminal] = fragment
        return fragment

    def regex_for(self, nonterminal: str) -> Optional[str]:
        """A regular expression for ``nonterminal`` or None when it is recursive."""
        if nonterminal not in self.definitions:
            raise UndefinedNonterminal(nonterminal)

        class Recursive(Exception):
            pass

        def convert(node: Node, active: FrozenSet[str]) -> str:
            kind = node[0]
            if kind == "seq":
                return "".join(convert(child, active) for child in node[1])
            if kind == "alt":
                if len(node[1]) == 1:
                    return convert(node[1][0], active)
                return "(?:" + "|".join(convert(child, active) for child in node[1]) + ")"
            if kind == "rep":
                return "(?:" + convert(node[1], active) + ")" + node[2]
            if kind == "ref":
                if node[1] in active:
                    raise Recursive()
                return "(?:" + convert(self.definitions[node[1]], active | {node[1]}) + ")"
            if kind == "char":
                return escape_literal(node[1])
            return "(?:" + node[1] + ")"

        try:
            return convert(("ref", nonterminal, 0), frozenset())
        except Recursive:
            return None

    # --- Earley machinery ---------------------------------------------------

    def __advance_item__(self, item: Item) -> Item:
        rule, dot, origin, _ = item
        return (rule, dot + 1, origin, self.__entry__[rule][dot + 1])

    def closure(self, previous: Tuple[Column, ...], seeds: Iterable[Item]) -> Column:
        k = len(previous)
        rules = self.rules
        entry = self.__entry__
        by_lhs = self.by_lhs
        nullable = self.nullable
        items: Set[Item] = set()
        waiting: Dict[str, List[Item]] = {}
        chars: Dict[str, List[Item]] = {}
        regexes: List[Tuple[Item, Automaton]] = []
        agenda = list(seeds)
        while agenda:
            item = agenda.pop()
            if item in items:
                continue
            items.add(item)
            rule_index, dot, origin, sub = item
            rhs = rules[rule_index].rhs
            if dot == len(rhs):
                lhs = rules[rule_index].lhs
                parents = waiting.get(lhs, ()) if origin == k else previous[origin].waiting.get(lhs, ())
                for parent in list(parents):
                    agenda.append(self.__advance_item__(parent))
                continue
            symbol = rhs[dot]
            if symbol.__class__ is str:
                waiting.setdefault(symbol, []).append(item)
                for predicted in by_lhs.get(symbol, ()):
                    agenda.append((predicted, 0, k, entry[predicted][0]))
                if symbol in nullable:
                    agenda.append(self.__advance_item__(item))
            elif symbol.__class__ is CharTerminal:
                chars.setdefault(symbol.char, []).append(item)
            else:
                regexes.append((item, symbol.automaton))
                if sub in symbol.automaton.finals:
                    agenda.append(self.__advance_item__(item))
        accepting = (0, 1, 0, None) in items
        return Column(frozenset(items), waiting, chars, regexes, accepting)

    def scan(self, column: Column, char: str) -> List[Item]:
        seeds = [self.__advance_item__(item) for item in column.chars.get(char, ())]
        for item, automaton in column.regexes:
            state = automaton.step(item[3], char)
            if state is not None:
                seeds.append((item[0], item[1], item[2], state))
        return seeds

    def can_scan(self, column: Column, char: str) -> bool:
        if char in column.chars:
            return True
        return any(automaton.step(item[3], char) is not None for item, automaton in column.regexes)

    def __repr__(self) -> str:
        return f"Grammar({self.name!r}, start={self.start!r}, {len(self.definitions)} nonterminals)"


class ParserState:
    """Immutable recognizer state after consuming some prefix."""

    __slots__ = ("grammar", "columns", "consumed")

    def __init__(self, grammar: Grammar, columns: Tuple[Column, ...], consumed: int):
        self.grammar = grammar
        self.columns = columns
        self.consumed = consumed

    @property
    def viable(self) -> bool:
        return bool(self.columns[-1].items)

    @property
    def accepting(self) -> bool:
        return self.columns[-1].accepting

    def __repr__(self) -> str:
        status = "accepting" if self.accepting else ("viable" if self.viable else "dead")
        return f"ParserState({self.grammar.name!r}, consumed={self.consumed}, {status})"


def compile_ebnf(text: str) -> Grammar:
    """Compile EBNF source into a Grammar whose start symbol is the first rule.

    Raises:
        GrammarSyntaxError: On malformed source.
        UndefinedNonterminal: When a referenced nonterminal has no rule.
    """
    try:
        tree = __META_PARSER__.parse(text)
    except UnexpectedInput as e:
        line = getattr(e, "line", -1)
        if not isinstance(line, int) or line < 1:
            line = text.count("\n") + 1
        reason = str(e).strip().splitlines()[0] if str(e).strip() else e.__class__.__name__
        raise GrammarSyntaxError(line, reason)
    try:
        name, rules = __EbnfBuilder__().transform(tree)
    except VisitError as e:
        if isinstance(e.orig_exc, XmlPromptError):
            raise e.orig_exc
        raise
    definitions: Dict[str, Node] = {}
    for _, rule_name, body, line in rules:
        if rule_name in definitions:
            raise GrammarSyntaxError(line, f"nonterminal '{rule_name}' is defined twice")
        definitions[rule_name] = body
    for body in definitions.values():
        for ref, _ in __references__(body):
            if ref not in definitions:
                raise UndefinedNonterminal(ref)
    lowering = __Lowering__()
    for rule_name, body in definitions.items():
        if body[0] == "alt":
            for alternative in body[1]:
                lowering.rules.append(Rule(rule_name, lowering.lower(alternative)))
        else:
            lowering.rules.append(Rule(rule_name, lowering.lower(body)))
    start = rules[0][1]
    grammar = Grammar(name or start, start, definitions, lowering.rules, text)
    log.debug(f"Compiled grammar {grammar.name}: {len(grammar.rules)} rules, start {start}")
    return grammar


@lru_cache(maxsize=None)
def __builtin_grammar__(name: str) -> Grammar:
    if name not in BUILTIN_GRAMMARS:
        raise GrammarSyntaxError(0, f"unknown builtin grammar '{name}'")
    return compile_ebnf(read_resource("grammars", BUILTIN_GRAMMARS[name]))


def load_grammar(reference: str) -> Grammar:
    """Load ``builtin:<Name>`` or an EBNF file path."""
    if is_builtin(reference):
        return __builtin_grammar__(builtin_name(reference))
    return compile_ebnf(read_text(reference))


def initial_state(grammar: Grammar) -> ParserState:
    if grammar.start not in grammar.productive:
        raise EmptyLanguage(grammar.start)
    return ParserState(grammar, (grammar.closure((), [(0, 0, 0, None)]),), 0)


def advance(state: ParserState, chunk: str) -> ParserState:
    grammar = state.grammar
    columns = state.columns
    for char in chunk:
        last = columns[-1]
        if not last.items:
            break
        seeds = grammar.scan(last, char)
        columns = columns + ((grammar.closure(columns, seeds) if seeds else DEAD_COLUMN),)
    return ParserState(grammar, columns, state.consumed + len(chunk))


def is_viable(state: ParserState) -> bool:
    return state.viable


def is_accepting(state: ParserState) -> bool:
    return state.accepting


def accepts(grammar: Grammar, text: str) -> bool:
    return advance(initial_state(grammar), text).accepting


def first_dead_position(grammar: Grammar, text: str) -> Optional[int]:
    """Offset of the first character that kills the parse.

    Returns ``len(text)`` when the whole text is a viable but incomplete
    prefix and None when the text is accepted.
    """
    state = initial_state(grammar)
    for position, char in enumerate(text):
        state = advance(state, char)
        if not state.viable:
            return position
    return None if state.accepting else len(text)


# --- vocabulary and masks ------------------------------------------------------


class __TrieNode__:
    __slots__ = ("children", "token_ids")

    def __init__(self):
        self.children: Dict[str, "__TrieNode__"] = {}
        self.token_ids: List[int] = []


@dataclass(frozen=True)
class Vocabulary:
    tokens: Tuple[str, ...]

    def __post_init__(self):
        seen: Set[str] = set()
        for token in self.tokens:
            if not token:
                raise VocabularyError("empty token")
            if token in seen:
                raise VocabularyError(f"duplicate token {token!r}")
            seen.add(token)

    def __len__(self) -> int:
        return len(self.tokens)

    def __getitem__(self, index: int) -> str:
        return self.tokens[index]

    @classmethod
    def from_file(cls, path: str) -> "Vocabulary":
        """One token per line with ``\\n``, ``\\t`` and ``\\\\`` escapes; blank lines are skipped."""
        tokens = []
        for number, line in enumerate(read_text(path).split("\n"), start=1):
            if not line:
                continue
            try:
                tokens.append(unescape_token(line))
            except ValueError as e:
                raise VocabularyError(f"line {number}: {e}")
        return cls(tuple(tokens))

    @classmethod
    def printable_ascii(cls, exclude: str = "") -> "Vocabulary":
        return cls(tuple(chr(c) for c in range(0x20, 0x7F) if chr(c) not in exclude))


@lru_cache(maxsize=32)
def __trie__(vocabulary: Vocabulary) -> __TrieNode__:
    root = __TrieNode__()
    for index, token in enumerate(vocabulary.tokens):
        node = root
        for char in token:
            node = node.children.setdefault(char, __TrieNode__())
        node.token_ids.append(index)
    return root


class TokenMask:
    """Boolean mask over a vocabulary; ``allowed[i]`` keeps the state viable."""

    __slots__ = ("allowed",)

    def __init__(self, allowed: np.ndarray):
        self.allowed = allowed

    def ids(self) -> List[int]:
        return [int(i) for i in np.flatnonzero(self.allowed)]

    def tokens(self, vocabulary: Vocabulary) -> List[str]:
        return [vocabulary.tokens[i] for i in self.ids()]

    def any(self) -> bool:
        return bool(self.allowed.any())

    def __contains__(self, index: int) -> bool:
        return bool(self.allowed[index])

    def __len__(self) -> int:
        return int(self.allowed.sum())

    def __eq__(self, other) -> bool:
        return isinstance(other, TokenMask) and np.array_equal(self.allowed, other.allowed)

    def __repr__(self) -> str:
        return f"TokenMask({len(self)}/{self.allowed.size} allowed)"


def token_mask(state: ParserState, vocabulary: Vocabulary) -> TokenMask:
    """Tokens whose characters can all be consumed without killing ``state``.

    Raises:
        NonViableState: When ``state`` is already dead.
    """
    if not state.viable:
        raise NonViableState(state.consumed)
    grammar = state.grammar
    allowed = np.zeros(len(vocabulary), dtype=bool)
    stack = [(state, __trie__(vocabulary))]
    while stack:
        current, node = stack.pop()
        column = current.columns[-1]
        for char, child in node.children.items():
            if not grammar.can_scan(column, char):
                continue
            if child.token_ids:
                allowed[child.token_ids] = True
            if child.children:
                stack.append((advance(current, char), child))
    return TokenMask(allowed)


# --- sampling ---------------------------------------------------------------


@dataclass(frozen=True)
class DecodeStep:
    index: int
    state: ParserState
    mask: TokenMask
    accepting: bool
    prefix: str
    vocabulary: Vocabulary


# A policy returns a token index or None to stop.
Policy = Callable[[DecodeStep], Optional[int]]


class UniformPolicy:
    """Uniform choice among allowed tokens from a seeded numpy generator."""

    def __init__(self, seed: int, stop_probability: float = 0.5):
        self.rng = np.random.default_rng(seed)
        self.stop_probability = stop_probability

    def __call__(self, step: DecodeStep) -> Optional[int]:
        if step.accepting and self.rng.random() < self.stop_probability:
            return None
        ids = np.flatnonzero(step.mask.allowed)
        if ids.size == 0:
            return None
        return int(self.rng.choice(ids))


class GreedyPolicy:
    """Lexicographically smallest allowed token; stops as soon as the prefix is accepted."""

    def __call__(self, step: DecodeStep) -> Optional[int]:
        if step.accepting:
            return None
        ids = step.mask.ids()
        if not ids:
            return None
        return min(ids, key=lambda i: step.vocabulary.tokens[i])


def constrained_sample(
    grammar: Grammar,
    vocabulary: Vocabulary,
    policy: Policy,
    max_tokens: int,
    state: Optional[ParserState] = None,
) -> SampleResult:
    """Decode under the grammar mask.

    Returns a ``complete`` result once the policy stops in an accepting state
    (or nothing else is allowed there) and a ``partial`` result carrying the
    viable prefix when ``max_tokens`` runs out first.

    Raises:
        DeadEnd: When no token is allowed and the prefix is not accepted.
        PolicyViolation: When the policy picks a masked token or stops early.
    """
    state = state or initial_state(grammar)
    chosen: List[int] = []
    pieces: List[str] = []
    for index in range(max_tokens):
        mask = token_mask(state, vocabulary)
        accepting = state.accepting
        if not mask.any():
            if accepting:
                return SampleResult("".join(pieces), "complete", tuple(chosen))
            raise DeadEnd(index, "".join(pieces))
        choice = policy(DecodeStep(index, state, mask, accepting, "".join(pieces), vocabulary))
        if choice is None:
            if not accepting:
                raise PolicyViolation(index, "stopped before the prefix was accepted")
            return SampleResult("".join(pieces), "complete", tuple(chosen))
        if not 0 <= choice < len(vocabulary) or choice not in mask:
            raise PolicyViolation(index, f"token {choice} is masked out")
        token = vocabulary.tokens[choice]
        state = advance(state, token)
        chosen.append(choice)
        pieces.append(token)
    status = "complete" if state.accepting else "partial"
    if status == "partial":
        log.debug(f"Sampling stopped at max_tokens={max_tokens} with a viable prefix")
    return SampleResult("".join(pieces), status, tuple(chosen))
