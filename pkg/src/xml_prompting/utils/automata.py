"""Regular-language helpers on top of interegular automata.

Pattern content and regex terminals both compile through ``compile_pattern``;
the rest of the package never touches interegular directly.
"""

from collections import deque
from functools import lru_cache
from typing import Dict, FrozenSet, List, Optional, Sequence, Set, Tuple

import interegular
from interegular.fsm import anything_else

from ..classes.defaults import FINITE_LANGUAGE_LIMIT, PATTERN_STATE_CAP, REGEX_SPECIALS
from ..classes.exceptions import PatternError


class Automaton:
    """Deterministic automaton for one regular expression, restricted to live states."""

    __slots__ = ("source", "fsm", "initial", "finals", "live", "__keys__", "__chars__")

    def __init__(self, source: str, fsm):
        self.source = source
        self.fsm = fsm
        self.initial = fsm.initial
        self.finals: FrozenSet = frozenset(fsm.finals)
        self.live: FrozenSet = self.__live_states__()
        self.__keys__: Dict[str, object] = {}
        self.__chars__: Optional[Tuple[str, ...]] = None

    def __live_states__(self) -> FrozenSet:
        reverse: Dict[object, Set[object]] = {}
        for state, transitions in self.fsm.map.items():
            for target in transitions.values():
                reverse.setdefault(target, set()).add(state)
        live = set(self.finals)
        queue = deque(self.finals)
        while queue:
            state = queue.popleft()
            for previous in reverse.get(state, ()):
                if previous not in live:
                    live.add(previous)
                    queue.append(previous)
        return frozenset(live)

    def __repr__(self) -> str:
        return f"Automaton({self.source!r})"

    @property
    def empty(self) -> bool:
        return self.initial not in self.live

    @property
    def nullable(self) -> bool:
        return self.initial in self.finals

    @property
    def size(self) -> int:
        return len(self.fsm.map)

    def explicit_chars(self) -> Tuple[str, ...]:
        if self.__chars__ is None:
            self.__chars__ = tuple(
                sorted(s for s in self.fsm.alphabet if isinstance(s, str))
            )
        return self.__chars__

    def key(self, char: str):
        try:
            return self.__keys__[char]
        except KeyError:
            pass
        try:
            key = self.fsm.alphabet[char]
        except KeyError:
            key = None
        self.__keys__[char] = key
        return key

    def step(self, state, char: str):
        """Next live state after reading ``char`` or None when the run dies."""
        if state is None:
            return None
        transitions = self.fsm.map.get(state)
        if not transitions:
            return None
        key = self.key(char)
        if key is None:
            return None
        target = transitions.get(key)
        if target is None or target not in self.live:
            return None
        return target

    def run(self, text: str):
        state = self.initial if self.initial in self.live else None
        for char in text:
            state = self.step(state, char)
            if state is None:
                return None
        return state

    def accepts(self, text: str) -> bool:
        return self.run(text) in self.finals

    def finite_language(self, limit: int = FINITE_LANGUAGE_LIMIT) -> Optional[FrozenSet[str]]:
        """The accepted words when there are at most ``limit`` of them, otherwise None."""
        if self.empty:
            return frozenset()
        other_key = None
        try:
            other_key = self.fsm.alphabet[anything_else]
        except KeyError:
            other_key = None
        chars = self.explicit_chars()
        words: Set[str] = set()
        on_path: Set[object] = set()

        def visit(state, prefix: str) -> bool:
            if state in on_path:
                return False
            if state in self.finals:
                words.add(prefix)
                if len(words) > limit:
                    return False
            transitions = self.fsm.map.get(state, {})
            if other_key is not None and transitions.get(other_key) in self.live:
                return False
            on_path.add(state)
            for char in chars:
                target = transitions.get(self.key(char))
                if target is not None and target in self.live:
                    if not visit(target, prefix + char):
                        return False
            on_path.discard(state)
            return True

        if not visit(self.initial, ""):
            return None
        return frozenset(words)


@lru_cache(maxsize=4096)
def compile_pattern(source: str) -> Automaton:
    try:
        fsm = interegular.parse_pattern(source).to_fsm()
    except Exception as e:
        raise PatternError(source, str(e) or e.__class__.__name__)
    reduce = getattr(fsm, "reduce", None)
    if reduce is not None:
        try:
            fsm = reduce()
        except Exception:
            pass
    return Automaton(source, fsm)


def escape_literal(text: str) -> str:
    return "".join("\\" + ch if ch in REGEX_SPECIALS else ch for ch in text)


def alternation(alternatives: Sequence[str]) -> str:
    if len(alternatives) == 1:
        return alternatives[0]
    return "|".join(f"(?:{alt})" for alt in alternatives)


def __fresh_char__(taken: Set[str]) -> str:
    code = 0xE000
    while chr(code) in taken:
        code += 1
    return chr(code)


def included(small: Automaton, large: Automaton, cap: int = PATTERN_STATE_CAP) -> Optional[bool]:
    """Language inclusion L(small) <= L(large).

    Returns None when the product automaton exceeds ``cap`` states.
    """
    if small.empty:
        return True
    if small.size * max(large.size, 1) > cap:
        return None
    taken = set(small.explicit_chars()) | set(large.explicit_chars())
    symbols: List[str] = sorted(taken) + [__fresh_char__(taken)]
    start_large = large.initial if large.initial in large.live else None
    start = (small.initial, start_large)
    seen = {start}
    queue = deque([start])
    while queue:
        state_small, state_large = queue.popleft()
        if state_small in small.finals and (
            state_large is None or state_large not in large.finals
        ):
            return False
        for char in symbols:
            nxt_small = small.step(state_small, char)
            if nxt_small is None:
                continue
            pair = (nxt_small, large.step(state_large, char))
            if pair not in seen:
                seen.add(pair)
                if len(seen) > cap:
                    return None
                queue.append(pair)
    return True
