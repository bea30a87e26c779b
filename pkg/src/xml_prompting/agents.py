"""Parties of a protocol run: proposers draft fragments, verifiers judge
steps, tool stubs answer tool calls and the channel bus carries messages
between branches.
"""

import json
import threading
import urllib.error
import urllib.request
import zlib
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .classes import (
    PROTOCOL_DEFAULTS,
    ConfigError,
    DeweyPath,
    ProposerExhausted,
    ProtocolError,
    ToolFailure,
    UnknownAddressee,
    XmlTree,
    format_path,
)
from .grammar import Grammar, UniformPolicy, Vocabulary, constrained_sample
from .lattice import serialize_partial
from .utils import load_toml, log

# --- proposers ---------------------------------------------------------------


@dataclass(frozen=True)
class ProposalRequest:
    """What a proposer is asked for.

    ``grammar`` already starts at the nonterminal of the requested fragment;
    ``site`` names the pass asking (``plan``, ``step``, ``answer``,
    ``toolcall`` or ``message``) and ``index`` the step being replaced.
    """

    tree: XmlTree
    path: DeweyPath
    grammar: Grammar
    site: str
    round: int = 1
    attempt: int = 1
    branch: Optional[str] = None
    index: Optional[int] = None
    max_tokens: int = PROTOCOL_DEFAULTS["max_tokens"]


class Proposer:
    name = "proposer"

    def propose(self, request: ProposalRequest) -> str:
        raise NotImplementedError

    def __repr__(self) -> str:
        return f"{self.__class__.__name__}({self.name!r})"


class FragmentEntry(BaseModel):
    model_config = ConfigDict(extra="forbid")

    text: str
    site: Optional[str] = None
    round: Optional[int] = Field(default=None, ge=1)
    branch: Optional[str] = None
    path: Optional[str] = None
    index: Optional[int] = Field(default=None, ge=1)
    reuse: bool = False

    def specificity(self, request: ProposalRequest) -> Optional[int]:
        """Number of keys pinned by this entry, or None when one disagrees."""
        wanted = {
            "site": request.site,
            "round": request.round,
            "branch": request.branch,
            "path": format_path(request.path),
            "index": request.index,
        }
        score = 0
        for key, value in wanted.items():
            pinned = getattr(self, key)
            if pinned is None:
                continue
            if pinned != value:
                return None
            score += 1
        return score


class FragmentFile(BaseModel):
    model_config = ConfigDict(extra="forbid")

    fragment: List[FragmentEntry] = Field(default_factory=list)


class ScriptedProposer(Proposer):
    """Replays fragments from a fixture.

    The most specific unused entry matching the request wins, ties go to
    file order. Entries marked ``reuse`` are never used up.
    """

    def __init__(self, entries: Sequence[FragmentEntry], name: str = "scripted"):
        self.entries = list(entries)
        self.name = name
        self.__used__: List[bool] = [False] * len(self.entries)
        self.__lock__ = threading.Lock()

    @classmethod
    def from_file(cls, path: str) -> "ScriptedProposer":
        try:
            fixture = FragmentFile.model_validate(load_toml(path))
        except ValidationError as e:
            raise ConfigError(f"Invalid fragment fixture {path}", str(e))
        log.debug(f"Loaded {len(fixture.fragment)} scripted fragments from {path}")
        return cls(fixture.fragment, name=path)

    @classmethod
    def from_texts(cls, texts: Mapping[str, Union[str, Sequence[str]]]) -> "ScriptedProposer":
        """Quick fixture: site name to one text or a list used in order."""
        entries = []
        for site, value in texts.items():
            for text in [value] if isinstance(value, str) else value:
                entries.append(FragmentEntry(site=site, text=text))
        return cls(entries)

    @property
    def remaining(self) -> int:
        return sum(1 for entry, used in zip(self.entries, self.__used__) if entry.reuse or not used)

    def propose(self, request: ProposalRequest) -> str:
        with self.__lock__:
            best: Optional[Tuple[int, int]] = None
            for position, entry in enumerate(self.entries):
                if self.__used__[position] and not entry.reuse:
                    continue
                score = entry.specificity(request)
                if score is None:
                    continue
                if best is None or score > best[0]:
                    best = (score, position)
            if best is None:
                raise ProposerExhausted(
                    request.path,
                    request.attempt,
                    [f"no scripted fragment for site={request.site} round={request.round} "
                     f"branch={request.branch or '-'} index={request.index or '-'}"],
                )
            self.__used__[best[1]] = True
            return self.entries[best[1]].text


class SeededRandomProposer(Proposer):
    """Samples fragments under the fragment grammar's mask.

    The generator seed is derived from the run seed and the request
    coordinates, so concurrent branches draw independent, reproducible
    streams.
    """

    def __init__(
        self,
        seed: int = 0,
        vocabulary: Optional[Vocabulary] = None,
        stop_probability: float = 0.5,
        name: str = "random",
    ):
        self.seed = seed
        self.vocabulary = vocabulary or Vocabulary.printable_ascii(exclude="&")
        self.stop_probability = stop_probability
        self.name = name

    def __seed__(self, request: ProposalRequest) -> int:
        tag = zlib.crc32(f"{request.branch or ''}:{request.site}".encode("utf-8"))
        entropy = [self.seed, request.round, request.attempt, tag, *request.path]
        return int(np.random.SeedSequence(entropy).generate_state(1)[0])

    def propose(self, request: ProposalRequest) -> str:
        policy = UniformPolicy(self.__seed__(request), self.stop_probability)
        result = constrained_sample(request.grammar, self.vocabulary, policy, request.max_tokens)
        if not result.complete:
            log.debug(f"{self.name}: sample for {request.site} hit max_tokens")
        return result.text


class HttpProposer(Proposer):
    """Posts the partial tree and fragment grammar to a completion endpoint.

    Request body: ``{"prompt", "grammar", "start", "path", "max_tokens"}``;
    the response must be a JSON object with a ``text`` field.
    """

    def __init__(self, endpoint: str, timeout: float = 30.0, name: str = "http"):
        if not endpoint.startswith(("http://", "https://")):
            raise ConfigError(f"Unsupported proposer endpoint '{endpoint}'", "Use an http(s) URL")
        self.endpoint = endpoint
        self.timeout = timeout
        self.name = name

    def payload(self, request: ProposalRequest) -> Dict[str, object]:
        return {
            "prompt": serialize_partial(request.tree),
            "grammar": request.grammar.source,
            "start": request.grammar.start,
            "path": format_path(request.path),
            "max_tokens": request.max_tokens,
        }

    def propose(self, request: ProposalRequest) -> str:
        body = json.dumps(self.payload(request)).encode("utf-8")
        http_request = urllib.request.Request(
            self.endpoint,
            data=body,
            headers={"Content-Type": "application/json"},
            method="POST",
        )
        log.trace(f"POST {self.endpoint} for {request.site} at {format_path(request.path) or '<root>'}")
        try:
            with urllib.request.urlopen(http_request, timeout=self.timeout) as response:
                answer = json.loads(response.read().decode("utf-8"))
        except (urllib.error.URLError, OSError) as e:
            raise ProtocolError(f"Proposer endpoint {self.endpoint} failed", "propose", str(e))
        except json.JSONDecodeError as e:
            raise ProtocolError(f"Proposer endpoint {self.endpoint} returned invalid JSON", "propose", str(e))
        if not isinstance(answer, dict) or not isinstance(answer.get("text"), str):
            raise ProtocolError(
                f"Proposer endpoint {self.endpoint} returned no 'text' field", "propose"
            )
        return answer["text"]


# --- verifiers ----------------------------------------------------------------


@dataclass(frozen=True)
class VerificationRequest:
    tree: XmlTree
    path: DeweyPath
    round: int
    branch: Optional[str]
    index: int
    text: str
    revision: int = 1


@dataclass(frozen=True)
class Evidence:
    ref: str
    conf: float

    def __post_init__(self):
        if not 0.0 <= self.conf <= 1.0:
            raise ValueError(f"Confidence must lie in [0, 1], got {self.conf}")


@dataclass(frozen=True)
class Counterexample:
    text: str


Outcome = Union[Evidence, Counterexample]


class Verifier:
    """Total judge of a step: every call returns Evidence or a Counterexample."""

    def verify(self, request: VerificationRequest) -> Outcome:
        raise NotImplementedError


class RejectRule(BaseModel):
    model_config = ConfigDict(extra="forbid")

    index: int = Field(ge=1)
    branch: Optional[str] = None
    times: Optional[int] = Field(default=1, ge=1)
    text: str = "Step could not be verified."


class BranchVerdicts(BaseModel):
    model_config = ConfigDict(extra="forbid")

    ref_prefix: Optional[str] = None
    conf: Optional[float] = Field(default=None, ge=0.0, le=1.0)


class ScriptedVerifier(Verifier):
    """Accepts with a fixed confidence unless a reject rule applies.

    Evidence refs are ``<prefix><index>``, with ``r<revision>`` appended for
    replacement steps. A reject rule with ``times`` unset rejects forever.
    """

    def __init__(
        self,
        conf: float = 0.9,
        ref_prefix: str = "e",
        rejects: Sequence[RejectRule] = (),
        branches: Optional[Mapping[str, BranchVerdicts]] = None,
        reject_text: Optional[str] = None,
    ):
        self.conf = conf
        self.reject_text = reject_text
        self.ref_prefix = ref_prefix
        self.rejects = list(rejects)
        self.branches = dict(branches or {})
        self.__hits__: List[int] = [0] * len(self.rejects)
        self.__lock__ = threading.Lock()

    @classmethod
    def accept_all(cls, conf: float = 0.9, ref_prefix: str = "e") -> "ScriptedVerifier":
        return cls(conf, ref_prefix)

    @classmethod
    def reject_all(cls, text: str = "Step could not be verified.") -> "ScriptedVerifier":
        return cls(reject_text=text)

    def __rejection__(self, request: VerificationRequest) -> Optional[str]:
        if self.reject_text is not None:
            return self.reject_text
        with self.__lock__:
            for position, rule in enumerate(self.rejects):
                if rule.index != request.index:
                    continue
                if rule.branch is not None and rule.branch != request.branch:
                    continue
                if rule.times is not None and self.__hits__[position] >= rule.times:
                    continue
                self.__hits__[position] += 1
                return rule.text
        return None

    def verify(self, request: VerificationRequest) -> Outcome:
        rejection = self.__rejection__(request)
        if rejection is not None:
            return Counterexample(rejection)
        overrides = self.branches.get(request.branch or "", BranchVerdicts())
        prefix = overrides.ref_prefix if overrides.ref_prefix is not None else self.ref_prefix
        conf = overrides.conf if overrides.conf is not None else self.conf
        ref = f"{prefix}{request.index}"
        if request.revision > 1:
            ref += f"r{request.revision}"
        return Evidence(ref, conf)


# --- tools --------------------------------------------------------------------


class ToolField(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str = Field(pattern=r"^[a-z][a-z_]*$")
    value: str = ""
    unit: Optional[str] = Field(default=None, pattern=r"^[A-Za-z%]+$")


class StubTool(BaseModel):
    """Canned tool result, or a failure reason raised as ToolFailure."""

    model_config = ConfigDict(extra="forbid")

    output: List[ToolField] = Field(default_factory=list)
    failure: Optional[str] = None

    def __call__(self, name: str, arguments: Mapping[str, str]) -> List[ToolField]:
        if self.failure is not None:
            raise ToolFailure(name, self.failure)
        if not self.output:
            raise ToolFailure(name, "the tool returned no fields")
        log.debug(f"Tool {name} called with {dict(arguments)}")
        return list(self.output)


ToolRegistry = Mapping[str, StubTool]


# --- channel bus ----------------------------------------------------------------


@dataclass(frozen=True)
class Message:
    id: str
    sender: str
    recipient: str
    body: str


@dataclass
class ChannelBus:
    """Append-only message log with one read cursor per branch.

    Reads return messages in id order so consumption does not depend on
    the order branches happened to post in.
    """

    branches: Tuple[str, ...]
    messages: List[Message] = field(default_factory=list)
    consumed: Dict[str, List[str]] = field(default_factory=dict)

    def __post_init__(self):
        self.branches = tuple(self.branches)
        self.__lock__ = threading.Lock()
        for branch in self.branches:
            self.consumed.setdefault(branch, [])

    def post(self, message: Message):
        if message.recipient not in self.branches:
            raise UnknownAddressee(message.id, message.recipient)
        if message.sender not in self.branches:
            raise ProtocolError(
                f"Message '{message.id}' comes from unknown branch '{message.sender}'", "channel"
            )
        with self.__lock__:
            if any(m.id == message.id for m in self.messages):
                raise ProtocolError(f"Message id '{message.id}' is already on the bus", "channel")
            self.messages.append(message)
        log.debug(f"bus: {message.id} {message.sender} -> {message.recipient}")

    def pending(self, branch: str) -> List[Message]:
        with self.__lock__:
            read = set(self.consumed.get(branch, ()))
            waiting = [m for m in self.messages if m.recipient == branch and m.id not in read]
        return sorted(waiting, key=lambda m: m.id)

    def consume(self, branch: str) -> List[Message]:
        """Advance ``branch``'s cursor past every message addressed to it."""
        waiting = self.pending(branch)
        with self.__lock__:
            self.consumed.setdefault(branch, []).extend(m.id for m in waiting)
        return waiting

    def ordered(self) -> List[Message]:
        return sorted(self.messages, key=lambda m: m.id)

    @property
    def consumed_ids(self) -> List[str]:
        return sorted(i for ids in self.consumed.values() for i in ids)
