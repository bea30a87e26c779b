"""Run configuration and protocol run files.

``RunConfig`` is layered: built-in defaults, then the ``--config`` TOML
file, then ``XMLPROMPT_<KEY>`` environment variables, then command-line
flags. Only keys that were actually supplied by one of the layers count as
set, so a run file's own values survive unless something above overrides
them.
"""

import os
from typing import Any, Dict, List, Mapping, Optional, Tuple
from typing import Literal as OneOf

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .agents import BranchVerdicts, RejectRule, StubTool
from .classes import (
    ENGINE_DEFAULTS,
    ENV_PREFIX,
    METRIC_DEFAULTS,
    PATTERN_STATE_CAP,
    PROTOCOL_DEFAULTS,
    ConfigError,
)
from .lattice import LatticeConfig
from .metric import MetricConfig
from .utils import load_toml, log

TextDistance = OneOf["normalized", "max_normalized"]
LggMode = OneOf["hole", "union"]


class RunConfig(BaseModel):
    """Every tunable a command can take.

    Attributes:
        max_depth: Deepest path the metric weighs
        weight_base: Per-level decay of path weights
        attribute_share: Share of a label distance given to attributes
        text_distance: ``normalized`` or ``max_normalized`` edit distance
        lgg: Generalization used by meets (``hole`` or ``union``)
        pattern_state_cap: Largest automaton product tried by inclusion checks
        budget: Rounds for protocols, steps for iterations
        seed: The single source of randomness
        max_tokens: Decoding length limit
        evidence_threshold: Minimum confidence of qualifying evidence
        step_min_evidence: Qualifying evidence needed per step
        answer_min_evidence: Qualifying evidence an answer must cite
        retry_budget: Drafts requested per proposal site
        endpoint: Remote proposer URL
        log_level: Logger level name
    """

    model_config = ConfigDict(extra="forbid")

    max_depth: int = Field(default=METRIC_DEFAULTS["max_depth"], ge=1)
    weight_base: float = Field(default=METRIC_DEFAULTS["weight_base"], gt=0)
    attribute_share: float = Field(default=METRIC_DEFAULTS["attribute_share"], ge=0, le=1)
    text_distance: TextDistance = METRIC_DEFAULTS["text_distance"]
    lgg: LggMode = "hole"
    pattern_state_cap: int = Field(default=PATTERN_STATE_CAP, ge=1)
    budget: int = Field(default=ENGINE_DEFAULTS["budget"], ge=1)
    seed: int = 0
    max_tokens: int = Field(default=PROTOCOL_DEFAULTS["max_tokens"], ge=1)
    evidence_threshold: float = Field(default=PROTOCOL_DEFAULTS["evidence_threshold"], ge=0, le=1)
    step_min_evidence: int = Field(default=PROTOCOL_DEFAULTS["step_min_evidence"], ge=0)
    answer_min_evidence: int = Field(default=PROTOCOL_DEFAULTS["answer_min_evidence"], ge=0)
    retry_budget: int = Field(default=PROTOCOL_DEFAULTS["retry_budget"], ge=1)
    endpoint: Optional[str] = None
    log_level: str = "WARNING"

    def metric(self) -> MetricConfig:
        return MetricConfig(self.max_depth, self.weight_base, self.attribute_share, self.text_distance)

    def lattice(self) -> LatticeConfig:
        return LatticeConfig(self.lgg, self.pattern_state_cap)

    def is_set(self, key: str) -> bool:
        return key in self.model_fields_set


def __env_layer__(environ: Mapping[str, str]) -> Dict[str, str]:
    layer = {}
    for key in RunConfig.model_fields:
        name = f"{ENV_PREFIX}{key.upper()}"
        if name in environ:
            layer[key] = environ[name]
    return layer


def __validation_details__(error: ValidationError) -> str:
    return "\n".join(
        f"{'.'.join(str(p) for p in item['loc']) or '<root>'}: {item['msg']}" for item in error.errors()
    )


def load_run_config(
    path: Optional[str] = None,
    overrides: Optional[Mapping[str, Any]] = None,
    environ: Optional[Mapping[str, str]] = None,
) -> RunConfig:
    """Merge the configuration layers.

    Args:
        path: Optional TOML file of flat keys
        overrides: Command-line values; None entries are ignored
        environ: Environment to read, ``os.environ`` by default

    Raises:
        ConfigError: On unreadable files, unknown keys or invalid values.
    """
    merged: Dict[str, Any] = {}
    if path:
        merged.update(load_toml(path))
        log.debug(f"Configuration file {path} supplies: {', '.join(sorted(merged)) or 'nothing'}")
    merged.update(__env_layer__(os.environ if environ is None else environ))
    merged.update({k: v for k, v in (overrides or {}).items() if v is not None})
    try:
        return RunConfig.model_validate(merged)
    except ValidationError as e:
        raise ConfigError("Invalid run configuration", __validation_details__(e))


# --- protocol run files --------------------------------------------------------------


class ProposerOptions(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: OneOf["scripted", "random", "http"] = "scripted"
    fixture: Optional[str] = None
    endpoint: Optional[str] = None
    seed: Optional[int] = None
    stop_probability: float = Field(default=0.5, ge=0, le=1)
    vocabulary: Optional[str] = None
    timeout: float = Field(default=30.0, gt=0)


class ProposerSection(ProposerOptions):
    branches: Dict[str, ProposerOptions] = Field(default_factory=dict)


class VerifierSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    conf: float = Field(default=0.9, ge=0, le=1)
    ref_prefix: str = Field(default="e", pattern=r"^[A-Za-z0-9_.-]*$")
    reject: List[RejectRule] = Field(default_factory=list)
    reject_all: Optional[str] = None
    branches: Dict[str, BranchVerdicts] = Field(default_factory=dict)


class HoleFillerSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    schedule: List[Tuple[int, int]] = Field(min_length=1)
    eps: float = Field(default=ENGINE_DEFAULTS["eps"], gt=0)
    max_steps: int = Field(default=ENGINE_DEFAULTS["budget"], ge=1)
    beta: Optional[float] = Field(default=None, ge=0, lt=1)


class RunFile(BaseModel):
    """One protocol run: kind, grammar, invariants, budgets and the parties.

    Relative fixture, grammar, invariant and skeleton paths are resolved
    against the run file's directory.
    """

    model_config = ConfigDict(extra="forbid")

    kind: OneOf["plan_verify_answer", "tool_call", "multibranch", "channel_exchange", "hole_filler"]
    grammar: str = "builtin:PromptXML"
    invariants: Optional[List[str]] = None
    budget: Optional[int] = Field(default=None, ge=1)
    retry_budget: Optional[int] = Field(default=None, ge=1)
    evidence_threshold: Optional[float] = Field(default=None, ge=0, le=1)
    step_min_evidence: Optional[int] = Field(default=None, ge=0)
    answer_min_evidence: Optional[int] = Field(default=None, ge=0)
    seed: Optional[int] = None
    max_tokens: Optional[int] = Field(default=None, ge=1)
    task: Optional[str] = None
    guidelines: Optional[str] = None
    skeleton: Optional[str] = None
    branches: List[str] = Field(default_factory=list)
    closing: Optional[OneOf["compare", "join"]] = None
    channel: str = "bus"
    concurrent: bool = False
    abort_on_total_rejection: bool = False
    proposer: ProposerSection = Field(default_factory=ProposerSection)
    verifier: VerifierSection = Field(default_factory=VerifierSection)
    tools: Dict[str, StubTool] = Field(default_factory=dict)
    hole_filler: Optional[HoleFillerSection] = None


def read_run_file(path: str) -> RunFile:
    """Load and validate a protocol run file.

    Raises:
        ConfigError: On unreadable TOML or schema violations.
    """
    try:
        run = RunFile.model_validate(load_toml(path))
    except ValidationError as e:
        raise ConfigError(f"Invalid run file {path}", __validation_details__(e))
    if run.kind == "hole_filler" and run.hole_filler is None:
        raise ConfigError(f"Run file {path} has kind hole_filler but no [hole_filler] table")
    return run

