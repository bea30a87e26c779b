from dataclasses import dataclass, field
from typing import Any, Dict, List, Mapping, Optional, Tuple

from .tree import DeweyPath, XmlTree, format_path


@dataclass(frozen=True)
class Verdict:
    holds: bool
    path: Optional[DeweyPath] = None
    name: str = ""

    def __bool__(self) -> bool:
        return self.holds

    def __str__(self) -> str:
        if self.holds:
            return f"{self.name or 'invariant'}: holds"
        return f"{self.name or 'invariant'}: violated at {format_path(self.path or ()) or '<root>'}"


@dataclass(frozen=True)
class Distance:
    value: float
    weights: Mapping[DeweyPath, float] = field(default_factory=dict, compare=False, repr=False)

    def __float__(self) -> float:
        return self.value


@dataclass(frozen=True)
class ContractionEstimate:
    q: float
    witness: Optional[Tuple[XmlTree, XmlTree]]
    samples: int
    positive_samples: int


@dataclass(frozen=True)
class MonotonicityReport:
    passed: bool
    checked: int
    counterexample: Optional[Tuple[XmlTree, XmlTree]] = None

    def __bool__(self) -> bool:
        return self.passed


@dataclass(frozen=True)
class SampleResult:
    text: str
    status: str
    tokens: Tuple[int, ...] = ()

    @property
    def complete(self) -> bool:
        return self.status == "complete"


@dataclass
class IterationReport:
    """Trace of an iteration run.

    ``steps`` counts transformer applications; ``converged_at`` is the index
    of the first iterate equal to the reported fixed point.
    """

    kind: str
    iterates: List[XmlTree] = field(default_factory=list)
    fixed_point: Optional[XmlTree] = None
    steps: int = 0
    productive_steps: int = 0
    converged_at: Optional[int] = None
    distances: List[float] = field(default_factory=list)
    q_hat: Optional[float] = None
    bound_trace: List[float] = field(default_factory=list)
    events: List[str] = field(default_factory=list)
    extra: Dict[str, Any] = field(default_factory=dict)

    @property
    def converged(self) -> bool:
        return self.fixed_point is not None

    def event(self, message: str):
        self.events.append(message)

    def to_lines(self) -> List[str]:
        lines = []
        for n, value in enumerate(self.distances):
            line = f"step={n + 1} distance={value:.12g}"
            if n < len(self.bound_trace):
                line += f" bound={self.bound_trace[n]:.12g}"
            lines.append(line)
        for message in self.events:
            lines.append(f"event={message}")
        lines.append("[summary]")
        lines.append(f"kind={self.kind}")
        lines.append(f"steps={self.steps}")
        lines.append(f"productive_steps={self.productive_steps}")
        lines.append(f"fixed_point={'true' if self.converged else 'false'}")
        if self.converged_at is not None:
            lines.append(f"converged_at={self.converged_at}")
        if self.q_hat is not None:
            lines.append(f"q_hat={self.q_hat:.12g}")
        for key in sorted(self.extra):
            lines.append(f"{key}={self.extra[key]}")
        return lines
