"""Task-aware distance between trees and empirical contraction estimates."""

from dataclasses import dataclass
from itertools import islice
from typing import Callable, Dict, Iterable, Iterator, Optional, Tuple, Union

from .classes import (
    METRIC_DEFAULTS,
    ROOT,
    TEXT_DISTANCES,
    ConfigError,
    ContentSpec,
    ContractionEstimate,
    DegenerateSample,
    DeweyPath,
    Distance,
    Literal,
    NodeLabel,
    TopNotMetrizable,
    XmlTree,
)
from .utils import log, normalized_edit_distance

TreePair = Tuple[XmlTree, XmlTree]
PairSampler = Union[Callable[[], TreePair], Iterable[TreePair]]


@dataclass(frozen=True)
class MetricConfig:
    """Path weights decay as ``weight_base ** -len(path)`` and are renormalized
    over the paths realized by the two trees."""

    max_depth: int = METRIC_DEFAULTS["max_depth"]
    weight_base: float = METRIC_DEFAULTS["weight_base"]
    attribute_share: float = METRIC_DEFAULTS["attribute_share"]
    text_distance: str = METRIC_DEFAULTS["text_distance"]

    def __post_init__(self):
        if self.max_depth < 1:
            raise ConfigError(f"max_depth must be at least 1, got {self.max_depth}")
        if self.weight_base <= 0:
            raise ConfigError(f"weight_base must be positive, got {self.weight_base}")
        if not 0.0 <= self.attribute_share <= 1.0:
            raise ConfigError(f"attribute_share must lie in [0, 1], got {self.attribute_share}")
        if self.text_distance not in TEXT_DISTANCES:
            raise ConfigError(
                f"Unknown text_distance '{self.text_distance}'",
                f"Choose one of: {', '.join(TEXT_DISTANCES)}",
            )


DEFAULT_METRIC = MetricConfig()


def content_distance(a: ContentSpec, b: ContentSpec, config: MetricConfig = DEFAULT_METRIC) -> float:
    if a == b:
        return 0.0
    if isinstance(a, Literal) and isinstance(b, Literal):
        return normalized_edit_distance(a.text, b.text, config.text_distance)
    return 1.0


def label_distance(
    a: Optional[NodeLabel], b: Optional[NodeLabel], config: MetricConfig = DEFAULT_METRIC
) -> float:
    if a is None and b is None:
        return 0.0
    if a is None or b is None or a.tag != b.tag:
        return 1.0
    first, second = a.attrs, b.attrs
    names = set(first) | set(second)
    if names:
        total = 0.0
        for name in names:
            if name not in first or name not in second:
                total += 1.0
            else:
                total += content_distance(first[name], second[name], config)
        attributes = total / len(names)
    else:
        attributes = 0.0
    share = config.attribute_share
    return share * attributes + (1.0 - share) * content_distance(a.content, b.content, config)


def path_weights(t1: XmlTree, t2: XmlTree, config: MetricConfig = DEFAULT_METRIC) -> Dict[DeweyPath, float]:
    """Normalized weights over the root plus every path of either tree up to ``max_depth``."""
    if t1.is_top or t2.is_top:
        raise TopNotMetrizable()
    paths = {ROOT}
    for tree in (t1, t2):
        paths.update(p for p in tree.nodes if len(p) <= config.max_depth)
    raw = {p: config.weight_base ** -len(p) for p in paths}
    total = sum(raw.values())
    return {p: w / total for p, w in sorted(raw.items())}


def distance(t1: XmlTree, t2: XmlTree, config: MetricConfig = DEFAULT_METRIC) -> Distance:
    """Weighted sum of per-path label distances, a value in [0, 1].

    Raises:
        TopNotMetrizable: If either argument is the conflict element.
    """
    weights = path_weights(t1, t2, config)
    value = sum(w * label_distance(t1.label(p), t2.label(p), config) for p, w in weights.items())
    return Distance(min(1.0, max(0.0, value)), weights)


def __pairs__(sampler: PairSampler, n_pairs: int) -> Iterator[TreePair]:
    if callable(sampler):
        return (sampler() for _ in range(n_pairs))
    return islice(iter(sampler), n_pairs)


def estimate_contraction(
    transformer: Callable[[XmlTree], XmlTree],
    sampler: PairSampler,
    config: MetricConfig = DEFAULT_METRIC,
    n_pairs: int = 100,
) -> ContractionEstimate:
    """Largest observed ratio d(T(a), T(b)) / d(a, b) over sampled pairs.

    This is a lower bound on the Lipschitz constant of ``transformer``.

    Args:
        transformer: Any callable on trees
        sampler: Zero-argument callable returning a pair, or an iterable of pairs
        config: Metric settings
        n_pairs: Number of pairs to draw

    Raises:
        DegenerateSample: When no sampled pair has a positive distance.
    """
    if n_pairs < 1:
        raise ValueError("n_pairs must be at least 1")
    best = 0.0
    witness: Optional[TreePair] = None
    drawn = positive = 0
    for a, b in __pairs__(sampler, n_pairs):
        drawn += 1
        before = distance(a, b, config).value
        if before <= 0.0:
            continue
        positive += 1
        after = distance(transformer(a), transformer(b), config).value
        ratio = after / before
        if witness is None or ratio > best:
            best, witness = ratio, (a, b)
    if positive == 0:
        raise DegenerateSample(drawn)
    log.debug(f"Contraction estimate q={best:.6g} over {positive}/{drawn} pairs")
    return ContractionEstimate(best, witness, drawn, positive)
