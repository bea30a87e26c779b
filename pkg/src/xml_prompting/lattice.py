"""Refinement lattice over partial XML trees.

Trees are ordered positionally: ``refines(a, b)`` holds when every node of
``a`` exists at the same Dewey path in ``b`` with the same tag and a label
that is at least as specific. Meet keeps the common prefix structure, join
overlays both trees and lifts any incompatibility to ``TOP``.
"""

import re
from dataclasses import dataclass
from typing import Dict, FrozenSet, Iterable, List, Optional, Tuple

from lxml import etree

from .classes import (
    BOTTOM,
    EMPTY,
    HOLE,
    HOLE_TAG,
    HOLE_VALUE,
    LGG_MODES,
    PATTERN_STATE_CAP,
    PATTERN_TAG,
    PATTERN_VALUE_PREFIX,
    TOP,
    ContentSpec,
    DeweyPath,
    Hole,
    Literal,
    MalformedXml,
    NodeLabel,
    NotConcrete,
    PartialTree,
    Pattern,
    PatternError,
    TopUnserializable,
    XmlTree,
    format_path,
    from_words,
    pattern,
)
from .utils import escape_literal, included, log


@dataclass(frozen=True)
class LatticeConfig:
    """Content-level lattice options.

    Attributes:
        lgg (str): Generalization used by meet for incomparable content:
            ``hole`` forgets the content, ``union`` keeps both as a pattern.
        state_cap (int): Product size above which pattern inclusion is not
            attempted and the patterns count as incomparable.
    """

    lgg: str = "hole"
    state_cap: int = PATTERN_STATE_CAP

    def __post_init__(self):
        if self.lgg not in LGG_MODES:
            raise ValueError(f"Unknown lgg mode '{self.lgg}', expected one of {LGG_MODES}")


DEFAULT_LATTICE = LatticeConfig()


# --- content specs ----------------------------------------------------------


def __alternatives__(spec: ContentSpec) -> Tuple[str, ...]:
    if isinstance(spec, Literal):
        return (escape_literal(spec.text),)
    return spec.alternatives


def __words__(spec: ContentSpec) -> Optional[FrozenSet[str]]:
    if isinstance(spec, Literal):
        return frozenset((spec.text,))
    return spec.automaton.finite_language()


def content_leq(a: ContentSpec, b: ContentSpec, config: LatticeConfig = DEFAULT_LATTICE) -> bool:
    """``a`` is refined by ``b``: every filler admitted by ``b`` is admitted by ``a``."""
    if a == b or isinstance(a, Hole):
        return True
    if isinstance(b, Hole) or isinstance(a, Literal):
        return False
    if isinstance(b, Literal):
        return a.accepts(b.text)
    return included(b.automaton, a.automaton, config.state_cap) is True


def content_meet(a: ContentSpec, b: ContentSpec, config: LatticeConfig = DEFAULT_LATTICE) -> ContentSpec:
    if content_leq(a, b, config):
        return a
    if content_leq(b, a, config):
        return b
    if config.lgg == "hole":
        return HOLE
    words_a, words_b = __words__(a), __words__(b)
    if words_a is not None and words_b is not None:
        return from_words(words_a | words_b, ())
    return Pattern(tuple(sorted(set(__alternatives__(a)) | set(__alternatives__(b)))))


def content_join(
    a: ContentSpec, b: ContentSpec, config: LatticeConfig = DEFAULT_LATTICE
) -> Optional[ContentSpec]:
    """Least common refinement of two specs, or None when they conflict."""
    if content_leq(a, b, config):
        return b
    if content_leq(b, a, config):
        return a
    if isinstance(a, Literal) or isinstance(b, Literal):
        return None
    words_a, words_b = __words__(a), __words__(b)
    if words_a is not None and words_b is not None:
        common = words_a & words_b
    elif words_a is not None:
        common = frozenset(w for w in words_a if b.accepts(w))
    elif words_b is not None:
        common = frozenset(w for w in words_b if a.accepts(w))
    else:
        log.debug(f"Incomparable infinite patterns {a!r} and {b!r} treated as a conflict")
        return None
    if not common:
        return None
    return from_words(common, ())


# --- labels -----------------------------------------------------------------


def label_leq(a: NodeLabel, b: NodeLabel, config: LatticeConfig = DEFAULT_LATTICE) -> bool:
    if a.tag != b.tag or not content_leq(a.content, b.content, config):
        return False
    for name, value in a.attributes:
        other = b.attribute(name)
        if other is None or not content_leq(value, other, config):
            return False
    return True


def label_meet(a: NodeLabel, b: NodeLabel, config: LatticeConfig = DEFAULT_LATTICE) -> Optional[NodeLabel]:
    if a.tag != b.tag:
        return None
    attributes = []
    for name, value in a.attributes:
        other = b.attribute(name)
        if other is not None:
            attributes.append((name, content_meet(value, other, config)))
    return NodeLabel(a.tag, attributes, content_meet(a.content, b.content, config))


def label_join(a: NodeLabel, b: NodeLabel, config: LatticeConfig = DEFAULT_LATTICE) -> Optional[NodeLabel]:
    if a.tag != b.tag:
        return None
    content = content_join(a.content, b.content, config)
    if content is None:
        return None
    attributes = []
    for name, value in a.attributes:
        other = b.attribute(name)
        if other is not None:
            value = content_join(value, other, config)
            if value is None:
                return None
        attributes.append((name, value))
    for name, value in b.attributes:
        if a.attribute(name) is None:
            attributes.append((name, value))
    return NodeLabel(a.tag, attributes, content)


# --- trees ------------------------------------------------------------------


def refines(t1: XmlTree, t2: XmlTree, config: LatticeConfig = DEFAULT_LATTICE) -> bool:
    """Whether ``t2`` is at least as specific as ``t1``."""
    if t1.is_bottom or t2.is_top:
        return True
    if t1.is_top or t2.is_bottom:
        return False
    for path, label in t1.nodes.items():
        other = t2.label(path)
        if other is None or not label_leq(label, other, config):
            return False
    return True


def embeds(t1: XmlTree, t2: XmlTree, config: LatticeConfig = DEFAULT_LATTICE) -> bool:
    """Order-preserving embedding of ``t1`` into ``t2``.

    Children of a node may be matched to any increasing subsequence of the
    corresponding children in ``t2``, which admits insertions between
    existing siblings.
    """
    if t1.is_bottom or t2.is_top:
        return True
    if t1.is_top or t2.is_bottom:
        return False

    def fits(p1: DeweyPath, p2: DeweyPath) -> bool:
        if not label_leq(t1[p1], t2[p2], config):
            return False
        candidates = t2.children(p2)
        position = 0
        for child in t1.children(p1):
            while position < len(candidates) and not fits(child, candidates[position]):
                position += 1
            if position == len(candidates):
                return False
            position += 1
        return True

    return fits((), ())


def __meet_pair__(t1: XmlTree, t2: XmlTree, config: LatticeConfig) -> XmlTree:
    if t1.is_top:
        return t2
    if t2.is_top:
        return t1
    if t1.is_bottom or t2.is_bottom:
        return BOTTOM
    nodes: Dict[DeweyPath, NodeLabel] = {}

    def walk(path: DeweyPath) -> bool:
        label = label_meet(t1[path], t2[path], config)
        if label is None:
            return False
        nodes[path] = label
        shared = min(t1.child_count(path), t2.child_count(path))
        for i in range(1, shared + 1):
            if not walk(path + (i,)):
                break
        return True

    if not walk(()):
        return BOTTOM
    return XmlTree(nodes, validate=False)


def __join_pair__(t1: XmlTree, t2: XmlTree, config: LatticeConfig) -> XmlTree:
    if t1.is_top or t2.is_top:
        return TOP
    if t1.is_bottom:
        return t2
    if t2.is_bottom:
        return t1
    nodes: Dict[DeweyPath, NodeLabel] = {}

    def walk(path: DeweyPath) -> bool:
        a, b = t1.label(path), t2.label(path)
        if a is not None and b is not None:
            label = label_join(a, b, config)
            if label is None:
                log.debug(f"Join conflict at {format_path(path) or '<root>'}: {a!r} vs {b!r}")
                return False
        else:
            label = a if a is not None else b
        nodes[path] = label
        count = max(
            t1.child_count(path) if a is not None else 0,
            t2.child_count(path) if b is not None else 0,
        )
        return all(walk(path + (i,)) for i in range(1, count + 1))

    if not walk(()):
        return TOP
    return XmlTree(nodes, validate=False)


def meet(trees: Iterable[XmlTree], config: LatticeConfig = DEFAULT_LATTICE) -> XmlTree:
    """Greatest lower bound; the meet of no trees is ``TOP``."""
    result = TOP
    for tree in trees:
        result = __meet_pair__(result, tree, config)
        if result.is_bottom:
            break
    return result


def join(trees: Iterable[XmlTree], config: LatticeConfig = DEFAULT_LATTICE) -> XmlTree:
    """Least upper bound; the join of no trees is ``BOTTOM``."""
    result = BOTTOM
    for tree in trees:
        result = __join_pair__(result, tree, config)
        if result.is_top:
            break
    return result


# --- XML text ---------------------------------------------------------------

__PARSER_OPTIONS__ = dict(
    remove_comments=True,
    remove_pis=True,
    resolve_entities=False,
    no_network=True,
)

__TEXT_ESCAPES__ = {"&": "&amp;", "<": "&lt;", ">": "&gt;", "\r": "&#13;"}
__ATTR_ESCAPES__ = dict(__TEXT_ESCAPES__, **{'"': "&quot;", "\n": "&#10;", "\t": "&#9;"})

__TAG_SCAN__ = re.compile(
    r"<!--.*?-->|<\?.*?\?>|<!\[CDATA\[.*?\]\]>|<!DOCTYPE[^>]*>"
    r"|<(?P<close>/?)(?P<name>[A-Za-z_][\w.\-:]*)(?P<rest>[^>]*?)(?P<empty>/?)>",
    re.S,
)


def __escape__(text: str, table: Dict[str, str]) -> str:
    return "".join(table.get(ch, ch) for ch in text)


def __position__(element) -> Tuple[int, int]:
    return (element.sourceline or 0, 0)


def __read_value__(raw: str, element) -> ContentSpec:
    if raw == HOLE_VALUE:
        return HOLE
    if raw.startswith(PATTERN_VALUE_PREFIX):
        return __read_pattern__(raw[len(PATTERN_VALUE_PREFIX):], element)
    try:
        return Literal(raw)
    except ValueError as e:
        raise MalformedXml(__position__(element), str(e))


def __read_pattern__(regex: Optional[str], element) -> ContentSpec:
    if regex is None:
        raise MalformedXml(__position__(element), "<pattern> requires a regex attribute")
    try:
        return pattern(regex)
    except PatternError as e:
        raise MalformedXml(__position__(element), e.message)


def __read_element__(element, path: DeweyPath, nodes: Dict[DeweyPath, NodeLabel]):
    tag = element.tag
    if not isinstance(tag, str):
        raise MalformedXml(__position__(element), "entity references are not supported")
    if tag.startswith("{"):
        raise MalformedXml(__position__(element), "namespaced elements are not supported")
    if tag in (HOLE_TAG, PATTERN_TAG):
        raise MalformedXml(__position__(element), f"<{tag}/> may only open its parent's content")
    attributes = []
    for name, raw in element.attrib.items():
        if name.startswith("{"):
            raise MalformedXml(__position__(element), "namespaced attributes are not supported")
        attributes.append((name, __read_value__(raw, element)))

    kids = list(element)
    for kid in kids:
        if kid.tail and kid.tail.strip():
            raise MalformedXml(
                __position__(kid), f"text after <{kid.tag}> inside <{tag}> is not supported"
            )
    text = element.text or ""
    content: ContentSpec
    if kids and kids[0].tag in (HOLE_TAG, PATTERN_TAG):
        marker = kids.pop(0)
        if text.strip():
            raise MalformedXml(__position__(marker), "text before a content marker")
        if marker.tag == HOLE_TAG:
            content = HOLE
        else:
            content = __read_pattern__(marker.get("regex"), marker)
    elif kids and not text.strip() and kids[-1].tail:
        # indentation: the serializer only pads children of empty content
        content = EMPTY
    else:
        try:
            content = Literal(text)
        except ValueError as e:
            raise MalformedXml(__position__(element), str(e))

    try:
        nodes[path] = NodeLabel(tag, attributes, content)
    except ValueError as e:
        raise MalformedXml(__position__(element), str(e))
    for i, kid in enumerate(kids, start=1):
        __read_element__(kid, path + (i,), nodes)


def __parse__(text: str) -> XmlTree:
    parser = etree.XMLParser(**__PARSER_OPTIONS__)
    try:
        root = etree.fromstring(text.encode("utf-8"), parser)
    except etree.XMLSyntaxError as e:
        position = getattr(e, "position", None)
        line, column = position if position else (getattr(e, "lineno", 0) or 0, 0)
        raise MalformedXml((line, column), e.msg or str(e))
    except ValueError as e:
        raise MalformedXml((0, 0), str(e))
    nodes: Dict[DeweyPath, NodeLabel] = {}
    __read_element__(root, (), nodes)
    return XmlTree(nodes, validate=False)


def parse_document(text: str) -> XmlTree:
    """Parse XML text into a tree.

    ``<hole/>`` and ``<pattern regex="..."/>`` as the first child of an
    element stand for Hole and Pattern content; the attribute values
    ``__HOLE__`` and ``__PATTERN__:<regex>`` do the same for attributes.
    Whitespace-only text before the children of an element is indentation
    when the last child is followed by whitespace as well, and content
    otherwise.

    Raises:
        MalformedXml: On syntax errors, duplicate attributes, stray text
            between child elements, namespaces or misplaced markers.
    """
    if not text.strip():
        log.warn("Parsed an empty document as the empty tree")
        return BOTTOM
    return __parse__(text)


def parse_partial(prefix: str) -> PartialTree:
    """Parse a decoding prefix that may stop inside open elements.

    Text after the last complete markup token is not committed yet and is
    dropped; open elements without children get Hole content, and
    whitespace before the children of an open element is indentation.
    """
    cut = prefix[: prefix.rfind(">") + 1]
    if not cut.strip():
        return PartialTree(BOTTOM, frozenset())
    stack: List[str] = []
    for match in __TAG_SCAN__.finditer(cut):
        name = match.group("name")
        if name is None or match.group("empty"):
            continue
        if match.group("close"):
            if not stack or stack[-1] != name:
                raise MalformedXml((cut.count("\n", 0, match.start()) + 1, 0), f"unexpected </{name}>")
            stack.pop()
        else:
            stack.append(name)
    tree = __parse__(cut + "".join(f"</{name}>" for name in reversed(stack)))
    open_paths = []
    path: DeweyPath = ()
    for depth in range(len(stack)):
        open_paths.append(path)
        if depth + 1 < len(stack):
            path = path + (tree.child_count(path),)
    for open_path in open_paths:
        label = tree[open_path]
        if tree.child_count(open_path) == 0:
            tree = tree.with_label(open_path, label.with_content(HOLE))
        elif isinstance(label.content, Literal) and not label.content.text.strip():
            tree = tree.with_label(open_path, label.with_content(EMPTY))
    return PartialTree(tree, frozenset(open_paths))


def __render_value__(value: ContentSpec, path: DeweyPath, partial: bool) -> str:
    if isinstance(value, Literal):
        return __escape__(value.text, __ATTR_ESCAPES__)
    if not partial:
        raise NotConcrete(path)
    if isinstance(value, Hole):
        return HOLE_VALUE
    return __escape__(PATTERN_VALUE_PREFIX + value.regex, __ATTR_ESCAPES__)


def __render_content__(value: ContentSpec, path: DeweyPath, partial: bool) -> str:
    if isinstance(value, Literal):
        return __escape__(value.text, __TEXT_ESCAPES__)
    if not partial:
        raise NotConcrete(path)
    if isinstance(value, Hole):
        return f"<{HOLE_TAG}/>"
    return f'<{PATTERN_TAG} regex="{__escape__(value.regex, __ATTR_ESCAPES__)}"/>'


def __render__(
    tree: XmlTree, path: DeweyPath, out: List[str], partial: bool, indent: Optional[int], level: int
):
    label = tree[path]
    attrs = "".join(
        f' {name}="{__render_value__(value, path, partial)}"' for name, value in label.attributes
    )
    content = __render_content__(label.content, path, partial)
    kids = tree.children(path)
    pad = "\n" + " " * (indent * level) if indent is not None and level else ""
    if not kids and not content:
        out.append(f"{pad}<{label.tag}{attrs}/>")
        return
    out.append(f"{pad}<{label.tag}{attrs}>{content}")
    nested = indent if indent is not None and not content else None
    for kid in kids:
        __render__(tree, kid, out, partial, nested, level + 1)
    closing_pad = "\n" + " " * (indent * level) if nested is not None and kids else ""
    out.append(f"{closing_pad}</{label.tag}>")


def serialize(tree: XmlTree, indent: Optional[int] = None) -> str:
    """Canonical XML text of a concrete tree.

    Raises:
        TopUnserializable: For the conflict element.
        NotConcrete: When any content or attribute is a Hole or Pattern.
    """
    if tree.is_top:
        raise TopUnserializable()
    if tree.is_bottom:
        log.warn("Serializing the empty tree as an empty string")
        return ""
    for path, label in tree.items():
        if not label.concrete:
            raise NotConcrete(path)
    out: List[str] = []
    __render__(tree, (), out, False, indent, 0)
    return "".join(out)


def serialize_partial(tree: XmlTree, indent: Optional[int] = None) -> str:
    """Like ``serialize`` but renders holes and patterns with marker syntax."""
    if tree.is_top:
        raise TopUnserializable()
    if tree.is_bottom:
        return ""
    out: List[str] = []
    __render__(tree, (), out, True, indent, 0)
    return "".join(out)
