from dataclasses import dataclass, field
from types import MappingProxyType
from typing import (
    Any,
    Dict,
    FrozenSet,
    Iterable,
    Iterator,
    List,
    Mapping,
    Optional,
    Tuple,
    Union,
)

from ..utils.automata import Automaton, compile_pattern, alternation, escape_literal
from .defaults import FINITE_LANGUAGE_LIMIT, NAME_REGEX
from .exceptions import PatternError

DeweyPath = Tuple[int, ...]

ROOT: DeweyPath = ()


def format_path(path: DeweyPath) -> str:
    return ".".join(str(i) for i in path)


class ContentSpec:
    """Element content or attribute value: Hole, Pattern or Literal."""

    __slots__ = ()

    @property
    def concrete(self) -> bool:
        return False


class Hole(ContentSpec):
    __slots__ = ()
    __instance__ = None

    def __new__(cls):
        if cls.__instance__ is None:
            cls.__instance__ = super().__new__(cls)
        return cls.__instance__

    def __repr__(self) -> str:
        return "HOLE"

    def __eq__(self, other) -> bool:
        return isinstance(other, Hole)

    def __hash__(self) -> int:
        return hash("xml_prompting.Hole")

    def __reduce__(self):
        return (Hole, ())


HOLE = Hole()


@dataclass(frozen=True)
class Literal(ContentSpec):
    text: str

    def __post_init__(self):
        if not isinstance(self.text, str):
            raise TypeError(f"Literal text must be str, got {type(self.text).__name__}")
        if "<" in self.text or ">" in self.text:
            raise ValueError(f"Literal text cannot contain '<' or '>': {self.text!r}")

    @property
    def concrete(self) -> bool:
        return True


@dataclass(frozen=True)
class Pattern(ContentSpec):
    """A regular language of admissible fillers.

    ``alternatives`` is sorted and duplicate free, so union is order
    independent. Finite languages are stored one escaped word per
    alternative.
    """

    alternatives: Tuple[str, ...]

    @property
    def regex(self) -> str:
        return alternation(self.alternatives)

    @property
    def automaton(self) -> Automaton:
        return compile_pattern(self.regex)

    def accepts(self, text: str) -> bool:
        return self.automaton.accepts(text)

    def __repr__(self) -> str:
        return f"Pattern({self.regex!r})"


EMPTY = Literal("")


def pattern(regex: str) -> ContentSpec:
    """Canonical content spec for ``regex``.

    A singleton language becomes a Literal and any other finite language
    becomes its sorted word alternation.
    """
    return from_words(compile_pattern(regex).finite_language(FINITE_LANGUAGE_LIMIT), (regex,))


def from_words(words: Optional[FrozenSet[str]], fallback: Tuple[str, ...]) -> ContentSpec:
    if words is not None and not words:
        raise PatternError(alternation(fallback), "the language is empty")
    if words is None:
        return Pattern(tuple(sorted(set(fallback))))
    if len(words) == 1:
        (word,) = words
        if "<" not in word and ">" not in word:
            return Literal(word)
    return Pattern(tuple(sorted(escape_literal(w) for w in words)))


def as_content(value: Union[str, ContentSpec, None]) -> ContentSpec:
    if value is None:
        return HOLE
    if isinstance(value, ContentSpec):
        return value
    return Literal(value)


class NodeLabel:
    """Tag, attributes and content of one node.

    Attribute order is kept for rendering but ignored by equality.
    """

    __slots__ = ("tag", "attributes", "content", "__key__")

    def __init__(
        self,
        tag: str,
        attributes: Union[Mapping[str, Any], Iterable[Tuple[str, Any]], None] = None,
        content: Union[str, ContentSpec, None] = EMPTY,
    ):
        if not isinstance(tag, str) or not NAME_REGEX.fullmatch(tag):
            raise ValueError(f"Invalid tag name {tag!r}")
        if attributes is None:
            pairs: Iterable[Tuple[str, Any]] = ()
        elif isinstance(attributes, Mapping):
            pairs = attributes.items()
        else:
            pairs = attributes
        seen: Dict[str, ContentSpec] = {}
        for name, value in pairs:
            if not isinstance(name, str) or not NAME_REGEX.fullmatch(name):
                raise ValueError(f"Invalid attribute name {name!r} on <{tag}>")
            if name in seen:
                raise ValueError(f"Duplicate attribute '{name}' on <{tag}>")
            seen[name] = as_content(value)
        self.tag = tag
        self.attributes: Tuple[Tuple[str, ContentSpec], ...] = tuple(seen.items())
        self.content: ContentSpec = as_content(content)
        self.__key__ = (tag, frozenset(self.attributes), self.content)

    @property
    def attrs(self) -> Dict[str, ContentSpec]:
        return dict(self.attributes)

    def attribute(self, name: str) -> Optional[ContentSpec]:
        for key, value in self.attributes:
            if key == name:
                return value
        return None

    def with_attribute(self, name: str, value: Union[str, ContentSpec]) -> "NodeLabel":
        pairs = list(self.attributes)
        value = as_content(value)
        for i, (key, _) in enumerate(pairs):
            if key == name:
                pairs[i] = (name, value)
                break
        else:
            pairs.append((name, value))
        return NodeLabel(self.tag, pairs, self.content)

    def with_content(self, value: Union[str, ContentSpec]) -> "NodeLabel":
        return NodeLabel(self.tag, self.attributes, value)

    @property
    def concrete(self) -> bool:
        return self.content.concrete and all(v.concrete for _, v in self.attributes)

    def __eq__(self, other) -> bool:
        return isinstance(other, NodeLabel) and self.__key__ == other.__key__

    def __hash__(self) -> int:
        return hash(self.__key__)

    def __repr__(self) -> str:
        attrs = "".join(f" {k}={v!r}" for k, v in self.attributes)
        return f"<{self.tag}{attrs} content={self.content!r}>"


class XmlTree:
    """Immutable labeled ordered tree addressed by Dewey paths.

    The empty tree is the least element; ``XmlTree(top=True)`` is the
    conflict element above every tree.
    """

    __slots__ = ("__nodes__", "__top__", "__children__", "__hashed__")

    def __init__(
        self,
        nodes: Optional[Mapping[DeweyPath, NodeLabel]] = None,
        *,
        top: bool = False,
        validate: bool = True,
    ):
        self.__nodes__: Dict[DeweyPath, NodeLabel] = dict(nodes or {})
        self.__top__ = top
        self.__children__: Optional[Dict[DeweyPath, Tuple[DeweyPath, ...]]] = None
        self.__hashed__: Optional[int] = None
        if top and self.__nodes__:
            raise ValueError("The conflict element carries no nodes")
        if validate:
            self.__validate__()

    def __validate__(self):
        nodes = self.__nodes__
        if nodes and ROOT not in nodes:
            raise ValueError("Non-empty tree without a root")
        for path in nodes:
            if not path:
                continue
            if path[-1] < 1:
                raise ValueError(f"Invalid Dewey index in {path}")
            if path[:-1] not in nodes:
                raise ValueError(f"Node {format_path(path)} has no parent")
            if path[-1] > 1 and path[:-1] + (path[-1] - 1,) not in nodes:
                raise ValueError(f"Node {format_path(path)} has a gap before it")

    # --- inspection -----------------------------------------------------

    @property
    def is_top(self) -> bool:
        return self.__top__

    @property
    def is_bottom(self) -> bool:
        return not self.__top__ and not self.__nodes__

    @property
    def nodes(self) -> Mapping[DeweyPath, NodeLabel]:
        return MappingProxyType(self.__nodes__)

    def paths(self) -> List[DeweyPath]:
        """All paths in document order."""
        return sorted(self.__nodes__)

    def items(self) -> Iterator[Tuple[DeweyPath, NodeLabel]]:
        for path in self.paths():
            yield path, self.__nodes__[path]

    def label(self, path: DeweyPath) -> Optional[NodeLabel]:
        return self.__nodes__.get(path)

    def __getitem__(self, path: DeweyPath) -> NodeLabel:
        return self.__nodes__[path]

    def __contains__(self, path) -> bool:
        return path in self.__nodes__

    def __len__(self) -> int:
        return len(self.__nodes__)

    def __child_index__(self) -> Dict[DeweyPath, Tuple[DeweyPath, ...]]:
        if self.__children__ is None:
            index: Dict[DeweyPath, List[DeweyPath]] = {p: [] for p in self.__nodes__}
            for path in self.__nodes__:
                if path:
                    index[path[:-1]].append(path)
            self.__children__ = {p: tuple(sorted(c)) for p, c in index.items()}
        return self.__children__

    def children(self, path: DeweyPath) -> Tuple[DeweyPath, ...]:
        return self.__child_index__().get(path, ())

    def child_count(self, path: DeweyPath) -> int:
        return len(self.children(path))

    def descendants(self, path: DeweyPath) -> List[DeweyPath]:
        n = len(path)
        return [p for p in self.paths() if len(p) > n and p[:n] == path]

    @property
    def depth(self) -> int:
        return max((len(p) for p in self.__nodes__), default=0)

    def holes(self) -> List[Tuple[DeweyPath, Optional[str]]]:
        found = []
        for path, label in self.items():
            if isinstance(label.content, Hole):
                found.append((path, None))
            for name, value in label.attributes:
                if isinstance(value, Hole):
                    found.append((path, name))
        return found

    def find(self, tag: str) -> List[DeweyPath]:
        return [p for p, label in self.items() if label.tag == tag]

    # --- immutable editing ---------------------------------------------

    def subtree(self, path: DeweyPath) -> "XmlTree":
        if path not in self.__nodes__:
            return BOTTOM
        n = len(path)
        return XmlTree(
            {p[n:]: label for p, label in self.__nodes__.items() if p[:n] == path},
            validate=False,
        )

    def with_label(self, path: DeweyPath, label: NodeLabel) -> "XmlTree":
        if path not in self.__nodes__:
            raise KeyError(f"No node at {format_path(path) or '<root>'}")
        nodes = dict(self.__nodes__)
        nodes[path] = label
        return XmlTree(nodes, validate=False)

    def with_child(self, path: DeweyPath, child: "XmlTree") -> "XmlTree":
        """Append ``child`` as the new last child of the node at ``path``."""
        if child.is_top:
            return TOP
        if child.is_bottom:
            return self
        if path not in self.__nodes__:
            raise KeyError(f"No node at {format_path(path) or '<root>'}")
        base = path + (self.child_count(path) + 1,)
        nodes = dict(self.__nodes__)
        for p, label in child.__nodes__.items():
            nodes[base + p] = label
        return XmlTree(nodes, validate=False)

    # --- dunder ---------------------------------------------------------

    def __eq__(self, other) -> bool:
        if not isinstance(other, XmlTree):
            return NotImplemented
        return self.__top__ == other.__top__ and self.__nodes__ == other.__nodes__

    def __hash__(self) -> int:
        if self.__hashed__ is None:
            self.__hashed__ = hash((self.__top__, frozenset(self.__nodes__.items())))
        return self.__hashed__

    def __repr__(self) -> str:
        if self.__top__:
            return "XmlTree(TOP)"
        if not self.__nodes__:
            return "XmlTree(BOTTOM)"
        return f"XmlTree(<{self.__nodes__[ROOT].tag}>, {len(self.__nodes__)} nodes)"


BOTTOM = XmlTree()
TOP = XmlTree(top=True)


@dataclass(frozen=True)
class PartialTree:
    """A decoding-time tree: elements in ``open_paths`` may still gain children."""

    tree: XmlTree
    open_paths: FrozenSet[DeweyPath] = field(default_factory=frozenset)

    def is_open(self, path: DeweyPath) -> bool:
        return path in self.open_paths


def element(
    tag: str,
    *children: XmlTree,
    content: Union[str, ContentSpec, None] = EMPTY,
    attrs: Union[Mapping[str, Any], Iterable[Tuple[str, Any]], None] = None,
) -> XmlTree:
    """Build a tree from a root label and child trees.

    Example:
        element("plan", element("step", content="Draft.", attrs={"index": "1"}))
    """
    nodes: Dict[DeweyPath, NodeLabel] = {ROOT: NodeLabel(tag, attrs, content)}
    position = 0
    for child in children:
        if child.is_top:
            raise ValueError("Cannot nest the conflict element")
        if child.is_bottom:
            continue
        position += 1
        for path, label in child.nodes.items():
            nodes[(position,) + path] = label
    return XmlTree(nodes, validate=False)
