import os
import sys
from importlib import resources
from typing import Any, Dict, List, Union

from zss import Node, simple_distance

from ..classes.defaults import BUILTIN_PREFIX
from ..classes.exceptions import ConfigError
from .logger import log

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

PathLike = Union[str, "os.PathLike[str]"]


def __chain__(text: str) -> Node:
    root = node = Node(None)
    for char in text:
        child = Node(char)
        node.addkid(child)
        node = child
    return root


def levenshtein(a: str, b: str) -> int:
    """Character edit distance with unit insert, delete and substitute costs.

    Computed by ``zss`` as the tree edit distance between the two texts laid
    out as chains of character nodes under a shared root.
    """
    if a == b:
        return 0
    return int(simple_distance(__chain__(a), __chain__(b)))


def normalized_edit_distance(a: str, b: str, mode: str = "normalized") -> float:
    """Edit distance scaled into [0, 1].

    Args:
        a (str): First text
        b (str): Second text
        mode (str): ``normalized`` uses 2e/(|a|+|b|+e), which keeps the
            triangle inequality; ``max_normalized`` uses e/max(|a|,|b|).

    Returns:
        float: 0.0 for equal texts, at most 1.0
    """
    if a == b:
        return 0.0
    edits = levenshtein(a, b)
    if mode == "max_normalized":
        return edits / max(len(a), len(b))
    if mode != "normalized":
        raise ValueError(f"Unknown text distance: {mode}")
    return 2.0 * edits / (len(a) + len(b) + edits)


__TOKEN_ESCAPES__ = {"\\": "\\\\", "\n": "\\n", "\t": "\\t"}
__TOKEN_UNESCAPES__ = {"\\": "\\", "n": "\n", "t": "\t"}


def escape_token(token: str) -> str:
    return "".join(__TOKEN_ESCAPES__.get(ch, ch) for ch in token)


def unescape_token(text: str) -> str:
    out: List[str] = []
    chars = iter(text)
    for ch in chars:
        if ch != "\\":
            out.append(ch)
            continue
        nxt = next(chars, None)
        if nxt is None:
            raise ValueError(f"Dangling escape in token {text!r}")
        if nxt not in __TOKEN_UNESCAPES__:
            raise ValueError(f"Unknown escape '\\{nxt}' in token {text!r}")
        out.append(__TOKEN_UNESCAPES__[nxt])
    return "".join(out)


def read_text(path: PathLike) -> str:
    with open(path, "r", encoding="utf-8") as fh:
        return fh.read()


def write_text(path: PathLike, text: str):
    directory = os.path.dirname(os.fspath(path))
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


def load_toml(path: PathLike) -> Dict[str, Any]:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"File not found: {path}")
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"Invalid TOML in {path}", str(e))


def read_resource(*parts: str) -> str:
    """Read a file shipped under ``xml_prompting/data``."""
    target = resources.files("xml_prompting").joinpath("data")
    for part in parts:
        target = target.joinpath(part)
    log.trace(f"Loading packaged resource {'/'.join(parts)}")
    return target.read_text(encoding="utf-8")


def is_builtin(reference: str) -> bool:
    return reference.startswith(BUILTIN_PREFIX)


def builtin_name(reference: str) -> str:
    return reference[len(BUILTIN_PREFIX):]


def resolve_relative(reference: str, base_dir: str) -> str:
    """Resolve ``reference`` against the directory of the file naming it."""
    if is_builtin(reference) or os.path.isabs(reference):
        return reference
    return os.path.join(base_dir, reference)
