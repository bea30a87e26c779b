import re

ENV_PREFIX = "XMLPROMPT_"

# Partial-tree markers
HOLE_TAG = "hole"
PATTERN_TAG = "pattern"
HOLE_VALUE = "__HOLE__"
PATTERN_VALUE_PREFIX = "__PATTERN__:"

# Pattern inclusion checks give up above this product size
PATTERN_STATE_CAP = 10_000
# Largest finite language kept as an explicit word set
FINITE_LANGUAGE_LIMIT = 64

LGG_MODES = ("hole", "union")

METRIC_DEFAULTS = {
    "max_depth": 8,
    "weight_base": 4.0,
    "attribute_share": 0.5,
    "text_distance": "normalized",
}

TEXT_DISTANCES = ("normalized", "max_normalized")

ENGINE_DEFAULTS = {
    "budget": 50,
    "eps": 1e-9,
    "local_pass_limit": 100,
}

PROTOCOL_DEFAULTS = {
    "budget": 3,
    "retry_budget": 3,
    "evidence_threshold": 0.8,
    "step_min_evidence": 1,
    "answer_min_evidence": 2,
    "max_tokens": 512,
}

PROTOCOL_KINDS = (
    "plan_verify_answer",
    "tool_call",
    "multibranch",
    "channel_exchange",
    "hole_filler",
)

# Invariants checked on the final tree when a run file names none
PROTOCOL_INVARIANTS = {
    "plan_verify_answer": ("builtin:answer_support",),
    "tool_call": ("builtin:answer_cites",),
    "multibranch": ("builtin:answer_support",),
    "channel_exchange": ("builtin:answer_support",),
    "hole_filler": (),
}

# Attribute names the runtime writes
STEP_REVISION = "revision"
STEP_SUPERSEDED = "superseded"
MESSAGE_CONSUMED = "consumed"

BUILTIN_GRAMMARS = {
    "ReasoningXML": "reasoning.ebnf",
    "PromptXML": "prompt.ebnf",
}

BUILTIN_INVARIANTS = {
    "answer_support": "answer_support.inv",
    "answer_cites": "answer_cites.inv",
}

BUILTIN_PREFIX = "builtin:"

NAME_REGEX = re.compile(r"^[A-Za-z_][A-Za-z0-9_.\-]*$")
DECIMAL_REGEX = re.compile(r"^\s*[+-]?(\d+(\.\d*)?|\.\d+)\s*$")
STANZA_REGEX = re.compile(r"^\[(?P<name>[A-Za-z_][A-Za-z0-9_\-]*)\]\s*$")

# Characters escaped when a literal is embedded in a regular expression
REGEX_SPECIALS = set("\\.^$*+?{}[]()|")
