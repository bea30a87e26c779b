"""Command-line surface: validate, mask, sample, iterate, check and estimate-q.

Reports go to stdout, logs and diagnostics to stderr. Exit codes are shared
by every subcommand: 0 success, 1 semantic failure, 2 usage or
configuration failure.
"""

import argparse
import sys
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from .classes import (
    ConfigError,
    DeadEnd,
    DegenerateSample,
    FormulaError,
    GrammarError,
    NonViableState,
    PolicyViolation,
    ProtocolError,
    TreeError,
    XmlPromptError,
)
from .config import RunConfig, load_run_config, read_run_file
from .engine import hole_filler
from .grammar import (
    GreedyPolicy,
    UniformPolicy,
    Vocabulary,
    advance,
    constrained_sample,
    first_dead_position,
    initial_state,
    load_grammar,
    token_mask,
)
from .invariants import check_all, load_invariants
from .lattice import parse_document
from .metric import estimate_contraction
from .protocols import ProtocolResult, load_protocol, run_protocol, transcript_lines, write_transcript
from .utils import escape_token, log, read_text

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


def __error__(message: str):
    print(f"[error] {message}", file=sys.stderr)


def __strip_newline__(text: str) -> str:
    if text.endswith("\r\n"):
        return text[:-2]
    if text.endswith("\n"):
        return text[:-1]
    return text


def __parse_schedule__(text: str) -> List[Tuple[int, int]]:
    """``"1:1,2:1"`` -> ``[(1, 1), (2, 1)]`` (depth:count per group)."""
    schedule = []
    for part in text.split(","):
        depth, sep, count = part.strip().partition(":")
        if not sep:
            raise argparse.ArgumentTypeError(f"expected depth:count, got '{part}'")
        try:
            schedule.append((int(depth), int(count)))
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected integers in '{part}'")
    return schedule


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="xml-prompting",
        description="Grammar-constrained XML prompting: lattice, masks, metric, iteration and protocols.",
    )
    parser.add_argument("--config", help="TOML file of run configuration keys")
    parser.add_argument("--seed", type=int, default=None, help="Seed for every random choice")
    parser.add_argument("--max-depth", type=int, default=None, help="Deepest path the metric weighs")
    parser.add_argument("--budget", type=int, default=None, help="Rounds or iteration steps")
    parser.add_argument("--endpoint", default=None, help="Remote proposer URL")
    parser.add_argument("--log-level", default=None, help="Logger level (TRACE, DEBUG, INFO, WARNING, ...)")
    commands = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    validate = commands.add_parser("validate", help="Check a document against a grammar")
    validate.add_argument("grammar", help="Grammar file or builtin:<name>")
    validate.add_argument("document", help="Document file")

    mask = commands.add_parser("mask", help="List the tokens allowed after a prefix")
    mask.add_argument("grammar", help="Grammar file or builtin:<name>")
    mask.add_argument("prefix", help="File holding the prefix (one trailing newline is ignored)")
    mask.add_argument("vocab", help="Vocabulary file, one escaped token per line")

    sample = commands.add_parser("sample", help="Decode strings under the grammar mask")
    sample.add_argument("grammar", help="Grammar file or builtin:<name>")
    sample.add_argument("--vocab", help="Vocabulary file (printable ASCII by default)")
    sample.add_argument("--count", type=int, default=1, help="Number of samples")
    sample.add_argument("--policy", choices=("uniform", "greedy"), default="uniform")
    sample.add_argument("--stop-probability", type=float, default=0.5)
    sample.add_argument("--max-tokens", type=int, default=None)

    iterate = commands.add_parser("iterate", help="Run a protocol or iteration run file")
    iterate.add_argument("run_file", help="Protocol run file (TOML)")
    iterate.add_argument("--out", default="transcript", help="Transcript directory")

    check = commands.add_parser("check", help="Check a document against invariants")
    check.add_argument("invariants", help="Invariant file or builtin:<name>")
    check.add_argument("document", help="Document file")

    estimate = commands.add_parser("estimate-q", help="Estimate the contraction factor of the hole-filler family")
    source = estimate.add_mutually_exclusive_group(required=True)
    source.add_argument("run_file", nargs="?", help="Run file of kind hole_filler")
    source.add_argument("--schedule", type=__parse_schedule__, help="Groups as depth:count,depth:count,...")
    return parser


# --- subcommands ------------------------------------------------------------------


def cmd_validate(args: argparse.Namespace, config: RunConfig) -> int:
    grammar = load_grammar(args.grammar)
    text = __strip_newline__(read_text(args.document))
    position = first_dead_position(grammar, text)
    if position is None:
        print("valid")
        return EXIT_OK
    if position == len(text):
        print(f"invalid: incomplete document, the whole input is a viable prefix ({position} characters)")
        return EXIT_FAILURE
    tag = text.rfind("<", 0, position + 1)
    where = f" in the tag starting at offset {tag}" if tag >= 0 and ">" not in text[tag:position] else ""
    print(f"invalid: first dead character at offset {position} ({text[position]!r}){where}")
    return EXIT_FAILURE


def cmd_mask(args: argparse.Namespace, config: RunConfig) -> int:
    grammar = load_grammar(args.grammar)
    prefix = __strip_newline__(read_text(args.prefix))
    vocabulary = Vocabulary.from_file(args.vocab)
    state = advance(initial_state(grammar), prefix)
    if not state.viable:
        position = first_dead_position(grammar, prefix)
        print(f"non-viable prefix: dead at offset {position}", file=sys.stderr)
        return EXIT_FAILURE
    for token in token_mask(state, vocabulary).tokens(vocabulary):
        print(escape_token(token))
    return EXIT_OK


def cmd_sample(args: argparse.Namespace, config: RunConfig) -> int:
    if args.count < 1:
        raise ConfigError("--count must be at least 1")
    grammar = load_grammar(args.grammar)
    vocabulary = Vocabulary.from_file(args.vocab) if args.vocab else Vocabulary.printable_ascii()
    max_tokens = args.max_tokens or config.max_tokens
    task = log.start(f"Sampling {args.count} string(s) from {grammar.name}")
    status = EXIT_OK
    for n in range(args.count):
        policy = GreedyPolicy() if args.policy == "greedy" else UniformPolicy(config.seed + n, args.stop_probability)
        result = constrained_sample(grammar, vocabulary, policy, max_tokens)
        if not result.complete:
            status = EXIT_FAILURE
        print(f"{result.status}\t{escape_token(result.text)}")
    log.finish(task, success=status == EXIT_OK)
    return status


def __salvage__(error: ProtocolError) -> Optional[ProtocolResult]:
    report = getattr(error, "report", None)
    last = getattr(error, "last", None)
    if report is None or last is None:
        return None
    return ProtocolResult(last, list(report.iterates) or [last], report)


def cmd_iterate(args: argparse.Namespace, config: RunConfig) -> int:
    run = load_protocol(args.run_file, config)
    try:
        result = run_protocol(run)
    except ProtocolError as e:
        __error__(e.message)
        salvaged = __salvage__(e)
        if salvaged is not None:
            write_transcript(args.out, salvaged)
            print("\n".join(transcript_lines(salvaged)))
        return EXIT_FAILURE
    write_transcript(args.out, result)
    print("\n".join(transcript_lines(result)))
    return EXIT_OK if result.complete else EXIT_FAILURE


def cmd_check(args: argparse.Namespace, config: RunConfig) -> int:
    invariants = load_invariants(args.invariants)
    tree = parse_document(read_text(args.document))
    verdicts = check_all(invariants, tree)
    for verdict in verdicts:
        print(verdict)
    return EXIT_OK if all(verdicts) else EXIT_FAILURE


def cmd_estimate_q(args: argparse.Namespace, config: RunConfig) -> int:
    if args.schedule is not None:
        schedule = args.schedule
    else:
        run = read_run_file(args.run_file)
        if run.hole_filler is None:
            raise ConfigError(f"Run file {args.run_file} has no [hole_filler] table")
        schedule = run.hole_filler.schedule
    try:
        family = hole_filler(schedule)
    except ValueError as e:
        raise ConfigError("Invalid hole-filler schedule", str(e))
    orbit = [family.start]
    for _ in range(config.budget):
        nxt = family.transformer(orbit[-1])
        if nxt == orbit[-1]:
            break
        orbit.append(nxt)
    pairs = list(zip(orbit, orbit[1:]))
    estimate = estimate_contraction(family.transformer, pairs, config.metric(), max(1, len(pairs)))
    print(f"q_hat={estimate.q:.12g}")
    print(f"q_analytic={family.q:.12g}")
    print(f"pairs={estimate.positive_samples}")
    return EXIT_OK


COMMANDS: Dict[str, Callable[[argparse.Namespace, RunConfig], int]] = {
    "validate": cmd_validate,
    "mask": cmd_mask,
    "sample": cmd_sample,
    "iterate": cmd_iterate,
    "check": cmd_check,
    "estimate-q": cmd_estimate_q,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    log.set_env(args.command)
    try:
        config = load_run_config(
            args.config,
            {
                "seed": args.seed,
                "max_depth": args.max_depth,
                "budget": args.budget,
                "endpoint": args.endpoint,
                "log_level": args.log_level,
            },
        )
        log.set_level(config.log_level)
    except ConfigError as e:
        __error__(e.format_message())
        return EXIT_USAGE
    except ValueError as e:
        __error__(str(e))
        return EXIT_USAGE
    try:
        return COMMANDS[args.command](args, config)
    except OSError as e:
        __error__(f"{e.strerror or e}: {e.filename}" if e.filename else str(e))
        return EXIT_USAGE
    except (ConfigError, FormulaError, GrammarError, TreeError) as e:
        if isinstance(e, (NonViableState, DeadEnd, PolicyViolation)):
            __error__(e.message)
            return EXIT_FAILURE
        __error__(e.format_message())
        return EXIT_USAGE
    except DegenerateSample as e:
        __error__(e.message)
        return EXIT_FAILURE
    except XmlPromptError as e:
        __error__(e.format_message())
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
