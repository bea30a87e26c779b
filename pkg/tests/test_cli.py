import os

import pytest

from conftest import fixture_path
from xml_prompting.cli import EXIT_FAILURE, EXIT_OK, EXIT_USAGE, main


@pytest.fixture(autouse=True)
def clean_environment(monkeypatch):
    for key in list(os.environ):
        if key.startswith("XMLPROMPT_"):
            monkeypatch.delenv(key)


def document(name: str) -> str:
    return fixture_path("documents", name)


# --- validate ----------------------------------------------------------------------


def test_validate_accepts(capsys):
    assert main(["validate", "builtin:ReasoningXML", document("reasoning.xml")]) == EXIT_OK
    assert capsys.readouterr().out == "valid\n"


def test_validate_reports_an_incomplete_document(capsys):
    assert main(["validate", "builtin:ReasoningXML", document("truncated.xml")]) == EXIT_FAILURE
    assert "incomplete document" in capsys.readouterr().out


def test_validate_points_at_the_dead_character(capsys):
    assert main(["validate", "builtin:ReasoningXML", document("bad_role.xml")]) == EXIT_FAILURE
    out = capsys.readouterr().out
    assert "offset 20 ('r')" in out
    assert "in the tag starting at offset 8" in out


def test_validate_with_a_grammar_file(capsys, tmp_path):
    answer = tmp_path / "answer.txt"
    answer.write_text("<answer>yes</answer>\n")
    assert main(["validate", fixture_path("grammars", "yes_no.ebnf"), str(answer)]) == EXIT_OK


@pytest.mark.parametrize(
    "argv",
    [
        ["validate", "builtin:NoSuchGrammar", "x.xml"],
        ["validate", "builtin:ReasoningXML", "/nonexistent/doc.xml"],
        ["validate", fixture_path("invariants", "malformed.inv"), "x.xml"],
    ],
)
def test_validate_usage_errors(argv):
    assert main(argv) == EXIT_USAGE


# --- mask and sample -----------------------------------------------------------------


def test_mask(capsys):
    argv = ["mask", "builtin:ReasoningXML", document("prefix.txt"), fixture_path("vocab", "four.txt")]
    assert main(argv) == EXIT_OK
    assert capsys.readouterr().out == "<turn\n"


def test_mask_of_a_dead_prefix(capsys):
    argv = ["mask", "builtin:ReasoningXML", document("dead_prefix.txt"), fixture_path("vocab", "four.txt")]
    assert main(argv) == EXIT_FAILURE
    assert "non-viable prefix" in capsys.readouterr().err


def test_greedy_sample(capsys):
    argv = ["sample", "builtin:ReasoningXML", "--vocab", fixture_path("vocab", "fragments.txt"), "--policy", "greedy"]
    assert main(argv) == EXIT_OK
    assert capsys.readouterr().out == (
        'complete\t<dialog><turn role="user"><plan><step index="1"></step></plan></turn></dialog>\n'
    )


def test_truncated_sample_is_a_failure(capsys):
    argv = [
        "sample",
        "builtin:ReasoningXML",
        "--vocab",
        fixture_path("vocab", "fragments.txt"),
        "--policy",
        "greedy",
        "--max-tokens",
        "2",
    ]
    assert main(argv) == EXIT_FAILURE
    assert capsys.readouterr().out.startswith("partial\t")


def test_seeded_samples_repeat(capsys):
    argv = ["--seed", "5", "sample", "builtin:ReasoningXML", "--vocab", fixture_path("vocab", "fragments.txt"), "--count", "3"]
    main(argv)
    first = capsys.readouterr().out
    main(argv)
    assert capsys.readouterr().out == first
    assert len(first.splitlines()) == 3


def test_sample_count_must_be_positive():
    assert main(["sample", "builtin:ReasoningXML", "--count", "0"]) == EXIT_USAGE


# --- iterate -----------------------------------------------------------------------


def test_iterate_writes_a_transcript(capsys, tmp_path):
    out = tmp_path / "transcript"
    assert main(["iterate", fixture_path("runs", "pva.toml"), "--out", str(out)]) == EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    assert "answered=true" in lines
    assert "kind=plan_verify_answer" in lines
    assert sorted(os.listdir(out)) == [
        "report.txt",
        "snapshot-000.xml",
        "snapshot-001.xml",
        "snapshot-002.xml",
        "snapshot-003.xml",
    ]


def test_iterate_exhausted_budget_still_writes_a_transcript(capsys, tmp_path):
    out = tmp_path / "transcript"
    assert main(["iterate", fixture_path("runs", "pva_always_reject.toml"), "--out", str(out)]) == EXIT_FAILURE
    captured = capsys.readouterr()
    assert "[error]" in captured.err
    assert "answered=false" in captured.out.splitlines()
    assert (out / "report.txt").exists()


def test_iterate_tool_failure(tmp_path):
    argv = ["iterate", fixture_path("runs", "weather_failure.toml"), "--out", str(tmp_path)]
    assert main(argv) == EXIT_FAILURE


def test_iterate_hole_filler(capsys, tmp_path):
    assert main(["iterate", fixture_path("runs", "hole_filler.toml"), "--out", str(tmp_path)]) == EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    assert "q_analytic=0.25" in lines
    assert "fixed_point=true" in lines


def test_budget_flag_overrides_the_run_file(capsys, tmp_path):
    argv = ["--budget", "1", "iterate", fixture_path("runs", "pva_reject_once.toml"), "--out", str(tmp_path)]
    assert main(argv) == EXIT_FAILURE


def test_iterate_rejects_invalid_run_files(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text('kind = "essay"\n')
    assert main(["iterate", str(path), "--out", str(tmp_path / "out")]) == EXIT_USAGE


# --- check -------------------------------------------------------------------------


def test_check_holds(capsys):
    assert main(["check", "builtin:answer_support", document("answer_supported.xml")]) == EXIT_OK
    assert capsys.readouterr().out == "answer_support: holds\n"


def test_check_violation(capsys):
    assert main(["check", "builtin:answer_support", document("answer_unsupported.xml")]) == EXIT_FAILURE
    assert capsys.readouterr().out == "answer_support: violated at 1.2\n"


def test_check_malformed_invariants(capsys):
    argv = ["check", fixture_path("invariants", "malformed.inv"), document("answer_supported.xml")]
    assert main(argv) == EXIT_USAGE
    assert "[broken]" in capsys.readouterr().err


# --- estimate-q --------------------------------------------------------------------


def summary(out: str) -> dict:
    return dict(line.split("=", 1) for line in out.splitlines())


def test_estimate_q_from_a_schedule(capsys):
    assert main(["estimate-q", "--schedule", "1:4,1:2,1:1"]) == EXIT_OK
    values = summary(capsys.readouterr().out)
    assert values["q_analytic"] == "0.5"
    assert float(values["q_hat"]) == pytest.approx(0.5)


def test_estimate_q_from_a_run_file(capsys):
    assert main(["estimate-q", fixture_path("runs", "hole_filler.toml")]) == EXIT_OK
    assert summary(capsys.readouterr().out)["q_analytic"] == "0.25"


@pytest.mark.parametrize("schedule", ["1-1", "0:1", "a:b"])
def test_estimate_q_bad_schedules(schedule):
    assert main(["estimate-q", "--schedule", schedule]) == EXIT_USAGE


# --- global flags ------------------------------------------------------------------


@pytest.mark.parametrize(
    "argv",
    [[], ["frobnicate"], ["--seed", "abc", "validate", "a", "b"], ["--max-depth", "0", "estimate-q", "--schedule", "1:1"]],
)
def test_usage_errors(argv):
    assert main(argv) == EXIT_USAGE


def test_help_exits_cleanly(capsys):
    assert main(["--help"]) == EXIT_OK
    assert "estimate-q" in capsys.readouterr().out


def test_config_file(capsys):
    argv = ["--config", fixture_path("config", "run.toml"), "estimate-q", "--schedule", "1:1,2:1"]
    assert main(argv) == EXIT_OK
