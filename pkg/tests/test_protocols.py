import os

import pytest

from conftest import fixture_path
from xml_prompting import (
    BranchFailure,
    ConfigError,
    ProposerExhausted,
    ProtocolSpec,
    ProtocolViolation,
    RoundBudgetExceeded,
    RunConfig,
    ScriptedProposer,
    ScriptedVerifier,
    UnconsumedMessages,
    UnknownAddressee,
    VerifierRejectedAll,
    accepts,
    active_steps,
    child,
    default_skeleton,
    element,
    evidence_of,
    load_grammar,
    load_invariants,
    load_protocol,
    refines,
    run_multibranch,
    run_plan_verify_answer,
    run_protocol,
    serialize,
    transcript_lines,
    write_transcript,
)

TWO_STEPS = '<plan><step index="1">Draft.</step><step index="2">Check.</step></plan>'


@pytest.fixture(scope="module")
def prompt_grammar():
    return load_grammar("builtin:PromptXML")


def run_file(name: str, **overrides):
    run = load_protocol(fixture_path("runs", name), RunConfig(**overrides) if overrides else None)
    return run, run_protocol(run)


def refs(tree, path):
    return [ref for ref, _ in evidence_of(tree, path)]


def assert_monotone(snapshots):
    for before, after in zip(snapshots, snapshots[1:]):
        assert refines(before, after)


# --- plan, verify, answer ---------------------------------------------------------------


def test_plan_verify_answer(prompt_grammar):
    run, result = run_file("pva.toml")
    assert result.answered
    assert result.complete
    assert len(result.snapshots) == 4
    assert result.report.extra["rounds"] == 1
    assert result.report.extra["monotone"] == "true"
    assert [str(v) for v in result.verdicts] == ["answer_support: holds"]
    text = serialize(result.tree)
    assert accepts(prompt_grammar, text)
    assert '<answer>Claim A holds.<evidence ref="e1" conf="0.90"/><evidence ref="e2" conf="0.90"/></answer>' in text
    assert_monotone(result.snapshots)


def test_refuted_step_is_revised_once():
    _, result = run_file("pva_reject_once.toml")
    assert result.answered
    assert result.report.extra["rounds"] == 2
    assert len(result.snapshots) == 6
    (plan,) = result.tree.find("plan")
    steps = result.tree.children(plan)
    assert len(steps) == 3
    superseded = result.tree[steps[1]]
    assert superseded.attribute("superseded").text == "true"
    assert child(result.tree, steps[1], "counterexample") is not None
    assert result.tree[steps[2]].attribute("revision").text == "2"
    assert active_steps(result.tree, plan) == [steps[0], steps[2]]
    (answer,) = result.tree.find("answer")
    assert refs(result.tree, answer) == ["e1", "e2r2"]
    assert_monotone(result.snapshots)


def test_gate_stays_closed_while_a_step_is_refuted():
    with pytest.raises(RoundBudgetExceeded) as e:
        run_file("pva_always_reject.toml")
    assert e.value.rounds == 3
    assert e.value.report.extra["answered"] == "false"
    assert not e.value.last.find("answer")
    assert len(e.value.last.find("step")) == 4


def test_rejected_drafts_are_retried(prompt_grammar):
    spec = ProtocolSpec("plan_verify_answer", prompt_grammar)
    proposer = ScriptedProposer.from_texts({"plan": ["<plan><step>", TWO_STEPS], "answer": "<answer>A</answer>"})
    result = run_plan_verify_answer(spec, proposer, ScriptedVerifier.accept_all())
    assert result.answered
    assert proposer.remaining == 0


def test_plan_with_notes_is_rejected(prompt_grammar):
    spec = ProtocolSpec("plan_verify_answer", prompt_grammar, retry_budget=1)
    noted = '<plan><step index="1">Draft.<evidence ref="x" conf="0.99"/></step></plan>'
    with pytest.raises(ProposerExhausted) as e:
        run_plan_verify_answer(spec, ScriptedProposer.from_texts({"plan": noted}), ScriptedVerifier.accept_all())
    assert e.value.attempts == 1


def test_total_rejection(prompt_grammar):
    proposer = ScriptedProposer.from_texts({"plan": TWO_STEPS})
    with pytest.raises(RoundBudgetExceeded) as e:
        run_plan_verify_answer(
            ProtocolSpec("plan_verify_answer", prompt_grammar, budget=1), proposer, ScriptedVerifier.reject_all()
        )
    assert "all_rejected where=dialog round=1" in e.value.report.events

    strict = ProtocolSpec("plan_verify_answer", prompt_grammar, abort_on_total_rejection=True)
    with pytest.raises(VerifierRejectedAll):
        run_plan_verify_answer(strict, ScriptedProposer.from_texts({"plan": TWO_STEPS}), ScriptedVerifier.reject_all())


def test_final_tree_must_satisfy_the_invariants(prompt_grammar):
    spec = ProtocolSpec(
        "plan_verify_answer",
        prompt_grammar,
        invariants=load_invariants("builtin:answer_support"),
        answer_min_evidence=1,
    )
    proposer = ScriptedProposer.from_texts(
        {"plan": '<plan><step index="1">Draft.</step></plan>', "answer": "<answer>A</answer>"}
    )
    with pytest.raises(ProtocolViolation):
        run_plan_verify_answer(spec, proposer, ScriptedVerifier.accept_all())


# --- tool calls ----------------------------------------------------------------------


def test_tool_call_answer_cites_the_tool(prompt_grammar):
    _, result = run_file("weather.toml")
    assert result.answered
    assert len(result.snapshots) == 6
    tree = result.tree
    (output,) = tree.find("agent_output")
    assert tree[output].attribute("source").text == "weather.lookup"
    assert [tree[kid].tag for kid in tree.children(output)] == ["temperature", "condition"]
    (answer,) = tree.find("answer")
    assert evidence_of(tree, answer) == [("e1", 0.9), ("weather.lookup", 1.0)]
    assert accepts(prompt_grammar, serialize(tree))


def test_unknown_tool_name_is_redrafted():
    _, result = run_file("weather_bad_name.toml")
    tree = result.tree
    (function,) = tree.find("function")
    assert tree[function].attribute("name").text == "weather.lookup"
    assert result.answered


def test_tool_failure_ends_without_an_answer():
    _, result = run_file("weather_failure.toml")
    assert not result.answered
    assert not result.complete
    assert "tool_failure tool=weather.lookup" in result.report.events
    (call,) = result.tree.find("toolcall")
    assert child(result.tree, call, "counterexample") is not None
    assert not result.tree.find("agent_output")


# --- branches ----------------------------------------------------------------------------


def test_multibranch_compares_both_answers(prompt_grammar):
    _, result = run_file("multibranch.toml")
    tree = result.tree
    assert tree[(4,)].tag == "compare"
    answer = child(tree, (4,), "answer")
    assert refs(tree, answer) == ["c1", "a1", "a2", "b1", "b2"]
    assert set(result.branch_snapshots) == {"articleA", "articleB"}
    assert result.report.extra["rounds"] == 2
    assert accepts(prompt_grammar, serialize(tree))
    assert_monotone(result.snapshots)


def test_concurrent_branches_match_sequential():
    sequential = load_protocol(fixture_path("runs", "multibranch.toml"))
    concurrent = load_protocol(fixture_path("runs", "multibranch.toml"))
    concurrent.spec.concurrent = True
    first, second = run_protocol(sequential), run_protocol(concurrent)
    assert first.tree == second.tree
    assert first.snapshots == second.snapshots
    assert first.report.events == second.report.events


def test_failing_branch_keeps_the_other_result(prompt_grammar):
    spec = ProtocolSpec("multibranch", prompt_grammar, branches=("articleA", "articleB"))
    proposers = {
        "articleA": ScriptedProposer.from_texts({"plan": TWO_STEPS, "answer": "<answer>A</answer>"}),
        "articleB": ScriptedProposer([]),
    }
    with pytest.raises(BranchFailure) as e:
        run_multibranch(spec, proposers, ScriptedVerifier.accept_all())
    assert [name for name, _ in e.value.failures] == ["articleB"]
    assert isinstance(e.value.failures[0][1], ProposerExhausted)
    assert len(e.value.last.find("answer")) == 1
    assert not e.value.last.find("compare")


@pytest.mark.parametrize(
    "kwargs",
    [
        {"kind": "essay"},
        {"kind": "multibranch", "branches": ("only",)},
        {"kind": "multibranch", "branches": ("a", "a")},
        {"kind": "multibranch", "branches": ("a", "b c")},
        {"kind": "plan_verify_answer", "budget": 0},
        {"kind": "plan_verify_answer", "closing": "merge"},
    ],
)
def test_invalid_specs(prompt_grammar, kwargs):
    with pytest.raises(ConfigError):
        ProtocolSpec(grammar=prompt_grammar, **kwargs)


def test_default_skeletons(prompt_grammar):
    single = default_skeleton(ProtocolSpec("plan_verify_answer", prompt_grammar, task="Q"))
    assert single == element("prompt", element("task", content="Q"), element("dialog", element("turn", attrs={"role": "assistant"})))
    channel = default_skeleton(ProtocolSpec("channel_exchange", prompt_grammar, branches=("x", "y")))
    assert [channel[path].tag for path in channel.children(())] == ["channel", "branch", "branch"]


# --- channel exchange ---------------------------------------------------------------------


def test_channel_exchange(prompt_grammar):
    _, result = run_file("channel.toml")
    tree = result.tree
    assert result.report.extra["consumed"] == "m1,m2"
    messages = tree.find("message")
    assert [tree[m].attribute("id").text for m in messages] == ["m1", "m2"]
    assert all(tree[m].attribute("consumed").text == "true" for m in messages)
    closing = tree.children(())[-1]
    assert tree[closing].tag == "join"
    assert refs(tree, child(tree, closing, "answer")) == ["e1", "e2"]
    assert len(tree.find("answer")) == 3
    assert accepts(prompt_grammar, serialize(tree))
    assert_monotone(result.snapshots)


def test_unread_messages_block_the_join():
    with pytest.raises(UnconsumedMessages) as e:
        run_file("channel_short.toml")
    assert e.value.branch == "alpha"
    assert e.value.pending == ("m2",)
    assert not e.value.last.find("answer")


def test_message_to_an_unknown_branch():
    with pytest.raises(UnknownAddressee) as e:
        run_file("channel_stranger.toml")
    assert e.value.addressee == "gamma"


# --- run files and transcripts -------------------------------------------------------------


def test_config_overrides_the_run_file():
    run = load_protocol(fixture_path("runs", "pva.toml"), RunConfig(budget=7))
    assert run.spec.budget == 7
    assert load_protocol(fixture_path("runs", "pva.toml"), RunConfig()).spec.budget == 3


def test_hole_filler_run():
    _, result = run_file("hole_filler.toml")
    assert result.complete
    assert result.report.extra["q_analytic"] == "0.25"
    assert result.report.q_hat == pytest.approx(0.25)


def test_missing_fixture_is_a_config_error(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text('kind = "plan_verify_answer"\n[proposer]\nfixture = "absent.toml"\n')
    with pytest.raises(ConfigError):
        load_protocol(str(path))


def test_transcript(tmp_path):
    _, result = run_file("pva.toml")
    written = write_transcript(str(tmp_path), result)
    assert [os.path.basename(p) for p in written] == [
        "snapshot-000.xml",
        "snapshot-001.xml",
        "snapshot-002.xml",
        "snapshot-003.xml",
        "report.txt",
    ]
    report = (tmp_path / "report.txt").read_text().splitlines()
    assert report == transcript_lines(result)
    assert "answered=true" in report
    assert "verdict=answer_support: holds" in report
    assert (tmp_path / "snapshot-000.xml").read_text().startswith("<prompt><task>")
