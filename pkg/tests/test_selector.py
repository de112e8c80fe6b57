import logging
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from tracerag.backends import LogitsUnavailableError, ScriptedBackend
from tracerag.schema import KnowledgeTriple
from tracerag.selector import (
    LABELS, MAX_CANDIDATES, TERMINATE, TERMINATE_TEXT, TripleDistribution, TripleSelector,
    build_selection_prompt, distribution_from_logits, ordinal, softmax, triple_distribution,
)

import oracles

Q = "When was the father of Albert Einstein born?"
T = [KnowledgeTriple("Albert Einstein", "father", "Hermann Einstein"),
     KnowledgeTriple("Hermann Einstein", "date of birth", "3 July 1814"),
     KnowledgeTriple("Albert Einstein", "born", "14 March 1879"),
     KnowledgeTriple("Albert Einstein", "occupation", "theoretical physicist")]


def cands(triples, start=10):
    return [(start + i, t) for i, t in enumerate(triples)]


def test_ordinals():
    assert [ordinal(n) for n in (1, 2, 3, 4, 11, 12, 13, 21, 22, 111)] == \
        ["1st", "2nd", "3rd", "4th", "11th", "12th", "13th", "21st", "22nd", "111th"]


def test_four_candidates_give_five_options():
    p = build_selection_prompt(Q, [], cands(T))
    assert p.labels == ("A", "B", "C", "D", "E")
    assert f"A. {TERMINATE_TEXT}\nB. <Albert Einstein; father; Hermann Einstein>\n" in p.text
    assert p.text.endswith("E. <Albert Einstein; occupation; theoretical physicist>\nthe next possible triple is:")


def test_first_step_has_empty_existing_block():
    p = build_selection_prompt(Q, [], cands(T[:2]))
    assert "The 1st triple in the reasoning path is selected as:\nexisting knowledge triples:\nquestion: " in p.text


def test_existing_triples_in_selection_order():
    p = build_selection_prompt(Q, [T[0], T[2]], cands(T[1:2]))
    assert "The 3rd triple" in p.text
    assert f"existing knowledge triples: {T[0].render()}, {T[2].render()}\n" in p.text


def test_option_map_round_trip():
    p = build_selection_prompt(Q, [], cands(T, start=40))
    assert p.option_map["A"] == TERMINATE
    for offset, label in enumerate("BCDE"):
        assert p.option_map[label] == 40 + offset


def test_demonstrations_precede_the_task():
    p = build_selection_prompt(Q, [], cands(T[:1]), ["coherent reasoning path: <x; y; z>\nquestion: demo q"])
    assert p.text.index("demo q") < p.text.index("The 1st triple")


def test_empty_candidates_rejected():
    with pytest.raises(ValueError):
        build_selection_prompt(Q, [], [])


def test_candidates_truncated_to_label_alphabet(caplog):
    many = [(i, KnowledgeTriple(f"h{i}", "r", "t")) for i in range(MAX_CANDIDATES + 5)]
    with caplog.at_level(logging.WARNING):
        p = build_selection_prompt(Q, [], many)
    assert len(p.labels) == len(LABELS)
    assert p.labels[-1] == "9"
    assert "truncating" in caplog.text


def test_multi_token_labels_truncate_prefix():
    backend = ScriptedBackend({"multi_token_labels": ["D"]})
    p = build_selection_prompt(Q, [], cands(T), is_single_token=backend.is_single_token)
    assert p.labels == ("A", "B", "C")
    with pytest.raises(ValueError, match="termination label"):
        build_selection_prompt(Q, [], cands(T), is_single_token=ScriptedBackend({"multi_token_labels": ["A"]}).is_single_token)


def test_softmax_symmetric_pair():
    d = distribution_from_logits({"A": 0.0, "B": 0.0}, ["A", "B"])
    assert d.probs == {"A": 0.5, "B": 0.5}


def test_softmax_closed_form():
    d = distribution_from_logits({"A": 1.0, "B": 2.0, "C": 3.0}, ["A", "B", "C"])
    assert d.probs["A"] == pytest.approx(0.09003, abs=1e-5)
    assert d.probs["B"] == pytest.approx(0.24473, abs=1e-5)
    assert d.probs["C"] == pytest.approx(0.66524, abs=1e-5)
    assert d.argmax() == "C"


def test_two_candidate_example_uses_all_three_logits():
    # stop option plus two candidates: the stop logit takes part in the normalization
    d = distribution_from_logits({"A": 0.5, "B": 2.0, "C": 1.0}, ["A", "B", "C"])
    z = math.exp(0.5) + math.exp(2.0) + math.exp(1.0)
    assert d.probs["B"] == pytest.approx(math.exp(2.0) / z, rel=1e-12)


@given(st.lists(st.floats(-50, 50, allow_nan=False), min_size=1, max_size=35), st.floats(-100, 100))
def test_softmax_properties(logits, shift):
    p = softmax(logits)
    assert abs(p.sum() - 1.0) <= 1e-12
    assert np.allclose(p, softmax([x + shift for x in logits]), rtol=0, atol=1e-12)
    assert np.allclose(p, oracles.softmax(logits), rtol=0, atol=1e-12)


def test_ranked_ties_keep_option_order():
    d = TripleDistribution({"A": 0.25, "B": 0.375, "C": 0.375})
    assert d.ranked() == [("B", 0.375), ("C", 0.375), ("A", 0.25)]


def test_scripted_distribution_is_label_order_independent():
    backend = ScriptedBackend({"option_logits": [{"match": "", "logits": {"A": 0.0, "B": 2.0, "C": 1.0}}]})
    p = build_selection_prompt(Q, [], cands(T[:2]))
    d = triple_distribution(p, backend)
    assert d.argmax() == "B"
    assert sum(d.probs.values()) == pytest.approx(1.0, abs=1e-12)


def test_degraded_mode_is_one_hot():
    backend = ScriptedBackend({"supports_logits": False, "generations": [{"match": "", "response": "C"}]})
    p = build_selection_prompt(Q, [], cands(T[:3]))
    d = triple_distribution(p, backend)
    assert d.probs == {"A": 0.0, "B": 0.0, "C": 1.0, "D": 0.0}


def test_degraded_unparseable_output_stops():
    backend = ScriptedBackend({"supports_logits": False, "generations": [{"match": "", "response": "none"}]})
    d = triple_distribution(build_selection_prompt(Q, [], cands(T[:2])), backend)
    assert d.argmax() == "A" and d.probs["A"] == 1.0


def test_logits_unavailable_is_explicit():
    backend = ScriptedBackend({"supports_logits": False})
    with pytest.raises(LogitsUnavailableError, match="logit-capable"):
        triple_distribution(build_selection_prompt(Q, [], cands(T[:2])), backend, degraded=False)


def test_selector_caches_demonstrations_per_question():
    class Store:
        calls = 0

        def select(self, key, n):
            Store.calls += 1
            return ["coherent reasoning path: <a; b; c>"]

    sel = TripleSelector(ScriptedBackend(), Store(), n_demos=1)
    sel.distribution(Q, [], cands(T[:2]))
    sel.distribution(Q, [T[0]], cands(T[1:3]))
    assert Store.calls == 1
