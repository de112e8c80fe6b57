import math
from concurrent.futures import ThreadPoolExecutor

import pytest
from hypothesis import given, settings, strategies as st

from tracerag.backends import ScriptedBackend
from tracerag.chains import ChainConfig, ReasoningChain, SearchStats, beam_search, construct_chains, top_t_triples
from tracerag.kg import assemble_question_kg
from tracerag.ranker import TripleRanker
from tracerag.schema import KnowledgeTriple
from tracerag.selector import TripleSelector

import oracles
from doubles import FixedRanker, FunctionSelector, synthetic_kg

Q = "When was the father of Albert Einstein born?"


def table_logits(table):
    return lambda prefix, option: table[prefix][option]


def test_config_rejects_non_positive():
    with pytest.raises(ValueError, match="b must be"):
        ChainConfig(b=0)


def test_single_step_argmax():
    kg = synthetic_kg(2)
    logp = {(): {"A": math.log(0.1), 0: math.log(0.6), 1: math.log(0.3)}}
    chains = construct_chains("q", kg, ChainConfig(L=1, R=1, b=1, K=2), FixedRanker([2, 1]),
                              FunctionSelector(kg, table_logits(logp)))
    assert len(chains) == 1
    assert chains[0].indices == (0,)
    assert chains[0].triples == (kg.triples[0],)
    assert chains[0].score == pytest.approx(0.6, abs=1e-12)


def test_matches_frozen_enumeration():
    # K=3, L=2, b=K, R=4: the first step keeps all four options, so the final
    # cut equals the top four of the full enumeration (values frozen from oracles.py).
    kg = synthetic_kg(4)
    fn = lambda p, o: oracles.seeded_logit(3, p, o)
    chains = construct_chains("q", kg, ChainConfig(L=2, R=4, b=3, K=3), FixedRanker([0.9, 0.5, 0.2, 0.1]),
                              FunctionSelector(kg, fn))
    got = [(c.indices, c.terminated) for c in chains]
    assert got == [((), True), ((2, 3), False), ((1,), True), ((2, 1), False)]
    expected = [0.7345490013180541, 0.15491619729744474, 0.02440412973275615, 0.022751737243791727]
    for c, p in zip(chains, expected):
        assert abs(c.score - p) < 1e-12


@settings(max_examples=60, deadline=None)
@given(
    n=st.integers(1, 6),
    K=st.integers(1, 4),
    L=st.integers(1, 3),
    seed=st.integers(0, 10**6),
)
def test_wide_beam_equals_enumeration(n, K, L, seed):
    kg = synthetic_kg(n)
    scores = [oracles.seeded_logit(seed, (), f"s{i}") for i in range(n)]
    fn = lambda p, o: oracles.seeded_logit(seed, p, o)
    expected = oracles.enumerate_chains(scores, fn, K, L)
    cfg = ChainConfig(L=L, R=10_000, b=K, K=K)
    chains = construct_chains("q", kg, cfg, FixedRanker(scores), FunctionSelector(kg, fn))
    assert {c.indices for c in chains} == set(expected)
    for c in chains:
        assert abs(c.score - expected[c.indices][0]) < 1e-9
    assert [c.score for c in chains] == sorted((c.score for c in chains), reverse=True)


@settings(max_examples=60, deadline=None)
@given(n=st.integers(1, 7), K=st.integers(1, 4), L=st.integers(1, 4), R=st.integers(1, 6),
       b=st.integers(1, 4), seed=st.integers(0, 10**6), fixed=st.booleans())
def test_termination_invariants(n, K, L, R, b, seed, fixed):
    kg = synthetic_kg(n)
    scores = [oracles.seeded_logit(seed, (), f"s{i}") for i in range(n)]
    fn = lambda p, o: oracles.seeded_logit(seed, p, o)
    cfg = ChainConfig(L=L, R=R, b=b, K=K, fixed_length=fixed)
    stats = SearchStats()
    beam = beam_search("q", kg, cfg, FixedRanker(scores), FunctionSelector(kg, fn), stats)
    assert 1 <= len(beam) <= R
    assert stats.selector_calls <= L * R
    for h in beam:
        assert len(h.indices) <= L
        assert len(set(h.indices)) == len(h.indices)
        if "A" in h.labels:
            assert h.labels.index("A") == len(h.labels) - 1
            assert h.terminated
        if fixed:
            assert "A" not in h.labels
            assert h.exhausted or len(h.indices) == L


def test_stop_option_always_branches_beside_top_b():
    kg = synthetic_kg(3)
    logits = {(): {"A": 0.0, 0: 5.0, 1: 4.0, 2: 3.0}}
    chains = construct_chains("q", kg, ChainConfig(L=1, R=10, b=1, K=3), FixedRanker([3, 2, 1]),
                              FunctionSelector(kg, table_logits(logits)))
    assert {c.indices for c in chains} == {(0,), ()}


def test_all_terminated_stops_early():
    kg = synthetic_kg(5)
    stats = SearchStats()
    construct_chains("q", kg, ChainConfig(L=4, R=1, b=2, K=3), FixedRanker(range(5)),
                     FunctionSelector(kg, lambda p, o: 50.0 if o == "A" else 0.0), stats=stats)
    assert stats.steps == 1
    assert stats.selector_calls == 1


def test_exhausted_graph_force_terminates():
    kg = synthetic_kg(1)
    beam = beam_search("q", kg, ChainConfig(L=3, R=3, b=1, K=2, fixed_length=True), FixedRanker([1.0]),
                       FunctionSelector(kg, lambda p, o: 0.0))
    assert len(beam) == 1
    assert beam[0].indices == (0,) and beam[0].exhausted and beam[0].terminated
    assert beam[0].log_score == pytest.approx(0.0)


def test_empty_graph_yields_no_chains():
    kg = assemble_question_kg([])
    assert construct_chains("q", kg, ChainConfig(), FixedRanker([]), FunctionSelector(kg, lambda p, o: 0.0)) == []


def test_parallel_expansion_is_identical():
    kg = synthetic_kg(6)
    scores = [oracles.seeded_logit(11, (), i) for i in range(6)]
    fn = lambda p, o: oracles.seeded_logit(11, p, o)
    cfg = ChainConfig(L=3, R=4, b=2, K=4)
    serial = construct_chains("q", kg, cfg, FixedRanker(scores), FunctionSelector(kg, fn))
    with ThreadPoolExecutor(4) as pool:
        threaded = construct_chains("q", kg, cfg, FixedRanker(scores), FunctionSelector(kg, fn), executor=pool)
    assert serial == threaded


def test_chain_json_round_trip():
    kg = synthetic_kg(3)
    chains = construct_chains("q", kg, ChainConfig(L=2, R=3, b=2, K=3), FixedRanker([1, 2, 3]),
                              FunctionSelector(kg, lambda p, o: oracles.seeded_logit(5, p, o)), question_id="q1")
    for c in chains:
        assert ReasoningChain.from_json(c.to_json(), "q1") == c


EINSTEIN = [
    KnowledgeTriple("Albert Einstein", "father", "Hermann Einstein", 0, "Albert Einstein"),
    KnowledgeTriple("Albert Einstein", "date of birth", "14 March 1879", 0, "Albert Einstein"),
    KnowledgeTriple("Hermann Einstein", "date of birth", "3 July 1814", 1, "Hermann Einstein"),
    KnowledgeTriple("Hermann Einstein", "occupation", "salesman", 1, "Hermann Einstein"),
]


def einstein_backends():
    embed = ScriptedBackend({
        "embedding_dim": 4,
        "embeddings": [
            *({"match": t.render(), "exact": True, "vector": [float(i == j) for j in range(4)]}
              for i, t in enumerate(EINSTEIN)),
            {"match": "father; Hermann Einstein>", "vector": [0.1, 0.3, 0.9, 0.2]},
            {"match": "query: When was", "vector": [0.9, 0.5, 0.3, 0.1]},
        ],
    })
    first, second = EINSTEIN[0].render(), EINSTEIN[2].render()
    select = ScriptedBackend({"option_logits": [
        {"match": ["The 3rd triple", f"existing knowledge triples: {first}, {second}\n"], "logits": {"A": 4.0}},
        {"match": ["The 2nd triple", f"existing knowledge triples: {first}\n"],
         "logits": {"A": 0.0, "B": 3.0, "C": 0.5, "D": 0.2}},
        {"match": "The 1st triple", "logits": {"A": 0.0, "B": 3.0, "C": 1.0, "D": 0.5, "E": 0.0}},
    ]})
    return embed, select


def test_two_hop_einstein_chain_ranks_first():
    kg = assemble_question_kg([EINSTEIN[:2], EINSTEIN[2:]])
    embed, select = einstein_backends()
    chains = construct_chains(Q, kg, ChainConfig(L=4, R=3, b=2, K=4), TripleRanker(embed), TripleSelector(select))
    best = chains[0]
    assert best.triples == (EINSTEIN[0], EINSTEIN[2])
    assert best.terminated and best.labels[-1] == "A"
    p1 = math.exp(3) / (math.exp(3) + math.exp(1) + math.exp(0.5) + 2)
    p2 = math.exp(3) / (math.exp(3) + math.exp(0.5) + math.exp(0.2) + 1)
    p3 = math.exp(4) / (math.exp(4) + 2 * math.exp(-6))
    assert best.score == pytest.approx(p1 * p2 * p3, rel=1e-12)


def test_top_t_triples_follow_question_similarity():
    kg = assemble_question_kg([EINSTEIN[:2], EINSTEIN[2:]])
    embed, _ = einstein_backends()
    assert top_t_triples(Q, kg, 2, TripleRanker(embed)) == [EINSTEIN[0], EINSTEIN[1]]
    assert len(top_t_triples(Q, kg, 10, TripleRanker(embed))) == 4
