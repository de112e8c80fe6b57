import json
import threading

import pytest

from tracerag.backends import ScriptedBackend
from tracerag.corpus import DemoStore, KGCache, LoadReport, get_or_generate_kg, load_dataset, select_demonstrations
from tracerag.schema import Document, KnowledgeTriple


def write(path, obj):
    path.write_text(obj if isinstance(obj, str) else json.dumps(obj), encoding="utf-8")
    return path


def test_hotpot_record(tmp_path):
    rec = {"_id": "x1", "question": "q?", "answer": "a", "context": [["T1", ["s1", "s2"]]],
           "supporting_facts": [["T1", 0]]}
    (item,) = load_dataset(write(tmp_path / "h.json", [rec]), "hotpotqa")
    assert item.id == "x1"
    assert item.documents == (Document("T1", "s1 s2"),)
    assert item.supporting_titles == {"T1"}


def test_empty_file(tmp_path):
    report = LoadReport()
    assert load_dataset(write(tmp_path / "e.json", ""), "hotpotqa", report) == []
    assert report.loaded == 0 and report.skipped == 0


def test_missing_answer_skipped(tmp_path):
    recs = [
        {"_id": "1", "question": "q1", "answer": "a1", "context": [["A", ["x"]]]},
        {"_id": "2", "question": "q2", "context": [["B", ["y"]]]},
        {"_id": "3", "question": "q3", "answer": "a3", "context": [["C", ["z"]]]},
    ]
    report = LoadReport()
    items = load_dataset(write(tmp_path / "d.json", recs), "twowiki", report)
    assert [i.id for i in items] == ["1", "3"]
    assert report.skipped == 1 and "missing answer" in report.reasons[0]


def test_jsonl_and_musique(tmp_path):
    rec = {"id": "m1", "question": "q", "answer": "a", "paragraphs": [
        {"title": "P1", "paragraph_text": "one", "is_supporting": True},
        {"title": "P2", "paragraph_text": "two", "is_supporting": False},
    ]}
    path = write(tmp_path / "m.jsonl", json.dumps(rec) + "\n" + json.dumps({**rec, "id": "m2"}) + "\n")
    items = load_dataset(path, "musique")
    assert [i.id for i in items] == ["m1", "m2"]
    assert [d.title for d in items[0].documents] == ["P1", "P2"]
    assert items[0].supporting_titles == {"P1"}


def test_record_without_documents_is_skipped(tmp_path):
    report = LoadReport()
    assert load_dataset(write(tmp_path / "n.json", [{"question": "q", "answer": "a", "context": []}]),
                        "hotpotqa", report) == []
    assert report.skipped == 1


def test_unknown_format(tmp_path):
    with pytest.raises(ValueError, match="unknown dataset format"):
        load_dataset(write(tmp_path / "x.json", "[]"), "squad")


def store(vectors, query):
    rules = [{"match": f"key {i}", "exact": True, "vector": v} for i, v in enumerate(vectors)]
    rules.append({"match": "query: probe", "exact": True, "vector": query})
    backend = ScriptedBackend({"embedding_dim": len(query), "embeddings": rules})
    return DemoStore("kg_generation", [f"key {i}" for i in range(len(vectors))],
                     [f"demo {i}" for i in range(len(vectors))], backend)


def test_most_similar_demo_first():
    s = store([[1.0, 0.0], [0.5, 0.5], [0.0, 1.0]], [0.1, 0.9])
    assert select_demonstrations("probe", s, 1) == ["demo 2"]
    assert s.select("probe", 3) == ["demo 2", "demo 1", "demo 0"]


def test_identical_demos_keep_index_order():
    s = store([[1.0, 0.0], [0.0, 1.0], [0.0, 1.0]], [0.0, 1.0])
    assert s.select("probe", 2) == ["demo 1", "demo 2"]


def test_demo_keys_embedded_once():
    s = store([[1.0, 0.0], [0.0, 1.0]], [1.0, 0.0])
    s.select("probe", 1)
    s.select("probe", 1)
    assert s.backend.calls["embed"] == 3


def test_structured_demo_files(tmp_path):
    kg = write(tmp_path / "kg.json", {"kind": "kg_generation", "entries": [
        {"title": "Albert Einstein", "text": "Albert Einstein was a physicist.",
         "triples": [["Albert Einstein", "occupation", "physicist"]]}]})
    s = DemoStore.from_file(kg, ScriptedBackend())
    assert s.demos == ["Title: Albert Einstein\nText: Albert Einstein was a physicist.\nKnowledge Triples:\n"
                       "<Albert Einstein; occupation; physicist>"]
    assert s.keys == ["Title: Albert Einstein\nText: Albert Einstein was a physicist."]
    raw = write(tmp_path / "raw.json", {"kind": "chain_construction", "entries": [{"key": "k", "demo": "d"}]})
    assert DemoStore.from_file(raw).demos == ["d"]


def test_bundled_demo_stores_load():
    from importlib import resources
    for name, kind in (("kg_demos.json", "kg_generation"), ("chain_demos.json", "chain_construction")):
        s = DemoStore.from_file(resources.files("tracerag").joinpath("data", name))
        assert s.kind == kind and len(s) >= 2


def test_invalid_store():
    with pytest.raises(ValueError):
        DemoStore("kg_generation", [], [])
    with pytest.raises(ValueError):
        DemoStore("other", ["k"], ["d"])


DOC = Document("Albert Einstein", "Albert Einstein was a physicist.")
TRIPLES = [KnowledgeTriple("Albert Einstein", "occupation", "physicist")]


def test_cache_hit_skips_generator(tmp_path):
    cache = KGCache(tmp_path / "c.jsonl")
    calls = []

    def gen(doc):
        calls.append(doc)
        return TRIPLES

    first = get_or_generate_kg(DOC, gen, cache, doc_index=4)
    second = get_or_generate_kg(DOC, gen, cache, doc_index=4)
    assert first == second and len(calls) == 1
    assert first[0].source_doc == 4 and first[0].source_title == "Albert Einstein"


def test_cache_persists_and_last_write_wins(tmp_path):
    path = tmp_path / "c.jsonl"
    cache = KGCache(path)
    cache.put(DOC, TRIPLES)
    cache.put(DOC, TRIPLES + [KnowledgeTriple("Albert Einstein", "born", "1879")])
    with path.open("a") as fh:
        fh.write('{"doc_key": "trunc')
    reloaded = KGCache(path)
    assert len(reloaded) == 1 and len(reloaded.get(DOC)) == 2
    assert json.loads(path.read_text().splitlines()[0])["type"] == "header"


def test_same_title_different_text():
    other = Document(DOC.title, "Different text.")
    assert other.key != DOC.key
    cache = KGCache()
    cache.put(DOC, TRIPLES)
    assert other not in cache and DOC in cache


def test_concurrent_misses_generate_once(tmp_path):
    cache = KGCache(tmp_path / "c.jsonl")
    calls = []
    gate = threading.Barrier(4)

    def gen(doc):
        calls.append(1)
        return TRIPLES

    def worker():
        gate.wait()
        get_or_generate_kg(DOC, gen, cache)

    threads = [threading.Thread(target=worker) for _ in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert len(calls) == 1
