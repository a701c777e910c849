import json

import numpy as np
import pytest

from prefixmerge.autodiff import ContractError
from prefixmerge import tasks as tk


PARAMS = {"prompt": (3,), "content_hi": 60}


# ---------------------------------------------------------------------------
# frequency compression


def test_top_frequent_hand_case():
    # "a a b b b c" with k=2 -> "b a"
    a, b, c = 30, 31, 32
    assert tk.top_frequent([a, a, b, b, b, c], 2) == [b, a]


def test_top_frequent_all_distinct_takes_first():
    assert tk.top_frequent([44, 41, 42], 1) == [44]


def test_top_frequent_full_ranking():
    seq = [30, 31, 31, 32, 32, 32]
    assert tk.top_frequent(seq, 3) == [32, 31, 30]


def test_gen_sum_target_matches_frequency_oracle():
    rng = np.random.default_rng(0)
    p = dict(PARAMS, k=2)
    for _ in range(50):
        ex = tk.gen_sum(p, rng)
        source = ex.input_tokens[ex.prompt_len:]
        assert ex.target_tokens == tk.top_frequent(source, 2)
        assert len(ex.target_tokens) == 2


# ---------------------------------------------------------------------------
# qa


def _split_segments(source):
    """Parse [marker, span...] groups out of a source sequence."""
    segments = {}
    current = None
    for t in source:
        if tk.MARKER_LO <= t < tk.MARKER_HI:
            current = t
            segments[current] = []
        else:
            segments[current].append(t)
    return segments


def test_gen_qa_answer_follows_queried_marker():
    rng = np.random.default_rng(1)
    p = dict(PARAMS, prompt=(4, 5, 6), answer_len=2)
    for _ in range(50):
        ex = tk.gen_qa(p, rng)
        query = ex.input_tokens[ex.prompt_len]
        source = ex.input_tokens[ex.prompt_len + 1:]
        segments = _split_segments(source)
        assert query in segments
        assert ex.target_tokens == segments[query][:2]


def test_gen_qa_single_segment_has_no_distractors():
    rng = np.random.default_rng(2)
    p = dict(PARAMS, prompt=(4, 5, 6), min_segments=1, max_segments=1)
    ex = tk.gen_qa(p, rng)
    source = ex.input_tokens[ex.prompt_len + 1:]
    assert sum(1 for t in source if tk.MARKER_LO <= t < tk.MARKER_HI) == 1


def test_gen_qa_regenerates_short_spans():
    rng = np.random.default_rng(3)
    # answer longer than any span is unsatisfiable -> generation error
    p = dict(PARAMS, prompt=(4, 5, 6), span_min=2, span_max=3, answer_len=5)
    with pytest.raises(tk.DatasetError):
        tk.gen_qa(p, rng)


# ---------------------------------------------------------------------------
# qfs composition


def qfs_oracle(ex):
    """Independent composition: locate the queried segment, then compress."""
    query = ex.input_tokens[ex.prompt_len]
    source = ex.input_tokens[ex.prompt_len + 1:]
    segments = _split_segments(source)
    return tk.top_frequent(segments[query], 2)


def test_gen_qfs_composes_locate_then_compress():
    rng = np.random.default_rng(4)
    p = dict(PARAMS, prompt=(3, 4, 5, 6), k=2)
    for _ in range(100):
        ex = tk.gen_qfs(p, rng)
        assert ex.target_tokens == qfs_oracle(ex)


def test_gen_qfs_target_stays_inside_queried_segment():
    rng = np.random.default_rng(5)
    p = dict(PARAMS, prompt=(3, 4, 5, 6), k=2)
    for _ in range(50):
        ex = tk.gen_qfs(p, rng)
        query = ex.input_tokens[ex.prompt_len]
        segments = _split_segments(ex.input_tokens[ex.prompt_len + 1:])
        queried = set(segments[query])
        assert set(ex.target_tokens) <= queried


def test_gen_qfs_single_segment_reduces_to_sum():
    rng = np.random.default_rng(6)
    p = dict(PARAMS, prompt=(3, 4, 5, 6), k=2, min_segments=1, max_segments=1)
    ex = tk.gen_qfs(p, rng)
    source = ex.input_tokens[ex.prompt_len + 1:]
    span = [t for t in source if t >= tk.CONTENT_LO]
    assert ex.target_tokens == tk.top_frequent(span, 2)


# ---------------------------------------------------------------------------
# copy


def test_gen_copy_echoes_source():
    rng = np.random.default_rng(7)
    ex = tk.gen_copy(dict(PARAMS, prompt=(7,)), rng)
    assert ex.target_tokens == ex.input_tokens[ex.prompt_len:]


def test_gen_copy_truncates_to_target_budget():
    rng = np.random.default_rng(8)
    p = dict(PARAMS, prompt=(7,), min_len=8, max_len=10, max_tgt_len=3)
    ex = tk.gen_copy(p, rng)
    assert len(ex.target_tokens) == 3
    assert ex.target_tokens == ex.input_tokens[ex.prompt_len:][:3]


# ---------------------------------------------------------------------------
# shared generator properties


def test_generators_are_deterministic():
    suite = tk.default_task_suite(vocab_size=200)
    for task in suite.values():
        a = tk.build_examples(task, 20, seed=42)
        b = tk.build_examples(task, 20, seed=42)
        assert [(x.input_tokens, x.target_tokens) for x in a] == \
               [(x.input_tokens, x.target_tokens) for x in b]


def test_prompt_tokens_never_in_content():
    suite = tk.default_task_suite(vocab_size=200)
    for task in suite.values():
        for ex in tk.build_examples(task, 30, seed=1):
            body = ex.input_tokens[ex.prompt_len:]
            assert not any(tk.PROMPT_LO <= t < tk.PROMPT_HI for t in body)
            assert not any(tk.PROMPT_LO <= t < tk.PROMPT_HI
                           for t in ex.target_tokens)
            assert ex.target_tokens  # nonempty
            assert ex.input_tokens[:ex.prompt_len] == list(task.prompt_tokens)


def test_suite_prompts_distinct_and_qfs_concatenated():
    suite = tk.default_task_suite()
    prompts = [t.prompt_tokens for t in suite.values()]
    assert len(set(prompts)) == len(prompts)
    assert suite["qfs"].prompt_tokens == \
        suite["sum"].prompt_tokens + suite["qa"].prompt_tokens


# ---------------------------------------------------------------------------
# jsonl


def test_load_jsonl_reads_valid_lines(tmp_path):
    path = tmp_path / "data.jsonl"
    rows = [
        {"input": "alpha beta", "query": "beta", "target": "alpha"},
        {"input": "gamma delta", "target": "delta"},
        {"input": "x y z", "query": "y", "target": "y z"},
    ]
    path.write_text("\n".join(json.dumps(r) for r in rows))
    res = tk.load_jsonl(path, prompt_tokens=(3,))
    assert len(res.examples) == 3
    assert res.skipped == 0
    assert res.examples[0].prompt_len == 1
    assert all(ex.target_tokens for ex in res.examples)
    # the query is encoded first, so "beta" takes the first content id and
    # sits right after the prompt; "alpha" follows it
    assert res.examples[0].input_tokens[1] == tk.CONTENT_LO
    assert res.examples[0].target_tokens == [tk.CONTENT_LO + 1]


def test_load_jsonl_skips_missing_fields(tmp_path):
    path = tmp_path / "data.jsonl"
    path.write_text('{"input": "a b", "target": "a"}\n{"input": "c d"}\n')
    res = tk.load_jsonl(path)
    assert len(res.examples) == 1
    assert res.skipped == 1


def test_load_jsonl_reports_malformed_line(tmp_path):
    path = tmp_path / "data.jsonl"
    path.write_text('{"input": "a", "target": "a"}\nnot json\n')
    with pytest.raises(tk.DatasetError, match=":2:"):
        tk.load_jsonl(path)


def test_jsonl_roundtrip_token_identity(tmp_path):
    path = tmp_path / "data.jsonl"
    rows = [
        {"input": "the quick fox", "query": "fox", "target": "quick fox"},
        {"input": "over the lazy dog", "target": "dog"},
    ]
    path.write_text("\n".join(json.dumps(r) for r in rows))
    first = tk.load_jsonl(path, prompt_tokens=(3,))
    out = tmp_path / "export.jsonl"
    tk.export_jsonl(first.examples, first.vocab, out)
    second = tk.load_jsonl(out, vocab=first.vocab, prompt_tokens=(3,))
    assert [(e.input_tokens, e.target_tokens) for e in first.examples] == \
           [(e.input_tokens, e.target_tokens) for e in second.examples]


def test_load_jsonl_oov_bucket(tmp_path):
    path = tmp_path / "data.jsonl"
    words = " ".join(f"w{i}" for i in range(300))
    path.write_text(json.dumps({"input": words, "target": "w0"}) + "\n")
    res = tk.load_jsonl(path, vocab_size=60)
    assert tk.OOV_ID in res.examples[0].input_tokens


# ---------------------------------------------------------------------------
# leakage


def test_leakage_disjoint_vocabulary_is_zero():
    report = tk.leakage_check(["aa bb cc"], ["dd ee ff", "gg hh"])
    assert report.ratio == 0.0
    assert report.pairs == []


def test_leakage_identical_sets_is_one():
    targets = ["the cat sat", "a dog ran"]
    report = tk.leakage_check(targets, targets)
    assert report.ratio == 1.0
    assert all(d == 0 for _, _, d in report.pairs)


def test_leakage_one_word_difference_counts():
    report = tk.leakage_check(["the cat sat"], ["the cat sits"])
    assert report.n_leaked == 1
    assert report.pairs[0][2] == 1


def test_leakage_two_word_difference_does_not_count():
    report = tk.leakage_check(["the cat sat"], ["the dog sits"])
    assert report.n_leaked == 0


def test_leakage_empty_test_set_rejected():
    with pytest.raises(ContractError):
        tk.leakage_check(["a"], [])


def test_word_edit_distance_cases():
    assert tk.word_edit_distance("a b c", "a b c") == 0
    assert tk.word_edit_distance("a b c", "a x c") == 1
    assert tk.word_edit_distance("a b", "a b c") == 1
    assert tk.word_edit_distance("", "a b") == 2
    assert tk.word_edit_distance("x y z", "a b") == 3


def test_leakage_report_json_roundtrip():
    report = tk.leakage_check(["a b"], ["a b", "c d"])
    data = json.loads(report.to_json())
    assert data["n_test"] == 2
    assert data["n_leaked"] == 1
    assert data["ratio"] == 0.5
