"""Desk-scale sequence tasks and data plumbing.

Synthetic generators stand in for the large corpora: `sum` compresses a
source to its most frequent tokens, `qa` extracts the tokens following a
queried marker, `qfs` composes the two (locate the queried segment, then
compress it), and `copy` echoes the source. Alongside: JSONL ingestion for
small real corpora and a near-duplicate leakage checker for train/test
splits.

Vocabulary layout (ids): 0 bos, 1 eos, 2 oov, [3,15) prompt tokens,
[15,23) segment markers, [23, vocab_size) content tokens.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .autodiff import ContractError

BOS_ID = 0
EOS_ID = 1
OOV_ID = 2
PROMPT_LO, PROMPT_HI = 3, 15
MARKER_LO, MARKER_HI = 15, 23
CONTENT_LO = 23

SUM_PROMPT = (3,)
QA_PROMPT = (4, 5, 6)
COPY_PROMPT = (7,)
QFS_PROMPT = SUM_PROMPT + QA_PROMPT  # concatenation of the two task prompts


class DatasetError(ValueError):
    """Unreadable data file or unsatisfiable generator parameters."""


@dataclass(frozen=True)
class Synthetic:
    seed: int
    size: int


@dataclass(frozen=True)
class Jsonl:
    path: str


@dataclass(frozen=True)
class TaskSpec:
    task_id: int
    name: str
    prompt_tokens: tuple
    generator: str
    generator_params: dict = field(default_factory=dict)
    dataset_source: object = None


@dataclass
class Example:
    input_tokens: list   # prompt + optional query + source
    target_tokens: list  # nonempty; eos appended by the trainer
    prompt_len: int = 0


def top_frequent(tokens, k: int):
    """The k most frequent tokens, descending count, ties by first occurrence."""
    counts, first = {}, {}
    for i, t in enumerate(tokens):
        counts[t] = counts.get(t, 0) + 1
        if t not in first:
            first[t] = i
    order = sorted(counts, key=lambda t: (-counts[t], first[t]))
    return order[:k]


def _weighted_pool(rng, params, size):
    lo = params.get("content_lo", CONTENT_LO)
    hi = params["content_hi"]
    m = int(rng.integers(params.get("pool_min", 4), params.get("pool_max", 7) + 1))
    pool = rng.choice(np.arange(lo, hi), size=m, replace=False)
    w = rng.random(m) + 0.25
    return [int(t) for t in rng.choice(pool, size=size, p=w / w.sum())]


def _attempts(gen):
    def wrapped(params, rng):
        for _ in range(100):
            out = gen(params, rng)
            if out is not None:
                return out
        raise DatasetError(f"{gen.__name__}: generation kept failing "
                           f"preconditions; loosen the parameters")
    wrapped.__name__ = gen.__name__
    return wrapped


def _segmented_source(params, rng):
    """Marked pooled segments shared by the lookup-style generators."""
    n_seg = int(rng.integers(params.get("min_segments", 2),
                             params.get("max_segments", 3) + 1))
    markers = rng.choice(np.arange(MARKER_LO, MARKER_HI), size=n_seg,
                         replace=False)
    source, spans = [], []
    for m in markers:
        span_len = int(rng.integers(params.get("span_min", 8),
                                    params.get("span_max", 12) + 1))
        span = _weighted_pool(rng, params, span_len)
        spans.append(span)
        source.extend([int(m)] + span)
    return [int(m) for m in markers], spans, source


@_attempts
def gen_sum(params, rng):
    """Source is a weighted random token stream; target is its k most
    frequent content tokens in descending frequency. With `segmented`
    set, the stream is a marked multi-segment source (same distribution
    as the lookup tasks) and markers are ignored by the count."""
    k = params.get("k", 2)
    if params.get("segmented", False):
        _, spans, source = _segmented_source(params, rng)
        content = [t for span in spans for t in span]
    else:
        length = int(rng.integers(params.get("min_len", 12),
                                  params.get("max_len", 20) + 1))
        source = _weighted_pool(rng, params, length)
        content = source
    if len(set(content)) < k:
        return None
    prompt = list(params["prompt"])
    return Example(input_tokens=prompt + source,
                   target_tokens=top_frequent(content, k),
                   prompt_len=len(prompt))


@_attempts
def gen_qa(params, rng):
    """Source holds marked segments; the query names one marker and the
    target is the w tokens immediately after it. Spans are uniform draws
    by default, or weighted-pool draws when `pooled_spans` is set."""
    w = params.get("answer_len", 2)
    n_seg = int(rng.integers(params.get("min_segments", 2),
                             params.get("max_segments", 3) + 1))
    markers = rng.choice(np.arange(MARKER_LO, MARKER_HI), size=n_seg,
                         replace=False)
    lo = params.get("content_lo", CONTENT_LO)
    hi = params["content_hi"]
    pooled = params.get("pooled_spans", False)
    source, spans = [], []
    for m in markers:
        span_len = int(rng.integers(params.get("span_min", 4),
                                    params.get("span_max", 8) + 1))
        if pooled:
            span = _weighted_pool(rng, params, span_len)
        else:
            span = [int(t) for t in rng.choice(np.arange(lo, hi),
                                               size=span_len)]
        spans.append(span)
        source.extend([int(m)] + span)
    qi = int(rng.integers(n_seg))
    if len(spans[qi]) < w:
        return None
    prompt = list(params["prompt"])
    return Example(input_tokens=prompt + [int(markers[qi])] + source,
                   target_tokens=spans[qi][:w],
                   prompt_len=len(prompt))


@_attempts
def gen_qfs(params, rng):
    """Composite task: locate the queried segment (the qa skill), then
    compress it to its k most frequent tokens (the sum skill).

    `query_selection` picks which segment gets asked about: "uniform"
    (default) or "least_salient", which queries the segment whose leading
    token is globally least frequent, so a generic whole-source summary
    earns no credit without locating.
    """
    k = params.get("k", 2)
    markers, spans, source = _segmented_source(params, rng)
    if params.get("query_selection", "uniform") == "least_salient":
        global_counts = {}
        for span in spans:
            for t in span:
                global_counts[t] = global_counts.get(t, 0) + 1
        qi = min(range(len(spans)),
                 key=lambda i: (global_counts[top_frequent(spans[i], 1)[0]], i))
    else:
        qi = int(rng.integers(len(spans)))
    if len(set(spans[qi])) < k:
        return None
    prompt = list(params["prompt"])
    return Example(input_tokens=prompt + [markers[qi]] + source,
                   target_tokens=top_frequent(spans[qi], k),
                   prompt_len=len(prompt))


@_attempts
def gen_copy(params, rng):
    """Target repeats the source verbatim, truncated to the target budget."""
    length = int(rng.integers(params.get("min_len", 4),
                              params.get("max_len", 10) + 1))
    lo = params.get("content_lo", CONTENT_LO)
    hi = params["content_hi"]
    source = [int(t) for t in rng.choice(np.arange(lo, hi), size=length)]
    prompt = list(params["prompt"])
    max_tgt = params.get("max_tgt_len", length)
    return Example(input_tokens=prompt + source,
                   target_tokens=source[:max_tgt],
                   prompt_len=len(prompt))


GENERATORS = {"sum": gen_sum, "qa": gen_qa, "qfs": gen_qfs, "copy": gen_copy}


def build_examples(task: TaskSpec, size: int, seed: int):
    """Deterministic example stream for one task."""
    rng = np.random.default_rng(seed)
    gen = GENERATORS[task.generator]
    return [gen(task.generator_params, rng) for _ in range(size)]


def materialize(task: TaskSpec):
    src = task.dataset_source
    if isinstance(src, Synthetic):
        return build_examples(task, src.size, src.seed)
    raise DatasetError(f"task {task.name!r} has no materializable source "
                       f"({src!r}); load JSONL data explicitly")


def default_task_suite(vocab_size: int = 200, **overrides):
    """The standard task set sharing one vocabulary.

    The composite task's prompt is the concatenation of the two auxiliary
    prompts.
    """
    if vocab_size < CONTENT_LO + 8:
        raise DatasetError(f"vocab_size {vocab_size} leaves too few content "
                           f"tokens")
    base = {"content_hi": vocab_size}

    def params(extra):
        out = dict(base)
        out.update(extra)
        out.update(overrides.get(extra["name"], {}))
        out.pop("name")
        return out

    return {
        "sum": TaskSpec(0, "sum", SUM_PROMPT, "sum",
                        params({"name": "sum", "prompt": SUM_PROMPT})),
        "qa": TaskSpec(1, "qa", QA_PROMPT, "qa",
                       params({"name": "qa", "prompt": QA_PROMPT})),
        "copy": TaskSpec(2, "copy", COPY_PROMPT, "copy",
                         params({"name": "copy", "prompt": COPY_PROMPT})),
        "qfs": TaskSpec(3, "qfs", QFS_PROMPT, "qfs",
                        params({"name": "qfs", "prompt": QFS_PROMPT})),
    }


# ---------------------------------------------------------------------------
# JSONL ingestion


class WordVocab:
    """First-seen word -> id assignment over the content id range; the
    reserved token "<unk>" always maps to the out-of-vocabulary id."""

    UNK = "<unk>"

    def __init__(self, vocab_size: int):
        self.vocab_size = vocab_size
        self.word_to_id = {}
        self.id_to_word = {}

    def encode_word(self, word: str) -> int:
        if word == self.UNK:
            return OOV_ID
        wid = self.word_to_id.get(word)
        if wid is not None:
            return wid
        wid = CONTENT_LO + len(self.word_to_id)
        if wid >= self.vocab_size:
            return OOV_ID
        self.word_to_id[word] = wid
        self.id_to_word[wid] = word
        return wid

    def encode(self, text: str):
        return [self.encode_word(w) for w in text.lower().split()]

    def decode(self, ids):
        return " ".join(self.id_to_word.get(i, self.UNK) for i in ids)


@dataclass
class JsonlLoadResult:
    examples: list
    vocab: WordVocab
    skipped: int


def load_jsonl(path, field_map=None, vocab=None, prompt_tokens=(),
               vocab_size: int = 200) -> JsonlLoadResult:
    """Read {"input", "query"?, "target"} records into token Examples.

    Records missing input or target are skipped (counted); malformed JSON
    is an error naming the line. Word ids are assigned first-seen; overflow
    words map to the oov id.
    """
    fm = {"input": "input", "query": "query", "target": "target"}
    if field_map:
        fm.update(field_map)
    if vocab is None:
        vocab = WordVocab(vocab_size)
    examples = []
    skipped = 0
    prompt = list(prompt_tokens)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise DatasetError(f"cannot read {path}: {exc}") from exc
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DatasetError(f"{path}:{lineno}: malformed JSON: {exc}") from exc
        inp = record.get(fm["input"])
        tgt = record.get(fm["target"])
        if not inp or not tgt:
            skipped += 1
            continue
        query = record.get(fm["query"]) or ""
        tokens = prompt + vocab.encode(query) + vocab.encode(inp)
        examples.append(Example(input_tokens=tokens,
                                target_tokens=vocab.encode(tgt),
                                prompt_len=len(prompt)))
    return JsonlLoadResult(examples=examples, vocab=vocab, skipped=skipped)


def export_jsonl(examples, vocab: WordVocab, path) -> None:
    """Inverse of load_jsonl (prompt stripped, query folded into input)."""
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            record = {
                "input": vocab.decode(ex.input_tokens[ex.prompt_len:]),
                "target": vocab.decode(ex.target_tokens),
            }
            fh.write(json.dumps(record) + "\n")


# ---------------------------------------------------------------------------
# near-duplicate leakage


@dataclass
class LeakageReport:
    n_test: int
    n_leaked: int
    ratio: float
    pairs: list  # (test_idx, train_idx, word_diff)

    def to_json(self) -> str:
        return json.dumps({
            "n_test": self.n_test, "n_leaked": self.n_leaked,
            "ratio": self.ratio,
            "pairs": [list(p) for p in self.pairs],
        }, sort_keys=True)


def _words(target):
    if isinstance(target, str):
        return tuple(target.split())
    return tuple(target)


def word_edit_distance(a, b) -> int:
    """Word-level Levenshtein distance."""
    a, b = _words(a), _words(b)
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, wa in enumerate(a, start=1):
        cur = [i]
        for j, wb in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1,
                           prev[j - 1] + (wa != wb)))
        prev = cur
    return prev[-1]


def leakage_check(train_targets, test_targets, max_word_diff: int = 2
                  ) -> LeakageReport:
    """Flag test targets whose nearest train target is closer than
    `max_word_diff` word edits."""
    train = [_words(t) for t in train_targets]
    test = [_words(t) for t in test_targets]
    if not test:
        raise ContractError("leakage_check: empty test set")
    pairs = []
    for i, t in enumerate(test):
        for j, tr in enumerate(train):
            if abs(len(t) - len(tr)) >= max_word_diff:
                continue
            d = word_edit_distance(t, tr)
            if d < max_word_diff:
                pairs.append((i, j, d))
                break
    return LeakageReport(n_test=len(test), n_leaked=len(pairs),
                         ratio=len(pairs) / len(test), pairs=pairs)
