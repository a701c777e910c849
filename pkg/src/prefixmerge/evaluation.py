"""ROUGE-1/2/L scoring and prefix-attention profiles.

ROUGE here is the plain clipped n-gram / LCS formulation over whitespace
tokens (lowercased, no stemming); sequences of arbitrary hashables (e.g.
token ids) are scored as-is. F1 is the headline figure; precision and
recall are always retained.

The attention profile restricts post-softmax attention to the prefix
columns, renormalizes each query row over them, then averages in the fixed
order query positions -> heads -> layers -> samples, labelling each prefix
row with the sub-prefix region it came from.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from .autodiff import ContractError
from .prefix import merge_for_target, realized_regions, gather


@dataclass(frozen=True)
class PRF:
    precision: float
    recall: float
    f1: float


@dataclass(frozen=True)
class RougeScore:
    r1: PRF
    r2: PRF
    rl: PRF


def _tokens(seq):
    if isinstance(seq, str):
        return seq.lower().split()
    return list(seq)


def _prf(overlap: float, n_cand: float, n_ref: float) -> PRF:
    p = overlap / n_cand if n_cand else 0.0
    r = overlap / n_ref if n_ref else 0.0
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    return PRF(p, r, f1)


def rouge_n(candidate, reference, n: int) -> PRF:
    """Clipped n-gram overlap; too-short sequences score 0, not an error."""
    if n < 1:
        raise ValueError(f"rouge_n: n must be >= 1, got {n}")
    cand = _tokens(candidate)
    ref = _tokens(reference)
    if len(cand) < n or len(ref) < n:
        return PRF(0.0, 0.0, 0.0)

    def grams(seq):
        counts = {}
        for i in range(len(seq) - n + 1):
            g = tuple(seq[i:i + n])
            counts[g] = counts.get(g, 0) + 1
        return counts

    cg, rg = grams(cand), grams(ref)
    overlap = sum(min(c, rg.get(g, 0)) for g, c in cg.items())
    return _prf(overlap, len(cand) - n + 1, len(ref) - n + 1)


def lcs_length(a, b) -> int:
    """Longest common subsequence length, O(|a|*|b|) dynamic program."""
    if len(a) < len(b):
        a, b = b, a
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(candidate, reference) -> PRF:
    cand = _tokens(candidate)
    ref = _tokens(reference)
    if not cand or not ref:
        return PRF(0.0, 0.0, 0.0)
    return _prf(lcs_length(cand, ref), len(cand), len(ref))


def rouge_score(candidate, reference) -> RougeScore:
    return RougeScore(r1=rouge_n(candidate, reference, 1),
                      r2=rouge_n(candidate, reference, 2),
                      rl=rouge_l(candidate, reference))


def score_dataset(model, prefix_acts, examples, max_len: int = 8,
                  min_len: int = 1, eos_id: int = 1, bos_id: int = 0,
                  no_prompt: bool = False) -> dict:
    """Greedy-decode every example and average ROUGE F1 against the targets."""
    sums = {"rouge1_f1": 0.0, "rouge2_f1": 0.0, "rougeL_f1": 0.0}
    for ex in examples:
        inp = ex.input_tokens[ex.prompt_len:] if no_prompt else ex.input_tokens
        out = model.greedy_decode(inp, prefix=prefix_acts, max_len=max_len,
                                  min_len=min_len, eos_id=eos_id, bos_id=bos_id)
        hyp = [t for t in out if t != eos_id]
        score = rouge_score(hyp, ex.target_tokens)
        sums["rouge1_f1"] += score.r1.f1
        sums["rouge2_f1"] += score.r2.f1
        sums["rougeL_f1"] += score.rl.f1
    n = len(examples)
    metrics = {k: v / n for k, v in sums.items()} if n else dict(sums)
    metrics["n_examples"] = n
    return metrics


# ---------------------------------------------------------------------------
# prefix-attention profiles


@dataclass
class AttentionProfile:
    site: str
    row_indices: list   # prefix matrix rows, in gather order
    scores: np.ndarray  # normalized over prefix rows; sums to 1
    regions: list       # 'shared' | 'unique:<task>' per row
    n_samples: int


def profile_from_traces(per_sample_layers, n_prefix: int) -> np.ndarray:
    """Average prefix-restricted attention over query rows, heads, layers,
    then samples. `per_sample_layers`: one list per sample of per-layer
    arrays [n_heads, query_len, n_prefix + key_len]."""
    if n_prefix <= 0:
        raise ContractError("attention profile needs a nonempty prefix")
    sample_means = []
    for layers in per_sample_layers:
        layer_means = []
        for w in layers:
            sliced = w[:, :, :n_prefix]
            sliced = sliced / sliced.sum(axis=2, keepdims=True)
            layer_means.append(sliced.mean(axis=1).mean(axis=0))
        sample_means.append(np.mean(layer_means, axis=0))
    return np.mean(sample_means, axis=0)


def attention_profile(model, prefix, examples, indices=None,
                      n_samples: int = 100, rng=None,
                      sites=("enc_self", "dec_cross"), max_len: int = 8,
                      min_len: int = 1, eos_id: int = 1, bos_id: int = 0,
                      no_prompt: bool = False) -> dict:
    """Decode sampled examples and profile attention over the prefix rows.

    Returns {site: AttentionProfile}. Sampling is without replacement and
    clips to the dataset size.
    """
    if indices is None:
        indices = merge_for_target(prefix)
    if not indices:
        raise ContractError("attention profile needs a nonempty prefix")
    n = min(n_samples, len(examples))
    if rng is not None:
        chosen = [examples[i] for i in rng.choice(len(examples), size=n,
                                                  replace=False)]
    else:
        chosen = examples[:n]
    acts = gather(prefix, indices)
    collected = {s: [] for s in sites}
    for ex in chosen:
        inp = ex.input_tokens[ex.prompt_len:] if no_prompt else ex.input_tokens
        out = model.greedy_decode(inp, prefix=acts, max_len=max_len,
                                  min_len=min_len, eos_id=eos_id, bos_id=bos_id)
        _, traces = model.forward(inp, out, prefix=acts, collect_traces=True,
                                  bos_id=bos_id)
        for s in sites:
            collected[s].append(traces[s].layers)
    labels = realized_regions(prefix)
    regions = [labels.get(row, "shared") for row in indices]
    profiles = {}
    for s in sites:
        scores = profile_from_traces(collected[s], len(indices))
        profiles[s] = AttentionProfile(site=s, row_indices=list(indices),
                                       scores=scores, regions=regions,
                                       n_samples=n)
    return profiles


def export_profile(profiles, path) -> None:
    """CSV rows (site, row_index, region, score), fixed column order."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["site", "row_index", "region", "score"])
        for site in sorted(profiles):
            prof = profiles[site]
            for row, region, score in zip(prof.row_indices, prof.regions,
                                          prof.scores):
                writer.writerow([site, row, region, repr(float(score))])


def load_profile_csv(path) -> dict:
    """Parse export_profile output back to {site: [(row, region, score)]}."""
    out = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for rec in reader:
            out.setdefault(rec["site"], []).append(
                (int(rec["row_index"]), rec["region"], float(rec["score"])))
    return out


def export_metrics(metrics: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump(metrics, fh, sort_keys=True, indent=2)
        fh.write("\n")
