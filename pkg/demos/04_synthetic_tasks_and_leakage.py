"""Look at the synthetic task generators (compression, lookup, their
composition, and copying) and run the near-duplicate leakage checker on a
deliberately contaminated split."""

import numpy as np

from prefixmerge import tasks as tk

suite = tk.default_task_suite(vocab_size=200)
rng_seed = 7

print("=== one example per task ===")
for name in ("sum", "qa", "qfs", "copy"):
    ex = tk.build_examples(suite[name], 1, seed=rng_seed)[0]
    print(f"{name:5s} prompt={ex.input_tokens[:ex.prompt_len]} "
          f"input={ex.input_tokens[ex.prompt_len:]}")
    print(f"      target={ex.target_tokens}")

print("\n=== the composite target really composes the auxiliaries ===")
ex = tk.build_examples(suite["qfs"], 1, seed=rng_seed)[0]
query = ex.input_tokens[ex.prompt_len]
source = ex.input_tokens[ex.prompt_len + 1:]
spans, current = {}, None
for t in source:
    if tk.MARKER_LO <= t < tk.MARKER_HI:
        current = t
        spans[current] = []
    else:
        spans[current].append(t)
located = spans[query]          # the qa skill: find the queried segment
compressed = tk.top_frequent(located, 2)  # the sum skill: compress it
print(f"query marker {query} -> segment {located}")
print(f"top-2 frequent = {compressed} == target {ex.target_tokens}: "
      f"{compressed == ex.target_tokens}")

print("\n=== leakage checker ===")
train = [f"finding number {i} stays stable" for i in range(50)]
test = [f"finding number {i} stays stable" for i in range(20)]        # exact
test += [f"finding number {i + 50} looks stable" for i in range(12)]  # far
report = tk.leakage_check(train, test, max_word_diff=2)
print(f"test targets: {report.n_test}, leaked: {report.n_leaked}, "
      f"ratio: {report.ratio:.2f}")
print(f"first leaked pair (test_idx, train_idx, word_diff): "
      f"{report.pairs[0]}")
