"""Per-row importance scores from squared per-sample log-likelihood gradients.

A row's score is the mean squared derivative of the sequence log-likelihood
with respect to that row's parameters, averaged over parameters-per-row and
samples. Gradients are taken one sample at a time: squaring happens before
any aggregation, so batching samples first would measure something else.
Sequence log-likelihood is the *sum* of per-token log-probs, so longer
targets legitimately carry more mass.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


class EmptyDataError(ValueError):
    """No samples were accumulated."""


@dataclass
class FisherReport:
    task_id: int
    scores: np.ndarray  # one non-negative score per prefix row

    def top_indices(self, n: int):
        order = sorted(range(self.scores.size),
                       key=lambda i: (-self.scores[i], i))
        return order[:n]


class FisherAccumulator:
    """Running sum of squared gradients with Kahan compensation, so the
    finished scores are insensitive to sample order to ~1e-16."""

    def __init__(self, n_rows: int, params_per_row: int):
        self.n_rows = n_rows
        self.params_per_row = params_per_row
        self.sum_sq = np.zeros((n_rows, params_per_row))
        self._comp = np.zeros((n_rows, params_per_row))
        self.count = 0

    def add_gradient(self, grad: np.ndarray, sample_id=None) -> None:
        """Add one sample's log-likelihood gradient (squared elementwise)."""
        g = np.asarray(grad, dtype=np.float64)
        if g.shape != self.sum_sq.shape:
            raise ad.ShapeError(f"gradient shape {g.shape} does not match "
                                f"accumulator {self.sum_sq.shape}")
        if not np.isfinite(g).all():
            raise ad.NumericError(f"non-finite gradient for sample "
                                  f"{sample_id!r}")
        y = g * g - self._comp
        t = self.sum_sq + y
        self._comp = (t - self.sum_sq) - y
        self.sum_sq = t
        self.count += 1


def accumulate(acc: FisherAccumulator, model, prefix, indices, example,
               sample_id=None, bos_id: int = 0, eos_id: int = 1,
               no_prompt: bool = False) -> FisherAccumulator:
    """Run one sample through the model and add its squared gradient.

    The gradient is of the sequence log-likelihood (-T * mean cross-entropy)
    with respect to the full prefix matrix; rows outside `indices` receive
    exact zeros.
    """
    from .prefix import gather  # deferred: prefix imports model

    inp = example.input_tokens[example.prompt_len:] if no_prompt \
        else example.input_tokens
    tgt = list(example.target_tokens) + [eos_id]
    acts = gather(prefix, indices)
    logits, _ = model.forward(inp, tgt, prefix=acts, bos_id=bos_id)
    # squared gradients are sign-invariant, so differentiate T * CE directly
    loglik_neg = ad.scale(ad.cross_entropy(logits, tgt), float(len(tgt)))
    gm = ad.backward(loglik_neg, params=[prefix.rows])
    acc.add_gradient(gm.get(prefix.rows), sample_id=sample_id)
    return acc


def finalize(acc: FisherAccumulator, task_id: int) -> FisherReport:
    """Score per row: sum of that row's squared gradients / (p * q)."""
    if acc.count == 0:
        raise EmptyDataError("cannot finalize Fisher scores without samples")
    denom = float(acc.params_per_row * acc.count)
    return FisherReport(task_id=task_id, scores=acc.sum_sq.sum(axis=1) / denom)


def export_reports_csv(reports, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["task_id", "row_index", "score"])
        for report in reports:
            for i, s in enumerate(report.scores):
                writer.writerow([report.task_id, i, repr(float(s))])
