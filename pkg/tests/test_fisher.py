import csv
import math

import numpy as np
import pytest

from prefixmerge import autodiff as ad
from prefixmerge import fisher as fi


def logistic_loglik_grad(theta, x, y):
    """Autodiff gradient of log p(y | x; theta) for p = sigmoid(theta * x),
    expressed as two-class cross entropy with logits [0, theta*x]."""
    th = ad.Tensor([[theta]], requires_grad=True)
    z = ad.matmul(ad.Tensor([[x]]), th)
    logits = ad.concat([ad.Tensor([[0.0]]), z], axis=1)
    nll = ad.cross_entropy(logits, [y])
    gm = ad.backward(nll, params=[th])
    return -gm.get(th)[0, 0]  # d loglik / d theta


def test_logistic_closed_form_single_sample():
    theta, x, y = 0.7, 1.3, 1
    g = logistic_loglik_grad(theta, x, y)
    sigma = 1.0 / (1.0 + math.exp(-theta * x))
    closed = x * (y - sigma)
    assert abs(g - closed) < 1e-12
    acc = fi.FisherAccumulator(n_rows=1, params_per_row=1)
    acc.add_gradient(np.array([[g]]))
    report = fi.finalize(acc, task_id=0)
    assert abs(report.scores[0] - closed ** 2) < 1e-10


def test_zero_gradient_sample_leaves_sums_unchanged():
    acc = fi.FisherAccumulator(n_rows=3, params_per_row=2)
    acc.add_gradient(np.zeros((3, 2)))
    assert not acc.sum_sq.any()
    assert acc.count == 1


def test_duplicating_samples_keeps_scores_fixed():
    rng = np.random.default_rng(0)
    g = rng.normal(size=(4, 3))
    once = fi.FisherAccumulator(4, 3)
    once.add_gradient(g)
    twice = fi.FisherAccumulator(4, 3)
    twice.add_gradient(g)
    twice.add_gradient(g)
    a = fi.finalize(once, 0).scores
    b = fi.finalize(twice, 0).scores
    assert np.allclose(a, b, atol=1e-15)


def test_finalize_arithmetic_by_hand():
    # p=2 params, q=3 samples, row sums of squares [6, 12] -> F = 18/6 = 3
    acc = fi.FisherAccumulator(n_rows=1, params_per_row=2)
    acc.add_gradient(np.array([[1.0, 2.0]]))
    acc.add_gradient(np.array([[1.0, 2.0]]))
    acc.add_gradient(np.array([[2.0, 2.0]]))
    assert np.allclose(acc.sum_sq, [[6.0, 12.0]])
    report = fi.finalize(acc, task_id=7)
    assert report.scores[0] == 3.0
    assert report.task_id == 7


def test_scaling_gradients_scales_scores_quadratically():
    rng = np.random.default_rng(1)
    grads = [rng.normal(size=(5, 2)) for _ in range(4)]
    base = fi.FisherAccumulator(5, 2)
    scaled = fi.FisherAccumulator(5, 2)
    c = 3.0
    for g in grads:
        base.add_gradient(g)
        scaled.add_gradient(c * g)
    fb = fi.finalize(base, 0).scores
    fs = fi.finalize(scaled, 0).scores
    assert np.allclose(fs, c * c * fb, rtol=1e-12)
    assert np.array_equal(np.argsort(fb), np.argsort(fs))
    assert fi.finalize(base, 0).top_indices(3) == \
        fi.finalize(scaled, 0).top_indices(3)


def test_sample_order_insensitive_to_1e12():
    rng = np.random.default_rng(2)
    grads = [rng.normal(size=(3, 4)) * 10.0 ** rng.integers(-3, 4)
             for _ in range(60)]
    fwd = fi.FisherAccumulator(3, 4)
    rev = fi.FisherAccumulator(3, 4)
    for g in grads:
        fwd.add_gradient(g)
    for g in reversed(grads):
        rev.add_gradient(g)
    a = fi.finalize(fwd, 0).scores
    b = fi.finalize(rev, 0).scores
    assert np.abs(a - b).max() <= 1e-12 * np.abs(a).max()


def test_scores_nonnegative_and_zero_iff_untouched():
    acc = fi.FisherAccumulator(4, 2)
    g = np.zeros((4, 2))
    g[1] = [0.5, -0.5]
    acc.add_gradient(g)
    scores = fi.finalize(acc, 0).scores
    assert (scores >= 0).all()
    assert scores[1] > 0
    assert scores[0] == scores[2] == scores[3] == 0.0


def test_non_finite_gradient_names_sample():
    acc = fi.FisherAccumulator(2, 2)
    bad = np.array([[1.0, np.nan], [0.0, 0.0]])
    with pytest.raises(ad.NumericError, match="sample-17"):
        acc.add_gradient(bad, sample_id="sample-17")


def test_finalize_requires_samples():
    with pytest.raises(fi.EmptyDataError):
        fi.finalize(fi.FisherAccumulator(2, 2), 0)


def test_accumulate_through_model_hits_only_gathered_rows():
    from prefixmerge.model import EncoderDecoder, ModelConfig
    from prefixmerge.prefix import ManualDesign, PrefixMatrix
    from prefixmerge.tasks import Example

    cfg = ModelConfig(n_layers=1, n_heads=2, d_model=8, d_ff=12,
                      vocab_size=16, max_src_len=8, max_tgt_len=6)
    model = EncoderDecoder(cfg, seed=0)
    model.set_trainable(False)
    prefix = PrefixMatrix(ManualDesign(2, 1, 2), cfg.n_layers, cfg.d_model,
                          seed=1)
    acc = fi.FisherAccumulator(prefix.total_rows, prefix.row_dim)
    ex = Example(input_tokens=[3, 8, 9], target_tokens=[10, 11], prompt_len=1)
    fi.accumulate(acc, model, prefix, [0, 1, 2], ex, sample_id=0)
    report = fi.finalize(acc, 0)
    assert report.scores[0] > 0 and report.scores[2] > 0
    assert report.scores[3] == 0.0  # row 3 was not gathered
    assert acc.count == 1


def test_export_csv_roundtrip(tmp_path):
    reports = [fi.FisherReport(task_id=0, scores=np.array([0.5, 1.5])),
               fi.FisherReport(task_id=1, scores=np.array([2.0, 0.25]))]
    path = tmp_path / "fisher.csv"
    fi.export_reports_csv(reports, path)
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 4
    assert rows[0] == {"task_id": "0", "row_index": "0", "score": "0.5"}
    assert float(rows[3]["score"]) == 0.25
