"""Two-stage training: merge task knowledge into a prefix on auxiliary
tasks (backbone frozen), then transfer the merged prefix to a low-data
target task; plus full fine-tuning variants and multi-seed reporting.

Batches mix tasks equally: each task contributes floor(batch/n) examples
and the remainder rotates across tasks, so per-epoch task counts differ by
at most the task count. Every example routes through its own task's prefix
index map and prompt.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import fisher as fi
from .evaluation import export_metrics, score_dataset
from .model import CompatibilityError, prefix_row_dim
from .prefix import (ManualDesign, SelfAdaptiveDesign, apply_selection,
                     gather, merge_for_target)
from .tasks import BOS_ID, EOS_ID


class ConfigError(ValueError):
    """Invalid or inconsistent training configuration."""


class DivergenceError(ArithmeticError):
    """Training loss became non-finite; the seed is abandoned."""


@dataclass
class TrainConfig:
    learning_rate: float = 5e-5   # prefix-based default; fine-tuning uses 2e-5
    batch_size: int = None        # None: 48 for merging, min(16, data) for transfer
    steps: int = 100
    seed: int = 0
    stage: str = "merge_manual"
    trainable_scope: str = "prefix_only"  # or "all"
    no_prefix: bool = False
    no_prompt: bool = False
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    decode_max_len: int = 8
    decode_min_len: int = 1
    eos_id: int = EOS_ID
    bos_id: int = BOS_ID

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, "
                              f"got {self.learning_rate}")
        if self.trainable_scope not in ("prefix_only", "all"):
            raise ConfigError(f"unknown trainable_scope "
                              f"{self.trainable_scope!r}")
        if self.stage not in ("merge_manual", "merge_self_adaptive",
                              "transfer", "fine_tune"):
            raise ConfigError(f"unknown stage {self.stage!r}")


FINE_TUNE_LR = 2e-5
MERGE_BATCH_DEFAULT = 48
TRANSFER_BATCH_DEFAULT = 16


# ---------------------------------------------------------------------------
# optimizer


def optimizer_step(params, grads, state, lr, beta1=0.9, beta2=0.999,
                   eps=1e-8, weight_decay=0.01):
    """Decoupled-weight-decay Adam with bias correction; mutates params
    and state in place. Decay touches only the listed (trainable) params."""
    if lr <= 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    for p in params:
        g = grads.get(p)
        if g is None:
            g = np.zeros_like(p.data)
        st = state.get(id(p))
        if st is None:
            st = {"m": np.zeros_like(p.data), "v": np.zeros_like(p.data),
                  "t": 0}
            state[id(p)] = st
        st["t"] += 1
        st["m"] = beta1 * st["m"] + (1 - beta1) * g
        st["v"] = beta2 * st["v"] + (1 - beta2) * g * g
        m_hat = st["m"] / (1 - beta1 ** st["t"])
        v_hat = st["v"] / (1 - beta2 ** st["t"])
        p.data = p.data - lr * (m_hat / (np.sqrt(v_hat) + eps)
                                + weight_decay * p.data)


class AdamW:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8,
                 weight_decay=0.01):
        if lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {lr}")
        self.params = list(params)
        self.hyper = dict(lr=lr, beta1=beta1, beta2=beta2, eps=eps,
                          weight_decay=weight_decay)
        self.state = {}

    def step(self, grads):
        optimizer_step(self.params, grads, self.state, **self.hyper)


# ---------------------------------------------------------------------------
# data streaming


class _TaskStream:
    """Shuffled pass over one task's examples; reshuffles per epoch."""

    def __init__(self, examples, seed):
        if not examples:
            raise ConfigError("a task has an empty dataset")
        self.examples = list(examples)
        self.rng = np.random.default_rng(seed)
        self.order = self.rng.permutation(len(self.examples))
        self.pos = 0
        self.epochs = 0

    def take(self, k):
        out = []
        while len(out) < k:
            out.append(self.examples[self.order[self.pos]])
            self.pos += 1
            if self.pos == len(self.order):
                self.epochs += 1
                self.order = self.rng.permutation(len(self.examples))
                self.pos = 0
        return out


def _batch_counts(batch_size, n_tasks, step):
    base = batch_size // n_tasks
    counts = [base] * n_tasks
    rem = batch_size - base * n_tasks
    for i in range(rem):
        counts[(step * rem + i) % n_tasks] += 1
    return counts


# ---------------------------------------------------------------------------
# core loop


def _trainable_params(model, prefix, cfg):
    if cfg.trainable_scope == "prefix_only":
        model.set_trainable(False)
        params = []
    else:
        model.set_trainable(True)
        params = list(model.parameters().values())
    if prefix is not None and not cfg.no_prefix:
        prefix.rows.requires_grad = True
        params.append(prefix.rows)
    return params


def _example_loss(model, ex, acts, cfg):
    inp = ex.input_tokens[ex.prompt_len:] if cfg.no_prompt else ex.input_tokens
    tgt = list(ex.target_tokens) + [cfg.eos_id]
    logits, _ = model.forward(inp, tgt, prefix=acts, bos_id=cfg.bos_id)
    return ad.cross_entropy(logits, tgt)


def _mixed_train_loop(model, prefix, task_examples, cfg, steps=None,
                      batch_size=None, until_epochs=None, grad_hook=None):
    """Shared engine for merging and transfer. Runs `steps` steps, or until
    every task stream has completed `until_epochs` full passes."""
    n = len(task_examples)
    batch = batch_size if batch_size is not None else \
        (cfg.batch_size if cfg.batch_size is not None else MERGE_BATCH_DEFAULT)
    if batch < n:
        raise ConfigError(f"batch size {batch} smaller than task count {n}")
    streams = [_TaskStream(exs, seed=np.random.default_rng([cfg.seed, t])
                           .integers(2 ** 63)) for t, exs in
               enumerate(task_examples)]
    params = _trainable_params(model, prefix, cfg)
    opt = AdamW(params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps,
                cfg.weight_decay) if params else None
    history = []
    step = 0
    while True:
        if steps is not None and step >= steps:
            break
        if until_epochs is not None and \
                all(s.epochs >= until_epochs for s in streams):
            break
        counts = _batch_counts(batch, n, step)
        acts = {}
        if prefix is not None and not cfg.no_prefix:
            for t in range(n):
                if counts[t]:
                    acts[t] = gather(prefix, prefix.task_index_maps[t])
        losses = []
        for t in range(n):
            for ex in streams[t].take(counts[t]):
                losses.append(_example_loss(model, ex, acts.get(t), cfg))
        loss = ad.add_n(losses)
        value = float(loss.data)
        if not math.isfinite(value):
            raise DivergenceError(f"non-finite loss at step {step}")
        if opt is not None:
            gm = ad.backward(loss, params=params)
            if grad_hook is not None:
                grad_hook(step, gm)
            opt.step(gm)
        history.append(value)
        step += 1
    return history


# ---------------------------------------------------------------------------
# stages


def merge_train(model, prefix, task_examples, cfg, steps=None):
    """Mixed-task prefix training with the backbone frozen."""
    if not isinstance(prefix.design, ManualDesign):
        raise ConfigError("merge_train requires a manual prefix design")
    if cfg.trainable_scope != "prefix_only":
        raise ConfigError("merge_train trains the prefix only; use fine_tune "
                          "for trainable-backbone variants")
    return _mixed_train_loop(model, prefix, task_examples, cfg,
                             steps=steps if steps is not None else cfg.steps)


def self_adaptive_train(model, prefix, task_examples, cfg, steps=None):
    """Warm up fully shared, score rows per task, keep each task's best
    rows, then keep training on the selected maps.

    Phases: (A) one full pass per task with every row shared; (B) one
    measurement-only scoring pass per task over its full data; (C) row
    selection and masking; (D) continued mixed training. Returns
    (loss_history, fisher_reports)."""
    design = prefix.design
    if not isinstance(design, SelfAdaptiveDesign):
        raise ConfigError("self_adaptive_train requires a self-adaptive design")
    if cfg.trainable_scope != "prefix_only":
        raise ConfigError("self-adaptive merging trains the prefix only")

    history = _mixed_train_loop(model, prefix, task_examples, cfg,
                                until_epochs=1)

    reports = []
    for t, examples in enumerate(task_examples):
        acc = fi.FisherAccumulator(prefix.total_rows, prefix.row_dim)
        indices = prefix.task_index_maps[t]
        for i, ex in enumerate(examples):
            fi.accumulate(acc, model, prefix, indices, ex,
                          sample_id=(t, i), bos_id=cfg.bos_id,
                          eos_id=cfg.eos_id, no_prompt=cfg.no_prompt)
        reports.append(fi.finalize(acc, task_id=t))

    apply_selection(prefix, reports, design.top_n)

    history += _mixed_train_loop(model, prefix, task_examples, cfg,
                                 steps=steps if steps is not None else cfg.steps)
    return history, reports


def transfer(model, prefix, train_examples, test_examples, cfg, steps=None):
    """Few-shot prefix tuning on the target task from a merged (or fresh)
    prefix; backbone stays frozen. Returns (metrics, loss_history)."""
    if cfg.trainable_scope != "prefix_only":
        raise ConfigError("transfer trains the prefix only; use fine_tune "
                          "for trainable-backbone variants")
    if prefix is not None and not cfg.no_prefix:
        ensure_compatible(prefix, model.config)
        target_map = merge_for_target(prefix)
        work = _TargetView(prefix, target_map)
    else:
        work = None
    batch = cfg.batch_size if cfg.batch_size is not None else \
        min(TRANSFER_BATCH_DEFAULT, len(train_examples))
    history = _mixed_train_loop(model, work, [train_examples], cfg,
                                steps=steps if steps is not None else cfg.steps,
                                batch_size=min(batch, len(train_examples)))
    metrics = evaluate(model, work, test_examples, cfg)
    for k, v in metrics.items():
        if isinstance(v, float) and not math.isfinite(v):
            raise DivergenceError(f"non-finite metric {k}")
    return metrics, history


class _TargetView:
    """Prefix facade whose single task map is the merged target index list."""

    def __init__(self, prefix, target_map):
        self._prefix = prefix
        self.rows = prefix.rows
        self.design = prefix.design
        self.task_index_maps = [list(target_map)]
        self.active_mask = prefix.active_mask
        self.total_rows = prefix.total_rows
        self.n_layers = prefix.n_layers
        self.d_model = prefix.d_model
        self.row_dim = prefix.row_dim


def evaluate(model, prefix_view, test_examples, cfg):
    """Greedy decode + ROUGE on held-out data, with gradients disabled."""
    acts = None
    restore = None
    if prefix_view is not None and not cfg.no_prefix:
        restore = prefix_view.rows.requires_grad
        prefix_view.rows.requires_grad = False
        acts = gather(prefix_view, prefix_view.task_index_maps[0])
    try:
        return score_dataset(model, acts, test_examples,
                             max_len=cfg.decode_max_len,
                             min_len=cfg.decode_min_len, eos_id=cfg.eos_id,
                             bos_id=cfg.bos_id, no_prompt=cfg.no_prompt)
    finally:
        if restore is not None:
            prefix_view.rows.requires_grad = restore


def fine_tune(model, prefix, task_examples, cfg, steps=None):
    """Same data routing as merging/transfer but with the backbone
    trainable (and the prefix too, when present)."""
    if cfg.trainable_scope != "all":
        raise ConfigError("fine_tune requires trainable_scope='all'")
    work = prefix
    if prefix is not None and not cfg.no_prefix and len(task_examples) == 1:
        work = _TargetView(prefix, merge_for_target(prefix))
    batch = cfg.batch_size
    if batch is None:
        batch = MERGE_BATCH_DEFAULT if len(task_examples) > 1 else \
            min(TRANSFER_BATCH_DEFAULT, len(task_examples[0]))
    return _mixed_train_loop(model, work, task_examples, cfg,
                             steps=steps if steps is not None else cfg.steps,
                             batch_size=min(batch, sum(map(len, task_examples))))


def run_two_stage(model, prefix, aux_examples, target_train, target_test,
                  combo, stage1_cfg, stage2_cfg):
    """One of the four stage combinations: 'prefix+prefix', 'prefix+fine',
    'fine+prefix', 'fine+fine'. Returns (metrics, history1, history2)."""
    s1, s2 = combo.split("+")
    if s1 == "prefix":
        h1 = merge_train(model, prefix, aux_examples, stage1_cfg)
    elif s1 == "fine":
        h1 = fine_tune(model, prefix, aux_examples, stage1_cfg)
    else:
        raise ConfigError(f"unknown stage-1 mode {s1!r}")
    if s2 == "prefix":
        metrics, h2 = transfer(model, prefix, target_train, target_test,
                               stage2_cfg)
    elif s2 == "fine":
        h2 = fine_tune(model, prefix, [target_train], stage2_cfg)
        view = None
        if prefix is not None and not stage2_cfg.no_prefix:
            view = _TargetView(prefix, merge_for_target(prefix))
        metrics = evaluate(model, view, target_test, stage2_cfg)
    else:
        raise ConfigError(f"unknown stage-2 mode {s2!r}")
    return metrics, h1, h2


def ensure_compatible(prefix, config) -> None:
    expected = prefix_row_dim(config)
    if prefix.row_dim != expected or prefix.n_layers != config.n_layers \
            or prefix.d_model != config.d_model:
        raise CompatibilityError(
            f"prefix dims (layers={prefix.n_layers}, d_model="
            f"{prefix.d_model}, row_dim={prefix.row_dim}) do not match the "
            f"model config (layers={config.n_layers}, d_model="
            f"{config.d_model}, row_dim={expected})")


# ---------------------------------------------------------------------------
# multi-seed reporting


@dataclass
class RunReport:
    per_seed: dict
    mean: dict
    std: dict
    excluded: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({"per_seed": {str(k): v for k, v in
                                        self.per_seed.items()},
                           "mean": self.mean, "std": self.std,
                           "excluded": self.excluded}, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunReport":
        raw = json.loads(text)
        return cls(per_seed={int(k): v for k, v in raw["per_seed"].items()},
                   mean=raw["mean"], std=raw["std"],
                   excluded=raw["excluded"])


def multi_seed_report(run_fn, seeds) -> RunReport:
    """Run `run_fn(seed) -> metrics dict` per seed; report per-metric mean
    and population standard deviation. Diverging seeds are excluded and
    flagged rather than failing the report."""
    seeds = list(seeds)
    if len(seeds) < 2:
        raise ConfigError(f"need at least two seeds, got {len(seeds)}")
    per_seed = {}
    excluded = []
    for seed in seeds:
        try:
            metrics = run_fn(seed)
        except DivergenceError:
            excluded.append(seed)
            continue
        finite = all(math.isfinite(v) for v in metrics.values()
                     if isinstance(v, (int, float)))
        if not finite:
            excluded.append(seed)
            continue
        per_seed[seed] = metrics
    keys = sorted({k for m in per_seed.values() for k in m
                   if isinstance(m[k], (int, float))})
    mean, std = {}, {}
    for k in keys:
        vals = np.array([per_seed[s][k] for s in per_seed if k in per_seed[s]],
                        dtype=np.float64)
        mean[k] = float(vals.mean())
        std[k] = float(vals.std(ddof=0))
    return RunReport(per_seed=per_seed, mean=mean, std=std, excluded=excluded)


# ---------------------------------------------------------------------------
# run artifacts


def save_loss_csv(history, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss"])
        for i, v in enumerate(history):
            writer.writerow([i, repr(float(v))])


def save_run_artifacts(out_dir, prefix=None, metrics=None, history=None,
                       model=None) -> None:
    from .prefix import save_prefix
    os.makedirs(out_dir, exist_ok=True)
    if prefix is not None:
        save_prefix(prefix, os.path.join(out_dir, "prefix.ckpt"))
    if model is not None:
        model.save(os.path.join(out_dir, "model.ckpt"))
    if metrics is not None:
        export_metrics(metrics, os.path.join(out_dir, "metrics.json"))
    if history is not None:
        save_loss_csv(history, os.path.join(out_dir, "loss.csv"))
