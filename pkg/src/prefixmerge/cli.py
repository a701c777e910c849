"""Umbrella command line: merge-train, adapt, transfer, eval, viz,
leakage-check, grad-check.

Every run-producing command is driven by an INI config (sections [model],
[data], [prefix], [train], [decode]) plus repeatable `--set section.key=value`
overrides. Failures exit nonzero with a one-line JSON error on stderr.
"""

from __future__ import annotations

import argparse
import configparser
import json
import os
import sys

import numpy as np

from . import autodiff as ad
from . import fisher as fi
from . import tasks as tk
from . import training as tr
from .evaluation import attention_profile, export_metrics, export_profile
from .model import EncoderDecoder, ModelConfig
from .prefix import (ManualDesign, PrefixMatrix, SelfAdaptiveDesign,
                     load_prefix, merge_for_target)


DEFAULTS = {
    "model": {"n_layers": "2", "n_heads": "8", "d_model": "64",
              "d_ff": "128", "vocab_size": "200", "max_src_len": "64",
              "max_tgt_len": "16", "seed": "0"},
    "data": {"seed": "0", "aux_tasks": "sum,qa", "target_task": "qfs",
             "train_size": "2000", "target_train_size": "32",
             "test_size": "200"},
    "prefix": {"design": "manual", "shared_total": "20", "unique_total": "10",
               "init_len": "40", "top_n": "25", "seed": "1"},
    "train": {"learning_rate": "5e-3", "batch_size": "16", "steps": "300",
              "seed": "0", "no_prefix": "false", "no_prompt": "false",
              "transfer_steps": "300", "transfer_learning_rate": "",
              "transfer_batch_size": ""},
    "decode": {"max_len": "8", "min_len": "1"},
}


def load_config(path=None, overrides=()):
    cp = configparser.ConfigParser()
    cp.read_dict(DEFAULTS)
    if path:
        if not os.path.exists(path):
            raise FileNotFoundError(f"config file not found: {path}")
        cp.read(path)
    for item in overrides:
        key, _, value = item.partition("=")
        section, _, option = key.partition(".")
        if not (section and option and _):
            raise ValueError(f"bad --set {item!r}; expected section.key=value")
        if not cp.has_section(section):
            cp.add_section(section)
        cp.set(section, option, value)
    return cp


def build_model(cp) -> EncoderDecoder:
    m = cp["model"]
    config = ModelConfig(n_layers=m.getint("n_layers"),
                         n_heads=m.getint("n_heads"),
                         d_model=m.getint("d_model"),
                         d_ff=m.getint("d_ff"),
                         vocab_size=m.getint("vocab_size"),
                         max_src_len=m.getint("max_src_len"),
                         max_tgt_len=m.getint("max_tgt_len"))
    return EncoderDecoder(config, seed=m.getint("seed"))


def build_prefix(cp, model) -> PrefixMatrix:
    p = cp["prefix"]
    aux = [s.strip() for s in cp["data"]["aux_tasks"].split(",") if s.strip()]
    n_tasks = len(aux)
    if p["design"] == "manual":
        design = ManualDesign.from_totals(p.getint("unique_total"),
                                          p.getint("shared_total"), n_tasks)
    elif p["design"] == "self_adaptive":
        design = SelfAdaptiveDesign(p.getint("init_len"), p.getint("top_n"),
                                    n_tasks)
    else:
        raise ValueError(f"unknown prefix design {p['design']!r}")
    return PrefixMatrix(design, model.config.n_layers, model.config.d_model,
                        seed=p.getint("seed"))


def build_datasets(cp):
    d = cp["data"]
    sizing = {}
    for key in ("min_len", "max_len", "span_min", "span_max", "k",
                "answer_len", "min_segments", "max_segments"):
        if cp.has_option("data", key):
            sizing[key] = d.getint(key)
    overrides = {name: dict(sizing) for name in ("sum", "qa", "copy", "qfs")} \
        if sizing else {}
    suite = tk.default_task_suite(vocab_size=cp["model"].getint("vocab_size"),
                                  **overrides)
    aux_names = [s.strip() for s in d["aux_tasks"].split(",") if s.strip()]
    seed = d.getint("seed")
    aux = []
    for i, name in enumerate(aux_names):
        aux.append(tk.build_examples(suite[name], d.getint("train_size"),
                                     seed=seed * 1000 + i))
    target = suite[d["target_task"]]
    target_train = tk.build_examples(target, d.getint("target_train_size"),
                                     seed=seed * 1000 + 100)
    target_test = tk.build_examples(target, d.getint("test_size"),
                                    seed=seed * 1000 + 200)
    return aux_names, aux, target_train, target_test


def train_config(cp, stage) -> tr.TrainConfig:
    t = cp["train"]
    dec = cp["decode"]
    if stage in ("transfer", "fine_tune_target"):
        lr = t.get("transfer_learning_rate") or t["learning_rate"]
        batch = t.get("transfer_batch_size") or ""
        steps = t.getint("transfer_steps")
    else:
        lr = t["learning_rate"]
        batch = t.get("batch_size") or ""
        steps = t.getint("steps")
    return tr.TrainConfig(
        learning_rate=float(lr),
        batch_size=int(batch) if batch else None,
        steps=steps,
        seed=t.getint("seed"),
        stage="transfer" if stage.startswith("transfer") else stage,
        no_prefix=t.getboolean("no_prefix"),
        no_prompt=t.getboolean("no_prompt"),
        decode_max_len=dec.getint("max_len"),
        decode_min_len=dec.getint("min_len"),
    )


# ---------------------------------------------------------------------------
# subcommands


def cmd_merge_train(args):
    cp = load_config(args.config, args.set or ())
    model = build_model(cp)
    prefix = build_prefix(cp, model)
    _, aux, _, _ = build_datasets(cp)
    cfg = train_config(cp, "merge_manual")
    history = tr.merge_train(model, prefix, aux, cfg)
    tr.save_run_artifacts(args.out, prefix=prefix, history=history,
                          model=model)
    print(f"merge-train: {len(history)} steps, final loss "
          f"{history[-1]:.4f}, artifacts in {args.out}")
    return 0


def cmd_adapt(args):
    cp = load_config(args.config, args.set or ())
    if cp["prefix"]["design"] != "self_adaptive":
        cp.set("prefix", "design", "self_adaptive")
    model = build_model(cp)
    prefix = build_prefix(cp, model)
    _, aux, _, _ = build_datasets(cp)
    cfg = train_config(cp, "merge_self_adaptive")
    history, reports = tr.self_adaptive_train(model, prefix, aux, cfg)
    tr.save_run_artifacts(args.out, prefix=prefix, history=history,
                          model=model)
    fi.export_reports_csv(reports, os.path.join(args.out, "fisher.csv"))
    active = int(prefix.active_mask.sum())
    print(f"adapt: {len(history)} steps, {active}/{prefix.total_rows} rows "
          f"active, artifacts in {args.out}")
    return 0


def _load_stage1(args, cp):
    model_path = args.model or os.path.join(args.stage1, "model.ckpt")
    prefix_path = args.prefix or os.path.join(args.stage1, "prefix.ckpt")
    model = EncoderDecoder.load(model_path)
    prefix = load_prefix(prefix_path)
    tr.ensure_compatible(prefix, model.config)
    return model, prefix


def cmd_transfer(args):
    cp = load_config(args.config, args.set or ())
    cfg = train_config(cp, "transfer")
    if args.random_init:
        model = build_model(cp)
        prefix = build_prefix(cp, model)
    else:
        model, prefix = _load_stage1(args, cp)
    _, _, target_train, target_test = build_datasets(cp)
    metrics, history = tr.transfer(model, prefix, target_train, target_test,
                                   cfg)
    tr.save_run_artifacts(args.out, prefix=prefix, metrics=metrics,
                          history=history)
    print(f"transfer: rouge1_f1 {metrics['rouge1_f1']:.4f}, rouge2_f1 "
          f"{metrics['rouge2_f1']:.4f}, rougeL_f1 {metrics['rougeL_f1']:.4f}"
          f" on {metrics['n_examples']} examples; artifacts in {args.out}")
    return 0


def cmd_eval(args):
    cp = load_config(args.config, args.set or ())
    model, prefix = _load_stage1(args, cp)
    cfg = train_config(cp, "transfer")
    _, _, _, target_test = build_datasets(cp)
    view = tr._TargetView(prefix, merge_for_target(prefix))
    metrics = tr.evaluate(model, view, target_test, cfg)
    if args.out:
        export_metrics(metrics, args.out)
    print(json.dumps(metrics, sort_keys=True))
    return 0


def cmd_viz(args):
    cp = load_config(args.config, args.set or ())
    model, prefix = _load_stage1(args, cp)
    _, _, _, target_test = build_datasets(cp)
    dec = cp["decode"]
    rng = np.random.default_rng(cp["data"].getint("seed"))
    profiles = attention_profile(model, prefix, target_test,
                                 n_samples=args.samples, rng=rng,
                                 max_len=dec.getint("max_len"),
                                 min_len=dec.getint("min_len"))
    export_profile(profiles, args.out)
    print(f"viz: wrote {sum(len(p.row_indices) for p in profiles.values())} "
          f"rows to {args.out}")
    return 0


def _read_targets(path):
    if str(path).endswith(".jsonl"):
        targets = []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    targets.append(json.loads(line)["target"])
                except (json.JSONDecodeError, KeyError) as exc:
                    raise tk.DatasetError(f"{path}:{lineno}: {exc}") from exc
        return targets
    with open(path, encoding="utf-8") as fh:
        return [line.rstrip("\n") for line in fh if line.strip()]


def cmd_leakage_check(args):
    report = tk.leakage_check(_read_targets(args.train),
                              _read_targets(args.test),
                              max_word_diff=args.threshold)
    text = report.to_json()
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    print(text)
    return 0


def cmd_grad_check(args):
    from .prefix import gather
    rng = np.random.default_rng(args.seed)
    failures = 0
    for i in range(args.configs):
        cfg = ModelConfig(n_layers=int(rng.integers(1, 3)),
                          n_heads=int(rng.choice([1, 2])),
                          d_model=int(rng.choice([4, 6, 8])),
                          d_ff=int(rng.choice([6, 8])),
                          vocab_size=int(rng.integers(8, 14)),
                          max_src_len=8, max_tgt_len=6)
        model = EncoderDecoder(cfg, seed=int(rng.integers(1 << 30)))
        design = ManualDesign(1, 1, 1)
        prefix = PrefixMatrix(design, cfg.n_layers, cfg.d_model,
                              seed=int(rng.integers(1 << 30)))
        src = list(rng.integers(2, cfg.vocab_size, size=3))
        tgt = list(rng.integers(2, cfg.vocab_size, size=2))

        def loss_fn():
            logits, _ = model.forward(src, tgt, prefix=gather(prefix, [0, 1]))
            return ad.cross_entropy(logits, tgt)

        bad = 0
        gm = ad.backward(loss_fn(), params=[prefix.rows])
        for name, p in list(model.parameters().items()) + [("prefix",
                                                            prefix.rows)]:
            fd = ad.finite_diff_grad(lambda _t: loss_fn(), p)
            an = gm.get(p)
            if an is None:
                an = np.zeros_like(fd)
            err = np.abs(an - fd) - np.maximum(
                1e-5 * np.maximum(np.abs(an), np.abs(fd)), 1e-8)
            if err.size and err.max() > 0:
                bad += 1
        status = "ok" if bad == 0 else f"FAIL ({bad} tensors)"
        print(f"config {i + 1}/{args.configs}: {status}")
        failures += bad > 0
    print(f"grad-check: {args.configs - failures}/{args.configs} configs passed")
    return 1 if failures else 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="prefixmerge",
        description="Train, merge, transfer, and analyze task prefixes on a "
                    "small frozen encoder-decoder transformer.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="INI config file")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                       help="override a config value")
        if out_required:
            p.add_argument("--out", required=True,
                           help="artifacts output directory")

    p = sub.add_parser("merge-train", help="stage 1 with a manual design")
    common(p)
    p.set_defaults(func=cmd_merge_train)

    p = sub.add_parser("adapt", help="stage 1 with self-adaptive selection")
    common(p)
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("transfer", help="stage 2 few-shot target training")
    common(p)
    p.add_argument("--stage1", help="stage-1 artifacts directory")
    p.add_argument("--model", help="model checkpoint (overrides --stage1)")
    p.add_argument("--prefix", help="prefix checkpoint (overrides --stage1)")
    p.add_argument("--random-init", action="store_true",
                   help="ignore stage 1 and start from a fresh prefix")
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("eval", help="score a trained prefix on the test set")
    common(p, out_required=False)
    p.add_argument("--stage1", help="artifacts directory to load")
    p.add_argument("--model", help="model checkpoint")
    p.add_argument("--prefix", help="prefix checkpoint")
    p.add_argument("--out", help="optional metrics JSON path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("viz", help="export the prefix-attention profile")
    common(p, out_required=False)
    p.add_argument("--stage1", help="artifacts directory to load")
    p.add_argument("--model", help="model checkpoint")
    p.add_argument("--prefix", help="prefix checkpoint")
    p.add_argument("--samples", type=int, default=100)
    p.add_argument("--out", required=True, help="profile CSV path")
    p.set_defaults(func=cmd_viz)

    p = sub.add_parser("leakage-check",
                       help="near-duplicate scan between target sets")
    p.add_argument("--train", required=True, help=".jsonl or plain text")
    p.add_argument("--test", required=True, help=".jsonl or plain text")
    p.add_argument("--threshold", type=int, default=2,
                   help="word edit distance below which a pair leaks")
    p.add_argument("--out", help="optional report JSON path")
    p.set_defaults(func=cmd_leakage_check)

    p = sub.add_parser("grad-check",
                       help="finite-difference check on random toy models")
    p.add_argument("--configs", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_grad_check)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - boundary: report and exit
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
