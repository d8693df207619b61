"""Command-line driver: one pipeline per process.

    apexlm train --stages 3 --out run.ckpt --csv metrics.csv
    apexlm eval run.ckpt
    apexlm mask-eval run.ckpt --which top --fraction 0.1

Corpora are given as a file path, ``sample`` (built-in Markov text) or
``synthetic:KIND[:BYTES]``. ``APEX_THREADS`` caps BLAS threads (default 1).
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import math
import os
import sys

import numpy as np
from threadpoolctl import threadpool_limits

from ..analysis import RANK_FIELDS, rank_report
from ..assessment import (PROBE_FIELDS, STD_FIELDS, StateError, mask_fraction, probe_rows,
                          rows_to_csv, select_sets, std_rows)
from ..expansion import fuse_all
from ..model import ConfigError, DataError, ModelConfig, init_params, sequence_nll
from ..staging import METRIC_FIELDS, StagePlan, TrainData, pre_assess, run_training
from .checkpoint import FormatError, load_checkpoint, save_checkpoint
from .data import Corpus, synthetic_corpus, tokenize_bytes, windows

log = logging.getLogger("apexlm")

SAMPLE_BYTES = 1 << 18


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# inputs
# ---------------------------------------------------------------------------

def load_corpus(source: str, seed: int = 0) -> Corpus:
    if source == "sample":
        return synthetic_corpus("markov", SAMPLE_BYTES, seed=0)
    if source.startswith("synthetic:"):
        parts = source.split(":")
        kind = parts[1]
        n = int(parts[2]) if len(parts) > 2 else SAMPLE_BYTES
        return synthetic_corpus(kind, n, seed=seed)
    if not os.path.isfile(source):
        raise UsageError(f"corpus file not found: {source}")
    with open(source, "rb") as fh:
        return tokenize_bytes(fh.read())


def read_config(path: str) -> dict[str, str]:
    """``key=value`` lines; ``#`` starts a comment."""
    if not os.path.isfile(path):
        raise UsageError(f"config file not found: {path}")
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key=value")
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def split_config(conf: dict[str, str]) -> tuple[dict, dict]:
    """Route keys to the model config or the stage plan; bare keys are matched by name."""
    model_names = {f.name for f in dataclasses.fields(ModelConfig)}
    plan_names = {f.name for f in dataclasses.fields(StagePlan)}
    model, plan = {}, {}
    for k, v in conf.items():
        if k.startswith("model."):
            key, dest, names = k[6:], model, model_names
        elif k.startswith("plan."):
            key, dest, names = k[5:], plan, plan_names
        elif k in model_names:
            key, dest, names = k, model, model_names
        elif k in plan_names:
            key, dest, names = k, plan, plan_names
        else:
            raise UsageError(f"unknown config key {k!r}")
        if key not in names:
            raise UsageError(f"unknown config key {k!r}")
        dest[key] = v
    return model, plan


def _table(rows: list[dict], fields) -> str:
    def fmt(v):
        if isinstance(v, float):
            return f"{v:.6g}"
        return str(v)

    cells = [[str(f) for f in fields]] + [[fmt(r.get(f, "")) for f in fields] for r in rows]
    widths = [max(len(c[i]) for c in cells) for i in range(len(fields))]
    lines = ["  ".join(c[i].rjust(widths[i]) for i in range(len(fields))) for c in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def _emit(rows: list[dict], fields, csv_path: str | None, out) -> None:
    print(_table(rows, fields), file=out)
    if csv_path:
        _write_text(csv_path, rows_to_csv(rows, fields))


def _write_text(path: str, text: str) -> None:
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _eval_windows(ckpt_plan: StagePlan | None, corpus: Corpus, seq_len: int | None) -> np.ndarray:
    plan = ckpt_plan or StagePlan()
    L = seq_len or plan.seq_len
    _, held = corpus.split(min(plan.eval_tokens, len(corpus) // 10 or 1))
    return windows(held, L)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_train(args, out) -> int:
    model_kw, plan_kw = split_config(read_config(args.config)) if args.config else ({}, {})
    flag_map = {"stages": args.stages, "k_mha": args.k_mha, "k_ffn": args.k_ffn, "mode": args.mode,
                "strategy": args.strategy, "act_regu_lambda": args.act_regu, "seed": args.seed,
                "tokens_per_stage": args.tokens_per_stage, "lr": args.lr}
    plan_kw.update({k: v for k, v in flag_map.items() if v is not None})
    if args.no_expansion:
        plan_kw["expansion"] = False
    if args.seed is not None:
        model_kw["seed"] = args.seed
    cfg = ModelConfig.from_dict(model_kw)
    plan = StagePlan.from_dict(plan_kw)
    corpus = load_corpus(args.corpus, seed=plan.seed)
    result = run_training(cfg, plan, corpus, params=init_params(cfg), keep_live_last=args.keep_live)

    rows = result.metric_rows()
    print(_table(rows, METRIC_FIELDS), file=out)
    for m in result.stages:
        print(f"stage {m.stage}: lr={m.lr:.3g} operators={m.n_operators} op_params={m.operator_params} "
              f"trainable={m.trainable_fraction:.4f} eval_ppl={math.exp(m.eval_loss_post_fuse):.4f}", file=out)
    csv_path = args.csv or f"{args.out}.metrics.csv"
    _write_text(csv_path, rows_to_csv(rows, METRIC_FIELDS))
    save_checkpoint(args.out, result.params, result.bundle, result.ledger, plan,
                    meta={"corpus_digest": corpus.digest})
    print(f"checkpoint: {args.out}\nmetrics: {csv_path}", file=out)
    return 0


def cmd_assess(args, out) -> int:
    if args.checkpoint:
        state = load_checkpoint(args.checkpoint)
        params, plan = state.params, state.plan or StagePlan()
    else:
        cfg = ModelConfig(seed=args.seed)
        params, plan = init_params(cfg), StagePlan(seed=args.seed)
    corpus = load_corpus(args.corpus, seed=plan.seed)
    data = TrainData.from_corpus(corpus, plan)
    ledger = pre_assess(params, data.assessment_samples(args.samples), args.k_mha, args.k_ffn, plan.batch_size)
    _emit(probe_rows(ledger), PROBE_FIELDS, args.csv, out)
    sets = select_sets(ledger, args.k_mha, args.k_ffn, args.strategy, seed=plan.seed)
    for (layer, kind), (p, n) in sorted(sets.sets.items()):
        print(f"layer {layer} {kind}: P={p.tolist()} N={n.tolist()}", file=out)
    return 0


def cmd_eval(args, out) -> int:
    state = load_checkpoint(args.checkpoint)
    corpus = load_corpus(args.corpus, seed=(state.plan or StagePlan()).seed)
    win = _eval_windows(state.plan, corpus, args.seq_len)
    loss = sequence_nll(state.params, win, operators=state.operators)
    rows = [{"checkpoint": args.checkpoint, "live_operators": len(state.operators or []),
             "eval_loss": loss, "eval_ppl": math.exp(loss)}]
    _emit(rows, ("checkpoint", "live_operators", "eval_loss", "eval_ppl"), args.csv, out)
    return 0


def cmd_fuse(args, out) -> int:
    state = load_checkpoint(args.checkpoint)
    if not state.operators or not state.operators.live():
        raise StateError(f"{args.checkpoint} has no live operators to fuse")
    n = len(state.operators.live())
    fuse_all(state.params, state.operators)
    dest = args.out or args.checkpoint
    save_checkpoint(dest, state.params, None, state.ledger, state.plan, state.optimizer, state.meta)
    print(f"fused {n} operators -> {dest}", file=out)
    return 0


def cmd_mask_eval(args, out) -> int:
    state = load_checkpoint(args.checkpoint)
    plan = state.plan or StagePlan()
    corpus = load_corpus(args.corpus, seed=plan.seed)
    params = state.params
    if state.operators is not None and state.operators.live():
        params = params.copy()
        fuse_all(params, state.operators)
    # rank components by their activation on the model being masked
    data = TrainData.from_corpus(corpus, plan)
    ledger = pre_assess(params, data.assessment_samples(args.samples), 0.125, 0.125, plan.batch_size)
    win = _eval_windows(state.plan, corpus, None)
    base = sequence_nll(params, win)
    masked, _ = mask_fraction(params, ledger, args.which, args.fraction, seed=args.seed)
    loss = sequence_nll(masked, win)
    rows = [{"which": args.which, "fraction": args.fraction, "unmasked_loss": base,
             "masked_loss": loss, "delta": loss - base}]
    _emit(rows, ("which", "fraction", "unmasked_loss", "masked_loss", "delta"), args.csv, out)
    return 0


def cmd_rank_report(args, out) -> int:
    history = [(path, load_checkpoint(path).params) for path in args.checkpoints]
    reports = rank_report(history, args.matrices, args.eps_rel)
    rows = [{"checkpoint": r.checkpoint, "layer": r.layer, "matrix": r.matrix, "sigma_max": r.sigma_max,
             "eff_rank": r.eff_rank, "eps_rel": r.eps_rel} for r in reports]
    _emit(rows, RANK_FIELDS, args.csv, out)
    return 0


def cmd_probe_stats(args, out) -> int:
    state = load_checkpoint(args.checkpoint)
    plan = state.plan or StagePlan()
    corpus = load_corpus(args.corpus, seed=plan.seed)
    data = TrainData.from_corpus(corpus, plan)
    ledger = pre_assess(state.params, data.assessment_samples(args.samples), args.k_mha, args.k_ffn,
                        plan.batch_size, operators=state.operators)
    _emit(probe_rows(ledger), PROBE_FIELDS, args.csv, out)
    print(file=out)
    _emit(std_rows(ledger), STD_FIELDS, args.std_csv, out)
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _fraction(text: str) -> float:
    v = float(text)
    if not 0 <= v <= 1:
        raise argparse.ArgumentTypeError(f"{text} is not in [0, 1]")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="apexlm", description="Stage-wise parameter expansion on a toy GLU transformer.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    t = sub.add_parser("train", help="pre-assess, then train stage by stage")
    t.add_argument("--corpus", default="sample")
    t.add_argument("--config", help="key=value file of model.* / plan.* settings")
    t.add_argument("--stages", type=int)
    t.add_argument("--k-mha", type=float)
    t.add_argument("--k-ffn", type=float)
    t.add_argument("--mode", choices=["full", "partial"])
    t.add_argument("--strategy", choices=["rank", "avg", "random"])
    t.add_argument("--act-regu", type=float, metavar="LAMBDA")
    t.add_argument("--no-expansion", action="store_true", help="vanilla baseline")
    t.add_argument("--tokens-per-stage", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--keep-live", action="store_true", help="leave last-stage operators unfused")
    t.add_argument("--out", default="apex.ckpt")
    t.add_argument("--csv", help="metrics CSV (default: OUT.metrics.csv)")
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("assess", help="activation probe report and selected P/N sets")
    a.add_argument("--checkpoint")
    a.add_argument("--corpus", default="sample")
    a.add_argument("--samples", type=int, default=64)
    a.add_argument("--k-mha", type=float, default=0.125)
    a.add_argument("--k-ffn", type=float, default=0.125)
    a.add_argument("--strategy", choices=["rank", "avg", "random"], default="rank")
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--csv")
    a.set_defaults(func=cmd_assess)

    e = sub.add_parser("eval", help="held-out perplexity")
    e.add_argument("checkpoint")
    e.add_argument("--corpus", default="sample")
    e.add_argument("--seq-len", type=int)
    e.add_argument("--csv")
    e.set_defaults(func=cmd_eval)

    f = sub.add_parser("fuse", help="fold live operators into their weights")
    f.add_argument("checkpoint")
    f.add_argument("--out")
    f.set_defaults(func=cmd_fuse)

    m = sub.add_parser("mask-eval", help="loss after zeroing high/low-activation components")
    m.add_argument("checkpoint")
    m.add_argument("--which", choices=["top", "min", "random"], required=True)
    m.add_argument("--fraction", type=_fraction, default=0.1)
    m.add_argument("--corpus", default="sample")
    m.add_argument("--samples", type=int, default=64)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--csv")
    m.set_defaults(func=cmd_mask_eval)

    r = sub.add_parser("rank-report", help="effective rank of weight matrices across checkpoints")
    r.add_argument("checkpoints", nargs="+")
    r.add_argument("--matrices", nargs="+", default=["W_V", "W_O", "W_U", "W_G", "W_D"])
    r.add_argument("--eps-rel", type=float, default=0.01)
    r.add_argument("--csv")
    r.set_defaults(func=cmd_rank_report)

    s = sub.add_parser("probe-stats", help="per-component activation norms and per-module std")
    s.add_argument("checkpoint")
    s.add_argument("--corpus", default="sample")
    s.add_argument("--samples", type=int, default=64)
    s.add_argument("--k-mha", type=float, default=0.125)
    s.add_argument("--k-ffn", type=float, default=0.125)
    s.add_argument("--csv")
    s.add_argument("--std-csv")
    s.set_defaults(func=cmd_probe_stats)
    return p


def main(argv=None, out=None) -> int:
    out = out or sys.stdout
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = int(os.environ.get("APEX_THREADS", "1") or 1)
    try:
        with threadpool_limits(limits=max(1, threads)):
            return args.func(args, out)
    except UsageError as e:
        print(f"apexlm: {e}", file=sys.stderr)
        return 2
    except (ConfigError, DataError, FormatError, StateError, KeyError, IndexError, ValueError, OSError) as e:
        print(f"apexlm: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
