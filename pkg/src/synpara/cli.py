"""Batch command-line front end.

Five subcommands: datagen writes the synthetic corpus, train runs one
(mode, seed) experiment, eval scores a checkpoint on a split, compare
trains a mode grid and prints a Table-1-style summary, gradcheck verifies
autodiff against finite differences on the micro config.

Configuration is a plain key=value file ('#' starts a comment line) merged
with command-line overrides; overrides win, unknown keys are rejected.
Exit codes: 0 success, 1 validation/config error, 2 numeric/runtime error.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import dataclass, fields
from typing import Dict, Optional, Sequence

from . import model as M
from . import trainer as TR
from .checkpoint import load_checkpoint, restore_state, save_state
from .data import (
    DEFAULT_GRAMMAR,
    build_vocab,
    generate_corpus,
    read_corpus,
    read_vocab,
    write_corpus,
    write_vocab,
)
from .errors import ComputeError, ContractError, SynparaError, ValidationError
from .metrics import build_report, format_comparison_table, format_report_kv


@dataclass
class RunConfig:
    """Every tunable knob reachable from a config file or --set override."""

    # model
    l_enc: int = 2
    l_dec: int = 2
    dim_h: int = 32
    n_heads: int = 2
    dim_ff: int = 64
    max_len: int = 64
    prefix_len: int = 8
    # training
    mode: str = "prefix"
    epochs: int = 10
    batch_size: int = 16
    lr: Optional[float] = None  # None -> per-mode default
    clip_norm: float = 1.0
    pel_weight: float = 1.0
    seed: int = 0
    scheduler: str = "linear"
    reparameterize_prefix: bool = False
    eval_every: int = 0
    beam_width: int = 4
    debug_checks: bool = False
    init_scale: float = 0.02
    # data
    n_train: int = 3000
    n_dev: int = 640
    n_test: int = 640

    def model_config(self, vocab_size: int) -> M.ModelConfig:
        return M.ModelConfig(
            l_enc=self.l_enc, l_dec=self.l_dec, dim_h=self.dim_h,
            n_heads=self.n_heads, dim_ff=self.dim_ff, vocab_size=vocab_size,
            max_len=self.max_len, prefix_len=self.prefix_len,
        )

    def train_config(self) -> TR.TrainConfig:
        return TR.TrainConfig(
            mode=self.mode, epochs=self.epochs, batch_size=self.batch_size,
            lr=self.lr, clip_norm=self.clip_norm, pel_weight=self.pel_weight,
            seed=self.seed, scheduler=self.scheduler,
            reparameterize_prefix=self.reparameterize_prefix,
            eval_every=self.eval_every, beam_width=self.beam_width,
            debug_checks=self.debug_checks,
        )


_KEY_TYPES = {f.name: f.type for f in fields(RunConfig)}
_BOOL_WORDS = {"true": True, "false": False}


def _coerce(key: str, text: str):
    kind = _KEY_TYPES[key]
    if kind in ("int", int):
        return int(text)
    if kind in ("float", float, "Optional[float]"):
        return float(text)
    if kind in ("bool", bool):
        word = text.lower()
        if word not in _BOOL_WORDS:
            raise ValidationError(f"{key} expects true or false, got {text!r}")
        return _BOOL_WORDS[word]
    return text


def parse_config_file(path: str) -> Dict[str, str]:
    """key=value per line; blank lines and '#' comment lines ignored."""
    values: Dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValidationError(
                    f"{path}:{lineno}: expected key=value, got {line!r}"
                )
            key, value = line.split("=", 1)
            values[key.strip()] = value.strip()
    return values


def merge_run_config(
    config_path: Optional[str], *override_layers: Dict[str, str]
) -> RunConfig:
    """Defaults, then the config file, then each override layer in order."""
    merged: Dict[str, object] = {}
    layers = []
    if config_path:
        layers.append(parse_config_file(config_path))
    layers.extend(override_layers)
    for layer in layers:
        for key, text in layer.items():
            if key not in _KEY_TYPES:
                raise ValidationError(
                    f"unknown config key {key!r}; known keys: "
                    + ", ".join(sorted(_KEY_TYPES))
                )
            merged[key] = _coerce(key, text)
    return RunConfig(**merged)


def _parse_set_pairs(pairs: Optional[Sequence[str]]) -> Dict[str, str]:
    values: Dict[str, str] = {}
    for pair in pairs or ():
        if "=" not in pair:
            raise ValidationError(f"--set expects key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def _load_data_dir(data_dir: str, splits: Sequence[str]):
    if not os.path.isdir(data_dir):
        raise ValidationError(f"data dir not found: {data_dir}")
    vocab_path = os.path.join(data_dir, "vocab.txt")
    vocab = read_vocab(vocab_path) if os.path.exists(vocab_path) else build_vocab()
    out = [read_corpus(os.path.join(data_dir, f"{s}.tsv")) for s in splits]
    return vocab, out


# ---------------------------------------------------------------------------
# subcommands

def cmd_datagen(args) -> int:
    os.makedirs(args.out_dir, exist_ok=True)
    train, dev, test = generate_corpus(
        seed=args.seed, n_train=args.n_train, n_dev=args.n_dev, n_test=args.n_test
    )
    vocab = build_vocab()
    for name, split in (("train", train), ("dev", dev), ("test", test)):
        path = os.path.join(args.out_dir, f"{name}.tsv")
        write_corpus(split, path)
        print(f"{name}: examples={len(split)} path={path}")
    vocab_path = os.path.join(args.out_dir, "vocab.txt")
    write_vocab(vocab, vocab_path)
    print(f"vocab: tokens={vocab.size} path={vocab_path}")
    print(f"frame capacity={DEFAULT_GRAMMAR.frame_capacity} seed={args.seed}")
    return 0


def cmd_train(args) -> int:
    flag_overrides = {"mode": args.mode}
    if args.seed is not None:
        flag_overrides["seed"] = str(args.seed)
    rc = merge_run_config(args.config, flag_overrides, _parse_set_pairs(args.set))
    vocab, (train_ex, dev_ex) = _load_data_dir(args.data_dir, ("train", "dev"))
    mcfg = rc.model_config(vocab.size)
    tcfg = rc.train_config()

    state = TR.train(
        tcfg, mcfg, train_ex, vocab,
        dev_examples=dev_ex, init_scale=rc.init_scale,
    )
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    save_state(
        args.out, state.weights, state.bank, state.instructor, mode=state.mode,
        extra_meta={"seed": repr(tcfg.seed), "init_scale": repr(rc.init_scale)},
    )
    log_path = args.out + ".log"
    state.log.write(log_path)
    print(f"checkpoint={args.out}")
    print(f"log={log_path} steps={len(state.log.steps)}")

    report = TR.evaluate(
        state.weights, state.bank, state.instructor, state.mode,
        dev_ex, vocab, mcfg, beam_width=tcfg.beam_width,
    )
    print("final dev evaluation:")
    print(format_report_kv(report))
    return 0


def cmd_eval(args) -> int:
    data = load_checkpoint(args.checkpoint)
    weights, bank, instructor, mode = restore_state(data)
    vocab = read_vocab(args.vocab) if args.vocab else build_vocab()
    if vocab.size != data.config.vocab_size:
        raise ValidationError(
            f"vocab has {vocab.size} tokens but checkpoint expects "
            f"{data.config.vocab_size}"
        )
    examples = read_corpus(args.data)
    if args.gold_as_generation:
        # harness mode: score the references against themselves; every
        # metric lands at its perfect value
        generations = [list(ex.tgt) for ex in examples]
        report = build_report(generations, examples, DEFAULT_GRAMMAR)
        label = "gold"
    else:
        report = TR.evaluate(
            weights, bank, instructor, mode, examples, vocab, data.config,
            beam_width=args.beam_width,
        )
        label = mode
    print(format_comparison_table([label], [report]))
    print()
    print(format_report_kv(report))
    return 0


def cmd_compare(args) -> int:
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    if len(modes) < 2:
        raise ContractError("comparison needs at least 2 modes")
    if not seeds:
        raise ValidationError("comparison needs at least 1 seed")
    for mode in modes:
        if mode not in M.MODES:
            raise ValidationError(f"unknown mode {mode!r}")

    base_overrides = _parse_set_pairs(args.set)
    vocab, (train_ex, dev_ex) = _load_data_dir(args.data_dir, ("train", "dev"))

    labels, mean_reports, param_counts = [], [], []
    for mode in modes:
        reports = []
        trainable = None
        for seed in seeds:
            rc = merge_run_config(
                args.config, base_overrides, {"mode": mode, "seed": str(seed)}
            )
            mcfg = rc.model_config(vocab.size)
            state = TR.train(
                rc.train_config(), mcfg, train_ex, vocab, init_scale=rc.init_scale
            )
            reports.append(
                TR.evaluate(
                    state.weights, state.bank, state.instructor, mode,
                    dev_ex, vocab, mcfg, beam_width=rc.beam_width,
                )
            )
            trainable = M.count_params(
                state.weights, state.bank, state.instructor, mode
            ).trainable
        labels.append(mode)
        mean_reports.append(_mean_report(reports))
        param_counts.append(trainable)

    print(f"seeds={','.join(str(s) for s in seeds)} examples={len(dev_ex)}")
    print(format_comparison_table(labels, mean_reports, params=param_counts))
    return 0


def _mean_report(reports):
    from .metrics import MetricsReport

    n = len(reports)
    return MetricsReport(
        bleu=sum(r.bleu for r in reports) / n,
        rouge1=sum(r.rouge1 for r in reports) / n,
        rouge2=sum(r.rouge2 for r in reports) / n,
        rougeL=sum(r.rougeL for r in reports) / n,
        tma=sum(r.tma for r in reports) / n,
        ted3=sum(r.ted3 for r in reports) / n,
        n_examples=reports[0].n_examples,
        n_parse_failures=sum(r.n_parse_failures for r in reports),
    )


def cmd_gradcheck(args) -> int:
    modes = list(M.MODES) if args.mode == "all" else [args.mode]
    worst = 0.0
    for mode in modes:
        err, names = TR.gradcheck_mode(mode, seed=args.seed)
        status = "PASS" if err < TR.GRADCHECK_THRESHOLD else "FAIL"
        print(f"{status} mode={mode} max_rel_err={err:.6e} params_checked={len(names)}")
        print(f"  tensors: {' '.join(names)}")
        worst = max(worst, err)
    return 0 if worst < TR.GRADCHECK_THRESHOLD else 2


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="synpara",
        description="syntactically controlled paraphrase laboratory",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("datagen", help="generate the synthetic corpus")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--n-train", type=int, default=3000)
    p.add_argument("--n-dev", type=int, default=640)
    p.add_argument("--n-test", type=int, default=640)
    p.set_defaults(func=cmd_datagen)

    p = sub.add_parser("train", help="train one mode and checkpoint it")
    p.add_argument("--mode", required=True, choices=M.MODES)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--config", default=None, help="key=value config file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="config override; wins over the file")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="TSV split file")
    p.add_argument("--vocab", default=None)
    p.add_argument("--beam-width", type=int, default=4)
    p.add_argument("--gold-as-generation", action="store_true",
                   help="score references against themselves (harness sanity)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="train a mode grid and summarize")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--modes", default=",".join(M.MODES))
    p.add_argument("--seeds", default="0")
    p.add_argument("--config", default=None)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("gradcheck", help="verify autodiff against finite differences")
    p.add_argument("--mode", default="all", choices=M.MODES + ("all",))
    p.add_argument("--seed", type=int, default=TR.GRADCHECK_SEED)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ComputeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except SynparaError as exc:  # pragma: no cover - base-class safety net
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
