"""Command-line entry point: ``pmn <command> [options]``.

Commands: preprocess, build-vocab, stats, train, eval, ablate, predict. Every
command writes its artifacts, a ``manifest.json`` and a JSON report under the
``--out`` run directory and prints a short summary. Relative input paths that
do not exist are looked up under ``$PMN_DATA_DIR``.

Option precedence: command-line flags, then ``--config`` (a JSON object keyed
by flag name with dashes as underscores), then the built-in desk defaults, or
the full-scale preset with ``--paper-scale``.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .ast_pipeline import CorpusParseError, build_corpus, load_corpus, parse_dataset_line, preprocess_file
from .checkpoint import CheckpointError, load_model, save_model
from .model import ConfigError, ModelConfig, PointerMixtureModel
from .synthetic import SyntheticSpec, make_synthetic_corpus, split_synthetic
from .train import (
    TrainConfig,
    TrainingDiverged,
    evaluate,
    iter_batches,
    prepare_programs,
    run_ablation,
    train,
    write_curve_csv,
)
from .vocab import Vocabularies, build_vocabularies, compute_stats, stream_stats, stream_vocabularies

log = logging.getLogger("pmn")

DATA_ENV = "PMN_DATA_DIR"
MODE_FLAGS = {"vanilla": "vanilla", "attn": "attentional", "pointer": "pointer_mixture",
              "pointer-random": "pointer_random"}

DESK_DEFAULTS = dict(task="value", mode="pointer", vocab_size=1000, hidden=128, window=50, type_dim=32,
                     value_dim=96, unroll=50, batch=32, epochs=3, lr=0.001, decay=0.6, clip=5.0, seed=0,
                     precision="standard", parent_attention=True, repeats=1)
PAPER_PRESET = dict(DESK_DEFAULTS, vocab_size=50000, hidden=1500, type_dim=300, value_dim=1200,
                    batch=128, epochs=8, repeats=3)


class UsageError(Exception):
    """Bad arguments or missing inputs; reported without a traceback."""


# --------------------------------------------------------------------------
# helpers


def resolve_input(path: Optional[str]) -> Optional[Path]:
    if path is None:
        return None
    p = Path(path)
    if not p.exists() and not p.is_absolute() and os.environ.get(DATA_ENV):
        alt = Path(os.environ[DATA_ENV]) / p
        if alt.exists():
            return alt
    if not p.exists():
        raise UsageError(f"input not found: {path}")
    return p


def file_digest(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def resolve_options(args) -> dict:
    """Merge flags over the config file over the defaults."""
    opts = dict(PAPER_PRESET if getattr(args, "paper_scale", False) else DESK_DEFAULTS)
    if getattr(args, "config", None):
        path = resolve_input(args.config)
        try:
            from_file = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: invalid JSON config ({exc})")
        unknown = set(from_file) - set(opts)
        if unknown:
            raise UsageError(f"{path}: unknown config keys {sorted(unknown)}")
        opts.update(from_file)
    for key in opts:
        val = getattr(args, key, None)
        if val is not None:
            opts[key] = val
    if opts["mode"] not in MODE_FLAGS:
        raise UsageError(f"unknown mode {opts['mode']!r}; expected one of {sorted(MODE_FLAGS)}")
    return opts


def model_config(opts: dict, vocabs: Vocabularies, mode: Optional[str] = None) -> ModelConfig:
    return ModelConfig(hidden=opts["hidden"], window=opts["window"], type_dim=opts["type_dim"],
                       value_dim=opts["value_dim"], type_vocab=len(vocabs.types),
                       value_vocab=len(vocabs.values), mode=mode or MODE_FLAGS[opts["mode"]],
                       task=opts["task"], parent_attention=opts["parent_attention"],
                       precision=opts["precision"])


def train_config(opts: dict) -> TrainConfig:
    return TrainConfig(lr=opts["lr"], decay=opts["decay"], clip=opts["clip"], batch=opts["batch"],
                       epochs=opts["epochs"], unroll=opts["unroll"], seed=opts["seed"])


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=float) + "\n")


def write_manifest(out: Path, command: str, config: dict, inputs: dict, started: float) -> None:
    write_json(out / "manifest.json", {
        "command": command,
        "config": config,
        "inputs": {k: {"path": str(p), "sha256": file_digest(p)} for k, p in inputs.items() if p},
        "seed": config.get("seed"),
        "version": __version__,
        "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(started)),
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S"),
    })


def load_any_corpus(path: Path, limit: Optional[int] = None):
    """A preprocessed ``.npz`` corpus, or a raw JSON-lines AST file."""
    if path.suffix == ".npz":
        return load_corpus(path)
    return preprocess_file(path, limit=limit)


def load_vocab(args, corpus) -> Vocabularies:
    if args.vocab:
        return Vocabularies.load(resolve_input(args.vocab))
    if corpus is None:
        raise UsageError("--vocab is required")
    return build_vocabularies(corpus, args.resolved["vocab_size"])


# --------------------------------------------------------------------------
# commands


def cmd_preprocess(args, out: Path) -> dict:
    src = resolve_input(args.input)
    corpus = preprocess_file(src, limit=args.limit)
    if not corpus.programs:
        log.warning("%s contains no programs", src)
    corpus.save(out / "corpus.npz")
    summary = corpus.summary()
    write_json(out / "summary.json", summary)
    print(f"programs={summary['programs']} nodes={summary['nodes']} "
          f"augmented_types={summary['augmented_types']}")
    return {"inputs": {"input": src}, "report": summary}


def cmd_build_vocab(args, out: Path) -> dict:
    src = resolve_input(args.corpus)
    vocabs = build_vocabularies(load_any_corpus(src), args.resolved["vocab_size"])
    vocabs.save(out / "vocab.json")
    report = {"K": vocabs.values.k, "values": len(vocabs.values), "types": len(vocabs.types)}
    print(f"value vocabulary {report['values']} entries (K={report['K']}), type vocabulary {report['types']}")
    return {"inputs": {"corpus": src}, "report": report}


def cmd_stats(args, out: Path) -> dict:
    src = resolve_input(args.corpus)
    window = args.resolved["window"]
    extra = {}
    if args.vocab:
        vocabs = Vocabularies.load(resolve_input(args.vocab))
    else:
        train_src = resolve_input(args.train) if args.train else src
        K = args.resolved["vocab_size"]
        if train_src.suffix == ".npz":
            vocabs = build_vocabularies(load_corpus(train_src), K)
        else:
            vocabs = stream_vocabularies(train_src, K, limit=args.train_limit)
        # augmented types observed in the vocabulary source
        extra["train_augmented_types"] = len(vocabs.types.names)
    if src.suffix == ".npz":
        corpus = load_corpus(src)
        stats = compute_stats(corpus, vocabs.values, window)
        report = dict(stats.to_json(), **corpus.summary())
    else:
        report = stream_stats(src, vocabs.values, window, skip=args.skip, limit=args.limit).to_json()
    report.update(extra)
    write_json(out / "stats.json", report)
    print(f"oov_rate={report['oov_rate']:.4f} localness={report['localness']:.4f} "
          f"(K={report['K']}, L={report['L']}, nodes={report['node_count']})")
    return {"inputs": {"corpus": src, "vocab": resolve_input(args.vocab) if args.vocab else None},
            "report": report}


def cmd_train(args, out: Path) -> dict:
    opts = args.resolved
    src = resolve_input(args.corpus)
    corpus = load_any_corpus(src)
    vocabs = load_vocab(args, corpus)
    vocabs.save(out / "vocab.json")
    cfg = model_config(opts, vocabs)
    tcfg = train_config(opts)
    model = PointerMixtureModel(cfg, seed=opts["seed"])
    programs = prepare_programs(corpus, vocabs, cfg.window)
    result = train(model, programs, vocabs, tcfg)
    write_curve_csv(out / "curve.csv", result.curve)
    save_model(out / "model.ckpt", model, vocabs, seed=opts["seed"], extra={"train": asdict(tcfg)})
    report = {"steps": len(result.curve), "skipped_steps": result.skipped_steps,
              "final_loss": result.curve[-1].loss if result.curve else None,
              "epoch_lrs": result.epoch_lrs, "seconds": result.seconds}
    write_json(out / "train.json", report)
    print(f"trained {cfg.mode} for {len(result.curve)} steps, final loss {report['final_loss']}")
    return {"inputs": {"corpus": src, "vocab": resolve_input(args.vocab) if args.vocab else None},
            "report": report}


def _checkpoint(path):
    try:
        return load_model(resolve_input(path))
    except (CheckpointError, ConfigError, OSError) as exc:
        raise UsageError(f"cannot load checkpoint {path}: {exc}")


def cmd_eval(args, out: Path) -> dict:
    model, vocabs, _ = _checkpoint(args.checkpoint)
    if args.vocab:
        vocabs = Vocabularies.load(resolve_input(args.vocab))
    if vocabs is None:
        raise UsageError("checkpoint carries no vocabulary; pass --vocab")
    src = resolve_input(args.corpus)
    programs = prepare_programs(load_any_corpus(src), vocabs, model.config.window)
    opts = args.resolved
    rep = evaluate(model, programs, vocabs, opts["batch"], opts["unroll"], seed=opts["seed"])
    report = rep.to_json()
    write_json(out / "report.json", report)
    print(f"{rep.mode}: accuracy={rep.accuracy:.4f} in_vocab={rep.in_vocab_accuracy:.4f} "
          f"oov={rep.oov_accuracy:.4f} (ceiling {rep.oov_ceiling:.4f}) over {rep.queries} queries")
    return {"inputs": {"checkpoint": resolve_input(args.checkpoint), "corpus": src}, "report": report}


def cmd_ablate(args, out: Path) -> dict:
    opts = args.resolved
    inputs = {}
    if args.corpus:
        inputs["corpus"] = resolve_input(args.corpus)
        corpus = load_any_corpus(inputs["corpus"])
        if args.test:
            inputs["test"] = resolve_input(args.test)
            tr, te = corpus, load_any_corpus(inputs["test"])
        else:
            tr, te = corpus.split(int(round(len(corpus.programs) * 2 / 3)))
    else:
        spec = SyntheticSpec(programs=args.programs, mean_length=args.length, vocab_pool=args.pool,
                             repeat_prob=args.repeat_prob, window=opts["window"], seed=opts["seed"])
        tr, te = split_synthetic(make_synthetic_corpus(spec))
        opts = dict(opts, synthetic=asdict(spec))
    vocabs = load_vocab(args, tr)
    modes = [MODE_FLAGS[m] for m in args.modes.split(",")]
    seeds = [opts["seed"] + i for i in range(opts["repeats"])]
    res = run_ablation(tr, te, vocabs, modes, model_config(opts, vocabs, modes[0]), train_config(opts),
                       seeds=seeds, on_mode=lambda m, s: print(f"{m}: accuracy={s['accuracy']:.4f}", flush=True))
    res["stats"] = compute_stats(te, vocabs.values, opts["window"]).to_json()
    write_json(out / "ablation.json", res)
    for m, d in res["deltas"].items():
        print(f"  {m:16s} {res['modes'][m]['accuracy']:.4f}  delta {d:+.4f}")
    args.resolved = opts
    return {"inputs": inputs, "report": res}


def predict_rows(model: PointerMixtureModel, vocabs: Vocabularies, nodes: list, index: int, top_k: int):
    """Ranked ``(token, probability, origin)`` for node ``index`` given the nodes before it."""
    corpus = build_corpus([nodes])
    programs = prepare_programs(corpus, vocabs, model.config.window)
    if not 0 <= index < len(programs[0]):
        raise UsageError(f"node index {index} outside program of {len(programs[0])} nodes")
    unroll = model.config.window
    model.reset_rng()
    carry = None
    for k, sb in enumerate(iter_batches(programs, vocabs, 1, unroll)):
        out, carry = model.forward_segment(sb, carry)
        if k == index // unroll:
            t = index % unroll
            y = out.y.data[t, 0]
            refs = out.window_refs[t, 0]
            break
    cfg = model.config
    word = vocabs.values.word if cfg.task == "value" else vocabs.types.word
    order = np.argsort(-y, kind="stable")[:top_k]
    rows = []
    for i in order:
        if i < cfg.vocab_out:
            rows.append((word(int(i)), float(y[i]), "vocab"))
        else:
            ref = refs[i - cfg.vocab_out]
            rows.append((corpus.strings[ref] if ref >= 0 else None, float(y[i]), "copy"))
    return rows


def cmd_predict(args, out: Path) -> dict:
    model, vocabs, _ = _checkpoint(args.checkpoint)
    if vocabs is None:
        raise UsageError("checkpoint carries no vocabulary")
    src = resolve_input(args.program)
    lines = [l for l in src.read_text(encoding="utf-8").splitlines() if l.strip()]
    if not lines:
        raise UsageError(f"{src}: no program")
    try:
        nodes = parse_dataset_line(lines[0], 1)
    except CorpusParseError as exc:
        raise UsageError(str(exc))
    rows = predict_rows(model, vocabs, nodes, args.index, args.top_k)
    report = {"index": args.index, "predictions": [{"token": t, "probability": p, "origin": o}
                                                    for t, p, o in rows]}
    write_json(out / "predict.json", report)
    for t, p, o in rows:
        print(f"{p:.4f}  {o:5s}  {t}")
    return {"inputs": {"checkpoint": resolve_input(args.checkpoint), "program": src}, "report": report}


# --------------------------------------------------------------------------
# parser


def _model_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model and training")
    g.add_argument("--task", choices=["type", "value"])
    g.add_argument("--mode", choices=sorted(MODE_FLAGS))
    g.add_argument("--vocab-size", type=int)
    g.add_argument("--hidden", type=int)
    g.add_argument("--window", type=int)
    g.add_argument("--type-dim", type=int)
    g.add_argument("--value-dim", type=int)
    g.add_argument("--unroll", type=int)
    g.add_argument("--batch", type=int)
    g.add_argument("--epochs", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--decay", type=float)
    g.add_argument("--clip", type=float)
    g.add_argument("--seed", type=int)
    g.add_argument("--precision", choices=["standard", "high"])
    g.add_argument("--no-parent-attention", dest="parent_attention", action="store_const", const=False)
    g.add_argument("--repeats", type=int, help="seeds per mode (ablate)")
    g.add_argument("--paper-scale", action="store_true", help="start from the full-scale configuration")
    g.add_argument("--config", help="JSON file of option values")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pmn", description="Code completion with pointer mixture LSTMs.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="flatten a JSON-lines AST corpus")
    p.add_argument("input")
    p.add_argument("--limit", type=int)

    p = sub.add_parser("build-vocab", help="top-K value vocabulary and type vocabulary")
    p.add_argument("--corpus", required=True)

    p = sub.add_parser("stats", help="OoV rate and localness")
    p.add_argument("--corpus", required=True, help="evaluation corpus (.npz or raw JSON lines)")
    p.add_argument("--vocab")
    p.add_argument("--train", help="corpus to build the vocabulary from (default: --corpus)")
    p.add_argument("--skip", type=int, default=0)
    p.add_argument("--limit", type=int)
    p.add_argument("--train-limit", type=int)

    p = sub.add_parser("train", help="train one model")
    p.add_argument("--corpus", required=True)
    p.add_argument("--vocab")

    p = sub.add_parser("eval", help="accuracy of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--vocab")

    p = sub.add_parser("ablate", help="train and compare several modes on identical data")
    p.add_argument("--modes", default="vanilla,attn,pointer,pointer-random")
    p.add_argument("--corpus", help="training corpus (default: synthetic)")
    p.add_argument("--test", help="test corpus (default: last third of --corpus)")
    p.add_argument("--vocab")
    p.add_argument("--programs", type=int, default=1000)
    p.add_argument("--length", type=int, default=300)
    p.add_argument("--pool", type=int, default=200)
    p.add_argument("--repeat-prob", type=float, default=0.8)

    p = sub.add_parser("predict", help="ranked completions for one node")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--program", required=True, help="file whose first line is a program")
    p.add_argument("--index", type=int, required=True, help="node to predict from the nodes before it")
    p.add_argument("--top-k", type=int, default=5)

    for name, sp in sub.choices.items():
        if name in ("build-vocab", "stats", "train", "eval", "ablate"):
            _model_flags(sp)
        sp.add_argument("--out", required=True, help="run directory")
    return parser


COMMANDS = {"preprocess": cmd_preprocess, "build-vocab": cmd_build_vocab, "stats": cmd_stats,
            "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate, "predict": cmd_predict}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    started = time.time()
    try:
        args.resolved = resolve_options(args)
        opts = args.resolved
        modes = args.modes.split(",") if args.command == "ablate" else [opts["mode"]]
        if args.command in ("train", "ablate"):
            if any(m not in MODE_FLAGS for m in modes):
                raise UsageError(f"unknown mode in {modes}; expected {sorted(MODE_FLAGS)}")
            if opts["task"] == "type" and any(m in ("pointer", "pointer-random") for m in modes):
                raise UsageError("pointer modes need --task value (node types have no OoV problem)")
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        result = COMMANDS[args.command](args, out)
        config = {k: v for k, v in vars(args).items() if k not in ("resolved",)}
        config["resolved"] = args.resolved
        write_manifest(out, args.command, config, result["inputs"], started)
    except (UsageError, ConfigError, CorpusParseError, CheckpointError, ValueError, TrainingDiverged) as exc:
        print(f"pmn {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
