"""Training loop, evaluation protocol and the mode-comparison harness."""

from __future__ import annotations

import heapq
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from .ast_pipeline import Corpus
from .model import ModelConfig, PointerMixtureModel, SegmentBatch, StepState
from .optim import AdamState, adam_step, clip_global_norm, global_norm
from .tensor import Tape
from .vocab import KIND_MASKED, KIND_VOCAB, KIND_WINDOW, Vocabularies, in_vocab_mask, label_program

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, lr: float, grad_norm: float, loss: float):
        self.step, self.lr, self.grad_norm, self.loss = step, lr, grad_norm, loss
        super().__init__(f"non-finite loss {loss} at step {step} (lr={lr:g}, grad norm={grad_norm:g})")


@dataclass
class TrainConfig:
    lr: float = 0.001
    decay: float = 0.6
    clip: float = 5.0
    batch: int = 32
    epochs: int = 3
    unroll: int = 50
    seed: int = 0
    shuffle: bool = True

    @classmethod
    def paper_scale(cls, **overrides) -> "TrainConfig":
        base = dict(batch=128, epochs=8)
        base.update(overrides)
        return cls(**base)

    def __post_init__(self):
        if self.lr <= 0 or self.clip <= 0 or self.batch < 1 or self.epochs < 1 or self.unroll < 1:
            raise ValueError("learning rate, clip norm, batch, epochs and unroll must be positive")
        if not 0 < self.decay <= 1:
            raise ValueError("decay must be in (0, 1]")


def learning_rate(cfg: TrainConfig, epoch: int) -> float:
    return cfg.lr * cfg.decay ** epoch


# --------------------------------------------------------------------------
# data preparation


@dataclass
class PreparedProgram:
    """Per-node model inputs and targets for one program."""

    program_id: int
    in_type: np.ndarray
    in_value: np.ndarray
    parent: np.ndarray
    tgt_type: np.ndarray
    tgt_ref: np.ndarray
    kind: np.ndarray
    index: np.ndarray

    def __len__(self) -> int:
        return len(self.in_type)


def prepare_programs(corpus: Corpus, vocabs: Vocabularies, window: int) -> list:
    vocab, tv = vocabs.values, vocabs.types
    ref_to_id = in_vocab_mask(corpus, vocab)
    type_map = np.array([tv.encode(n) for n in corpus.type_names] or [tv.unk], dtype=np.int64)
    out = []
    for p in corpus.programs:
        if len(p) == 0:
            continue
        lab = label_program(p.values, ref_to_id, vocab, window)
        tgt_type = type_map[p.types]
        out.append(PreparedProgram(
            p.program_id,
            np.concatenate([[tv.eof], tgt_type[:-1]]).astype(np.int64),
            np.concatenate([[vocab.eof], lab.value_ids[:-1]]).astype(np.int64),
            p.parents.astype(np.int64), tgt_type.astype(np.int64), p.values.astype(np.int64),
            lab.kind, lab.index.astype(np.int64)))
    return out


def assign_lanes(lengths: Sequence[int], lanes: int, unroll: int,
                 order: Optional[Sequence[int]] = None) -> list:
    """Greedy whole-program lane filling: each program goes to the least-loaded lane.

    Returns, per lane, the ordered list of ``(program index, segment number)``.
    """
    order = range(len(lengths)) if order is None else order
    heap = [(0, b) for b in range(lanes)]
    plan = [[] for _ in range(lanes)]
    for i in order:
        nseg = math.ceil(lengths[i] / unroll)
        if nseg == 0:
            continue
        load, b = heapq.heappop(heap)
        plan[b].extend((i, k) for k in range(nseg))
        heapq.heappush(heap, (load + nseg, b))
    return plan


def iter_batches(programs: Sequence[PreparedProgram], vocabs: Vocabularies, lanes: int,
                 unroll: int, order: Optional[Sequence[int]] = None) -> Iterator[SegmentBatch]:
    """Aligned segment batches; a lane keeps one program until it is exhausted."""
    plan = assign_lanes([len(p) for p in programs], lanes, unroll, order)
    steps = max((len(p) for p in plan), default=0)
    eof_t, eof_v = vocabs.types.eof, vocabs.values.eof
    for s in range(steps):
        shape = (unroll, lanes)
        in_type = np.full(shape, eof_t, np.int64)
        in_value = np.full(shape, eof_v, np.int64)
        parent = np.ones(shape, np.int64)
        tgt_type = np.full(shape, eof_t, np.int64)
        tgt_ref = np.full(shape, -1, np.int64)
        kind = np.full(shape, KIND_MASKED, np.int8)
        index = np.full(shape, -1, np.int64)
        real = np.zeros(shape, bool)
        reset = np.ones(lanes, bool)
        pids = np.full(lanes, -1, np.int64)
        for b, lane in enumerate(plan):
            if s >= len(lane):
                continue
            pi, k = lane[s]
            p = programs[pi]
            lo, hi = k * unroll, min(len(p), (k + 1) * unroll)
            n = hi - lo
            in_type[:n, b] = p.in_type[lo:hi]
            in_value[:n, b] = p.in_value[lo:hi]
            parent[:n, b] = p.parent[lo:hi]
            tgt_type[:n, b] = p.tgt_type[lo:hi]
            tgt_ref[:n, b] = p.tgt_ref[lo:hi]
            kind[:n, b] = p.kind[lo:hi]
            index[:n, b] = p.index[lo:hi]
            real[:n, b] = True
            reset[b] = k == 0
            pids[b] = pi
        yield SegmentBatch(in_type, in_value, parent, tgt_type, tgt_ref, kind, index, real, reset, pids)


# --------------------------------------------------------------------------
# training


@dataclass
class LossRecord:
    step: int
    epoch: int
    lr: float
    loss: float
    grad_norm: float
    clipped_norm: float
    targets: int


@dataclass
class TrainResult:
    curve: list = field(default_factory=list)
    epoch_lrs: list = field(default_factory=list)
    skipped_steps: int = 0
    seconds: float = 0.0


def train_step(model: PointerMixtureModel, batch: SegmentBatch, carry: Optional[StepState],
               adam: AdamState, lr: float, clip: float):
    """One truncated-BPTT update. Returns (loss, targets, norm, clipped norm, next carry)."""
    model.zero_grad()
    with Tape() as tape:
        out, state = model.forward_segment(batch, carry)
        loss, n = model.segment_loss(out)
    nxt = state.detach()
    if n == 0:
        # nothing to learn from: leave parameters and Adam moments untouched
        return 0.0, 0, 0.0, 0.0, nxt
    loss_val = float(loss.data)
    if not math.isfinite(loss_val):
        return loss_val, n, float("nan"), float("nan"), nxt
    tape.backward(loss)
    names = [k for k, p in model.params.items() if p.grad is not None]
    grads = [model.params[k].grad for k in names]
    _, norm = clip_global_norm(grads, clip)
    clipped = global_norm(grads)
    adam_step({k: p.data for k, p in model.params.items()},
              {k: model.params[k].grad for k in names}, adam, lr)
    return loss_val, n, norm, clipped, nxt


def train(model: PointerMixtureModel, programs: Sequence[PreparedProgram], vocabs: Vocabularies,
          cfg: TrainConfig, *, on_step: Optional[Callable[[LossRecord], None]] = None) -> TrainResult:
    rng = np.random.default_rng(cfg.seed)
    adam = AdamState()
    result = TrainResult()
    start = time.perf_counter()
    step = 0
    for epoch in range(cfg.epochs):
        lr = learning_rate(cfg, epoch)
        result.epoch_lrs.append(lr)
        order = rng.permutation(len(programs)) if cfg.shuffle else None
        carry = None
        for batch in iter_batches(programs, vocabs, cfg.batch, cfg.unroll, order):
            loss, n, norm, clipped, carry = train_step(model, batch, carry, adam, lr, cfg.clip)
            if n == 0:
                result.skipped_steps += 1
                continue
            if not math.isfinite(loss):
                raise TrainingDiverged(step, lr, norm, loss)
            rec = LossRecord(step, epoch, lr, loss, norm, clipped, n)
            result.curve.append(rec)
            if on_step:
                on_step(rec)
            step += 1
        if result.curve:
            tail = [r.loss for r in result.curve if r.epoch == epoch]
            log.info("epoch %d lr=%g mean loss=%.4f", epoch, lr, float(np.mean(tail)) if tail else float("nan"))
    result.seconds = time.perf_counter() - start
    return result


def write_curve_csv(path, curve: Sequence[LossRecord]) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "epoch", "lr", "loss", "grad_norm", "clipped_norm", "targets"])
        for r in curve:
            w.writerow([r.step, r.epoch, repr(r.lr), repr(r.loss), repr(r.grad_norm),
                        repr(r.clipped_norm), r.targets])


# --------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    mode: str
    task: str
    queries: int = 0
    correct: int = 0
    in_vocab_queries: int = 0
    in_vocab_correct: int = 0
    oov_queries: int = 0
    oov_correct: int = 0
    masked_targets: int = 0
    copyable_targets: int = 0
    ceiling_violations: int = 0

    @staticmethod
    def _ratio(a: int, b: int) -> float:
        return a / b if b else 0.0

    @property
    def accuracy(self) -> float:
        return self._ratio(self.correct, self.queries)

    @property
    def in_vocab_accuracy(self) -> float:
        return self._ratio(self.in_vocab_correct, self.in_vocab_queries)

    @property
    def oov_accuracy(self) -> float:
        return self._ratio(self.oov_correct, self.oov_queries)

    @property
    def oov_ceiling(self) -> float:
        """Best attainable OoV-subset accuracy: only window-copyable targets can be hit."""
        return self._ratio(self.copyable_targets, self.oov_queries)

    def to_json(self) -> dict:
        d = asdict(self)
        d.update(accuracy=self.accuracy, in_vocab_accuracy=self.in_vocab_accuracy,
                 oov_accuracy=self.oov_accuracy, oov_ceiling=self.oov_ceiling)
        return d


def score_step(pred: np.ndarray, real: np.ndarray, kind: np.ndarray, index: np.ndarray,
               tgt_ref: np.ndarray, window_refs: np.ndarray, vocab_out: int) -> np.ndarray:
    """Correctness of value predictions (any leading shape; ``window_refs`` adds a slot axis).

    A copy is credited when the chosen slot's string equals the target string,
    whichever slot the label pointed at. Masked-UNK targets are always wrong.
    """
    ok = np.zeros(pred.shape, dtype=bool)
    voc = real & (kind == KIND_VOCAB)
    ok[voc] = pred[voc] == index[voc]
    win = real & (kind == KIND_WINDOW) & (pred >= vocab_out)
    if win.any():
        slot = np.clip(pred - vocab_out, 0, window_refs.shape[-1] - 1)
        copied = np.take_along_axis(window_refs, slot[..., None], axis=-1)[..., 0]
        ok[win] = (copied[win] == tgt_ref[win]) & (tgt_ref[win] >= 0)
    return ok


def evaluate(model: PointerMixtureModel, programs: Sequence[PreparedProgram], vocabs: Vocabularies,
             batch: int = 32, unroll: int = 50, *, seed: Optional[int] = None) -> EvalReport:
    cfg = model.config
    model.reset_rng(seed)
    rep = EvalReport(cfg.mode, cfg.task)
    carry = None
    V = cfg.vocab_out
    for sb in iter_batches(programs, vocabs, batch, unroll):
        out, carry = model.forward_segment(sb, carry)
        real = sb.real
        pred = np.argmax(out.y.data, axis=-1)
        n_real = int(real.sum())
        rep.queries += n_real
        if cfg.task == "type":
            ok = real & (pred == sb.tgt_type)
            rep.correct += int(ok.sum())
            rep.in_vocab_queries += n_real
            rep.in_vocab_correct += int(ok.sum())
            continue
        kind = sb.label_kind
        ok = score_step(pred, real, kind, sb.label_index, sb.tgt_ref, out.window_refs, V)
        voc = real & (kind == KIND_VOCAB)
        oov = real & ~voc
        rep.correct += int(ok.sum())
        rep.in_vocab_queries += int(voc.sum())
        rep.in_vocab_correct += int((ok & voc).sum())
        rep.oov_queries += int(oov.sum())
        rep.oov_correct += int((ok & oov).sum())
        rep.masked_targets += int((real & (kind == KIND_MASKED)).sum())
        copyable = real & (kind == KIND_WINDOW)
        rep.copyable_targets += int(copyable.sum())
        # a hit on an OoV target whose string is absent from the window is impossible
        in_window = (out.window_refs == sb.tgt_ref[..., None]).any(axis=-1)
        rep.ceiling_violations += int((ok & oov & ~(copyable & in_window)).sum())
    return rep


# --------------------------------------------------------------------------
# mode comparison


def run_ablation(train_corpus: Corpus, test_corpus: Corpus, vocabs: Vocabularies,
                 modes: Sequence[str], model_cfg: ModelConfig, train_cfg: TrainConfig,
                 *, seeds: Optional[Sequence[int]] = None,
                 on_mode: Optional[Callable[[str, dict], None]] = None) -> dict:
    """Train and evaluate each mode on identical data, order and initial weights."""
    seeds = list(seeds) if seeds else [train_cfg.seed]
    train_p = prepare_programs(train_corpus, vocabs, model_cfg.window)
    test_p = prepare_programs(test_corpus, vocabs, model_cfg.window)
    results = {}
    for mode in modes:
        runs = []
        for seed in seeds:
            mcfg = replace(model_cfg, mode=mode)
            tcfg = replace(train_cfg, seed=seed)
            model = PointerMixtureModel(mcfg, seed=seed)
            tr = train(model, train_p, vocabs, tcfg)
            rep = evaluate(model, test_p, vocabs, tcfg.batch, tcfg.unroll, seed=seed)
            d = rep.to_json()
            d.update(train_seconds=tr.seconds, final_loss=tr.curve[-1].loss if tr.curve else None,
                     seed=seed, epoch_lrs=list(tr.epoch_lrs), steps=len(tr.curve),
                     max_grad_norm=max((r.grad_norm for r in tr.curve), default=0.0),
                     max_clipped_norm=max((r.clipped_norm for r in tr.curve), default=0.0))
            runs.append(d)
            log.info("%s seed=%d accuracy=%.4f (%.0fs)", mode, seed, rep.accuracy, tr.seconds)
        summary = {key: float(np.mean([r[key] for r in runs]))
                   for key in ("accuracy", "in_vocab_accuracy", "oov_accuracy", "oov_ceiling")}
        summary["ceiling_violations"] = int(sum(r["ceiling_violations"] for r in runs))
        summary["runs"] = runs
        results[mode] = summary
        if on_mode:
            on_mode(mode, summary)
    ref = results[modes[0]]["accuracy"]
    deltas = {m: results[m]["accuracy"] - ref for m in modes}
    return {"modes": results, "baseline": modes[0], "deltas": deltas,
            "model_config": model_cfg.to_dict(), "train_config": asdict(train_cfg)}
