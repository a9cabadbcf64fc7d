"""LSTM language models over flattened ASTs.

Four modes share one code path:

* ``vanilla``          LSTM, output ``softmax(W^v h + b^v)``
* ``attentional``      context attention over the last ``L`` hidden states plus
                       parent attention, output through ``tanh(W^g [h; c; p])``
* ``pointer_mixture``  attentional output mixed with a copy distribution that
                       reuses the attention weights, gated by a sigmoid switch
* ``pointer_random``   as above but the copy distribution is random noise

Step ``t`` consumes the previous node (an EOF token at program start),
produces ``h_t`` and predicts node ``t``. Only after the prediction is ``h_t``
pushed to memory, tagged with node ``t``'s value, so memory slot ``j`` (oldest
first) holds the state that predicted the node ``L - j`` positions back and a
copy from that slot emits that node's value.

The LSTM recurrence never sees the attention output, so a segment is computed
in two phases: the cell runs step by step, then attention, parent lookup and
the output layers run once over all steps using sliding windows of the hidden
states. :meth:`PointerMixtureModel.step` is the plain one-step formulation and
serves as a reference for the batched path.
"""

from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import MASKED, Tensor, resolve_dtype

MODES = ("vanilla", "attentional", "pointer_mixture", "pointer_random")
TASKS = ("value", "type")

INIT_SCALE = 0.05


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    hidden: int = 128
    window: int = 50
    type_dim: int = 32
    value_dim: int = 96
    type_vocab: int = 1
    value_vocab: int = 1
    mode: str = "pointer_mixture"
    task: str = "value"
    parent_attention: bool = True
    precision: str = "standard"

    @classmethod
    def paper_scale(cls, **overrides) -> "ModelConfig":
        base = dict(hidden=1500, window=50, type_dim=300, value_dim=1200)
        base.update(overrides)
        return cls(**base)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if self.pointer and self.task != "value":
            raise ConfigError(f"mode {self.mode} needs the value task (node types have no OoV problem)")
        for name in ("hidden", "window", "type_dim", "value_dim", "type_vocab", "value_vocab"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        resolve_dtype(self.precision)

    @property
    def attention(self) -> bool:
        return self.mode != "vanilla"

    @property
    def pointer(self) -> bool:
        return self.mode in ("pointer_mixture", "pointer_random")

    @property
    def vocab_out(self) -> int:
        return self.value_vocab if self.task == "value" else self.type_vocab

    @property
    def output_size(self) -> int:
        return self.vocab_out + (self.window if self.pointer else 0)

    @property
    def input_dim(self) -> int:
        return self.type_dim + self.value_dim

    def to_dict(self) -> dict:
        return asdict(self)


def param_shapes(cfg: ModelConfig) -> dict:
    k = cfg.hidden
    shapes = {
        "type_emb": (cfg.type_vocab, cfg.type_dim),
        "value_emb": (cfg.value_vocab, cfg.value_dim),
        "lstm_wx": (cfg.input_dim, 4 * k),
        "lstm_wh": (k, 4 * k),
        "lstm_b": (4 * k,),
        "h0": (k,),
        "c0": (k,),
    }
    if cfg.attention:
        feats = 3 if cfg.parent_attention else 2
        shapes.update({"att_wm": (k, k), "att_wh": (k, k), "att_v": (k,), "out_wg": (feats * k, k)})
    shapes.update({"out_wv": (k, cfg.vocab_out), "out_bv": (cfg.vocab_out,)})
    if cfg.pointer:
        shapes.update({"switch_ws": (2 * k, 1), "switch_bs": (1,)})
    return shapes


def init_params(cfg: ModelConfig, seed: int = 0) -> dict:
    """Uniform(-0.05, 0.05) weights, zero ``h0``/``c0``.

    Each tensor draws from its own stream keyed on (seed, name), so parameters
    shared between modes start identical.
    """
    dtype = resolve_dtype(cfg.precision)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name in ("h0", "c0"):
            data = np.zeros(shape, dtype=dtype)
        else:
            rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
            data = rng.uniform(-INIT_SCALE, INIT_SCALE, size=shape).astype(dtype)
        params[name] = Tensor(data, requires_grad=True, dtype=dtype, name=name)
    return params


@dataclass
class StepState:
    """Recurrent state of ``B`` lanes carried between segments.

    ``mem`` is ``[L, B, k]`` oldest-first (``None`` before any step), ``mem_refs``
    the string refs of the nodes each slot predicted and ``mem_valid`` marks
    slots that hold a real state of the lane's current program.
    """

    h: Tensor
    c: Tensor
    mem: Optional[np.ndarray] = None
    mem_refs: Optional[np.ndarray] = None
    mem_valid: Optional[np.ndarray] = None

    @property
    def batch(self) -> int:
        return self.h.shape[0]

    def detach(self) -> "StepState":
        return StepState(self.h.detach(), self.c.detach(), self.mem, self.mem_refs, self.mem_valid)


@dataclass
class SegmentBatch:
    """One unrolled segment for ``B`` lanes; per-step arrays are ``[T, B]``."""

    in_type: np.ndarray
    in_value: np.ndarray
    parent: np.ndarray
    tgt_type: np.ndarray
    tgt_ref: np.ndarray
    label_kind: np.ndarray
    label_index: np.ndarray
    real: np.ndarray
    reset: np.ndarray  # [B]
    program_ids: Optional[np.ndarray] = None  # [B], -1 = idle lane

    @property
    def steps(self) -> int:
        return self.in_type.shape[0]

    @property
    def batch(self) -> int:
        return self.in_type.shape[1]


@dataclass
class SegmentOutput:
    """Outputs of ``T`` steps for ``B`` lanes.

    ``y`` is ``[T, B, n]``; ``window_refs`` and ``valid`` are ``[T, B, L]``;
    ``target`` holds the output column each step should score, or ``MASKED``.
    """

    y: Tensor
    w: Tensor
    alpha: Optional[np.ndarray]
    s: Optional[np.ndarray]
    window_refs: np.ndarray
    valid: np.ndarray
    target: np.ndarray

    @property
    def steps(self) -> int:
        return self.target.shape[0]


@dataclass
class StepOutput:
    y: Tensor
    w: Tensor
    l: Optional[Tensor]
    alpha: Optional[np.ndarray]
    s: Optional[np.ndarray]
    window_refs: np.ndarray
    valid: np.ndarray
    target: np.ndarray


@dataclass
class _Memory:
    """Stepwise working memory: ``L`` oldest-first entries per list."""

    h: list
    proj: list
    refs: list
    valid: list


class PointerMixtureModel:
    def __init__(self, config: ModelConfig, params: Optional[dict] = None, seed: int = 0):
        config.validate()
        self.config = config
        self.dtype = resolve_dtype(config.precision)
        self.params = params if params is not None else init_params(config, seed)
        expected = param_shapes(config)
        for name, shape in expected.items():
            if name not in self.params:
                raise ConfigError(f"missing parameter {name}")
            if tuple(self.params[name].shape) != shape:
                raise ConfigError(f"parameter {name} has shape {self.params[name].shape}, expected {shape}")
        self.random_seed = seed
        self.rng = np.random.default_rng([seed, 0x5EED])

    def reset_rng(self, seed: Optional[int] = None) -> None:
        self.rng = np.random.default_rng([self.random_seed if seed is None else seed, 0x5EED])

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def arrays(self) -> dict:
        return {n: p.data for n, p in self.params.items()}

    # -- building blocks ---------------------------------------------------
    # All of these accept any number of leading (step, lane) axes.

    def encode_input(self, type_ids, value_ids) -> Tensor:
        P = self.params
        return T.concat([T.embedding_lookup(P["type_emb"], type_ids),
                         T.embedding_lookup(P["value_emb"], value_ids)], axis=-1)

    def lstm_cell(self, x: Tensor, h_prev: Tensor, c_prev: Tensor) -> tuple[Tensor, Tensor]:
        P = self.params
        k = self.config.hidden
        z = T.add_bias(T.add(T.matmul(x, P["lstm_wx"]), T.matmul(h_prev, P["lstm_wh"])), P["lstm_b"])
        i = T.sigmoid(T.slice_last(z, 0, k))
        f = T.sigmoid(T.slice_last(z, k, 2 * k))
        o = T.sigmoid(T.slice_last(z, 2 * k, 3 * k))
        g = T.tanh(T.slice_last(z, 3 * k, 4 * k))
        c = T.add(T.mul(f, c_prev), T.mul(i, g))
        h = T.mul(o, T.tanh(c))
        return h, c

    def context_attention(self, h: Tensor, mem_h: Tensor, mem_proj: Tensor, valid: np.ndarray):
        """Additive attention of ``h[..., k]`` over memory ``[..., L, k]``.

        ``mem_proj`` is the memory already multiplied by ``W^m``. Invalid slots
        get zero weight; a row with no valid slot gets all-zero weights and a
        zero context.
        """
        P = self.params
        L = mem_h.shape[-2]
        hp = T.repeat_axis(T.matmul(h, P["att_wh"]), L, axis=h.data.ndim - 1)
        scores = T.matvec(T.tanh(T.add(mem_proj, hp)), P["att_v"])
        alpha = T.softmax_rows(scores, mask=valid)
        return alpha, T.weighted_sum(alpha, mem_h)

    def parent_slots(self, parent: np.ndarray, valid: np.ndarray) -> np.ndarray:
        """Memory slot holding each parent's state, or ``L`` for ``h_prev``.

        Offsets beyond the window, or pointing at an invalid slot, fall back to
        ``h_prev`` (the previous step's state, or the initial state).
        ``valid`` has one more trailing axis (``L``) than ``parent``.
        """
        L = self.config.window
        pl = np.asarray(parent, dtype=np.int64)
        ok = (pl >= 1) & (pl <= L)
        slot = np.where(ok, L - pl, 0)
        ok &= np.take_along_axis(valid, slot[..., None], axis=-1)[..., 0]
        return np.where(ok, slot, L)

    def vocab_distribution(self, h: Tensor, ctx: Optional[Tensor], parent_vec: Optional[Tensor]) -> Tensor:
        P = self.params
        if not self.config.attention:
            return T.softmax_rows(T.add_bias(T.matmul(h, P["out_wv"]), P["out_bv"]))
        feats = [h, ctx] + ([parent_vec] if self.config.parent_attention else [])
        G = T.tanh(T.matmul(T.concat(feats, axis=-1), P["out_wg"]))
        return T.softmax_rows(T.add_bias(T.matmul(G, P["out_wv"]), P["out_bv"]))

    def switcher(self, h: Tensor, ctx: Tensor) -> Tensor:
        P = self.params
        return T.sigmoid(T.add_bias(T.matmul(T.concat([h, ctx], axis=-1), P["switch_ws"]), P["switch_bs"]))

    def random_pointer(self, valid: np.ndarray) -> Tensor:
        r = self.rng.random(valid.shape) * valid
        tot = r.sum(axis=-1, keepdims=True)
        return Tensor(r / np.where(tot > 0, tot, 1.0), dtype=self.dtype)

    def mixture(self, w: Tensor, l: Tensor, s: Tensor, has_mem: np.ndarray):
        """``[s * w ; (1 - s) * l]`` with ``s`` forced to 1 where memory is empty."""
        hm = has_mem[..., None].astype(self.dtype)
        s_eff = T.add(T.mul(s, Tensor(hm)), Tensor(1.0 - hm))
        return T.concat([T.scale_rows(w, s_eff), T.scale_rows(l, T.sub(1.0, s_eff))], axis=-1), s_eff

    def target_dims(self, valid, real, label_kind, label_index, tgt_type) -> np.ndarray:
        """Output column each position should score, or ``MASKED``.

        ``valid`` carries a trailing window axis over the shape of ``real``.
        """
        from .vocab import KIND_VOCAB, KIND_WINDOW

        cfg = self.config
        real = np.asarray(real, dtype=bool)
        out = np.full(real.shape, MASKED, dtype=np.int64)
        if cfg.task == "type":
            if tgt_type is not None:
                out[real] = np.asarray(tgt_type)[real]
            return out
        if label_kind is None:
            return out
        kind = np.asarray(label_kind)
        idx = np.asarray(label_index, dtype=np.int64)
        voc = real & (kind == KIND_VOCAB)
        out[voc] = idx[voc]
        if cfg.pointer:
            L = cfg.window
            win = real & (kind == KIND_WINDOW) & (idx >= 1) & (idx <= L)
            slot = np.where(win, L - idx, 0)
            win &= np.take_along_axis(valid, slot[..., None], axis=-1)[..., 0]
            out[win] = cfg.vocab_out + slot[win]
        return out

    # -- state -------------------------------------------------------------

    def start_state(self, reset: np.ndarray, carry: Optional[StepState]) -> StepState:
        """Lanes flagged in ``reset`` restart from ``h0, c0`` with empty memory."""
        P = self.params
        r = np.asarray(reset, dtype=bool)
        B, k, L = len(r), self.config.hidden, self.config.window
        h0 = T.tile_rows(P["h0"], B)
        c0 = T.tile_rows(P["c0"], B)
        empty = (np.zeros((L, B, k), dtype=self.dtype), np.full((L, B), -1, dtype=np.int64),
                 np.zeros((L, B), dtype=bool))
        if carry is None or r.all() or carry.mem_valid is None:
            return StepState(h0, c0, *empty)
        keep = np.repeat((~r)[:, None], k, axis=1).astype(self.dtype)
        fresh = 1.0 - keep
        h = T.add(T.mul(h0, Tensor(fresh)), T.mul(carry.h, Tensor(keep)))
        c = T.add(T.mul(c0, Tensor(fresh)), T.mul(carry.c, Tensor(keep)))
        mem = empty[0] if carry.mem is None else carry.mem.astype(self.dtype, copy=False)
        valid = carry.mem_valid & ~r[None, :]
        return StepState(h, c, mem, np.where(valid, carry.mem_refs, -1), valid)

    # -- forward -----------------------------------------------------------

    def forward_segment(self, batch: SegmentBatch, carry: Optional[StepState] = None):
        """Run one segment; returns a :class:`SegmentOutput` and the end state."""
        cfg = self.config
        L, k = cfg.window, cfg.hidden
        n_steps, B = batch.steps, batch.batch
        state = self.start_state(batch.reset, carry)
        real = np.asarray(batch.real, dtype=bool)

        P = self.params
        HC = T.lstm_sequence(self.encode_input(batch.in_type, batch.in_value), state.h, state.c,
                             P["lstm_wx"], P["lstm_wh"], P["lstm_b"])
        H = T.slice_last(HC, 0, k)
        last = T.reshape(T.slice_rows(HC, n_steps - 1, n_steps), (B, 2 * k))
        h, c = T.slice_last(last, 0, k), T.slice_last(last, k, 2 * k)

        # slot j of step t's window is position t + j of the extended sequences
        seq_valid = np.concatenate([state.mem_valid, real], axis=0)
        seq_refs = np.concatenate([state.mem_refs, np.where(real, batch.tgt_ref, -1)], axis=0)
        widx = np.arange(n_steps)[:, None] + np.arange(L)[None, :]
        valid = np.swapaxes(seq_valid[widx], 1, 2)
        refs = np.swapaxes(seq_refs[widx], 1, 2)
        has_mem = valid.any(axis=-1)

        alpha = ctx = parent_vec = None
        if cfg.attention:
            S = T.concat([Tensor(state.mem), H], axis=0)
            proj = T.windows(T.matmul(S, self.params["att_wm"]), L, n_steps)
            alpha, ctx = self.context_attention(H, T.windows(S, L, n_steps), proj, valid)
            if cfg.parent_attention:
                slots = self.parent_slots(batch.parent, valid)
                prev = T.reshape(state.h, (1, B, k))
                if n_steps > 1:
                    prev = T.concat([prev, T.slice_rows(H, 0, n_steps - 1)], axis=0)
                ext = T.concat([S, prev], axis=0)
                # fallback slot L maps to this step's h_prev, stored after S
                idx = np.where(slots < L, widx[:, :1] + slots, L + n_steps + widx[:, :1])
                parent_vec = T.gather_rows(ext, idx)
        w = self.vocab_distribution(H, ctx, parent_vec)

        y, s_val = w, None
        if cfg.pointer:
            l = alpha if cfg.mode == "pointer_mixture" else self.random_pointer(valid)
            y, s_eff = self.mixture(w, l, self.switcher(H, ctx), has_mem)
            s_val = s_eff.data[..., 0]

        target = self.target_dims(valid, real, batch.label_kind, batch.label_index, batch.tgt_type)
        out = SegmentOutput(y, w, None if alpha is None else alpha.data, s_val,
                            np.where(valid, refs, -1), valid, target)
        mem = np.concatenate([state.mem, H.data], axis=0)[-L:]
        end = StepState(h, c, mem, seq_refs[-L:], seq_valid[-L:])
        return out, end

    def step(self, memory: _Memory, h_prev: Tensor, c_prev: Tensor, in_type, in_value, parent,
             tgt_ref, real, label_kind=None, label_index=None, tgt_type=None):
        """One time step for ``B`` lanes straight from the model equations.

        ``memory`` is updated in place (``h_t`` pushed after predicting);
        returns the step output and the new ``(h, c)``.
        """
        cfg = self.config
        L = cfg.window
        B = h_prev.shape[0]
        h, c = self.lstm_cell(self.encode_input(in_type, in_value), h_prev, c_prev)
        valid = np.stack(memory.valid, axis=1)
        has_mem = valid.any(axis=1)

        alpha = ctx = parent_vec = None
        if cfg.attention:
            M = T.stack(memory.h, axis=1)
            alpha, ctx = self.context_attention(h, M, T.stack(memory.proj, axis=1), valid)
            if cfg.parent_attention:
                slots = self.parent_slots(parent, valid)
                parent_vec = T.take_slot(T.stack(memory.h + [h_prev], axis=1), slots)
        w = self.vocab_distribution(h, ctx, parent_vec)

        l = s_val = None
        y = w
        if cfg.pointer:
            l = alpha if cfg.mode == "pointer_mixture" else self.random_pointer(valid)
            y, s_eff = self.mixture(w, l, self.switcher(h, ctx), has_mem)
            s_val = s_eff.data[:, 0]

        target = self.target_dims(valid, real, label_kind, label_index, tgt_type)
        refs = np.where(valid, np.stack(memory.refs, axis=1), -1)
        out = StepOutput(y, w, l, None if alpha is None else alpha.data, s_val, refs, valid, target)

        real = np.asarray(real, dtype=bool)
        memory.h = memory.h[1:] + [h]
        memory.proj = memory.proj[1:] + [T.matmul(h, self.params["att_wm"]) if cfg.attention else None]
        memory.refs = memory.refs[1:] + [np.where(real, tgt_ref, -1)]
        memory.valid = memory.valid[1:] + [real.copy()]
        return out, h, c

    def forward_segment_stepwise(self, batch: SegmentBatch, carry: Optional[StepState] = None):
        """Reference implementation of :meth:`forward_segment`, one step at a time."""
        cfg = self.config
        state = self.start_state(batch.reset, carry)
        L = cfg.window
        mem_h = [Tensor(m) for m in state.mem]
        proj = [T.matmul(m, self.params["att_wm"]) if cfg.attention else None for m in mem_h]
        memory = _Memory(mem_h, proj, list(state.mem_refs), list(state.mem_valid))
        h, c = state.h, state.c
        steps = []
        for t in range(batch.steps):
            out, h, c = self.step(memory, h, c, batch.in_type[t], batch.in_value[t], batch.parent[t],
                                  batch.tgt_ref[t], batch.real[t], batch.label_kind[t],
                                  batch.label_index[t], batch.tgt_type[t])
            steps.append(out)
        seg = SegmentOutput(
            T.stack([o.y for o in steps], axis=0), T.stack([o.w for o in steps], axis=0),
            None if steps[0].alpha is None else np.stack([o.alpha for o in steps]),
            None if steps[0].s is None else np.stack([o.s for o in steps]),
            np.stack([o.window_refs for o in steps]), np.stack([o.valid for o in steps]),
            np.stack([o.target for o in steps]))
        mem = np.stack([m.data for m in memory.h])
        end = StepState(h, c, mem, np.stack(memory.refs), np.stack(memory.valid))
        return seg, end

    def segment_loss(self, out: SegmentOutput) -> tuple[Tensor, int]:
        n = out.y.shape[-1]
        return T.cross_entropy_masked(T.reshape(out.y, (-1, n)), out.target.reshape(-1))


def decode(y, vocab_words, window_tokens) -> str:
    """Top-1 token: a vocabulary word, or the string held by the chosen window slot.

    ``np.argmax`` keeps the first maximum, so ties go to the lower index.
    """
    y = np.asarray(y.data if isinstance(y, Tensor) else y)
    i = int(np.argmax(y))
    V = len(vocab_words)
    if i < V:
        return vocab_words[i]
    return window_tokens[i - V]


def clone_config(cfg: ModelConfig, **changes) -> ModelConfig:
    return replace(cfg, **changes)
