"""Synthetic AST corpora with controllable identifier locality.

Programs are a ``Module`` root over a run of statements drawn from a few fixed
templates. Template leaves are either structural (no value), a *common* value
drawn from one of four groups that together form the value pool, or an
*identifier* slot. An identifier slot re-uses an identifier seen in the
previous ``window`` nodes with probability ``repeat_prob`` (preferring the
more recent ones) and otherwise draws a fresh name from the OoV pool. Common
values behave alike with ``common_repeat_prob``, re-using a recent value of the
same group, and otherwise follow a Zipf law over the group.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .ast_pipeline import AstNode, Corpus, flatten

E, I = "E", "I"  # structural node, identifier slot; ints are common-value groups

TEMPLATES = {
    "assign": [("Assign", E, -1), ("NameStore", I, 0), ("Call", E, 0), ("NameLoad", 0, 2), ("Num", 1, 2)],
    "augassign": [("AugAssign", E, -1), ("NameStore", I, 0), ("Op", 2, 0), ("NameLoad", I, 0)],
    "expr": [("Expr", E, -1), ("Call", E, 0), ("AttributeLoad", E, 1), ("NameLoad", I, 2),
             ("attr", 2, 2), ("Str", 1, 1)],
    "return": [("Return", E, -1), ("NameLoad", I, 0)],
    "import": [("ImportFrom", E, -1), ("alias", 3, 0), ("alias", 3, 0)],
    "if": [("If", E, -1), ("Compare", E, 0), ("NameLoad", I, 1), ("CompareOp", 2, 1), ("Num", 1, 1),
           ("body", E, 0), ("Pass", E, 5)],
}
TEMPLATE_WEIGHTS = {"assign": 0.25, "augassign": 0.10, "expr": 0.25, "return": 0.10, "import": 0.10, "if": 0.20}
GROUP_NAMES = ("fn", "num", "attr", "mod")


@dataclass
class SyntheticSpec:
    programs: int = 1000
    mean_length: int = 300
    length_spread: float = 0.2
    vocab_pool: int = 200
    oov_pool: int = 100_000
    repeat_prob: float = 0.8
    recency_decay: float = 0.35
    common_repeat_prob: float = 0.5
    window: int = 50
    seed: int = 0

    def __post_init__(self):
        if min(self.programs, self.mean_length, self.vocab_pool, self.oov_pool, self.window) < 1:
            raise ValueError("synthetic corpus sizes must be positive")
        for name in ("repeat_prob", "common_repeat_prob"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must lie in [0, 1]")


def identifier_fraction() -> float:
    """Expected share of nodes that are identifier slots (ignoring the root)."""
    w = np.array(list(TEMPLATE_WEIGHTS.values()))
    idents = np.array([sum(k == I for _, k, _ in TEMPLATES[t]) for t in TEMPLATE_WEIGHTS])
    sizes = np.array([len(TEMPLATES[t]) for t in TEMPLATE_WEIGHTS])
    return float(w @ idents / (w @ sizes))


def expected_localness(spec: SyntheticSpec) -> float:
    """Localness the generator aims for when every pool value is in vocabulary."""
    return identifier_fraction() * spec.repeat_prob


def _pool(spec: SyntheticSpec):
    groups = []
    base, extra = divmod(spec.vocab_pool, len(GROUP_NAMES))
    for g, name in enumerate(GROUP_NAMES):
        n = base + (1 if g < extra else 0)
        values = [f"{name}_{i}" for i in range(max(n, 1))]
        weights = 1.0 / np.arange(1, len(values) + 1)
        groups.append((values, weights / weights.sum()))
    return groups


def generate_program(spec: SyntheticSpec, rng: np.random.Generator, groups=None,
                     length: Optional[int] = None) -> list:
    """One program as a list of :class:`AstNode` (pre-order indices)."""
    groups = groups or _pool(spec)
    names = list(TEMPLATE_WEIGHTS)
    probs = np.array([TEMPLATE_WEIGHTS[n] for n in names])
    probs = probs / probs.sum()
    if length is None:
        lo = max(1, int(round(spec.mean_length * (1 - spec.length_spread))))
        hi = max(lo, int(round(spec.mean_length * (1 + spec.length_spread))))
        length = int(rng.integers(lo, hi + 1))

    types: list = ["Module"]
    values: list = [None]
    children: list = [[]]
    idents: list = [None]  # identifier name per position, None otherwise
    groups_at: list = [None]  # common-value group per position

    def add(type_name, value, parent, ident=None, group=None):
        pos = len(types)
        children.append([])
        children[parent].append(pos)
        types.append(type_name)
        values.append(value)
        idents.append(ident)
        groups_at.append(group)
        return pos

    def statement(parent):
        tmpl = TEMPLATES[names[rng.choice(len(names), p=probs)]]
        start = len(types)
        for type_name, kind, up in tmpl:
            where = parent if up < 0 else start + up
            if kind == E:
                add(type_name, None, where)
            elif kind == I:
                name = _identifier(spec, rng, idents, len(types))
                add(type_name, name, where, ident=name)
            else:
                add(type_name, _common(spec, rng, groups, kind, values, groups_at, len(types)), where,
                    group=kind)

    while len(types) < length:
        statement(0)
    return [AstNode(t, v, tuple(c)) for t, v, c in zip(types, values, children)]


def _recent(seq: list, pos: int, window: int, keep) -> list:
    """Distinct entries of ``seq`` in the last ``window`` positions, newest first."""
    out = []
    for j in range(pos - 1, max(0, pos - window) - 1, -1):
        if keep(j) and seq[j] not in out:
            out.append(seq[j])
    return out


def _pick_recent(spec: SyntheticSpec, rng: np.random.Generator, recent: list) -> str:
    w = spec.recency_decay ** np.arange(len(recent))
    return recent[rng.choice(len(recent), p=w / w.sum())]


def _common(spec: SyntheticSpec, rng: np.random.Generator, groups, kind: int, values: list,
            groups_at: list, pos: int) -> str:
    recent = _recent(values, pos, spec.window, lambda j: groups_at[j] == kind)
    if recent and rng.random() < spec.common_repeat_prob:
        return _pick_recent(spec, rng, recent)
    pool, w = groups[kind]
    return pool[rng.choice(len(pool), p=w)]


def _identifier(spec: SyntheticSpec, rng: np.random.Generator, idents: list, pos: int) -> str:
    recent = _recent(idents, pos, spec.window, lambda j: idents[j] is not None)
    if recent and rng.random() < spec.repeat_prob:
        return _pick_recent(spec, rng, recent)
    while True:
        name = f"id_{int(rng.integers(spec.oov_pool))}"
        if name not in recent:
            return name


def make_synthetic_corpus(spec: SyntheticSpec) -> Corpus:
    rng = np.random.default_rng(spec.seed)
    groups = _pool(spec)
    corpus = Corpus()
    for pid in range(spec.programs):
        corpus.add_sequence(flatten(generate_program(spec, rng, groups), pid))
    return corpus


def split_synthetic(corpus: Corpus) -> tuple[Corpus, Corpus]:
    """2:1 train/test split."""
    return corpus.split(int(round(len(corpus.programs) * 2 / 3)))
