"""Value vocabulary, target labeling and OoV / localness statistics."""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from .ast_pipeline import EMPTY, EOF, UNK, Corpus

log = logging.getLogger(__name__)


@dataclass
class Vocabulary:
    """Top-``K`` values followed by the ``UNK``, ``EOF`` and ``EMPTY`` ids."""

    words: list
    freqs: list
    k: int

    def __post_init__(self):
        self.index = {w: i for i, w in enumerate(self.words)}
        self.unk = len(self.words)
        self.eof = self.unk + 1
        self.empty = self.unk + 2
        self.index.update({UNK: self.unk, EOF: self.eof, EMPTY: self.empty})

    def __len__(self) -> int:
        return len(self.words) + 3

    @property
    def size(self) -> int:
        return len(self)

    def __contains__(self, value: str) -> bool:
        return value in self.index and value != UNK

    def encode(self, value: str) -> int:
        return self.index.get(value, self.unk)

    def word(self, i: int) -> str:
        if i < len(self.words):
            return self.words[i]
        return (UNK, EOF, EMPTY)[i - len(self.words)]

    def to_json(self) -> dict:
        return {"k": self.k, "specials": {UNK: self.unk, EOF: self.eof, EMPTY: self.empty},
                "values": [{"id": i, "value": w, "freq": f}
                           for i, (w, f) in enumerate(zip(self.words, self.freqs))]}

    @classmethod
    def from_json(cls, obj: dict) -> "Vocabulary":
        vals = sorted(obj["values"], key=lambda e: e["id"])
        return cls([e["value"] for e in vals], [e["freq"] for e in vals], obj["k"])


@dataclass
class TypeVocab:
    """Augmented node types plus an unknown-type id and the EOF type."""

    names: list

    def __post_init__(self):
        self.index = {n: i for i, n in enumerate(self.names)}
        self.unk = len(self.names)
        self.eof = self.unk + 1

    def __len__(self) -> int:
        return len(self.names) + 2

    def encode(self, name: str) -> int:
        return self.index.get(name, self.unk)

    def word(self, i: int) -> str:
        if i < len(self.names):
            return self.names[i]
        return ("<UNK_TYPE>", EOF)[i - len(self.names)]


@dataclass
class Vocabularies:
    values: Vocabulary
    types: TypeVocab

    def to_json(self) -> dict:
        obj = self.values.to_json()
        obj["types"] = self.types.names
        return obj

    @classmethod
    def from_json(cls, obj: dict) -> "Vocabularies":
        return cls(Vocabulary.from_json(obj), TypeVocab(obj["types"]))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1, ensure_ascii=False), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabularies":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def top_k(counts: Counter, k: int) -> list:
    if k < 1:
        raise ValueError("K must be >= 1")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    if k > len(ranked):
        log.warning("K=%d exceeds the %d distinct values; keeping all", k, len(ranked))
    return ranked[:k]


def value_counts(corpus: Corpus) -> Counter:
    ref_counts = np.zeros(len(corpus.strings), dtype=np.int64)
    for p in corpus.programs:
        ref_counts += np.bincount(p.values, minlength=len(corpus.strings))
    counts = Counter()
    for ref in np.nonzero(ref_counts)[0]:
        s = corpus.strings[ref]
        if s not in (EMPTY, EOF, UNK):
            counts[s] = int(ref_counts[ref])
    return counts


def build_vocab(corpus: Union[Corpus, Counter, Iterable[str]], k: int) -> Vocabulary:
    """Keep the ``k`` most frequent values; ties go to the lexicographically smaller.

    Accepts a corpus, ready-made value counts, or an iterable of value strings.
    """
    if isinstance(corpus, Corpus):
        counts = value_counts(corpus)
    elif isinstance(corpus, Counter):
        counts = Counter({v: c for v, c in corpus.items() if v not in (EMPTY, EOF, UNK)})
    else:
        counts = Counter(v for v in corpus if v not in (EMPTY, EOF, UNK))
    ranked = top_k(counts, k)
    return Vocabulary([w for w, _ in ranked], [c for _, c in ranked], k)


def build_type_vocab(corpus: Corpus) -> TypeVocab:
    return TypeVocab(sorted(corpus.observed_types()))


def build_vocabularies(corpus: Corpus, k: int) -> Vocabularies:
    return Vocabularies(build_vocab(corpus, k), build_type_vocab(corpus))


# --------------------------------------------------------------------------
# labeling


@dataclass(frozen=True)
class VocabId:
    id: int


@dataclass(frozen=True)
class WindowPos:
    offset: int  # 1 = the immediately preceding token


@dataclass(frozen=True)
class MaskedUnk:
    pass


MASKED_UNK = MaskedUnk()
TrainingTarget = Union[VocabId, WindowPos, MaskedUnk]


def label_target(target: str, window: Sequence[str], vocab: Vocabulary) -> TrainingTarget:
    """Label one query; ``window`` holds the previous values, oldest first."""
    if target in vocab:
        return VocabId(vocab.encode(target))
    for back, value in enumerate(reversed(window), start=1):
        if value == target:
            return WindowPos(back)
    return MASKED_UNK


# label kinds for the array form
KIND_VOCAB, KIND_WINDOW, KIND_MASKED = 0, 1, 2


@dataclass
class ProgramLabels:
    kind: np.ndarray   # KIND_* per position
    index: np.ndarray  # vocab id, or window offset in [1, L]
    value_ids: np.ndarray  # vocab id of each node's value (UNK for OoV)


def in_vocab_mask(corpus: Corpus, vocab: Vocabulary) -> np.ndarray:
    """Vocab id per string-table entry (``UNK`` for out-of-vocabulary)."""
    return np.array([vocab.encode(s) for s in corpus.strings], dtype=np.int64)


def label_program(values: np.ndarray, ref_to_id: np.ndarray, vocab: Vocabulary,
                  window: int) -> ProgramLabels:
    """Array form of :func:`label_target` over one program's string refs."""
    n = len(values)
    ids = ref_to_id[values] if n else np.zeros(0, np.int64)
    kind = np.full(n, KIND_VOCAB, dtype=np.int8)
    index = ids.copy()
    last_seen: dict = {}
    for t in range(n):
        ref = int(values[t])
        if ids[t] == vocab.unk:
            prev = last_seen.get(ref)
            if prev is not None and t - prev <= window:
                kind[t] = KIND_WINDOW
                index[t] = t - prev
            else:
                kind[t] = KIND_MASKED
                index[t] = -1
        last_seen[ref] = t
    return ProgramLabels(kind, index, ids)


@dataclass
class CorpusStats:
    oov_rate: float
    localness: float
    k: int
    window: int
    node_count: int
    oov_count: int = 0
    local_count: int = 0

    def to_json(self) -> dict:
        return {"oov_rate": self.oov_rate, "localness": self.localness, "K": self.k,
                "L": self.window, "node_count": self.node_count,
                "oov_count": self.oov_count, "local_count": self.local_count}


def compute_stats(corpus: Corpus, vocab: Vocabulary, window: int = 50) -> CorpusStats:
    ref_to_id = in_vocab_mask(corpus, vocab)
    nodes = oov = local = 0
    for p in corpus.programs:
        lab = label_program(p.values, ref_to_id, vocab, window)
        nodes += len(p)
        oov += int(np.count_nonzero(lab.kind != KIND_VOCAB))
        local += int(np.count_nonzero(lab.kind == KIND_WINDOW))
    return CorpusStats(oov / nodes if nodes else 0.0, local / nodes if nodes else 0.0,
                       vocab.k, window, nodes, oov, local)


def stream_stats(path, vocab: Vocabulary, window: int = 50, *, skip: int = 0,
                 limit: Optional[int] = None) -> CorpusStats:
    """Stats straight from a JSONL corpus without materialising it."""
    from collections import deque

    from .ast_pipeline import flatten, iter_corpus

    nodes = oov = local = 0
    for _, tree in iter_corpus(path, skip=skip, limit=limit):
        recent: deque = deque(maxlen=window)
        for f in flatten(tree).nodes:
            nodes += 1
            if f.value not in vocab:
                oov += 1
                if f.value in recent:
                    local += 1
            recent.append(f.value)
    return CorpusStats(oov / nodes if nodes else 0.0, local / nodes if nodes else 0.0,
                       vocab.k, window, nodes, oov, local)


def stream_value_counts(path, *, limit: Optional[int] = None) -> Counter:
    return stream_counts(path, limit=limit)[0]


def stream_counts(path, *, limit: Optional[int] = None) -> tuple[Counter, set]:
    """Value counts and the set of augmented types of a JSONL corpus, read one line at a time."""
    from .ast_pipeline import flatten, iter_corpus

    counts: Counter = Counter()
    types: set = set()
    for _, tree in iter_corpus(path, limit=limit):
        nodes = flatten(tree).nodes
        counts.update(f.value for f in nodes if f.value != EMPTY)
        types.update(f.augmented_type for f in nodes)
    return counts, types


def stream_vocabularies(path, k: int, *, limit: Optional[int] = None) -> Vocabularies:
    counts, types = stream_counts(path, limit=limit)
    return Vocabularies(build_vocab(counts, k), TypeVocab(sorted(types)))
