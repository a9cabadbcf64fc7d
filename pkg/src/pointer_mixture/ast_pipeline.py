"""AST corpus parsing, flattening and segmentation.

Corpus lines are JSON arrays of node objects ``{"type", "value"?, "children"?}``
with node 0 as the root (the public JS/PY benchmark layout). Each tree is
flattened parent-before-children; every flat node carries its augmented type
(base type plus has-child / has-sibling bits), its value (``EMPTY`` for
non-leaves) and the distance back to its parent.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional

import numpy as np

log = logging.getLogger(__name__)

EMPTY = "<EMPTY>"
EOF = "<EOF>"
UNK = "<UNK>"

ROOT_PARENT_OFFSET = 1


class CorpusParseError(ValueError):
    def __init__(self, message: str, line_no: Optional[int] = None):
        self.line_no = line_no
        super().__init__(f"line {line_no}: {message}" if line_no is not None else message)


class TreeStructureError(CorpusParseError):
    pass


@dataclass(frozen=True)
class AstNode:
    type_name: str
    value: Optional[str] = None
    children: tuple = ()


@dataclass(frozen=True)
class FlatNode:
    base_type: str
    has_child: bool
    has_sibling: bool
    value: str
    parent_offset: int

    @property
    def augmented_type(self) -> str:
        return augment_type(self.base_type, self.has_child, self.has_sibling)


@dataclass
class ProgramSeq:
    nodes: list
    program_id: int = 0

    def __len__(self) -> int:
        return len(self.nodes)


def augment_type(base_type: str, has_child: bool, has_sibling: bool) -> str:
    return f"{base_type}#{int(bool(has_child))}{int(bool(has_sibling))}"


def split_augmented(aug: str) -> tuple[str, bool, bool]:
    base, bits = aug.rsplit("#", 1)
    return base, bits[0] == "1", bits[1] == "1"


def validate_tree(nodes: list, line_no: Optional[int] = None) -> None:
    n = len(nodes)
    parent = [-1] * n
    for i, node in enumerate(nodes):
        for c in node.children:
            if not isinstance(c, int) or isinstance(c, bool) or c < 0 or c >= n:
                raise TreeStructureError(f"node {i} has out-of-range child {c!r}", line_no)
            if c == 0:
                raise TreeStructureError(f"node {i} lists the root as a child", line_no)
            if parent[c] != -1:
                raise TreeStructureError(f"node {c} has two parents ({parent[c]} and {i})", line_no)
            parent[c] = i
    # single parent everywhere + all reachable from a parentless root => acyclic tree
    seen = 0
    stack = [0] if n else []
    visited = [False] * n
    while stack:
        i = stack.pop()
        if visited[i]:
            raise TreeStructureError(f"cycle through node {i}", line_no)
        visited[i] = True
        seen += 1
        stack.extend(nodes[i].children)
    if seen != n:
        raise TreeStructureError(f"{n - seen} node(s) unreachable from the root (cycle or forest)", line_no)


def parse_dataset_line(line: str, line_no: Optional[int] = None) -> list:
    """Parse one corpus line into a validated list of :class:`AstNode`."""
    try:
        raw = json.loads(line)
    except json.JSONDecodeError as exc:
        raise CorpusParseError(f"malformed JSON: {exc.msg}", line_no) from None
    if not isinstance(raw, list):
        raise CorpusParseError("expected a JSON array of nodes", line_no)
    # js150 lines end with a bare 0 sentinel
    while raw and not isinstance(raw[-1], dict) and raw[-1] == 0:
        raw.pop()
    nodes = []
    for i, obj in enumerate(raw):
        if not isinstance(obj, dict) or "type" not in obj:
            raise CorpusParseError(f"node {i} is not an object with a 'type'", line_no)
        value = obj.get("value")
        nodes.append(AstNode(str(obj["type"]),
                             None if value is None else str(value),
                             tuple(obj.get("children", ()))))
    validate_tree(nodes, line_no)
    return nodes


def iter_corpus(path, *, limit: Optional[int] = None, skip: int = 0) -> Iterator[tuple[int, list]]:
    """Yield ``(line_no, nodes)`` for each non-empty program of a JSONL file."""
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if line_no <= skip:
                continue
            if limit is not None and line_no > skip + limit:
                break
            if not line.strip():
                continue
            nodes = parse_dataset_line(line, line_no)
            if not nodes:
                log.warning("line %d: empty program skipped", line_no)
                continue
            yield line_no, nodes


def flatten(nodes: list, program_id: int = 0) -> ProgramSeq:
    """Pre-order flattening with child/sibling bits and parent offsets."""
    if not nodes:
        return ProgramSeq([], program_id)
    flat_index = {}
    out = []
    # entries: (node index, parent flat index, has right sibling)
    stack = [(0, -1, False)]
    while stack:
        i, parent_flat, has_sib = stack.pop()
        node = nodes[i]
        pos = len(out)
        flat_index[i] = pos
        leaf = not node.children
        value = (node.value if node.value is not None else EMPTY) if leaf else EMPTY
        offset = ROOT_PARENT_OFFSET if parent_flat < 0 else pos - parent_flat
        out.append(FlatNode(node.type_name, not leaf, has_sib, value, offset))
        kids = node.children
        for j in range(len(kids) - 1, -1, -1):
            stack.append((kids[j], pos, j < len(kids) - 1))
    return ProgramSeq(out, program_id)


def unflatten(seq) -> list:
    """Rebuild the node list (in flat order) from a well-formed flattening."""
    flat = seq.nodes if isinstance(seq, ProgramSeq) else list(seq)
    n = len(flat)
    if n == 0:
        return []
    if flat[0].has_sibling:
        raise TreeStructureError("root cannot have a sibling")
    children = [[] for _ in range(n)]
    stack = [0] if flat[0].has_child else []
    pos = 1
    while stack:
        if pos >= n:
            raise TreeStructureError(f"sequence ends with {len(stack)} open subtree(s)")
        parent = stack[-1]
        children[parent].append(pos)
        if flat[pos].parent_offset != pos - parent:
            raise TreeStructureError(
                f"node {pos} records parent offset {flat[pos].parent_offset}, structure implies {pos - parent}")
        if not flat[pos].has_sibling:
            stack.pop()
        if flat[pos].has_child:
            stack.append(pos)
        pos += 1
    if pos != n:
        raise TreeStructureError(f"{n - pos} trailing node(s) after the root closed")
    return [AstNode(f.base_type, None if f.value == EMPTY else f.value, tuple(children[i]))
            for i, f in enumerate(flat)]


def parent_index(seq: ProgramSeq, i: int) -> int:
    return i - seq.nodes[i].parent_offset if i else -1


@dataclass
class Segment:
    type_ids: np.ndarray
    value_refs: np.ndarray
    parent_offsets: np.ndarray
    n_real: int
    program_id: int
    is_first: bool


def segment_program(types, values, parents, length: int = 50, program_id: int = 0,
                    eof_type: int = -1, eof_value: int = -1) -> list:
    """Cut aligned per-node arrays into EOF-padded segments of ``length``."""
    if length < 1:
        raise ValueError("segment length must be >= 1")
    n = len(types)
    segs = []
    for k in range(math.ceil(n / length)):
        lo, hi = k * length, min(n, (k + 1) * length)
        pad = length - (hi - lo)
        segs.append(Segment(
            np.concatenate([np.asarray(types[lo:hi], dtype=np.int64), np.full(pad, eof_type, np.int64)]),
            np.concatenate([np.asarray(values[lo:hi], dtype=np.int64), np.full(pad, eof_value, np.int64)]),
            np.concatenate([np.asarray(parents[lo:hi], dtype=np.int64), np.ones(pad, np.int64)]),
            hi - lo, program_id, k == 0))
    return segs


# --------------------------------------------------------------------------
# preprocessed corpus


@dataclass
class Program:
    program_id: int
    types: np.ndarray
    values: np.ndarray
    parents: np.ndarray

    def __len__(self) -> int:
        return len(self.types)


@dataclass
class Corpus:
    """Flattened programs over shared type and string tables.

    ``types`` / ``values`` hold indices into ``type_names`` / ``strings``.
    """

    type_names: list = field(default_factory=list)
    strings: list = field(default_factory=list)
    programs: list = field(default_factory=list)

    def __post_init__(self):
        self._type_ix = {t: i for i, t in enumerate(self.type_names)}
        self._str_ix = {s: i for i, s in enumerate(self.strings)}

    def type_id(self, name: str) -> int:
        i = self._type_ix.get(name)
        if i is None:
            i = self._type_ix[name] = len(self.type_names)
            self.type_names.append(name)
        return i

    def string_id(self, s: str) -> int:
        i = self._str_ix.get(s)
        if i is None:
            i = self._str_ix[s] = len(self.strings)
            self.strings.append(s)
        return i

    def add_sequence(self, seq: ProgramSeq) -> Program:
        prog = Program(
            seq.program_id,
            np.array([self.type_id(f.augmented_type) for f in seq.nodes], dtype=np.int32),
            np.array([self.string_id(f.value) for f in seq.nodes], dtype=np.int32),
            np.array([f.parent_offset for f in seq.nodes], dtype=np.int32),
        )
        self.programs.append(prog)
        return prog

    def to_sequence(self, prog: Program) -> ProgramSeq:
        nodes = []
        for t, v, p in zip(prog.types, prog.values, prog.parents):
            base, hc, hs = split_augmented(self.type_names[t])
            nodes.append(FlatNode(base, hc, hs, self.strings[v], int(p)))
        return ProgramSeq(nodes, prog.program_id)

    @property
    def node_count(self) -> int:
        return int(sum(len(p) for p in self.programs))

    def base_types(self) -> set:
        return {split_augmented(t)[0] for t in self.type_names}

    def observed_types(self) -> set:
        used = set()
        for p in self.programs:
            used.update(np.unique(p.types).tolist())
        return {self.type_names[i] for i in used}

    def subset(self, indices) -> "Corpus":
        return Corpus(list(self.type_names), list(self.strings), [self.programs[i] for i in indices])

    def split(self, n_train: int) -> tuple["Corpus", "Corpus"]:
        n = len(self.programs)
        return self.subset(range(min(n_train, n))), self.subset(range(min(n_train, n), n))

    def summary(self) -> dict:
        observed = self.observed_types()
        return {
            "programs": len(self.programs),
            "nodes": self.node_count,
            "augmented_types": len(observed),
            "base_types": len({split_augmented(t)[0] for t in observed}),
            "distinct_values": len(self.strings),
        }

    # File layout: numpy .npz with int32 arrays ``types``, ``values``,
    # ``parents`` (all programs concatenated), ``offsets`` (program start
    # positions, length programs+1), ``program_ids``, and the UTF-8 JSON
    # tables ``type_table`` / ``string_table`` stored as uint8 arrays.
    def save(self, path) -> None:
        lengths = [len(p) for p in self.programs]
        offsets = np.concatenate([[0], np.cumsum(lengths)]).astype(np.int64)

        def cat(attr):
            parts = [getattr(p, attr) for p in self.programs]
            return np.concatenate(parts).astype(np.int32) if parts else np.zeros(0, np.int32)

        np.savez(
            path,
            types=cat("types"), values=cat("values"), parents=cat("parents"), offsets=offsets,
            program_ids=np.array([p.program_id for p in self.programs], dtype=np.int64),
            type_table=np.frombuffer(json.dumps(self.type_names).encode("utf-8"), dtype=np.uint8),
            string_table=np.frombuffer(json.dumps(self.strings).encode("utf-8"), dtype=np.uint8),
        )

    @classmethod
    def load(cls, path) -> "Corpus":
        with np.load(path, allow_pickle=False) as z:
            type_names = json.loads(z["type_table"].tobytes().decode("utf-8"))
            strings = json.loads(z["string_table"].tobytes().decode("utf-8"))
            off = z["offsets"]
            types, values, parents, ids = z["types"], z["values"], z["parents"], z["program_ids"]
        programs = [Program(int(ids[i]), types[off[i]:off[i + 1]].copy(), values[off[i]:off[i + 1]].copy(),
                            parents[off[i]:off[i + 1]].copy()) for i in range(len(ids))]
        return cls(type_names, strings, programs)


def build_corpus(programs: Iterable[list]) -> Corpus:
    corpus = Corpus()
    for pid, nodes in enumerate(programs):
        corpus.add_sequence(flatten(nodes, pid))
    return corpus


def preprocess_file(path, *, limit: Optional[int] = None) -> Corpus:
    corpus = Corpus()
    for line_no, nodes in iter_corpus(path, limit=limit):
        corpus.add_sequence(flatten(nodes, line_no - 1))
    if not corpus.programs:
        log.warning("%s: no programs found", path)
    return corpus


def load_corpus(path) -> Corpus:
    path = Path(path)
    if path.suffix == ".npz":
        return Corpus.load(path)
    return preprocess_file(path)
