"""Rooted ordered syntax trees: data model, validation, traversals, JSON-lines IO."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, replace
from typing import Iterable, Iterator, Sequence

import numpy as np

UNKNOWN = "<unk>"


class ValidationError(Exception):
    """A tree violates a structural invariant."""


class MissingRoot(ValidationError):
    pass


class DuplicateId(ValidationError):
    pass


class OrphanNode(ValidationError):
    """A node is unreachable, multiply parented, or dangling."""


class CycleDetected(ValidationError):
    pass


class ParseError(Exception):
    """A tree file line could not be decoded."""

    def __init__(self, message: str, line: int | None = None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


@dataclass(frozen=True)
class SyntaxNode:
    """One typed tree node; ``children`` order is significant."""

    id: int
    type_id: int
    token_id: int | None = None
    children: tuple[int, ...] = ()

    def is_leaf(self) -> bool:
        return not self.children


@dataclass
class SyntaxTree:
    """Rooted, ordered, arbitrary-arity tree. Treat as immutable once validated."""

    nodes: dict[int, SyntaxNode]
    root: int
    tree_label: int | None = None
    node_labels: dict[int, int] | None = None

    def node(self, node_id: int) -> SyntaxNode:
        return self.nodes[node_id]

    def __len__(self) -> int:
        return len(self.nodes)

    @classmethod
    def from_nodes(
        cls,
        nodes: Iterable[SyntaxNode],
        root: int,
        tree_label: int | None = None,
        node_labels: dict[int, int] | None = None,
    ) -> "SyntaxTree":
        table: dict[int, SyntaxNode] = {}
        for n in nodes:
            if n.id in table:
                raise DuplicateId(f"node id {n.id} appears twice")
            table[n.id] = n
        return cls(table, root, tree_label, node_labels)


def validate(tree: SyntaxTree) -> None:
    """Raise a ValidationError subclass unless ``tree`` is a valid rooted tree."""
    nodes = tree.nodes
    if tree.root not in nodes:
        raise MissingRoot(f"root id {tree.root} not among nodes")
    for key, n in nodes.items():
        if key != n.id:
            raise DuplicateId(f"node keyed {key} carries id {n.id}")

    # One parent per non-root node; all child references must resolve.
    parent_count: dict[int, int] = {}
    for n in nodes.values():
        for c in n.children:
            if c not in nodes:
                raise OrphanNode(f"node {c} referenced as child of {n.id} but missing")
            parent_count[c] = parent_count.get(c, 0) + 1
    if parent_count.get(tree.root, 0) > 0:
        raise CycleDetected(f"root {tree.root} is listed as a child")
    for nid, count in parent_count.items():
        if count > 1:
            raise OrphanNode(f"node {nid} has {count} parents")

    # Reachability from the root; a back edge on the DFS path is a cycle.
    seen: set[int] = set()
    on_path: set[int] = set()
    stack: list[tuple[int, int]] = [(tree.root, 0)]
    on_path.add(tree.root)
    seen.add(tree.root)
    while stack:
        nid, ci = stack[-1]
        kids = nodes[nid].children
        if ci == len(kids):
            stack.pop()
            on_path.discard(nid)
            continue
        stack[-1] = (nid, ci + 1)
        child = kids[ci]
        if child in on_path:
            raise CycleDetected(f"node {child} is its own ancestor")
        if child not in seen:
            seen.add(child)
            on_path.add(child)
            stack.append((child, 0))
    if len(seen) != len(nodes):
        missing = min(set(nodes) - seen)
        raise OrphanNode(f"node {missing} unreachable from root")


def parent_map(tree: SyntaxTree) -> dict[int, int]:
    return {c: n.id for n in tree.nodes.values() for c in n.children}


def depths(tree: SyntaxTree) -> dict[int, int]:
    """Depth per node id; the root has depth 1."""
    out = {tree.root: 1}
    frontier = [tree.root]
    while frontier:
        nxt: list[int] = []
        for nid in frontier:
            for c in tree.node(nid).children:
                out[c] = out[nid] + 1
                nxt.append(c)
        frontier = nxt
    return out


def heights(tree: SyntaxTree) -> dict[int, int]:
    """Height per node id; leaves have height 0."""
    out: dict[int, int] = {}
    for nid in reversed(preorder(tree)):
        kids = tree.node(nid).children
        out[nid] = 1 + max(out[c] for c in kids) if kids else 0
    return out


def depth(tree: SyntaxTree) -> int:
    """Number of levels; a single-node tree has depth 1."""
    return max(depths(tree).values())


def preorder(tree: SyntaxTree) -> list[int]:
    order: list[int] = []
    stack = [tree.root]
    while stack:
        nid = stack.pop()
        order.append(nid)
        stack.extend(reversed(tree.node(nid).children))
    return order


def leaves(tree: SyntaxTree) -> list[int]:
    return [n.id for n in tree.nodes.values() if n.is_leaf()]


@dataclass(frozen=True)
class BranchingStats:
    max_children: int
    avg_children: float
    node_count: int


def branching_stats(tree: SyntaxTree) -> BranchingStats:
    """Branching statistics; the average is over non-leaf nodes (0.0 if none)."""
    counts = [len(n.children) for n in tree.nodes.values()]
    inner = [c for c in counts if c > 0]
    avg = sum(inner) / len(inner) if inner else 0.0
    return BranchingStats(max(counts), avg, len(counts))


def renumber_preorder(tree: SyntaxTree) -> SyntaxTree:
    """Reassign ids densely (0..N-1) in pre-order, preserving child order."""
    order = preorder(tree)
    remap = {old: new for new, old in enumerate(order)}
    nodes = {
        remap[n.id]: replace(
            n, id=remap[n.id], children=tuple(remap[c] for c in n.children)
        )
        for n in tree.nodes.values()
    }
    labels = None
    if tree.node_labels is not None:
        labels = {remap[k]: v for k, v in tree.node_labels.items()}
    return SyntaxTree(nodes, remap[tree.root], tree.tree_label, labels)


class Vocabulary:
    """Two dense string<->id bijections (grammar types and lexical tokens).

    Index 0 of each table is the reserved UNKNOWN symbol; lookups of
    out-of-vocabulary strings resolve to it.
    """

    def __init__(self, type_symbols: Sequence[str], token_symbols: Sequence[str]):
        self.type_symbols = self._with_unknown(type_symbols)
        self.token_symbols = self._with_unknown(token_symbols)
        self._type_index = {s: i for i, s in enumerate(self.type_symbols)}
        self._token_index = {s: i for i, s in enumerate(self.token_symbols)}
        if len(self._type_index) != len(self.type_symbols):
            raise ValueError("duplicate type symbol")
        if len(self._token_index) != len(self.token_symbols):
            raise ValueError("duplicate token symbol")

    @staticmethod
    def _with_unknown(symbols: Sequence[str]) -> list[str]:
        out = [s for s in symbols if s != UNKNOWN]
        return [UNKNOWN] + out

    @property
    def n_types(self) -> int:
        return len(self.type_symbols)

    @property
    def n_tokens(self) -> int:
        return len(self.token_symbols)

    def type_id(self, symbol: str) -> int:
        return self._type_index.get(symbol, 0)

    def token_id(self, symbol: str) -> int:
        return self._token_index.get(symbol, 0)

    def type_symbol(self, type_id: int) -> str:
        return self.type_symbols[type_id]

    def token_symbol(self, token_id: int) -> str:
        return self.token_symbols[token_id]

    def to_obj(self) -> dict:
        return {"types": list(self.type_symbols), "tokens": list(self.token_symbols)}

    @classmethod
    def from_obj(cls, obj: dict) -> "Vocabulary":
        return cls(obj["types"], obj["tokens"])

    def digest(self) -> str:
        blob = json.dumps(self.to_obj(), separators=(",", ":"), ensure_ascii=False)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Vocabulary)
            and self.type_symbols == other.type_symbols
            and self.token_symbols == other.token_symbols
        )


def tree_to_obj(tree: SyntaxTree, vocab: Vocabulary) -> dict:
    nodes = [
        {
            "id": n.id,
            "type": vocab.type_symbol(n.type_id),
            "token": None if n.token_id is None else vocab.token_symbol(n.token_id),
            "children": list(n.children),
        }
        for n in sorted(tree.nodes.values(), key=lambda n: n.id)
    ]
    obj: dict = {"root": tree.root, "label": tree.tree_label, "nodes": nodes}
    if tree.node_labels is not None:
        obj["node_labels"] = {
            str(k): tree.node_labels[k] for k in sorted(tree.node_labels)
        }
    return obj


def tree_to_line(tree: SyntaxTree, vocab: Vocabulary) -> str:
    """Canonical one-line JSON form (field order fixed, nodes sorted by id)."""
    return json.dumps(tree_to_obj(tree, vocab), separators=(",", ":"), ensure_ascii=False)


def tree_digest(tree: SyntaxTree, vocab: Vocabulary) -> str:
    return hashlib.sha256(tree_to_line(tree, vocab).encode("utf-8")).hexdigest()


def tree_from_obj(obj: dict, vocab: Vocabulary, line: int | None = None) -> SyntaxTree:
    try:
        root = int(obj["root"])
        label = obj["label"]
        raw_nodes = obj["nodes"]
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"bad tree object: {exc}", line) from exc
    if label is not None:
        label = int(label)
    nodes: list[SyntaxNode] = []
    for rn in raw_nodes:
        try:
            token = rn["token"]
            nodes.append(
                SyntaxNode(
                    id=int(rn["id"]),
                    type_id=vocab.type_id(rn["type"]),
                    token_id=None if token is None else vocab.token_id(token),
                    children=tuple(int(c) for c in rn["children"]),
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"bad node object: {exc}", line) from exc
    node_labels = None
    if "node_labels" in obj:
        node_labels = {int(k): int(v) for k, v in obj["node_labels"].items()}
    tree = SyntaxTree.from_nodes(nodes, root, label, node_labels)
    validate(tree)
    return tree


def save_trees(trees: Iterable[SyntaxTree], path, vocab: Vocabulary) -> None:
    """Write trees as canonical JSON lines (UTF-8, one tree per line)."""
    with open(path, "w", encoding="utf-8") as fh:
        for tree in trees:
            fh.write(tree_to_line(tree, vocab))
            fh.write("\n")


def iter_tree_lines(path, vocab: Vocabulary) -> Iterator[SyntaxTree]:
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            raw = raw.strip()
            if not raw:
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise ParseError(str(exc), lineno) from exc
            try:
                yield tree_from_obj(obj, vocab, lineno)
            except ValidationError as exc:
                raise type(exc)(f"line {lineno}: {exc}") from exc


def load_trees(path, vocab: Vocabulary) -> list[SyntaxTree]:
    """Read a tree JSON-lines file; inverse of save_trees on valid input."""
    return list(iter_tree_lines(path, vocab))


def random_tree(
    rng: np.random.Generator,
    n_nodes: int,
    max_children: int,
    n_types: int,
    n_tokens: int,
) -> SyntaxTree:
    """Random valid tree with bounded branching, dense pre-order ids.

    Leaves carry a random token; interior nodes carry none.
    """
    if n_nodes < 1:
        raise ValueError("n_nodes must be >= 1")
    children: list[list[int]] = [[] for _ in range(n_nodes)]
    open_slots = [0]
    for nid in range(1, n_nodes):
        pick = int(rng.integers(len(open_slots)))
        parent = open_slots[pick]
        children[parent].append(nid)
        if len(children[parent]) >= max_children:
            open_slots.pop(pick)
        open_slots.append(nid)
    type_ids = rng.integers(0, n_types, size=n_nodes)
    token_ids = rng.integers(0, n_tokens, size=n_nodes)
    nodes = [
        SyntaxNode(
            id=i,
            type_id=int(type_ids[i]),
            token_id=int(token_ids[i]) if not children[i] else None,
            children=tuple(children[i]),
        )
        for i in range(n_nodes)
    ]
    return renumber_preorder(SyntaxTree.from_nodes(nodes, 0))
