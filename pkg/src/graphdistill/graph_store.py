"""Text-attributed graph storage: loading, validation, splits, and per-node
structural metrics (degree, homophily ratio).

Dataset directory layout:

    meta.json          {"num_nodes", "num_classes", "emb_dim", "class_names",
                        "directed": false}
    nodes.jsonl        one object per line, in node-id order:
                       {"id": int, "label": int|null, "text": str|null}
    edges.csv          "src,dst" integer pairs, one undirected edge per line
    embeddings.f32le   row-major float32 little-endian, num_nodes x emb_dim
    splits.json        optional {"train_pool": [...], "val": [...], "test": [...]}

Graphs are stored undirected: edges are canonicalized to (min, max) pairs,
duplicates collapsed and self-loops dropped at ingest.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadLabel,
    DanglingEdge,
    InsufficientClassSupport,
    InvalidNode,
    MissingFile,
    ShapeMismatch,
)


@dataclass(frozen=True)
class TextGraph:
    """Immutable undirected graph with node embeddings and optional labels."""

    num_nodes: int
    num_classes: int
    class_names: tuple[str, ...]
    edges: tuple[tuple[int, int], ...]       # canonical (u < v), sorted, unique
    embeddings: np.ndarray                   # (num_nodes, emb_dim) float64
    labels: tuple[int | None, ...]
    raw_text: tuple[str | None, ...] | None = None
    neighbors: tuple[tuple[int, ...], ...] = field(init=False, repr=False)

    def __post_init__(self):
        if self.num_nodes < 1:
            raise ShapeMismatch("graph needs at least one node")
        if len(self.class_names) != self.num_classes:
            raise ShapeMismatch(
                f"expected {self.num_classes} class names, got {len(self.class_names)}"
            )
        if len(set(self.class_names)) != self.num_classes:
            raise BadLabel("class names must be distinct")
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] != self.num_nodes:
            raise ShapeMismatch(
                f"embeddings shape {self.embeddings.shape} does not match "
                f"num_nodes={self.num_nodes}"
            )
        if self.embeddings.shape[1] < 1:
            raise ShapeMismatch("embedding dimension must be positive")
        if not np.all(np.isfinite(self.embeddings)):
            raise ShapeMismatch("embeddings contain non-finite values")
        if len(self.labels) != self.num_nodes:
            raise ShapeMismatch("labels length does not match num_nodes")
        for i, y in enumerate(self.labels):
            if y is not None and not (0 <= y < self.num_classes):
                raise BadLabel(f"node {i} has label {y} outside [0, {self.num_classes})")
        adj: list[list[int]] = [[] for _ in range(self.num_nodes)]
        seen = set()
        for u, v in self.edges:
            if not (0 <= u < self.num_nodes and 0 <= v < self.num_nodes):
                raise DanglingEdge(f"edge ({u},{v}) references a missing node")
            if u == v:
                raise DanglingEdge(f"self-loop ({u},{v}) in stored edge set")
            if u > v or (u, v) in seen:
                raise DanglingEdge(f"edge ({u},{v}) not canonical or duplicated")
            seen.add((u, v))
            adj[u].append(v)
            adj[v].append(u)
        object.__setattr__(
            self, "neighbors", tuple(tuple(sorted(ns)) for ns in adj)
        )
        self.embeddings.setflags(write=False)

    @property
    def emb_dim(self) -> int:
        return self.embeddings.shape[1]

    @property
    def num_edges(self) -> int:
        return len(self.edges)


@dataclass(frozen=True)
class SplitSpec:
    """Node partition plus the few-shot labeled set drawn from the train pool."""

    train_pool: tuple[int, ...]
    val: tuple[int, ...]
    test: tuple[int, ...]
    labeled: tuple[int, ...]                 # the n-shot set, subset of train_pool
    shots_per_class: int
    seed: int

    def __post_init__(self):
        parts = [set(self.train_pool), set(self.val), set(self.test)]
        total = sum(len(p) for p in parts)
        if len(parts[0] | parts[1] | parts[2]) != total:
            raise ShapeMismatch("train_pool/val/test must be pairwise disjoint")
        if not set(self.labeled) <= parts[0]:
            raise ShapeMismatch("labeled set must be drawn from the train pool")


def canonical_edges(pairs) -> tuple[tuple[int, int], ...]:
    """Symmetrize, drop self-loops, dedupe, and sort an edge list."""
    out = set()
    for u, v in pairs:
        if u == v:
            continue
        out.add((min(u, v), max(u, v)))
    return tuple(sorted(out))


def load_dataset(dir_path: str | Path) -> TextGraph:
    """Read and validate one dataset directory.

    Raises MissingFile, ShapeMismatch, BadLabel, or DanglingEdge on the
    corresponding contract violations.
    """
    root = Path(dir_path)
    for name in ("meta.json", "nodes.jsonl", "edges.csv", "embeddings.f32le"):
        if not (root / name).is_file():
            raise MissingFile(f"{root / name} not found")

    meta = json.loads((root / "meta.json").read_text())
    num_nodes = int(meta["num_nodes"])
    num_classes = int(meta["num_classes"])
    emb_dim = int(meta["emb_dim"])
    class_names = tuple(str(c) for c in meta["class_names"])

    labels: list[int | None] = []
    texts: list[str | None] = []
    with (root / "nodes.jsonl").open() as fh:
        for lineno, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            if int(row["id"]) != lineno:
                raise ShapeMismatch(
                    f"nodes.jsonl line {lineno} has id {row['id']}; rows must be "
                    "in node-id order"
                )
            y = row.get("label")
            if y is not None:
                y = int(y)
                if not (0 <= y < num_classes):
                    raise BadLabel(f"node {lineno} has label {y} outside [0, {num_classes})")
            labels.append(y)
            texts.append(row.get("text"))
    if len(labels) != num_nodes:
        raise ShapeMismatch(
            f"nodes.jsonl has {len(labels)} rows, meta says num_nodes={num_nodes}"
        )

    raw_pairs = []
    for line in (root / "edges.csv").read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        u_s, v_s = line.split(",")
        u, v = int(u_s), int(v_s)
        if not (0 <= u < num_nodes and 0 <= v < num_nodes):
            raise DanglingEdge(f"edge ({u},{v}) references a missing node")
        raw_pairs.append((u, v))

    blob = (root / "embeddings.f32le").read_bytes()
    expected = num_nodes * emb_dim * 4
    if len(blob) != expected:
        raise ShapeMismatch(
            f"embeddings.f32le is {len(blob)} bytes, expected {expected} "
            f"({num_nodes} x {emb_dim} x 4)"
        )
    emb = np.frombuffer(blob, dtype="<f4").astype(np.float64).reshape(num_nodes, emb_dim)

    return TextGraph(
        num_nodes=num_nodes,
        num_classes=num_classes,
        class_names=class_names,
        edges=canonical_edges(raw_pairs),
        embeddings=emb,
        labels=tuple(labels),
        raw_text=tuple(texts),
    )


def write_dataset(g: TextGraph, dir_path: str | Path, extra_meta: dict | None = None) -> None:
    """Write a graph back out in the dataset directory format."""
    root = Path(dir_path)
    root.mkdir(parents=True, exist_ok=True)
    meta = {
        "num_nodes": g.num_nodes,
        "num_classes": g.num_classes,
        "emb_dim": g.emb_dim,
        "class_names": list(g.class_names),
        "directed": False,
    }
    if extra_meta:
        meta.update(extra_meta)
    (root / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")
    with (root / "nodes.jsonl").open("w") as fh:
        for i in range(g.num_nodes):
            text = g.raw_text[i] if g.raw_text is not None else None
            fh.write(json.dumps({"id": i, "label": g.labels[i], "text": text}) + "\n")
    with (root / "edges.csv").open("w") as fh:
        for u, v in g.edges:
            fh.write(f"{u},{v}\n")
    (root / "embeddings.f32le").write_bytes(
        np.ascontiguousarray(g.embeddings, dtype="<f4").tobytes()
    )


def make_split(
    g: TextGraph,
    shots: int,
    fractions: tuple[float, float, float] = (0.6, 0.2, 0.2),
    seed: int = 0,
) -> SplitSpec:
    """Random train/val/test partition plus an n-shot labeled draw.

    val and test each get floor(frac * num_nodes) labeled nodes; the
    remainder (plus every unlabeled node) forms the train pool.  The
    labeled set takes exactly `shots` nodes per class from the pool.
    Deterministic for a fixed seed (NumPy PCG64 via default_rng(seed):
    one permutation of the labeled ids, then one per-class choice).
    """
    if shots < 1:
        raise InsufficientClassSupport("shots must be >= 1")
    rng = np.random.default_rng(seed)
    labeled_ids = np.array([i for i in range(g.num_nodes) if g.labels[i] is not None])
    n_val = int(fractions[1] * g.num_nodes)
    n_test = int(fractions[2] * g.num_nodes)
    if len(labeled_ids) < n_val + n_test:
        raise InsufficientClassSupport(
            f"need {n_val + n_test} labeled nodes for val+test, have {len(labeled_ids)}"
        )
    perm = rng.permutation(labeled_ids)
    val = tuple(sorted(int(i) for i in perm[:n_val]))
    test = tuple(sorted(int(i) for i in perm[n_val:n_val + n_test]))
    held = set(val) | set(test)
    train_pool = tuple(i for i in range(g.num_nodes) if i not in held)

    by_class: dict[int, list[int]] = {c: [] for c in range(g.num_classes)}
    for i in train_pool:
        y = g.labels[i]
        if y is not None:
            by_class[y].append(i)
    labeled: list[int] = []
    for c in range(g.num_classes):
        pool = by_class[c]
        if len(pool) < shots:
            raise InsufficientClassSupport(
                f"class {c} has {len(pool)} labeled candidates in the train pool, "
                f"need {shots}"
            )
        picks = rng.choice(np.array(pool), size=shots, replace=False)
        labeled.extend(int(i) for i in picks)

    return SplitSpec(
        train_pool=train_pool,
        val=val,
        test=test,
        labeled=tuple(sorted(labeled)),
        shots_per_class=shots,
        seed=seed,
    )


def draw_labeled(g: TextGraph, train_pool, shots: int, seed: int) -> tuple[int, ...]:
    """n-shot draw from an externally supplied train pool (splits.json case)."""
    rng = np.random.default_rng(seed)
    by_class: dict[int, list[int]] = {c: [] for c in range(g.num_classes)}
    for i in sorted(train_pool):
        y = g.labels[i]
        if y is not None:
            by_class[y].append(i)
    labeled: list[int] = []
    for c in range(g.num_classes):
        pool = by_class[c]
        if len(pool) < shots:
            raise InsufficientClassSupport(
                f"class {c} has {len(pool)} labeled candidates, need {shots}"
            )
        picks = rng.choice(np.array(pool), size=shots, replace=False)
        labeled.extend(int(i) for i in picks)
    return tuple(sorted(labeled))


def degree(g: TextGraph, v: int) -> int:
    """Number of distinct undirected neighbors of v."""
    if not (0 <= v < g.num_nodes):
        raise InvalidNode(f"node {v} outside [0, {g.num_nodes})")
    return len(g.neighbors[v])


def homophily_ratio(g: TextGraph, v: int, label_source) -> float:
    """Fraction of v's neighbors sharing v's label under `label_source`.

    `label_source` must supply a label for every node: ground truth in
    analysis mode, model pseudo-labels in selection mode.  Isolated
    nodes return 0.
    """
    if not (0 <= v < g.num_nodes):
        raise InvalidNode(f"node {v} outside [0, {g.num_nodes})")
    ns = g.neighbors[v]
    if not ns:
        return 0.0
    mine = label_source[v]
    same = sum(1 for u in ns if label_source[u] == mine)
    return same / len(ns)


def load_splits_file(path: str | Path) -> dict[str, tuple[int, ...]]:
    data = json.loads(Path(path).read_text())
    return {k: tuple(int(i) for i in data[k]) for k in ("train_pool", "val", "test")}
