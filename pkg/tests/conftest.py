import json

import numpy as np
import pytest

from graphdistill.graph_store import TextGraph, canonical_edges


def build_graph(num_nodes, edges, labels, num_classes=None, emb=None, texts=None):
    """Small-graph factory for tests."""
    if num_classes is None:
        num_classes = max(y for y in labels if y is not None) + 1
    if emb is None:
        rng = np.random.default_rng(0)
        emb = rng.standard_normal((num_nodes, 4))
    if texts is None:
        texts = tuple(f"document {i}" for i in range(num_nodes))
    return TextGraph(
        num_nodes=num_nodes,
        num_classes=num_classes,
        class_names=tuple(f"class_{i}" for i in range(num_classes)),
        edges=canonical_edges(edges),
        embeddings=np.asarray(emb, dtype=np.float64),
        labels=tuple(labels),
        raw_text=texts,
    )


@pytest.fixture
def star_graph():
    """Node 0 at the center of a 4-star, plus isolated node 5."""
    return build_graph(
        num_nodes=6,
        edges=[(0, 1), (0, 2), (0, 3), (0, 4)],
        labels=[0, 0, 0, 1, 1, 1],
        num_classes=2,
    )


@pytest.fixture
def path3_graph():
    return build_graph(num_nodes=3, edges=[(0, 1), (1, 2)], labels=[0, 1, 0],
                       num_classes=2)


def write_fixture_dataset(tmp_path, num_nodes=3, num_classes=2, emb_dim=4,
                          edges=((0, 1), (1, 2)), labels=(0, 1, 0)):
    """Dataset directory matching the on-disk contract."""
    root = tmp_path / "ds"
    root.mkdir()
    (root / "meta.json").write_text(json.dumps({
        "num_nodes": num_nodes,
        "num_classes": num_classes,
        "emb_dim": emb_dim,
        "class_names": [f"class_{i}" for i in range(num_classes)],
        "directed": False,
    }))
    with (root / "nodes.jsonl").open("w") as fh:
        for i in range(num_nodes):
            fh.write(json.dumps(
                {"id": i, "label": labels[i], "text": f"text {i}"}) + "\n")
    with (root / "edges.csv").open("w") as fh:
        for u, v in edges:
            fh.write(f"{u},{v}\n")
    rng = np.random.default_rng(7)
    emb = rng.standard_normal((num_nodes, emb_dim)).astype("<f4")
    (root / "embeddings.f32le").write_bytes(emb.tobytes())
    return root
