"""Graph-aware active learning: rank-based scoring of the unlabeled pool and
the iterative per-class budgeted selection loop.

Per stage the pool is scored with

    s_gl = rank(confidence, descending) + rank(homophily, ascending)
         + rank(degree, ascending)

where rank assigns {0, 1/n, ..., (n-1)/n} over the pool, so low-confidence,
high-homophily, high-degree nodes score highest.  The top-s_gl candidates
additionally get an entropy term: the change in their neighbors' summed
prediction entropy when the candidate's edges are ablated, rank-scored
ascending.  The b best nodes per pseudo-class are sent to the teacher, their
answers become training labels, and the model retrains from scratch.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import (
    EmptyPool,
    IsolatedNode,
    MissingRationaleTarget,
    NoCandidates,
    TeacherResponseInvalid,
)
from .gnn import (
    GcnModel,
    OptimizerConfig,
    TrainBundle,
    forward,
    init_model,
    normalized_adjacency,
    teacher_distribution,
    train,
)
from .graph_store import TextGraph, homophily_ratio
from .teacher import QuerySession, TeacherRecord, confidences_to_logits


def rank_score(values, order: str = "ascending") -> np.ndarray:
    """Scores {0, 1/n, ..., (n-1)/n} by sorted position, ties broken by
    position (node id) in both directions.

    Ascending: the largest value gets (n-1)/n.  Descending: the smallest
    value gets (n-1)/n.
    """
    vals = np.asarray(values, dtype=np.float64)
    n = len(vals)
    if n == 0:
        raise EmptyPool("rank_score needs at least one value")
    if order == "ascending":
        perm = np.lexsort((np.arange(n), vals))
    elif order == "descending":
        perm = np.lexsort((np.arange(n), -vals))
    else:
        raise ValueError(f"order must be ascending or descending, got {order!r}")
    scores = np.empty(n)
    scores[perm] = np.arange(n) / n
    return scores


def shannon_entropy(p: np.ndarray) -> float:
    """H(p) in nats with 0 log 0 := 0."""
    p = np.asarray(p, dtype=np.float64)
    nz = p > 0
    return float(-(p[nz] * np.log(p[nz])).sum())


@dataclass
class ScoreTable:
    """Per-pool-node scores for one selection stage, aligned with `pool`."""

    pool: np.ndarray                  # sorted unlabeled node ids
    p: np.ndarray                     # max softmax probability
    hr: np.ndarray                    # homophily under model pseudo-labels
    deg: np.ndarray
    rs_p: np.ndarray
    rs_hr: np.ndarray
    rs_d: np.ndarray
    s_gl: np.ndarray
    s_e: np.ndarray = field(default=None)          # type: ignore[assignment]
    s_total: np.ndarray = field(default=None)      # type: ignore[assignment]
    candidate: np.ndarray = field(default=None)    # type: ignore[assignment]

    def row(self, idx: int) -> dict:
        return {
            "node_id": int(self.pool[idx]),
            "p": float(self.p[idx]),
            "hr": float(self.hr[idx]),
            "degree": int(self.deg[idx]),
            "s_gl": float(self.s_gl[idx]),
            "s_e": float(self.s_e[idx]),
            "s_total": float(self.s_total[idx]),
        }


def score_gl(z: np.ndarray, g: TextGraph, gnn_labels, pool) -> ScoreTable:
    """Confidence/homophily/degree rank scores over the unlabeled pool.

    gnn_labels must cover every node (homophily of a pool node can involve
    neighbors outside the pool).
    """
    pool = np.asarray(sorted(pool), dtype=np.int64)
    if len(pool) == 0:
        raise EmptyPool("empty unlabeled pool")
    p = z[pool].max(axis=1)
    hr = np.array([homophily_ratio(g, int(v), gnn_labels) for v in pool])
    deg = np.array([len(g.neighbors[int(v)]) for v in pool], dtype=np.float64)
    rs_p = rank_score(p, "descending")
    rs_hr = rank_score(hr, "ascending")
    rs_d = rank_score(deg, "ascending")
    return ScoreTable(
        pool=pool, p=p, hr=hr, deg=deg,
        rs_p=rs_p, rs_hr=rs_hr, rs_d=rs_d,
        s_gl=rs_p + rs_hr + rs_d,
    )


def _neighbor_entropy_sum(z: np.ndarray, neighbor_ids) -> float:
    return sum(shannon_entropy(z[u]) for u in neighbor_ids)


def entropy_reduction(
    model: GcnModel,
    g: TextGraph,
    a_hat: sp.csr_matrix,
    v: int,
    baseline_z: np.ndarray | None = None,
) -> float:
    """Summed neighbor-entropy change when v's edges are removed.

    Positive when ablating v makes its neighborhood more uncertain, i.e.
    v's presence was reducing uncertainty there.  Both forward passes run
    in eval mode; the ablated graph keeps v with only its self-loop.
    """
    neighbors = g.neighbors[v]
    if not neighbors:
        raise IsolatedNode(f"node {v} has no neighbors")
    x = g.embeddings
    if baseline_z is None:
        _, baseline_z, _ = forward(model, a_hat, x, mode="eval")
    baseline = _neighbor_entropy_sum(baseline_z, neighbors)
    a_ablate = normalized_adjacency(g, drop_node=v)
    _, z_ablate, _ = forward(model, a_ablate, x, mode="eval")
    ablated = _neighbor_entropy_sum(z_ablate, neighbors)
    return ablated - baseline


def score_total(
    table: ScoreTable,
    model: GcnModel,
    g: TextGraph,
    a_hat: sp.csr_matrix,
    candidate_cap: int,
    baseline_z: np.ndarray | None = None,
) -> ScoreTable:
    """Adds the entropy term for the candidate subset.

    Candidates are the top candidate_cap pool nodes by s_gl (id tiebreak),
    isolated nodes excluded; everyone else keeps s_e = 0 and is not
    selectable this stage.
    """
    n = len(table.pool)
    degrees = table.deg
    eligible = np.flatnonzero(degrees > 0)
    order = eligible[np.lexsort((table.pool[eligible], -table.s_gl[eligible]))]
    cand_idx = order[:candidate_cap]
    candidate = np.zeros(n, dtype=bool)
    candidate[cand_idx] = True

    s_e = np.zeros(n)
    if len(cand_idx) > 0:
        if baseline_z is None:
            _, baseline_z, _ = forward(model, a_hat, g.embeddings, mode="eval")
        reductions = np.array([
            entropy_reduction(model, g, a_hat, int(table.pool[i]), baseline_z=baseline_z)
            for i in cand_idx
        ])
        s_e[cand_idx] = rank_score(reductions, "ascending")

    table.s_e = s_e
    table.s_total = table.s_gl + s_e
    table.candidate = candidate
    return table


@dataclass
class SelectionState:
    """Evolving training set bookkeeping across stages."""

    v_l: tuple[int, ...]
    budget_per_class: int               # B
    picks_per_stage: int                # b
    num_classes: int
    pool: list[int]                     # current V_u, sorted
    selected: list[dict] = field(default_factory=list)
    failed: set[int] = field(default_factory=set)
    stage_index: int = 0
    final_history: list = field(default_factory=list)

    @classmethod
    def fresh(cls, v_l, unlabeled_pool, budget_per_class: int, picks_per_stage: int,
              num_classes: int) -> "SelectionState":
        return cls(
            v_l=tuple(sorted(v_l)),
            budget_per_class=budget_per_class,
            picks_per_stage=picks_per_stage,
            num_classes=num_classes,
            pool=sorted(set(unlabeled_pool) - set(v_l)),
        )

    @property
    def total_budget(self) -> int:
        return self.budget_per_class * self.num_classes

    def class_used(self, c: int) -> int:
        return sum(1 for s in self.selected if s["pseudo_class_at_selection"] == c)

    def budget_left(self) -> bool:
        return len(self.selected) < self.total_budget

    def record_pick(self, node_id: int, pseudo_class: int, answer: int, row: dict):
        assert node_id not in {s["node_id"] for s in self.selected}
        assert node_id not in self.v_l
        self.selected.append({
            "stage": self.stage_index,
            "node_id": node_id,
            "pseudo_class_at_selection": pseudo_class,
            "teacher_answer": answer,
            **{k: row[k] for k in ("s_gl", "s_e", "s_total", "p", "hr", "degree")},
        })
        self.pool.remove(node_id)


def select_stage(
    state: SelectionState,
    table: ScoreTable,
    gnn_labels,
    rng: np.random.Generator | None = None,
    randomize: bool = False,
) -> dict[int, list[int]]:
    """Ranked candidate lists per pseudo-class for this stage.

    Returns {class: [pool node ids best-first]} truncated later by the
    caller as teacher queries succeed; classes with exhausted budget are
    omitted.  Raises NoCandidates when nothing is selectable at all.
    """
    by_class: dict[int, list[int]] = {}
    cand_indices = np.flatnonzero(table.candidate)
    if randomize:
        if rng is None:
            rng = np.random.default_rng(0)
        order = cand_indices[rng.permutation(len(cand_indices))]
    else:
        order = cand_indices[np.lexsort((table.pool[cand_indices],
                                         -table.s_total[cand_indices]))]
    for i in order:
        node = int(table.pool[i])
        c = int(gnn_labels[node])
        if state.class_used(c) >= state.budget_per_class:
            continue
        by_class.setdefault(c, []).append(node)
    if not by_class:
        raise NoCandidates("no selectable candidates in any class with budget left")
    return by_class


@dataclass
class ActiveLoopConfig:
    alpha: float = 0.3
    beta: float = 0.1
    tau: float = 3.0
    budget_per_class: int = 3           # B
    picks_per_stage: int = 1            # b
    use_soft_labels: bool = True
    use_rationales: bool = True
    al_mode: str = "graph_llm"          # graph_llm | random | all_at_once
    candidate_cap_factor: int = 10      # |V_c| = factor * b * C
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    d_hidden: int = 64
    dropout_rate: float = 0.5
    seed: int = 0


def _derive_seed(root: int, *tags) -> int:
    import hashlib
    h = hashlib.sha256(("|".join(str(t) for t in (root, *tags))).encode()).digest()
    return int.from_bytes(h[:8], "little")


def build_bundle(
    g: TextGraph,
    v_l,
    selected: list[dict],
    records: dict[int, TeacherRecord],
    cfg: ActiveLoopConfig,
    align=None,
) -> TrainBundle:
    """Assemble V_S = V_l + selections into a TrainBundle.

    Hard labels: ground truth on V_l, teacher answers on selections.
    Soft/rationale targets cover all of V_S when enabled.
    """
    ids = list(v_l) + [s["node_id"] for s in selected]
    labels = [g.labels[v] for v in v_l] + [s["teacher_answer"] for s in selected]
    use_soft = cfg.use_soft_labels and records
    use_rat = cfg.use_rationales and records and align is not None
    teacher_probs = None
    rationale_targets = None
    if use_soft:
        teacher_probs = np.stack([
            teacher_distribution(confidences_to_logits(records[v].confidences), cfg.tau)
            for v in ids
        ])
    if use_rat:
        missing = [v for v in ids if records[v].rationale_embedding is None]
        if missing:
            raise MissingRationaleTarget(
                f"nodes {missing[:10]} have no rationale embeddings yet; run the "
                "embed tool on rationales_pending.jsonl and retry"
            )
        rationale_targets = np.stack([
            align(records[v].rationale_embedding) for v in ids
        ])
    alpha = cfg.alpha if use_soft else 0.0
    beta = cfg.beta if use_rat else 0.0
    return TrainBundle(
        node_ids=np.array(ids), hard_labels=np.array(labels),
        alpha=alpha, beta=beta, tau=cfg.tau,
        teacher_probs=teacher_probs, rationale_targets=rationale_targets,
    )


def run_active_loop(
    g: TextGraph,
    v_l,
    unlabeled_pool,
    session: QuerySession,
    cfg: ActiveLoopConfig,
    *,
    val_ids=None,
    val_labels=None,
    align=None,
) -> tuple[GcnModel, SelectionState, list[dict]]:
    """Iterate train / score / select / query until B*C nodes are selected
    or no candidates remain, then train the final model on the full V_S.

    Deterministic given cfg.seed and a warm teacher cache; every pick is
    returned as a selection-log row.
    """
    if session is None:
        raise ValueError("active learning needs a teacher session")
    uses_teacher_terms = cfg.use_soft_labels or cfg.use_rationales
    a_hat = normalized_adjacency(g)
    picks_per_stage = (cfg.budget_per_class if cfg.al_mode == "all_at_once"
                       else cfg.picks_per_stage)
    state = SelectionState.fresh(v_l, unlabeled_pool, cfg.budget_per_class,
                                 picks_per_stage, g.num_classes)

    records: dict[int, TeacherRecord] = {}
    if uses_teacher_terms:
        records.update(session.query_many(
            [(v, _node_text(g, v)) for v in state.v_l]))

    model = None
    while state.budget_left():
        bundle = build_bundle(g, state.v_l, state.selected, records, cfg, align=align)
        model = _train_fresh(g, a_hat, bundle, cfg, state.stage_index,
                             val_ids, val_labels)
        _, z, _ = forward(model, a_hat, g.embeddings, mode="eval")
        gnn_labels = z.argmax(axis=1)

        pool = [v for v in state.pool if v not in state.failed]
        if not pool:
            break
        table = score_gl(z, g, gnn_labels, pool)
        cap = cfg.candidate_cap_factor * picks_per_stage * g.num_classes
        if cfg.al_mode == "random":
            # random ablation never pays for entropy passes
            table.s_e = np.zeros(len(table.pool))
            table.s_total = table.s_gl.copy()
            table.candidate = table.deg > 0
        else:
            table = score_total(table, model, g, a_hat, cap, baseline_z=z)
        idx_of = {int(n): i for i, n in enumerate(table.pool)}

        stage_rng = np.random.default_rng(
            _derive_seed(cfg.seed, "stage", state.stage_index))
        try:
            ranked = select_stage(state, table, gnn_labels, rng=stage_rng,
                                  randomize=cfg.al_mode == "random")
        except NoCandidates:
            break

        picked_any = False
        for c, nodes in sorted(ranked.items()):
            want = min(picks_per_stage,
                       state.budget_per_class - state.class_used(c))
            taken = 0
            for node in nodes:
                if taken >= want:
                    break
                try:
                    rec = session.query(node, _node_text(g, node))
                except TeacherResponseInvalid:
                    # drop the node this run, promote the next candidate
                    state.failed.add(node)
                    state.pool.remove(node)
                    continue
                if uses_teacher_terms:
                    records[node] = rec
                state.record_pick(node, c, rec.answer, table.row(idx_of[node]))
                taken += 1
                picked_any = True
        if not picked_any:
            break
        state.stage_index += 1

    bundle = build_bundle(g, state.v_l, state.selected, records, cfg, align=align)
    model, state.final_history = _train_fresh(
        g, a_hat, bundle, cfg, "final", val_ids, val_labels, with_history=True)
    return model, state, list(state.selected)


def _node_text(g: TextGraph, v: int) -> str:
    if g.raw_text is not None and g.raw_text[v]:
        return g.raw_text[v]
    return f"node {v}"


def _train_fresh(g, a_hat, bundle, cfg: ActiveLoopConfig, stage, val_ids, val_labels,
                 with_history: bool = False):
    seed = _derive_seed(cfg.seed, "train", stage)
    model = init_model(g.emb_dim, g.num_classes, d_hidden=cfg.d_hidden,
                       dropout_rate=cfg.dropout_rate, seed=seed)
    trained, history = train(model, g, bundle, cfg.optimizer,
                             val_ids=val_ids, val_labels=val_labels,
                             seed=_derive_seed(cfg.seed, "dropout", stage), a_hat=a_hat)
    if with_history:
        return trained, history
    return trained
