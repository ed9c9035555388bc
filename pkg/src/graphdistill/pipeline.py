"""End-to-end orchestration: configuration, seed-averaged runs, the
degree/homophily bucket analysis, evaluation, gradient checking, and
machine-readable reports.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import UnlabeledNode
from .gnn import (
    GcnModel,
    OptimizerConfig,
    TrainBundle,
    backward,
    bundle_losses,
    forward,
    init_model,
    normalized_adjacency,
    save_checkpoint,
    train,
    write_history_csv,
)
from .graph_store import (
    SplitSpec,
    TextGraph,
    degree,
    draw_labeled,
    homophily_ratio,
    load_dataset,
    load_splits_file,
    make_split,
)
from .selector import (
    ActiveLoopConfig,
    _derive_seed,
    build_bundle,
    run_active_loop,
)
from .teacher import (
    NoisyTeacher,
    OracleTeacher,
    PromptConfig,
    QuerySession,
    TeacherCache,
    TeacherClient,
    HttpTeacher,
    load_rationale_embeddings,
    max_pool_align,
    train_align_mlp,
)


@dataclass
class TeacherSpec:
    kind: str = "oracle"                 # http | oracle | noisy
    endpoint: str = ""
    model_name: str = ""
    auth_env_var: str = "TEACHER_API_TOKEN"
    noise_profile: tuple[float, float, float] = (0.40, 0.60, 0.75)
    query_budget: int | None = None


@dataclass
class AblationSpec:
    use_soft_labels: bool = True
    use_rationales: bool = True
    use_al: bool = True
    al_mode: str = "graph_llm"           # graph_llm | random | all_at_once
    align: str = "mlp"                   # mlp | max_pool


@dataclass
class RunConfig:
    dataset_dir: str = ""
    output_dir: str = "runs/out"
    shots: int = 3
    seeds: tuple[int, ...] = (0, 1, 2)
    alpha: float = 0.3
    beta: float = 0.1
    tau: float = 3.0
    budget_per_class: int = 3            # B
    picks_per_stage: int = 1             # b
    teacher: TeacherSpec = field(default_factory=TeacherSpec)
    ablations: AblationSpec = field(default_factory=AblationSpec)
    d_hidden: int = 64
    dropout_rate: float = 0.5
    lr: float = 0.01
    weight_decay: float = 5e-4
    epochs: int = 300
    patience: int = 30
    candidate_cap_factor: int = 10

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.alpha + self.beta >= 1.0:
            raise ValueError("need alpha >= 0, beta >= 0, alpha + beta < 1")
        if self.shots < 1 or self.budget_per_class < 1 or self.picks_per_stage < 1:
            raise ValueError("shots, B and b must all be >= 1")
        if not self.seeds:
            raise ValueError("seeds must be non-empty")
        if self.ablations.use_rationales and self.ablations.align not in ("mlp", "max_pool"):
            raise ValueError("rationales need an alignment mode (mlp or max_pool)")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        data = dict(data)
        if "teacher" in data and isinstance(data["teacher"], dict):
            t = dict(data["teacher"])
            if "noise_profile" in t:
                t["noise_profile"] = tuple(t["noise_profile"])
            data["teacher"] = TeacherSpec(**t)
        if "ablations" in data and isinstance(data["ablations"], dict):
            data["ablations"] = AblationSpec(**data["ablations"])
        if "seeds" in data:
            data["seeds"] = tuple(data["seeds"])
        return cls(**data)

    @classmethod
    def from_json_file(cls, path: str | Path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def fingerprint(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, default=list)
        return hashlib.sha256(canon.encode()).hexdigest()[:16]

    def optimizer(self) -> OptimizerConfig:
        return OptimizerConfig(lr=self.lr, weight_decay=self.weight_decay,
                               epochs=self.epochs, patience=self.patience)


@dataclass
class RunReport:
    per_seed_accuracy: dict[int, float]
    mean_accuracy: float
    std_accuracy: float                  # population std
    config: dict
    fingerprint: str
    teacher_queries: dict[int, int]
    selection_counts: dict[int, int]

    def to_dict(self) -> dict:
        return {
            "per_seed_accuracy": {str(k): v for k, v in self.per_seed_accuracy.items()},
            "mean_accuracy": self.mean_accuracy,
            "std_accuracy": self.std_accuracy,
            "config": self.config,
            "fingerprint": self.fingerprint,
            "teacher_queries": {str(k): v for k, v in self.teacher_queries.items()},
            "selection_counts": {str(k): v for k, v in self.selection_counts.items()},
        }


def evaluate(model: GcnModel, g: TextGraph, node_set, a_hat=None) -> float:
    """Argmax accuracy over node_set; ties go to the lowest class index."""
    ids = sorted(node_set)
    for v in ids:
        if g.labels[v] is None:
            raise UnlabeledNode(f"node {v} has no ground-truth label")
    if a_hat is None:
        a_hat = normalized_adjacency(g)
    _, z, _ = forward(model, a_hat, g.embeddings, mode="eval")
    pred = z[ids].argmax(axis=1)
    truth = np.array([g.labels[v] for v in ids])
    return float(np.mean(pred == truth))


def make_teacher_client(spec: TeacherSpec, g: TextGraph, seed: int = 0) -> TeacherClient:
    if spec.kind == "oracle":
        return OracleTeacher(g, seed=seed)
    if spec.kind == "noisy":
        return NoisyTeacher(g, bucket_accuracies=tuple(spec.noise_profile), seed=seed)
    if spec.kind == "http":
        return HttpTeacher(spec.endpoint, spec.model_name, spec.auth_env_var)
    raise ValueError(f"unknown teacher kind {spec.kind!r}")


def _resolve_split(g: TextGraph, cfg: RunConfig, seed: int) -> SplitSpec:
    splits_path = Path(cfg.dataset_dir) / "splits.json" if cfg.dataset_dir else None
    if splits_path is not None and splits_path.is_file():
        parts = load_splits_file(splits_path)
        labeled = draw_labeled(g, parts["train_pool"], cfg.shots, seed)
        return SplitSpec(train_pool=parts["train_pool"], val=parts["val"],
                         test=parts["test"], labeled=labeled,
                         shots_per_class=cfg.shots, seed=seed)
    return make_split(g, cfg.shots, seed=seed)


def _make_align(cfg: RunConfig, g: TextGraph, split: SplitSpec, seed: int):
    """Returns the rationale-alignment callable for this seed, or None."""
    if not cfg.ablations.use_rationales:
        return None
    if cfg.ablations.align == "max_pool":
        return lambda vec: max_pool_align(vec, g.num_classes)
    x_l = g.embeddings[list(split.labeled)]
    y_l = np.array([g.labels[v] for v in split.labeled])
    mlp = train_align_mlp(x_l, y_l, g.num_classes,
                          seed=_derive_seed(seed, "align"),
                          trained_on=f"seed{seed}")
    return mlp


def run_seed(
    g: TextGraph,
    cfg: RunConfig,
    seed: int,
    cache: TeacherCache,
    out_dir: Path | None = None,
) -> tuple[float, int, int]:
    """One seed of the configured pipeline.

    Returns (test_accuracy, teacher_queries, num_selected)."""
    split = _resolve_split(g, cfg, seed)
    val_labels = [g.labels[v] for v in split.val]
    uses_teacher = cfg.ablations.use_soft_labels or cfg.ablations.use_rationales
    needs_client = uses_teacher or cfg.ablations.use_al

    session = None
    if needs_client:
        client = make_teacher_client(cfg.teacher, g, seed=seed)
        session = QuerySession(
            client=client,
            prompt_cfg=PromptConfig(class_names=g.class_names),
            cache=cache,
            query_budget=cfg.teacher.query_budget,
            pending_path=(out_dir / "rationales_pending.jsonl") if out_dir else None,
        )
        if out_dir is not None:
            # resume path: pull in any rationale embeddings the offline
            # embed tool produced since the last run
            cache.hydrate_rationales(load_rationale_embeddings(out_dir))

    align = _make_align(cfg, g, split, seed)
    loop_cfg = ActiveLoopConfig(
        alpha=cfg.alpha if cfg.ablations.use_soft_labels else 0.0,
        beta=cfg.beta if cfg.ablations.use_rationales else 0.0,
        tau=cfg.tau,
        budget_per_class=cfg.budget_per_class,
        picks_per_stage=cfg.picks_per_stage,
        use_soft_labels=cfg.ablations.use_soft_labels,
        use_rationales=cfg.ablations.use_rationales,
        al_mode=cfg.ablations.al_mode,
        candidate_cap_factor=cfg.candidate_cap_factor,
        optimizer=cfg.optimizer(),
        d_hidden=cfg.d_hidden,
        dropout_rate=cfg.dropout_rate,
        seed=seed,
    )

    selection_rows: list[dict] = []
    if cfg.ablations.use_al:
        model, state, selection_rows = run_active_loop(
            g, split.labeled, split.train_pool, session, loop_cfg,
            val_ids=split.val, val_labels=val_labels, align=align,
        )
        history = state.final_history
        num_selected = len(state.selected)
    else:
        records = {}
        if uses_teacher:
            records = session.query_many(
                [(v, _text_of(g, v)) for v in split.labeled])
        bundle = build_bundle(g, split.labeled, [], records, loop_cfg, align=align)
        model = init_model(g.emb_dim, g.num_classes, d_hidden=cfg.d_hidden,
                           dropout_rate=cfg.dropout_rate,
                           seed=_derive_seed(seed, "train", "final"))
        model, history = train(model, g, bundle, cfg.optimizer(),
                               val_ids=split.val, val_labels=val_labels,
                               seed=_derive_seed(seed, "dropout", "final"))
        num_selected = 0
    if out_dir is not None:
        write_history_csv(history, out_dir / f"history_seed{seed}.csv")

    if out_dir is not None and selection_rows:
        with (out_dir / f"selection_log_seed{seed}.jsonl").open("w") as fh:
            for row in selection_rows:
                fh.write(json.dumps(row) + "\n")
    if out_dir is not None:
        save_checkpoint(model, out_dir / f"model_seed{seed}.ckpt")

    acc = evaluate(model, g, split.test)
    queries = session.queries_issued if session is not None else 0
    return acc, queries, num_selected


def run(cfg: RunConfig, g: TextGraph | None = None) -> RunReport:
    """Seed-averaged pipeline run; writes report.json and a result table."""
    if g is None:
        g = load_dataset(cfg.dataset_dir)
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cache = TeacherCache(out_dir / "teacher_cache.jsonl")

    accs: dict[int, float] = {}
    queries: dict[int, int] = {}
    counts: dict[int, int] = {}
    for seed in cfg.seeds:
        acc, q, n_sel = run_seed(g, cfg, seed, cache, out_dir=out_dir)
        accs[seed] = acc
        queries[seed] = q
        counts[seed] = n_sel

    values = np.array([accs[s] for s in cfg.seeds])
    report = RunReport(
        per_seed_accuracy=accs,
        mean_accuracy=float(values.mean()),
        std_accuracy=float(values.std()),     # population std
        config=cfg.to_dict(),
        fingerprint=cfg.fingerprint(),
        teacher_queries=queries,
        selection_counts=counts,
    )
    (out_dir / "report.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    (out_dir / "table.txt").write_text(format_table([("this run", values)]))
    return report


def format_table(rows: list[tuple[str, np.ndarray]]) -> str:
    """Accuracy table in the mean+-(std) presentation, percents with 2 dp."""
    width = max(len(name) for name, _ in rows) + 2
    lines = [f"{'model':<{width}}accuracy", "-" * (width + 14)]
    for name, values in rows:
        v = np.asarray(values, dtype=np.float64)
        lines.append(f"{name:<{width}}{100 * v.mean():.2f}±({100 * v.std():.2f})")
    return "\n".join(lines) + "\n"


def _text_of(g: TextGraph, v: int) -> str:
    if g.raw_text is not None and g.raw_text[v]:
        return g.raw_text[v]
    return f"node {v}"


def prelim_analysis(
    g: TextGraph,
    client: TeacherClient,
    metric: str = "homophily",
    bucket_size: int = 200,
    cache: TeacherCache | None = None,
) -> dict:
    """Teacher accuracy on the highest / middle / lowest buckets of a
    structural metric (degree or ground-truth homophily ratio).

    Nodes are sorted by the metric descending; bucket_size nodes are taken
    from the head, middle and tail.  Oversized requests clip to n/3 with a
    warning."""
    if metric == "degree":
        values = np.array([degree(g, v) for v in range(g.num_nodes)], dtype=np.float64)
    elif metric == "homophily":
        if any(y is None for y in g.labels):
            raise UnlabeledNode("homophily analysis needs every node labeled")
        values = np.array([homophily_ratio(g, v, g.labels) for v in range(g.num_nodes)])
    else:
        raise ValueError(f"metric must be degree or homophily, got {metric!r}")

    max_bucket = g.num_nodes // 3
    if bucket_size > max_bucket:
        warnings.warn(
            f"bucket_size {bucket_size} too large for {g.num_nodes} nodes; "
            f"clipping to {max_bucket}"
        )
        bucket_size = max_bucket

    order = np.lexsort((np.arange(g.num_nodes), -values))     # descending, id tiebreak
    mid_start = (g.num_nodes - bucket_size) // 2
    buckets = {
        "highest": order[:bucket_size],
        "middle": order[mid_start:mid_start + bucket_size],
        "lowest": order[g.num_nodes - bucket_size:],
    }

    cache = cache or TeacherCache(None)
    session = QuerySession(client=client,
                           prompt_cfg=PromptConfig(class_names=g.class_names),
                           cache=cache)
    result = {"metric": metric, "bucket_size": bucket_size, "accuracy": {}}
    for name, ids in buckets.items():
        correct = 0
        for v in ids:
            v = int(v)
            if g.labels[v] is None:
                raise UnlabeledNode(f"node {v} has no ground-truth label")
            rec = session.query(v, _text_of(g, v))
            correct += int(rec.answer == g.labels[v])
        result["accuracy"][name] = correct / len(ids)
    return result


def gradcheck(
    num_instances: int = 20,
    h: float = 1e-4,
    seed: int = 0,
    corrupt: bool = False,
) -> dict:
    """Finite-difference verification of the analytic gradients.

    Random small instances (4 features, 3 hidden units, 2-3 classes, up to 6
    nodes) with all three loss terms active.  Central differences with the
    given step; reports the max relative error per parameter.  `corrupt`
    deliberately scales one analytic gradient entry to prove the check can
    fail."""
    rng = np.random.default_rng(seed)
    per_param = {k: 0.0 for k in ("w0", "b0", "w1", "b1")}
    for _ in range(num_instances):
        n = int(rng.integers(3, 7))
        c = int(rng.integers(2, 4))
        g = _random_graph(n, c, rng)
        a_hat = normalized_adjacency(g)
        model = init_model(4, c, d_hidden=3, dropout_rate=0.0,
                           seed=int(rng.integers(0, 2 ** 31)))
        vs = rng.choice(n, size=max(2, n - 1), replace=False)
        probs = rng.dirichlet(np.ones(c), size=len(vs))
        bundle = TrainBundle(
            node_ids=np.sort(vs),
            hard_labels=rng.integers(0, c, size=len(vs)),
            alpha=0.3, beta=0.1, tau=3.0,
            teacher_probs=probs,
            rationale_targets=rng.standard_normal((len(vs), c)),
        )
        _, _, cache = forward(model, a_hat, g.embeddings, mode="train")
        grads = backward(model, cache, bundle)
        if corrupt:
            grads.w0[0, 0] = grads.w0[0, 0] * 1.5 + 1.0

        def loss_at(m: GcnModel) -> float:
            hf, z, _ = forward(m, a_hat, g.embeddings, mode="eval")
            return bundle_losses(hf, z, bundle)[0]

        for k in per_param:
            analytic = getattr(grads, k)
            param = getattr(model, k)
            fd = np.zeros_like(param)
            it = np.nditer(param, flags=["multi_index"])
            for _v in it:
                idx = it.multi_index
                orig = param[idx]
                param[idx] = orig + h
                up = loss_at(model)
                param[idx] = orig - h
                down = loss_at(model)
                param[idx] = orig
                fd[idx] = (up - down) / (2 * h)
            denom = np.maximum(np.maximum(np.abs(analytic), np.abs(fd)), 1e-6)
            err = float(np.max(np.abs(analytic - fd) / denom))
            per_param[k] = max(per_param[k], err)

    overall = max(per_param.values())
    return {
        "instances": num_instances,
        "step": h,
        "per_param_max_rel_error": per_param,
        "max_rel_error": overall,
        "passed": overall < 1e-4,
    }


def _random_graph(n: int, c: int, rng: np.random.Generator) -> TextGraph:
    from .graph_store import canonical_edges
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n) if rng.random() < 0.5]
    return TextGraph(
        num_nodes=n,
        num_classes=c,
        class_names=tuple(f"c{i}" for i in range(c)),
        edges=canonical_edges(pairs),
        embeddings=rng.standard_normal((n, 4)),
        labels=tuple(int(v) for v in rng.integers(0, c, size=n)),
    )
