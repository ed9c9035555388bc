"""Command-line interface.

Subcommands:
    run        full pipeline (distillation + active learning) with seed averaging
    baseline   same splits/seeds with every teacher component disabled
    prelim     teacher accuracy across degree / homophily buckets
    select     one scoring + selection stage, for debugging
    gradcheck  finite-difference verification of the training gradients
    synth      generate a planted-partition dataset directory
    eval       accuracy of a saved checkpoint on a dataset
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import pipeline
from .gnn import forward, load_checkpoint, normalized_adjacency
from .graph_store import load_dataset, make_split, write_dataset
from .pipeline import RunConfig, TeacherCache, evaluate, gradcheck, prelim_analysis
from .selector import score_gl, score_total
from .synth import make_planted_partition


def _add_common_run_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, help="JSON config; flags override it")
    p.add_argument("--dataset", type=Path, help="dataset directory")
    p.add_argument("--output-dir", type=Path)
    p.add_argument("--shots", type=int)
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--budget", type=int, help="teacher-labeled nodes per class (B)")
    p.add_argument("--stage-size", type=int, help="picks per class per stage (b)")
    p.add_argument("--teacher", choices=["http", "oracle", "noisy"])
    p.add_argument("--endpoint", help="chat-completion URL for the http teacher")
    p.add_argument("--model-name", help="model name for the http teacher")
    p.add_argument("--auth-env-var", help="env var holding the bearer token")
    p.add_argument("--al-mode", choices=["graph_llm", "random", "all_at_once"])
    p.add_argument("--align", choices=["mlp", "max_pool"])
    p.add_argument("--no-soft-labels", action="store_true")
    p.add_argument("--no-rationales", action="store_true")
    p.add_argument("--no-al", action="store_true")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)


def _config_from_args(args) -> RunConfig:
    cfg = RunConfig.from_json_file(args.config) if args.config else RunConfig()
    updates = {}
    if args.dataset:
        updates["dataset_dir"] = str(args.dataset)
    if args.output_dir:
        updates["output_dir"] = str(args.output_dir)
    for flag, attr in [("shots", "shots"), ("alpha", "alpha"), ("beta", "beta"),
                       ("tau", "tau"), ("budget", "budget_per_class"),
                       ("stage_size", "picks_per_stage"), ("epochs", "epochs"),
                       ("lr", "lr")]:
        val = getattr(args, flag)
        if val is not None:
            updates[attr] = val
    if args.seeds is not None:
        updates["seeds"] = tuple(args.seeds)
    cfg = dataclasses.replace(cfg, **updates)
    t = cfg.teacher
    if args.teacher:
        t = dataclasses.replace(t, kind=args.teacher)
    if args.endpoint:
        t = dataclasses.replace(t, endpoint=args.endpoint)
    if args.model_name:
        t = dataclasses.replace(t, model_name=args.model_name)
    if args.auth_env_var:
        t = dataclasses.replace(t, auth_env_var=args.auth_env_var)
    a = cfg.ablations
    if args.al_mode:
        a = dataclasses.replace(a, al_mode=args.al_mode)
    if args.align:
        a = dataclasses.replace(a, align=args.align)
    if args.no_soft_labels:
        a = dataclasses.replace(a, use_soft_labels=False)
    if args.no_rationales:
        a = dataclasses.replace(a, use_rationales=False)
    if args.no_al:
        a = dataclasses.replace(a, use_al=False)
    return dataclasses.replace(cfg, teacher=t, ablations=a)


def cmd_run(args) -> int:
    cfg = _config_from_args(args)
    report = pipeline.run(cfg)
    print(f"mean test accuracy over seeds {list(cfg.seeds)}: "
          f"{100 * report.mean_accuracy:.2f}±({100 * report.std_accuracy:.2f})")
    print(f"report written to {cfg.output_dir}/report.json")
    return 0


def cmd_baseline(args) -> int:
    cfg = _config_from_args(args)
    off = dataclasses.replace(cfg.ablations, use_soft_labels=False,
                              use_rationales=False, use_al=False)
    cfg = dataclasses.replace(cfg, ablations=off)
    report = pipeline.run(cfg)
    print(f"baseline mean test accuracy: "
          f"{100 * report.mean_accuracy:.2f}±({100 * report.std_accuracy:.2f})")
    return 0


def cmd_prelim(args) -> int:
    cfg = _config_from_args(args)
    g = load_dataset(cfg.dataset_dir)
    seed = cfg.seeds[0]
    client = pipeline.make_teacher_client(cfg.teacher, g, seed=seed)
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cache = TeacherCache(out_dir / "teacher_cache.jsonl")
    result = prelim_analysis(g, client, metric=args.metric,
                             bucket_size=args.bucket_size, cache=cache)
    print(json.dumps(result, indent=2))
    (out_dir / f"prelim_{args.metric}.json").write_text(json.dumps(result, indent=2) + "\n")
    return 0


def cmd_select(args) -> int:
    """One scoring pass over the pool of seed 0: train on the labeled set,
    score every unlabeled node, print the top rows."""
    cfg = _config_from_args(args)
    g = load_dataset(cfg.dataset_dir)
    seed = cfg.seeds[0]
    split = pipeline._resolve_split(g, cfg, seed)
    from .gnn import TrainBundle, init_model, train
    from .selector import _derive_seed
    bundle = TrainBundle(
        node_ids=np.array(split.labeled),
        hard_labels=np.array([g.labels[v] for v in split.labeled]),
    )
    a_hat = normalized_adjacency(g)
    model = init_model(g.emb_dim, g.num_classes, d_hidden=cfg.d_hidden,
                       dropout_rate=cfg.dropout_rate,
                       seed=_derive_seed(seed, "train", 0))
    model, _ = train(model, g, bundle, cfg.optimizer(),
                     val_ids=split.val, val_labels=[g.labels[v] for v in split.val],
                     seed=_derive_seed(seed, "dropout", 0), a_hat=a_hat)
    _, z, _ = forward(model, a_hat, g.embeddings, mode="eval")
    gnn_labels = z.argmax(axis=1)
    pool = sorted(set(split.train_pool) - set(split.labeled))
    table = score_gl(z, g, gnn_labels, pool)
    cap = cfg.candidate_cap_factor * cfg.picks_per_stage * g.num_classes
    table = score_total(table, model, g, a_hat, cap, baseline_z=z)
    ranked = np.argsort(-table.s_total)
    print("node_id  pseudo  s_gl    s_e     s_total p       hr      degree")
    for i in ranked[: args.top]:
        r = table.row(int(i))
        print(f"{r['node_id']:<8d} {int(gnn_labels[r['node_id']]):<7d} "
              f"{r['s_gl']:<7.3f} {r['s_e']:<7.3f} {r['s_total']:<7.3f} "
              f"{r['p']:<7.3f} {r['hr']:<7.3f} {r['degree']}")
    return 0


def cmd_gradcheck(args) -> int:
    result = gradcheck(num_instances=args.instances, seed=args.seed,
                       corrupt=args.corrupt)
    for name, err in result["per_param_max_rel_error"].items():
        print(f"{name}: max relative error {err:.3e}")
    print(f"overall: {result['max_rel_error']:.3e} "
          f"({'PASS' if result['passed'] else 'FAIL'})")
    return 0 if result["passed"] else 1


def cmd_synth(args) -> int:
    g = make_planted_partition(
        num_classes=args.classes,
        nodes_per_class=args.nodes_per_class,
        p_in=args.p_in,
        p_out=args.p_out,
        feature_sep=args.sep,
        feature_noise=args.noise,
        emb_dim=args.emb_dim,
        seed=args.seed,
    )
    write_dataset(g, args.out)
    print(f"wrote {g.num_nodes} nodes / {g.num_edges} edges / "
          f"{g.num_classes} classes to {args.out}")
    return 0


def cmd_eval(args) -> int:
    g = load_dataset(args.dataset)
    model = load_checkpoint(args.checkpoint)
    if args.split == "all":
        ids = [v for v in range(g.num_nodes) if g.labels[v] is not None]
    else:
        split = make_split(g, args.shots, seed=args.seed)
        ids = getattr(split, args.split)
    acc = evaluate(model, g, ids)
    print(f"accuracy on {args.split} ({len(ids)} nodes): {100 * acc:.2f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="graphdistill",
        description="Few-shot node classification with teacher distillation "
                    "and graph-aware active learning",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="full pipeline with seed averaging")
    _add_common_run_flags(p_run)
    p_run.set_defaults(func=cmd_run)

    p_base = sub.add_parser("baseline", help="plain GCN on the same splits")
    _add_common_run_flags(p_base)
    p_base.set_defaults(func=cmd_baseline)

    p_prelim = sub.add_parser("prelim", help="teacher accuracy by metric bucket")
    _add_common_run_flags(p_prelim)
    p_prelim.add_argument("--metric", choices=["degree", "homophily"],
                          default="homophily")
    p_prelim.add_argument("--bucket-size", type=int, default=200)
    p_prelim.set_defaults(func=cmd_prelim)

    p_select = sub.add_parser("select", help="score one selection stage")
    _add_common_run_flags(p_select)
    p_select.add_argument("--top", type=int, default=20)
    p_select.set_defaults(func=cmd_select)

    p_grad = sub.add_parser("gradcheck", help="finite-difference gradient check")
    p_grad.add_argument("--instances", type=int, default=20)
    p_grad.add_argument("--seed", type=int, default=0)
    p_grad.add_argument("--corrupt", action="store_true",
                        help=argparse.SUPPRESS)  # negative-control hook
    p_grad.set_defaults(func=cmd_gradcheck)

    p_synth = sub.add_parser("synth", help="generate a planted-partition dataset")
    p_synth.add_argument("--out", type=Path, required=True)
    p_synth.add_argument("--classes", type=int, default=3)
    p_synth.add_argument("--nodes-per-class", type=int, default=60)
    p_synth.add_argument("--p-in", type=float, default=0.2)
    p_synth.add_argument("--p-out", type=float, default=0.02)
    p_synth.add_argument("--sep", type=float, default=1.0)
    p_synth.add_argument("--noise", type=float, default=1.0)
    p_synth.add_argument("--emb-dim", type=int, default=8)
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.set_defaults(func=cmd_synth)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    p_eval.add_argument("--checkpoint", type=Path, required=True)
    p_eval.add_argument("--dataset", type=Path, required=True)
    p_eval.add_argument("--split", choices=["train_pool", "val", "test", "all"],
                        default="all")
    p_eval.add_argument("--shots", type=int, default=3)
    p_eval.add_argument("--seed", type=int, default=0)
    p_eval.set_defaults(func=cmd_eval)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
