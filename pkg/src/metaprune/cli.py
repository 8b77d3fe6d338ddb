"""``metaprune`` command line: train-meta, search, train-final, flops, latency-gen, visualize.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .checkpoint import CheckpointError, save_tensors
from .config import RunConfig, config_from_dict, load_config
from .cost import Constraint, LatencyTableError, flops, latency, parse_constraint, synth_table
from .evaluation import Evaluator, train_from_scratch
from .evosearch import EvaluationFailed, InfeasibleConstraint, SearchConfig, search, write_history_csv
from .netdef import GeneError, TemplateError, format_gene, parse_gene, resolve_channels, template_from_dict, template_to_dict, validate_gene
from .pipeline import (
    UsageError,
    data_config_for,
    fit_template,
    load_checkpoint,
    load_data,
    meta_splits,
    resolve_template,
    save_checkpoint,
)
from .pruningnet import PruningNet, TrainingDiverged, train_meta, write_metrics_csv

logger = logging.getLogger("metaprune")

USAGE_ERRORS = (UsageError, TemplateError, GeneError, LatencyTableError, CheckpointError, FileNotFoundError, json.JSONDecodeError, KeyError, ValueError)
RUNTIME_ERRORS = (InfeasibleConstraint, TrainingDiverged, EvaluationFailed, RuntimeError)


def _sidecar(out, suffix: str) -> Path:
    out = Path(out)
    return out.with_name(out.name + suffix)


def cmd_train_meta(args, run: RunConfig) -> int:
    data_cfg = data_config_for(args.data, run.data)
    train, _ = load_data(args.data, data_cfg)
    template = fit_template(resolve_template(args.template), train)
    sub_train, _ = meta_splits(train, data_cfg, args.seed)
    meta_cfg = replace(run.meta, seed=args.seed, epochs=args.epochs if args.epochs is not None else run.meta.epochs)
    pnet = PruningNet(template, mode=args.mode, hidden=run.hidden, seed=args.seed)
    pnet, log = train_meta(pnet, template, sub_train, meta_cfg)
    run = replace(run, data=data_cfg, meta=meta_cfg)
    save_checkpoint(args.out, pnet, data=args.data, seed=args.seed, run=run)
    write_metrics_csv(log, _sidecar(args.out, ".metrics.csv"))
    print(f"wrote {args.out} ({len(log)} epochs, checksum {pnet.checksum()[:16]})")
    return 0


def cmd_search(args, run: RunConfig) -> int:
    pnet, meta = load_checkpoint(args.ckpt)
    template = pnet.template
    ck_run = config_from_dict(meta["config"])
    train, _ = load_data(meta["data"], ck_run.data)
    sub_train, sub_val = meta_splits(train, ck_run.data, meta["seed"])
    constraint = parse_constraint(args.constraint)
    if constraint.table is not None:
        constraint.table.check_covers(template)
    defaults = run.search
    cfg = SearchConfig(
        population=args.pop or defaults.population,
        topk=args.topk or min(defaults.topk, args.pop or defaults.population),
        mutations=args.mutations or defaults.mutations,
        crossovers=args.crossovers or defaults.crossovers,
        iterations=defaults.iterations if args.iters is None else args.iters,
        p_mut=args.p_mut if args.p_mut is not None else defaults.p_mut,
        seed=args.seed,
    )
    evaluator = Evaluator(
        pnet,
        template,
        sub_train,
        sub_val,
        n_calib=args.calib_images or defaults.calib_images,
        calib_seed=args.seed,
        batch_size=defaults.eval_batch,
        recalibrate=not args.no_recalibrate,
    )
    result = search(template, constraint, evaluator, cfg, workers=args.workers)
    best = result.best
    cost = constraint.cost(template, best.gene)
    if not cost < constraint.budget:
        raise RuntimeError(f"best gene {format_gene(best.gene)} costs {cost:g}, budget {constraint.budget:g}")
    history = _sidecar(args.out, ".history.csv")
    write_history_csv(result, history)
    results = {
        "gene": list(best.gene),
        "gene_str": format_gene(best.gene),
        "flops": flops(template, best.gene),
        "latency_us": latency(template, best.gene, constraint.table) if constraint.table is not None else None,
        "constraint": args.constraint,
        "budget": constraint.budget,
        "subval_accuracy": best.fitness,
        "final_test_accuracy": None,
        "evaluated": len(result.evaluated),
        "seed": args.seed,
        "checkpoint": str(args.ckpt),
        "data": meta["data"],
        "history_csv": str(history),
        "template": template_to_dict(template),
    }
    Path(args.out).write_text(json.dumps(results, indent=2))
    print(f"best {results['gene_str']} acc {best.fitness:.4f} flops {results['flops']} ({constraint})")
    return 0


def _read_results(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"results file not found: {path}")
    return json.loads(path.read_text())


def cmd_train_final(args, run: RunConfig) -> int:
    results = _read_results(args.results) if args.results else None
    if args.template is None and results is None:
        raise UsageError("train-final needs --template or --results")
    if args.gene is None and results is None:
        raise UsageError("train-final needs --gene or --results")
    data_spec = args.data or (results or {}).get("data")
    if data_spec is None:
        raise UsageError("train-final needs --data")
    data_cfg = data_config_for(data_spec, run.data)
    train, test = load_data(data_spec, data_cfg)
    template = resolve_template(args.template) if args.template else template_from_dict(results["template"])
    template = fit_template(template, train)
    gene = parse_gene(args.gene, template) if args.gene else tuple(results["gene"])
    gene = validate_gene(template, gene, on_grid=False)
    cfg = replace(run.final, seed=args.seed, epochs=args.epochs if args.epochs is not None else run.final.epochs)
    final = train_from_scratch(template, gene, train, test, cfg)
    if args.out:
        save_tensors(args.out, final.state_dict())
    if results is not None:
        results["final_test_accuracy"] = final.test_accuracy
        Path(args.results).write_text(json.dumps(results, indent=2))
    print(f"gene {format_gene(gene)} flops {flops(template, gene)} test accuracy {final.test_accuracy:.4f}")
    return 0


def cmd_flops(args, run: RunConfig) -> int:
    template = resolve_template(args.template)
    gene = parse_gene(args.gene, template)
    validate_gene(template, gene, on_grid=False)
    print(flops(template, gene))
    return 0


def cmd_latency_gen(args, run: RunConfig) -> int:
    template = resolve_template(args.template)
    table = synth_table(template, a=args.a, b=args.b, noise=args.noise, seed=args.seed)
    table.to_csv(args.out)
    print(f"wrote {len(table.entries)} entries to {args.out}")
    return 0


def visualize_rows(template, gene) -> list[tuple[int, int, int, int]]:
    rows = []
    for i, (layer, (_, cout)) in enumerate(zip(template.layers, resolve_channels(template, gene))):
        if layer.kind == "linear":
            continue
        rows.append((i, int(layer.is_downsampling), cout, layer.max_out_channels))
    return rows


def cmd_visualize(args, run: RunConfig) -> int:
    results = _read_results(args.results)
    template = template_from_dict(results["template"])
    gene = validate_gene(template, results["gene"], on_grid=False)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer_id", "is_downsampling", "channels", "max_channels"])
        w.writerows(visualize_rows(template, gene))
    print(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="metaprune", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="JSON file overriding run defaults")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train-meta", help="train a PruningNet by stochastic structure sampling")
    s.add_argument("--template", required=True, help="builtin name or template JSON path")
    s.add_argument("--data", default="synth", help="'synth', a synthetic-data JSON, or a CIFAR-10 binary directory")
    s.add_argument("--epochs", type=int)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--mode", choices=("predict", "direct"), default="predict")
    s.add_argument("--out", required=True, help="checkpoint path")
    s.set_defaults(func=cmd_train_meta)

    s = sub.add_parser("search", help="evolutionary search with a trained PruningNet")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--constraint", required=True, help="flops:<N> or latency:<table.csv>:<us>")
    s.add_argument("--pop", type=int)
    s.add_argument("--iters", type=int)
    s.add_argument("--topk", type=int)
    s.add_argument("--mutations", type=int)
    s.add_argument("--crossovers", type=int)
    s.add_argument("--p-mut", type=float)
    s.add_argument("--calib-images", type=int)
    s.add_argument("--no-recalibrate", action="store_true", help="score with stale BN statistics")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--out", required=True, help="results JSON path")
    s.set_defaults(func=cmd_search)

    s = sub.add_parser("train-final", help="train a pruned structure from scratch")
    s.add_argument("--template")
    s.add_argument("--gene", help="'full' or c1/c2/.../cn")
    s.add_argument("--results", help="search results JSON; supplies template and gene, receives the test accuracy")
    s.add_argument("--data")
    s.add_argument("--epochs", type=int)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", help="optional weights checkpoint")
    s.set_defaults(func=cmd_train_final)

    s = sub.add_parser("flops", help="multiply-adds of a pruned structure")
    s.add_argument("--template", required=True)
    s.add_argument("--gene", default="full")
    s.set_defaults(func=cmd_flops)

    s = sub.add_parser("latency-gen", help="write a synthetic latency table")
    s.add_argument("--template", required=True)
    s.add_argument("--a", type=float, default=0.0)
    s.add_argument("--b", type=float, default=1e-6)
    s.add_argument("--noise", type=float, default=0.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_latency_gen)

    s = sub.add_parser("visualize", help="per-layer channel counts of a search result as CSV")
    s.add_argument("--results", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_visualize)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        run = load_config(args.config)
        return args.func(args, run)
    except RUNTIME_ERRORS as exc:
        print(f"metaprune: error: {exc}", file=sys.stderr)
        return 1
    except USAGE_ERRORS as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"metaprune: error: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
