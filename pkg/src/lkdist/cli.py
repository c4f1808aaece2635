"""Command line entry point: ``lkdist <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import uuid
from pathlib import Path

import numpy as np

from . import bench
from .cop import fit_cop
from .core import KDistTable, load_dataset
from .engine import IndexArtifact, QueryEngine, load_index, save_index
from .oracle import build_kdist_table, load_kdist_table, save_kdist_table
from .trainer import DEFAULT_SPACE, TrainConfig, random_search, train_reweighted

log = logging.getLogger("lkdist")


def _load_config(path):
    if not path:
        return {}
    return json.loads(Path(path).read_text())


def _dataset(args, cfg):
    dcfg = cfg.get("dataset", {})
    path = args.dataset or dcfg.get("path")
    if not path:
        sys.exit("no dataset given (use --dataset or the config's dataset.path)")
    return load_dataset(
        path,
        format=args.format or dcfg.get("format", "csv"),
        metric=args.metric or dcfg.get("metric", "euclidean"),
        unit_norm=dcfg.get("unit_norm", False),
    )


def _k_max(args, cfg):
    return args.kmax or cfg.get("k_max") or 64


def _table(args, ds, k_max):
    if getattr(args, "table", None) and Path(args.table).exists():
        table = load_kdist_table(args.table)
        if table.n != ds.n or table.k_max < k_max:
            sys.exit(f"table {args.table} does not match the dataset / k_max")
        if table.k_max > k_max:
            table = KDistTable(table.values[:, :k_max])
        return table
    return build_kdist_table(ds, k_max)


def _eval_opts(cfg):
    e = cfg.get("eval", {})
    return e.get("ks"), e.get("query_set", "auto")


def cmd_kdist(args):
    cfg = _load_config(args.config)
    ds = _dataset(args, cfg)
    table = build_kdist_table(ds, _k_max(args, cfg))
    save_kdist_table(table, args.out)
    print(json.dumps({"n": table.n, "k_max": table.k_max, "out": args.out}))


def cmd_train(args):
    cfg = _load_config(args.config)
    ds = _dataset(args, cfg)
    k_max = _k_max(args, cfg)
    tcfg = TrainConfig.from_dict(cfg, k_max=k_max, seed=args.seed)
    res = train_reweighted(ds, _table(args, ds, k_max), tcfg)
    save_index(res.artifact, args.out)
    print(json.dumps({"out": args.out, "param_count": res.artifact.param_count(),
                      "css_trace": res.css_trace, "config_hash": tcfg.config_hash()}))


def cmd_baseline(args):
    cfg = _load_config(args.config)
    ds = _dataset(args, cfg)
    k_max = _k_max(args, cfg)
    cop = fit_cop(_table(args, ds, k_max), restore_monotone=args.monotone)
    art = IndexArtifact(cop, k_max, ds.fingerprint())
    save_index(art, args.out)
    print(json.dumps({"out": args.out, "param_count": art.param_count()}))


def cmd_query(args):
    cfg = _load_config(args.config)
    ds = _dataset(args, cfg)
    art = load_index(args.index)
    if args.point is not None:
        q, qi = ds.points[args.point], args.point
    else:
        q, qi = np.array([float(v) for v in args.coords.split(",")]), None
    r = QueryEngine(art, ds).query(q, args.k, q_index=qi)
    print(json.dumps({
        "result": sorted(r.result), "css": r.css, "included": r.included,
        "rejected": r.rejected, "refined_in": r.refined_in, "refined_out": r.refined_out,
        "wall_ms": round(r.wall_ms, 3),
    }))


def _report_json(rep):
    return {"ks": rep.ks, "mean_css": rep.mean_css, "max_css": rep.max_css,
            "mean_css_per_k": rep.mean_css_per_k, "max_css_per_k": rep.max_css_per_k,
            "param_count": rep.param_count}


def cmd_eval(args):
    cfg = _load_config(args.config)
    ds = _dataset(args, cfg)
    art = load_index(args.index)
    ks, qs = _eval_opts(cfg)
    rep = bench.evaluate(art, ds, ks, qs, args.seed or 0, refine=args.refine)
    if args.out:
        model_type = "cop" if art.is_cop else art.model.config.kind
        row = bench.metrics_row(uuid.uuid4().hex[:8], Path(args.dataset or "").stem, rep, model_type=model_type)
        if art.bounds is not None:
            row.update(agg_mode=art.bounds.mode.value, clip=art.bounds.clip_nonneg,
                       monotone=art.bounds.restore_monotone)
        elif art.is_cop:
            row.update(monotone=art.model.restore_monotone)
        bench.append_metrics(args.out, [row])
    print(json.dumps(_report_json(rep)))


def cmd_ablate(args):
    cfg = _load_config(args.config)
    ds = _dataset(args, cfg)
    k_max = _k_max(args, cfg)
    base = TrainConfig.from_dict(cfg, k_max=k_max, seed=args.seed)
    ks, qs = _eval_opts(cfg)
    rows = bench.ablation_grid(ds, _table(args, ds, k_max), base, ks, qs, args.seed or 0)
    name = Path(args.dataset or cfg.get("dataset", {}).get("path", "")).stem
    out_rows = []
    for i, r in enumerate(rows):
        print(f"{r.label:6s} mean_css={r.report.mean_css:10.3f} max_css={r.report.max_css:7d} size={r.report.param_count}")
        row = bench.metrics_row(f"ablate-{i}", name, r.report, base, model_type=base.model.kind)
        row.update(agg_mode=r.aggregate.value, monotone=r.monotone, sample_weights=r.sample_weights)
        out_rows.append(row)
    if args.out:
        bench.append_metrics(args.out, out_rows)


def cmd_search(args):
    cfg = _load_config(args.config)
    ds = _dataset(args, cfg)
    k_max = _k_max(args, cfg)
    base = TrainConfig.from_dict(cfg, k_max=k_max)
    space = cfg.get("search", DEFAULT_SPACE)
    ks, _ = _eval_opts(cfg)
    trials = random_search(ds, _table(args, ds, k_max), space, args.trials, args.seed or 0, base, ks)
    name = Path(args.dataset or cfg.get("dataset", {}).get("path", "")).stem
    rows = []
    for t in trials:
        if t.error:
            print(f"trial {t.index}: FAILED {t.error}")
            continue
        m = t.metrics
        print(f"trial {t.index}: {t.config.model.kind} size={m['param_count']} mean_css={m['mean_css']:.3f} max_css={m['max_css']}")
        rep = bench.EvalReport(ks or bench.default_eval_ks(k_max), [m["mean_css"]], [m["max_css"]], m["param_count"])
        rows.append(bench.metrics_row(f"search-{args.seed or 0}-{t.index}", name, rep, t.config))
        if args.save_dir:
            Path(args.save_dir).mkdir(parents=True, exist_ok=True)
            save_index(t.artifact, Path(args.save_dir) / f"trial{t.index:03d}.lkdi")
    if args.out:
        bench.append_metrics(args.out, rows)


def cmd_skyline(args):
    rows = bench.read_metrics(args.metrics)
    by_ds = {}
    cop = {}
    for r in rows:
        key = (int(r["param_count"]), float(r["mean_css"]))
        if r["model_type"] == "cop":
            cop[r["dataset"]] = key
        else:
            by_ds.setdefault(r["dataset"], []).append((key, r))
    series = {}
    for name, items in sorted(by_ds.items()):
        sky = bench.skyline([k for k, _ in items])
        series[name] = sky
        for size, css in sky:
            print(f"{name}\t{size}\t{css:.4f}")
    if args.out:
        Path(args.out).write_text(bench.skyline_svg(series, cop, title="mean CSS vs model size"))


def cmd_synth(args):
    spec = json.loads(Path(args.spec).read_text())
    ds = bench.make_synthetic(spec, seed=args.seed or 0)
    np.savetxt(args.out, ds.points, delimiter=",", fmt="%.17g")
    print(json.dumps({"n": ds.n, "d": ds.d, "out": args.out}))


def build_parser():
    p = argparse.ArgumentParser(prog="lkdist", description="Learned k-distance bounds for exact RkNN queries")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=False):
        sp.add_argument("--dataset")
        sp.add_argument("--format", choices=["nodes", "embedding", "csv"])
        sp.add_argument("--metric", choices=["euclidean", "manhattan"])
        sp.add_argument("--kmax", type=int)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", required=out_required)
        sp.add_argument("--config")
        sp.add_argument("--table", help="k-distance cache file (KDT1)")
        return sp

    common(sub.add_parser("kdist", help="build and cache the k-distance table"), True).set_defaults(func=cmd_kdist)
    common(sub.add_parser("train", help="train a learned filter"), True).set_defaults(func=cmd_train)
    sp = common(sub.add_parser("baseline", help="fit the log-log linear CoP filter"), True)
    sp.add_argument("--monotone", action="store_true")
    sp.set_defaults(func=cmd_baseline)
    sp = common(sub.add_parser("query", help="answer one RkNN query"))
    sp.add_argument("--index", required=True)
    sp.add_argument("--k", type=int, required=True)
    g = sp.add_mutually_exclusive_group(required=True)
    g.add_argument("--point", type=int, help="database point index used as query")
    g.add_argument("--coords", help="comma-separated query coordinates")
    sp.set_defaults(func=cmd_query)
    sp = common(sub.add_parser("eval", help="candidate set sizes of an index"))
    sp.add_argument("--index", required=True)
    sp.add_argument("--refine", action="store_true")
    sp.set_defaults(func=cmd_eval)
    common(sub.add_parser("ablate", help="sample weights x aggregation x monotonicity grid")).set_defaults(func=cmd_ablate)
    sp = common(sub.add_parser("search", help="seeded random hyperparameter search"))
    sp.add_argument("--trials", type=int, default=50)
    sp.add_argument("--save-dir")
    sp.set_defaults(func=cmd_search)
    sp = sub.add_parser("skyline", help="Pareto skyline from a metrics CSV")
    sp.add_argument("--metrics", required=True)
    sp.add_argument("--out", help="SVG output path")
    sp.set_defaults(func=cmd_skyline)
    sp = sub.add_parser("synth", help="generate a synthetic blob dataset")
    sp.add_argument("--spec", required=True)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_synth)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    args.func(args)


if __name__ == "__main__":
    main()
