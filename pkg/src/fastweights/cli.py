"""``fastweights`` command line: train, eval, ablate, bench, inspect-data."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
from scipy import stats

from .checkpoint import Checkpoint
from .config import (RunConfig, build_dataset, dump_config, load_config, parse_config,
                     resolve, resolve_for)
from .episodes import RandomStream
from .errors import FastWeightsError, DivergenceError, IntegrityError
from .trainer import (JsonlSink, evaluate, format_timing_table, model_from_checkpoint,
                      timing_bench, train_run)

log = logging.getLogger("fastweights")

VARIANTS = {
    "baseline": {"fast_placement": "fc_layer"},
    "softmax_fast_only": {"fast_placement": "softmax_only_fast"},
    "softmax_fast_slow": {"fast_placement": "softmax_fast_and_slow"},
    "fc_and_softmax": {"fast_placement": "fc_and_softmax"},
    "truncated": {"fast_placement": "fc_layer", "truncate_through_rule": True},
}


class UsageError(Exception):
    pass


def _csv(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _out_dir(path: str | None, force: bool, default: str | None = None) -> Path:
    if not path and default is None:
        raise UsageError("--out is required")
    out = Path(path or default)
    if out.exists() and not force:
        raise UsageError(f"output directory {out} exists (use --force to reuse it)")
    return out


def _config(args) -> RunConfig:
    if not args.config:
        raise UsageError("--config is required")
    overrides = {"seed": str(args.seed)} if args.seed is not None else None
    return load_config(args.config, overrides)


def run_training(cfg: RunConfig, out: Path, data=None, resume: bool = False):
    """Train into ``out``; writes metrics, eval records, checkpoints, resolved config."""
    if data is None:
        data = build_dataset(cfg)
    cfg = resolve_for(cfg, data[0])
    out.mkdir(parents=True, exist_ok=True)
    last = best = None
    if resume:
        last = Checkpoint.load(out / "final.ckpt")
        best = Checkpoint.load(out / "best.ckpt") if (out / "best.ckpt").exists() else None
    else:
        for name in ("metrics.jsonl", "eval.jsonl"):
            (out / name).unlink(missing_ok=True)
    (out / "resolved.cfg").write_text(dump_config(cfg))
    sink = JsonlSink(out / "metrics.jsonl", timings=cfg.train.record_timings,
                     eval_path=out / "eval.jsonl")
    try:
        result = train_run(cfg, [sink], data=data, resume=last, best=best,
                           on_checkpoint=lambda c: c.save(out / "final.ckpt"))
    finally:
        sink.close()
    result.best.save(out / "best.ckpt")
    result.final.save(out / "final.ckpt")
    if result.test is not None:
        (out / "test.json").write_text(json.dumps(
            {"episode": result.best.episode, **result.test.record()}, sort_keys=True) + "\n")
    return result


def cmd_train(args) -> int:
    cfg = _config(args)
    out = _out_dir(args.out, args.force or args.resume)
    data = build_dataset(cfg)
    result = run_training(cfg, out, data, resume=args.resume)
    if result.test is not None:
        print(f"test accuracy {result.test.mean:.4f} ± {result.test.ci95:.4f} "
              f"(best episode {result.best.episode}, {result.test.n_episodes} episodes)")
    print(f"wrote {out}")
    return 0


def cmd_eval(args) -> int:
    if args.episodes is not None and args.episodes <= 0:
        raise UsageError("--episodes must be positive")
    ckpt = Checkpoint.load(args.checkpoint)
    if args.config:
        cfg = load_config(args.config)
    elif "config" in ckpt.meta:
        cfg = parse_config(ckpt.meta["config"])
    else:
        raise IntegrityError(f"{args.checkpoint}: no embedded config; pass --config")
    seed = cfg.seed if args.seed is None else args.seed
    pool, split = build_dataset(cfg)
    model = model_from_checkpoint(ckpt)
    n = args.episodes or cfg.train.test_episodes
    res = evaluate(model, pool, split.get(args.split), n,
                   RandomStream(seed, f"eval-{args.split}"), n_query=cfg.train.n_query)
    print(f"{args.split} accuracy {res.mean:.4f} ± {res.ci95:.4f} (95% CI, {n} episodes)")
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    out.mkdir(parents=True, exist_ok=True)
    record = {"checkpoint": str(args.checkpoint), "split": args.split, "seed": seed,
              **res.record()}
    (out / f"eval_{args.split}.json").write_text(json.dumps(record, sort_keys=True) + "\n")
    return 0


def summarize(results: dict[str, list[float]]) -> list[dict]:
    """Per-variant mean/std and a Welch t-test against ``baseline`` when present."""
    base = results.get("baseline")
    rows = []
    for name, accs in results.items():
        a = np.asarray(accs)
        row = {"variant": name, "mean": float(a.mean()),
               "std": float(a.std(ddof=1)) if len(a) > 1 else 0.0, "n": len(a),
               "delta_vs_baseline": None, "p_value": None}
        if base is not None and name != "baseline":
            row["delta_vs_baseline"] = float(a.mean() - np.mean(base))
            if len(a) > 1 and len(base) > 1:
                p = stats.ttest_ind(a, base, equal_var=False).pvalue
                row["p_value"] = None if np.isnan(p) else float(p)
        rows.append(row)
    return rows


def format_summary(rows: list[dict]) -> str:
    head = f"{'variant':<20}{'mean acc':>10}{'std':>9}{'n':>4}{'Δ base':>10}{'p':>9}"
    lines = [head, "-" * len(head)]
    for r in rows:
        d = "" if r["delta_vs_baseline"] is None else f"{r['delta_vs_baseline']:+.4f}"
        p = "" if r["p_value"] is None else f"{r['p_value']:.3g}"
        lines.append(f"{r['variant']:<20}{r['mean']:>10.4f}{r['std']:>9.4f}{r['n']:>4}"
                     f"{d:>10}{p:>9}")
    return "\n".join(lines)


def run_ablation(cfg: RunConfig, variants: list[str], seeds: int, out: Path, data=None):
    unknown = [v for v in variants if v not in VARIANTS]
    if unknown:
        raise UsageError(f"unknown variants {unknown}; choose from {sorted(VARIANTS)}")
    if data is None:
        data = build_dataset(cfg)
    results: dict[str, list[float]] = {}
    for v in variants:
        for s in range(seeds):
            run_cfg = cfg.replace(seed=cfg.seed + s).with_model(**VARIANTS[v])
            res = run_training(run_cfg, out / v / f"seed{s}", data)
            results.setdefault(v, []).append(res.test.mean if res.test else float("nan"))
    rows = summarize(results)
    (out / "summary.json").write_text(json.dumps(
        {"variants": rows, "runs": results}, indent=2, sort_keys=True) + "\n")
    (out / "summary.txt").write_text(format_summary(rows) + "\n")
    return rows


def cmd_ablate(args) -> int:
    variants = _csv(args.variants) if args.variants else list(VARIANTS)
    unknown = [v for v in variants if v not in VARIANTS]
    if unknown:
        raise UsageError(f"unknown variants {unknown}; choose from {sorted(VARIANTS)}")
    if args.seeds <= 0:
        raise UsageError("--seeds must be positive")
    cfg = _config(args)
    out = _out_dir(args.out, args.force)
    rows = run_ablation(cfg, variants, args.seeds, out)
    print(format_summary(rows))
    return 0


def cmd_bench(args) -> int:
    bindings = _csv(args.bindings)
    bad = [b for b in bindings if b not in ("hebb", "gradmap")]
    if bad or not bindings:
        raise UsageError(f"--bindings must list hebb and/or gradmap, got {args.bindings!r}")
    cfg = _config(args)
    out = _out_dir(args.out, args.force)
    # inputs are noise, so only the shape matters; Omniglot images need not be present
    if cfg.data.source == "omniglot" and not resolve(cfg).data.root:
        cfg = resolve(cfg, (1, cfg.data.resize, cfg.data.resize))
    else:
        cfg = resolve_for(cfg, build_dataset(cfg)[0])
    specs = [cfg.model.replace(binding=b) for b in bindings]
    n = args.episodes or 50
    rows = timing_bench(specs, n, warmup=args.warmup, labels=bindings, seed=cfg.seed,
                        n_query=cfg.train.n_query)
    table = format_timing_table(rows)
    print(table)
    out.mkdir(parents=True, exist_ok=True)
    (out / "bench.json").write_text(json.dumps(
        {"unit": "ms/task", "warmup": args.warmup, "rows": [r.record() for r in rows]},
        indent=2) + "\n")
    (out / "bench.txt").write_text(table + "\n")
    return 0


def cmd_inspect(args) -> int:
    cfg = _config(args)
    pool, split = build_dataset(cfg)
    cfg = resolve_for(cfg, pool)
    info = {"source": cfg.data.source, "classes": pool.n_classes,
            "input_shape": list(pool.input_shape),
            "examples_per_class": pool.count(split.train_classes[0]) if split.train_classes else 0,
            "train_classes": len(split.train_classes), "val_classes": len(split.val_classes),
            "test_classes": len(split.test_classes)}
    sample = pool.get(split.train_classes[0], [0]) if split.train_classes else np.zeros(1)
    info["value_range"] = [float(sample.min()), float(sample.max())]
    for k, v in info.items():
        print(f"{k:>20}: {v}")
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "data.json").write_text(json.dumps(info, indent=2) + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fastweights", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=False):
        sp.add_argument("--config", metavar="PATH")
        sp.add_argument("--seed", type=int, metavar="U64")
        sp.add_argument("--out", metavar="DIR", required=out_required)
        sp.add_argument("--force", action="store_true")

    t = sub.add_parser("train", help="train one model")
    common(t, out_required=True)
    t.add_argument("--resume", action="store_true", help="continue from DIR/final.ckpt")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("checkpoint")
    common(e)
    e.add_argument("--episodes", type=int, metavar="N")
    e.add_argument("--split", choices=("val", "test"), default="test")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train ablation variants over several seeds")
    common(a, out_required=True)
    a.add_argument("--variants", metavar="CSV")
    a.add_argument("--seeds", type=int, default=5, metavar="N")
    a.set_defaults(func=cmd_ablate)

    b = sub.add_parser("bench", help="per-phase timing of binding mechanisms")
    common(b, out_required=True)
    b.add_argument("--bindings", default="hebb,gradmap", metavar="CSV")
    b.add_argument("--episodes", type=int, metavar="N")
    b.add_argument("--warmup", type=int, default=20, metavar="N")
    b.set_defaults(func=cmd_bench)

    i = sub.add_parser("inspect-data", help="summarise the configured dataset")
    common(i)
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"fastweights: error: {exc}", file=sys.stderr)
        return 2
    except DivergenceError as exc:
        print(f"fastweights: diverged: {exc}", file=sys.stderr)
        return 3
    except (FastWeightsError, OSError) as exc:
        print(f"fastweights: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
