"""Command-line entry point: ``gcsa {gen,train,rerank,eval,gradcheck}``.

Exit codes: 0 success, 2 usage/configuration error, 3 data error,
4 numeric failure. Every output file carries the config hash and seed.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from .affinity import SideInfoConfig
from .config import RunConfig
from .dataset import Dataset, load_dataset, read_labels, save_dataset
from .errors import ConfigError, DataError, GCSAError
from .model import load_params, save_params
from .retrieval import (
    RetrievalContext, aqe, aqe_wd, alpha_qe, ap_from_hits, evaluate, heading_filter,
    initial_retrieve, radio_filter,
)
from .synthworld import generate
from .trainer import (
    STAGES, ContextBuilder, RadioTable, TrainingExample, gradcheck_instance, load_state,
    save_state, score_example, train,
)

METHODS = ("gcsa", "none", "aqe", "alphaqe", "aqewd", "heading-filter", "radio-filter")
GRADCHECK_TOL = {"64": 1e-5, "32": 1e-3}


class UsageError(ConfigError):
    pass


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _stamp(cfg: RunConfig) -> dict:
    return {"config_hash": cfg.hash(), "seed": cfg.seed}


def _run_config(args) -> RunConfig:
    return RunConfig.load(args.config).with_seed(args.seed)


def _parallel_map(fn, items, threads: int):
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))  # map keeps input order


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen(args) -> int:
    cfg = _run_config(args)
    t0 = time.perf_counter()
    ds = generate(cfg.world)
    ds.meta.update(_stamp(cfg))
    save_dataset(args.out, ds)
    counts = {s: int(ds.indices(s).size) for s in ("db", "val", "query")}
    print(_dump({"out": str(args.out), "records": len(ds.records), "splits": counts,
                 "wall_time": round(time.perf_counter() - t0, 2), **_stamp(cfg)}))
    return 0


def cmd_train(args) -> int:
    if args.stage == "gnn" and args.init is None:
        raise UsageError("stage gnn needs --init with a stage-1 (projection) checkpoint")
    cfg = _run_config(args)
    tcfg = replace(cfg.train, stage=args.stage)
    ds = load_dataset(args.data)
    init = load_params(args.init) if args.init else None
    out = Path(args.out)
    state_path = out.with_name(out.name + ".state.npz")
    log_path = Path(args.log) if args.log else out.with_name(out.name + ".log.jsonl")
    stamp = _stamp(cfg)

    resume = None
    if args.resume:
        resume = load_state(args.resume)
    else:
        log_path.write_text("")

    def on_epoch(epoch, model, adam, extra):
        with open(log_path, "a") as fh:
            fh.write(_dump({**extra["log"][-1], **stamp}) + "\n")
        save_state(state_path, epoch, model, adam, extra)

    result = train(ds, tcfg, cfg.side, init=init, on_epoch=on_epoch, resume=resume)
    result.model.meta.update(stamp)
    save_params(result.model, out)
    print(_dump({"checkpoint": str(out), "stage": args.stage, "best_epoch": result.best_epoch,
                 "best_val_map10": result.best_val, "dropped_examples": result.dropped, **stamp}))
    return 0


def _contexts(ds: Dataset, split: str, K: int) -> tuple[np.ndarray, list[RetrievalContext]]:
    db = ds.indices("db")
    queries = ds.indices(split)
    dbn = ds.descriptors[db]

    def one(q):
        exclude = ds.sessions[db] == ds.sessions[q]
        c = initial_retrieve(ds.descriptors[q], dbn, ds.ids[db], K, int(ds.ids[q]), exclude)
        c.index = db[c.index]  # dataset rows
        return c

    return queries, [one(q) for q in queries]


def _tune_alpha(ds: Dataset, cfg: RunConfig, K: int) -> float:
    """Alpha of alpha-QE maximizing validation mAP@10 (first best on ties)."""
    _, ctxs = _contexts(ds, "val", K)
    best = (-1.0, cfg.baseline.alpha_grid[0])
    for a in cfg.baseline.alpha_grid:
        aps = []
        for c in ctxs:
            rel = set(ds.labels.get(c.query_id, ()))
            if not rel:
                continue
            r = alpha_qe(c, ds.descriptors[ds.row(c.query_id)], ds.descriptors[c.index], cfg.baseline.n_qe, a)
            aps.append(ap_from_hits([int(i) in rel for i in r.ids[:10]], len(rel), 10))
        score = float(np.mean(aps)) if aps else -1.0
        if score > best[0]:
            best = (score, a)
    return best[1]


def cmd_rerank(args) -> int:
    cfg = _run_config(args)
    ds = load_dataset(args.data)
    K = cfg.train.K
    extra: dict = {}
    model = None
    if args.method == "gcsa":
        if args.model is None:
            raise UsageError("--method gcsa needs --model")
        model = load_params(args.model)
        if model.cfg.dim != ds.dim:
            raise DataError(f"model expects {model.cfg.dim}-D descriptors, dataset has {ds.dim}")
        K = model.cfg.K
        side_meta = model.meta.get("side_config")
        side = SideInfoConfig(**{**side_meta, "blocks": tuple(side_meta["blocks"]),
                                 "query_side": tuple(side_meta["query_side"])}) if side_meta else cfg.side
        builder = ContextBuilder(ds, side, model.cfg.L)
        builder.set_projection(model.params["W"])

    full = args.method in ("heading-filter", "radio-filter")
    queries, ctxs = _contexts(ds, args.split, ds.indices("db").size if full else K)
    base = cfg.baseline
    if args.method == "alphaqe":
        alpha = base.alpha if base.alpha is not None else _tune_alpha(ds, cfg, K)
        extra["alpha"] = alpha
    if args.method == "radio-filter":
        radio = RadioTable(ds, cfg.side).descriptors(np.arange(len(ds.records)))

    def one(c: RetrievalContext) -> RetrievalContext:
        q = ds.row(c.query_id)
        if args.method == "none":
            return c
        if args.method == "gcsa":
            ex = TrainingExample(q, c.index, np.zeros(c.K, dtype=bool))
            scores = score_example(model, builder, ex)
            return c.reorder(np.argsort(-scores, kind="stable"), scores)
        if args.method == "aqe":
            return aqe(c, ds.descriptors[q], ds.descriptors[c.index], base.n_qe)
        if args.method == "alphaqe":
            return alpha_qe(c, ds.descriptors[q], ds.descriptors[c.index], base.n_qe, extra["alpha"])
        if args.method == "aqewd":
            return aqe_wd(c, ds.descriptors[q], ds.descriptors[c.index], base.n_qe)
        if args.method == "heading-filter":
            r = heading_filter(c, ds.poses[q, 3], ds.poses[c.index, 3], base.heading_max_deg)
        else:
            r = radio_filter(c, radio[q], radio[c.index], base.radio_fraction, cfg.side.beta)
        return r.reorder(np.arange(min(K, r.K)))

    results = _parallel_map(one, ctxs, args.threads)
    stamp = _stamp(cfg)
    with open(args.out, "w") as fh:
        for r in results:
            fh.write(_dump({"query": int(r.query_id), "candidates": [int(i) for i in r.ids],
                            "scores": [round(float(s), 7) for s in r.scores],
                            "method": args.method, **extra, **stamp}) + "\n")
    print(_dump({"rankings": str(args.out), "method": args.method, "queries": len(results),
                 **extra, **stamp}))
    return 0


def read_rankings(path: str | Path) -> tuple[dict[int, list[int]], dict]:
    rankings, stamp = {}, {}
    try:
        with open(path) as fh:
            for line in fh:
                if not line.strip():
                    continue
                obj = json.loads(line)
                rankings[int(obj["query"])] = [int(i) for i in obj["candidates"]]
                stamp = {"config_hash": obj.get("config_hash", ""), "seed": obj.get("seed")}
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"cannot read rankings {path}: {exc}") from exc
    return rankings, stamp


def _parse_ks(text: str) -> tuple[int, ...]:
    try:
        ks = tuple(int(k) for k in text.split(",") if k.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"--ks expects comma-separated integers, got {text!r}") from None
    if not ks or min(ks) < 1:
        raise argparse.ArgumentTypeError("--ks values must be positive")
    return ks


def cmd_eval(args) -> int:
    rankings, stamp = read_rankings(args.rankings)
    path = Path(args.labels)
    labels = read_labels(path / "labels.jsonl" if path.is_dir() else path)
    report = evaluate(rankings, {q: set(v) for q, v in labels.items()}, args.ks,
                      stamp.get("config_hash", ""), stamp.get("seed"))
    text = json.dumps(report.to_dict(), sort_keys=True, indent=1)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def cmd_gradcheck(args) -> int:
    dtype = np.float64 if args.precision == "64" else np.float32
    tol = GRADCHECK_TOL[args.precision]
    t0 = time.perf_counter()
    rep = gradcheck_instance(seed=args.seed, dtype=dtype)
    ok = rep.max_error < tol
    print(_dump({"max_rel_error": rep.max_error, "tolerance": tol, "precision": args.precision,
                 "probes": rep.probes, "passed": ok, "seconds": round(time.perf_counter() - t0, 2),
                 "seed": args.seed, "config_hash": ""}))
    return 0 if ok else 4


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=1, help="query-parallel workers")

    p = argparse.ArgumentParser(prog="gcsa", description=__doc__.splitlines()[0], formatter_class=fmt)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[common], formatter_class=fmt, help="generate a synthetic dataset")
    g.add_argument("--config", default=None, help="run config JSON (defaults when omitted)")
    g.add_argument("--out", required=True, help="dataset directory")
    g.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", parents=[common], formatter_class=fmt, help="train one stage")
    t.add_argument("--stage", choices=STAGES, required=True)
    t.add_argument("--data", required=True, help="dataset directory")
    t.add_argument("--config", default=None, help="run config JSON")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--init", default=None, help="stage-1 checkpoint (required for --stage gnn)")
    t.add_argument("--resume", default=None, help="training state (<out>.state.npz) to continue from")
    t.add_argument("--log", default=None, help="epoch log (default <out>.log.jsonl)")
    t.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("rerank", parents=[common], formatter_class=fmt, help="rank a query split")
    r.add_argument("--data", required=True, help="dataset directory")
    r.add_argument("--method", choices=METHODS, default="gcsa")
    r.add_argument("--model", default=None, help="checkpoint (for --method gcsa)")
    r.add_argument("--split", choices=("query", "val"), default="query")
    r.add_argument("--config", default=None, help="run config JSON")
    r.add_argument("--out", required=True, help="rankings JSONL")
    r.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    r.set_defaults(func=cmd_rerank)

    e = sub.add_parser("eval", parents=[common], formatter_class=fmt, help="mAP@k and Recall@k")
    e.add_argument("--rankings", required=True, help="rankings JSONL")
    e.add_argument("--labels", required=True, help="labels.jsonl or a dataset directory")
    e.add_argument("--ks", type=_parse_ks, default=(1, 5, 10, 20), help="comma-separated cut-offs")
    e.add_argument("--out", default=None, help="metrics JSON (stdout only when omitted)")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", parents=[common], formatter_class=fmt,
                       help="finite-difference check of the full loss")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--precision", choices=("64", "32"), default="64")
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads < 1:
        parser.error("--threads must be >= 1")
    try:
        return args.func(args)
    except GCSAError as exc:
        print(f"gcsa {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code if exc.exit_code in (2, 3, 4) else 3
    except FloatingPointError as exc:
        print(f"gcsa {args.command}: numeric error: {exc}", file=sys.stderr)
        return 4
    except OSError as exc:
        print(f"gcsa {args.command}: error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
