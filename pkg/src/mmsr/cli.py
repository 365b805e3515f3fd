"""Command-line experiment harness.

Subcommands: gen-corpus, train, evaluate, predict, ablate, align-heatmap,
scaling.  Every run is a pure function of its flags: file outputs are
byte-identical across same-seed invocations (wall-clock measurements go to
separate timing sidecars so the deterministic artifacts stay comparable).
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time

import numpy as np

from .autodiff import no_grad
from .corpus import GenConfig, generate_corpus, load_corpus, PointSet
from .errors import MmsrError, NoValidSequence
from .exprs import evaluate as expr_evaluate
from .inference import BeamConfig, predict, r2_score
from .model import Model, ModelConfig
from .suites import (SuiteEntry, builtin_suite, indistribution_suite,
                     load_suite_csv, sample_entry_points)
from .training import TrainConfig, train, write_report
from .vocab import Vocabulary

SUCCESS_R2 = 0.99  # an evaluation row counts as solved above this R^2


def _json_dump(obj, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True, indent=1)
        fh.write("\n")


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    with open(path, encoding="utf-8") as fh:
        cfg = json.load(fh)
    if not isinstance(cfg, dict):
        raise SystemExit("config file must hold a JSON object")
    return cfg


def _gen_config(args, file_cfg: dict) -> GenConfig:
    d = dict(file_cfg.get("gen", {}))
    for k in ("d_max", "max_depth", "n_points", "n_max", "max_resample"):
        v = getattr(args, k, None)
        if v is not None:
            d[k] = v
    if getattr(args, "x_low", None) is not None or getattr(args, "x_high", None) is not None:
        lo = args.x_low if args.x_low is not None else -4.0
        hi = args.x_high if args.x_high is not None else 4.0
        d["x_range"] = (lo, hi)
    d["seed"] = args.seed
    return GenConfig.from_json_dict(d)


def _train_config(args, file_cfg: dict) -> TrainConfig:
    d = dict(file_cfg.get("train", {}))
    for k in ("mode", "epochs", "batch_size", "lr", "warmup_steps", "lr_schedule",
              "adam_beta2", "w_ce", "w_mse", "w_con", "eval_split",
              "phase1_epochs", "checkpoint_every"):
        v = getattr(args, k, None)
        if v is not None:
            d[k] = v
    d["seed"] = args.seed
    return TrainConfig(**d)


def _model_config(file_cfg: dict, vocab: Vocabulary, gen: GenConfig) -> ModelConfig:
    d = dict(file_cfg.get("model", {}))
    d.setdefault("n_max", gen.n_max)
    d.setdefault("d_max", gen.d_max)
    return ModelConfig.for_vocab(vocab, **d)


def _beam_config(args, file_cfg: dict, model: Model) -> BeamConfig:
    d = dict(file_cfg.get("beam", {}))
    for k, flag in (("beam_width", "beam_width"), ("n_candidates", "n_candidates"),
                    ("max_len", "max_len"), ("alpha", "alpha")):
        v = getattr(args, flag, None)
        if v is not None:
            d[k] = v
    d.setdefault("max_len", model.cfg.n_max)
    return BeamConfig(**d)


def _out_dir(args) -> str:
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    return out


# ----------------------------------------------------------------- commands


def cmd_gen_corpus(args) -> int:
    file_cfg = _load_config_file(args.config)
    gcfg = _gen_config(args, file_cfg)
    out = _out_dir(args)
    corpus_path = os.path.join(out, args.name + ".bin")
    t0 = time.time()
    stats = generate_corpus(gcfg, args.count, corpus_path)
    _json_dump(stats.to_json_dict(), os.path.join(out, args.name + ".stats.json"))
    _json_dump({"wall_time": time.time() - t0},
               os.path.join(out, args.name + ".timing.json"))
    print(f"wrote {args.count} pairs to {corpus_path} "
          f"(acceptance {stats.acceptance_rate:.3f})")
    return 0


def cmd_train(args) -> int:
    file_cfg = _load_config_file(args.config)
    corpus = load_corpus(args.corpus)
    gcfg = corpus.config
    vocab = Vocabulary(gcfg.d_max)
    tcfg = _train_config(args, file_cfg)
    mcfg = _model_config(file_cfg, vocab, gcfg)
    model = Model(mcfg, seed=args.seed)
    out = _out_dir(args)
    ckpt = os.path.join(out, "model.ckpt")
    report = train(model, corpus.pairs, tcfg, vocab, ckpt_path=ckpt,
                   log=lambda s: print(s, flush=True))
    write_report(report, os.path.join(out, "train_report.csv"),
                 os.path.join(out, "train_report.json"),
                 os.path.join(out, "train_timing.json"))
    print(f"final heldout token accuracy "
          f"{report.rows[-1].heldout_token_acc:.4f}; checkpoint at {ckpt}")
    return 0


def _resolve_suite(args, gcfg: GenConfig) -> list[tuple[SuiteEntry, PointSet]]:
    if args.suite_file:
        entries = load_suite_csv(args.suite_file)
        return [(e, sample_entry_points(e, seed=args.seed)) for e in entries]
    if args.suite == "builtin":
        return [(e, sample_entry_points(e, seed=args.seed)) for e in builtin_suite()]
    if args.suite == "in-distribution":
        return indistribution_suite(gcfg, args.suite_size, seed=args.seed)
    raise SystemExit(f"unknown suite {args.suite!r}")


def _eval_rows(model: Model, vocab: Vocabulary, suite, beam_cfg: BeamConfig
               ) -> tuple[list[dict], list[float]]:
    rows = []
    walls = []
    for entry, points in suite:
        X = points.X
        if points.d < model.cfg.d_max:
            X = np.concatenate(
                [X, np.zeros((points.n, model.cfg.d_max - points.d))], axis=1)
            points = PointSet(X=X, y=points.y)
        t0 = time.time()
        try:
            best, _ = predict(model, vocab, points, beam_cfg)
            row = {"name": entry.name, "target": entry.infix(),
                   "predicted": best.refined_expr.infix(),
                   "r2": best.r2_select, "r2_fit": best.r2_fit,
                   "log_prob": best.log_prob,
                   "n_tokens": best.tokens.valid_len,
                   "success": bool(best.r2_select > SUCCESS_R2)}
        except (NoValidSequence, MmsrError) as exc:
            row = {"name": entry.name, "target": entry.infix(),
                   "predicted": "", "r2": float("-inf"), "r2_fit": float("-inf"),
                   "log_prob": float("-inf"), "n_tokens": 0, "success": False,
                   "error": type(exc).__name__}
        walls.append(time.time() - t0)
        rows.append(row)
    return rows, walls


_EVAL_COLS = ("name", "target", "predicted", "r2", "r2_fit", "log_prob",
              "n_tokens", "success")


def _write_eval(rows: list[dict], walls: list[float], out: str, stem: str) -> dict:
    with open(os.path.join(out, stem + ".csv"), "w", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(_EVAL_COLS)
        for r in rows:
            w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c]
                        for c in _EVAL_COLS])
    finite = [max(r["r2"], 0.0) if np.isfinite(r["r2"]) else 0.0 for r in rows]
    summary = {
        "rows": rows,
        "mean_r2": float(np.mean(finite)) if rows else 0.0,
        "success_rate": float(np.mean([r["success"] for r in rows])) if rows else 0.0,
        "n": len(rows),
    }
    _json_dump(summary, os.path.join(out, stem + ".json"))
    _json_dump({"wall_time_per_row": walls, "wall_time_total": sum(walls)},
               os.path.join(out, stem + ".timing.json"))
    return summary


def cmd_evaluate(args) -> int:
    file_cfg = _load_config_file(args.config)
    model, _ = Model.load(args.checkpoint)
    vocab = Vocabulary(model.cfg.d_max)
    gcfg = _gen_config(args, file_cfg)
    suite = _resolve_suite(args, gcfg)
    beam_cfg = _beam_config(args, file_cfg, model)
    out = _out_dir(args)
    rows, walls = _eval_rows(model, vocab, suite, beam_cfg)
    summary = _write_eval(rows, walls, out, "eval")
    print(f"mean R^2 {summary['mean_r2']:.4f}, "
          f"success rate {summary['success_rate']:.3f} over {summary['n']} targets")
    return 0


def cmd_predict(args) -> int:
    file_cfg = _load_config_file(args.config)
    model, _ = Model.load(args.checkpoint)
    vocab = Vocabulary(model.cfg.d_max)
    data = np.loadtxt(args.points, delimiter=",", dtype=np.float64, ndmin=2)
    if data.shape[1] < 2:
        raise SystemExit("points CSV needs at least one x column plus y")
    X, y = data[:, :-1], data[:, -1]
    if X.shape[1] > model.cfg.d_max:
        raise SystemExit(f"model handles at most d={model.cfg.d_max} inputs")
    if X.shape[1] < model.cfg.d_max:
        X = np.concatenate([X, np.zeros((len(X), model.cfg.d_max - X.shape[1]))], axis=1)
    points = PointSet(X=X, y=y)
    beam_cfg = _beam_config(args, file_cfg, model)
    t0 = time.time()
    best, cands = predict(model, vocab, points, beam_cfg)
    result = {"best": best.to_json_dict(vocab),
              "candidates": [c.to_json_dict(vocab) for c in cands]}
    if args.out:
        out = _out_dir(args)
        _json_dump(result, os.path.join(out, "predict.json"))
        _json_dump({"wall_time": time.time() - t0},
                   os.path.join(out, "predict.timing.json"))
    print(json.dumps(result["best"], sort_keys=True, indent=1))
    return 0


def _alignment_vectors(model: Model, vocab: Vocabulary, suite,
                       batch: int = 16) -> tuple[np.ndarray, np.ndarray]:
    """Data-side and skeleton-side unit vectors for (entry, points) pairs."""
    from .exprs import to_preorder
    data_vecs = []
    skel_vecs = []
    with no_grad():
        for lo in range(0, len(suite), batch):
            chunk = suite[lo:lo + batch]
            X = np.stack([p.X for _, p in chunk])
            y = np.stack([p.y for _, p in chunk])
            toks = [to_preorder(e.expr, model.cfg.n_max, vocab) for e, _ in chunk]
            syms = np.stack([t.symbols for t in toks]).astype(np.int64)
            mants = np.stack([t.mantissas for t in toks])
            slots = model.encode_data(X, y)
            data_vecs.append(model.data_alignment_vec(slots).data)
            out = model.decode(syms, mants, None, vocab.pad_id, upto_mid=True)
            skel_vecs.append(out.skel_vec.data)
    return np.concatenate(data_vecs), np.concatenate(skel_vecs)


def heatmap_and_margin(data_vecs: np.ndarray, skel_vecs: np.ndarray
                       ) -> tuple[np.ndarray, float]:
    """Pairwise cosine distance, min-max normalized; margin is mean(off-diag)
    minus mean(diag) of the normalized matrix (positive = aligned)."""
    dist = 1.0 - data_vecs @ skel_vecs.T
    lo, hi = float(dist.min()), float(dist.max())
    norm = (dist - lo) / (hi - lo) if hi > lo else np.zeros_like(dist)
    n = norm.shape[0]
    diag = float(np.trace(norm) / n)
    off = float((norm.sum() - np.trace(norm)) / (n * n - n)) if n > 1 else 0.0
    return norm, off - diag


def cmd_align_heatmap(args) -> int:
    file_cfg = _load_config_file(args.config)
    model, _ = Model.load(args.checkpoint)
    vocab = Vocabulary(model.cfg.d_max)
    gcfg = _gen_config(args, file_cfg)
    suite = indistribution_suite(gcfg, args.count, seed=args.seed)
    # drop pairs whose token sequences exceed the model context
    suite = [(e, p) for e, p in suite]
    dv, sv = _alignment_vectors(model, vocab, suite)
    norm, margin = heatmap_and_margin(dv, sv)
    out = _out_dir(args)
    np.savetxt(os.path.join(out, "heatmap.csv"), norm, delimiter=",", fmt="%.17g")
    _json_dump({"margin": margin, "count": len(suite)},
               os.path.join(out, "heatmap.json"))
    print(f"margin {margin:.4f} over {len(suite)} pairs")
    return 0


def cmd_ablate(args) -> int:
    file_cfg = _load_config_file(args.config)
    corpus = load_corpus(args.corpus)
    gcfg = corpus.config
    vocab = Vocabulary(gcfg.d_max)
    out = _out_dir(args)
    weights = [float(w) for w in args.weights.split(",")]
    results = []
    for w_con in weights:
        args_w = argparse.Namespace(**vars(args))
        args_w.w_con = w_con
        tcfg = _train_config(args_w, file_cfg)
        mcfg = _model_config(file_cfg, vocab, gcfg)
        model = Model(mcfg, seed=args.seed)
        tag = f"wcon{w_con:g}"
        report = train(model, corpus.pairs, tcfg, vocab,
                       log=lambda s, t=tag: print(f"[{t}] {s}", flush=True))
        model.save(os.path.join(out, f"model_{tag}.ckpt"),
                   step=report.rows[-1].step)
        write_report(report, os.path.join(out, f"train_{tag}.csv"),
                     os.path.join(out, f"train_{tag}.json"),
                     os.path.join(out, f"train_{tag}.timing.json"))
        suite = indistribution_suite(gcfg, args.count, seed=args.seed + 1)
        dv, sv = _alignment_vectors(model, vocab, suite)
        _, margin = heatmap_and_margin(dv, sv)
        beam_cfg = _beam_config(args, file_cfg, model)
        rows, walls = _eval_rows(model, vocab, suite[:args.eval_count], beam_cfg)
        summary = _write_eval(rows, walls, out, f"eval_{tag}")
        results.append({"w_con": w_con, "margin": margin,
                        "mean_r2": summary["mean_r2"],
                        "success_rate": summary["success_rate"],
                        "heldout_token_acc": report.rows[-1].heldout_token_acc})
        print(f"[{tag}] margin {margin:.4f} mean R^2 {summary['mean_r2']:.4f}")
    _json_dump({"results": results}, os.path.join(out, "ablation.json"))
    with open(os.path.join(out, "ablation.csv"), "w", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        cols = ("w_con", "margin", "mean_r2", "success_rate", "heldout_token_acc")
        w.writerow(cols)
        for r in results:
            w.writerow([repr(r[c]) for c in cols])
    return 0


def cmd_scaling(args) -> int:
    file_cfg = _load_config_file(args.config)
    sizes = [int(s) for s in args.sizes.split(",")]
    gcfg = _gen_config(args, file_cfg)
    vocab = Vocabulary(gcfg.d_max)
    out = _out_dir(args)
    results = []
    for size in sizes:
        tag = f"n{size}"
        corpus_path = os.path.join(out, f"corpus_{tag}.bin")
        generate_corpus(gcfg, size, corpus_path)
        corpus = load_corpus(corpus_path)
        tcfg = _train_config(args, file_cfg)
        mcfg = _model_config(file_cfg, vocab, gcfg)
        model = Model(mcfg, seed=args.seed)
        report = train(model, corpus.pairs, tcfg, vocab,
                       log=lambda s, t=tag: print(f"[{t}] {s}", flush=True))
        model.save(os.path.join(out, f"model_{tag}.ckpt"), step=report.rows[-1].step)
        suite = indistribution_suite(gcfg, args.eval_count, seed=args.seed + 1)
        beam_cfg = _beam_config(args, file_cfg, model)
        rows, walls = _eval_rows(model, vocab, suite, beam_cfg)
        summary = _write_eval(rows, walls, out, f"eval_{tag}")
        results.append({"size": size, "mean_r2": summary["mean_r2"],
                        "success_rate": summary["success_rate"],
                        "heldout_token_acc": report.rows[-1].heldout_token_acc})
        print(f"[{tag}] mean R^2 {summary['mean_r2']:.4f}")
    _json_dump({"results": results}, os.path.join(out, "scaling.json"))
    with open(os.path.join(out, "scaling.csv"), "w", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        cols = ("size", "mean_r2", "success_rate", "heldout_token_acc")
        w.writerow(cols)
        for r in results:
            w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c]
                        for c in cols])
    return 0


# -------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="mmsr",
        description="multimodal symbolic regression: corpus generation, "
                    "training, and evaluation")
    p.add_argument("--seed", type=int, default=0, help="base seed for the run")
    p.add_argument("--config", default=None,
                   help="JSON file with gen/model/train/beam sections")
    p.add_argument("--out", default=None, help="output directory")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-corpus", help="sample a training corpus")
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--name", default="corpus")
    g.add_argument("--d-max", dest="d_max", type=int, default=None)
    g.add_argument("--max-depth", dest="max_depth", type=int, default=None)
    g.add_argument("--n-points", dest="n_points", type=int, default=None)
    g.add_argument("--n-max", dest="n_max", type=int, default=None)
    g.add_argument("--x-low", dest="x_low", type=float, default=None)
    g.add_argument("--x-high", dest="x_high", type=float, default=None)
    g.set_defaults(func=cmd_gen_corpus)

    t = sub.add_parser("train", help="train a model on a corpus")
    t.add_argument("--corpus", required=True)
    t.add_argument("--mode", choices=("one-step", "two-step"), default=None)
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    t.add_argument("--lr", type=float, default=None)
    t.add_argument("--warmup-steps", dest="warmup_steps", type=int, default=None)
    t.add_argument("--lr-schedule", dest="lr_schedule",
                   choices=("constant", "cosine"), default=None)
    t.add_argument("--adam-beta2", dest="adam_beta2", type=float, default=None)
    t.add_argument("--w-ce", dest="w_ce", type=float, default=None)
    t.add_argument("--w-mse", dest="w_mse", type=float, default=None)
    t.add_argument("--w-con", dest="w_con", type=float, default=None)
    t.add_argument("--eval-split", dest="eval_split", type=float, default=None)
    t.add_argument("--phase1-epochs", dest="phase1_epochs", type=int, default=None)
    t.add_argument("--checkpoint-every", dest="checkpoint_every", type=int, default=None)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="run a model over a benchmark suite")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--suite", default="builtin",
                   choices=("builtin", "in-distribution"))
    e.add_argument("--suite-file", default=None,
                   help="CSV with columns name,infix,d,x_low,x_high,n_points")
    e.add_argument("--suite-size", dest="suite_size", type=int, default=50,
                   help="number of in-distribution draws")
    e.add_argument("--beam-width", dest="beam_width", type=int, default=None)
    e.add_argument("--n-candidates", dest="n_candidates", type=int, default=None)
    e.add_argument("--max-len", dest="max_len", type=int, default=None)
    e.add_argument("--alpha", type=float, default=None)
    for name in ("--d-max", "--max-depth", "--n-points", "--n-max"):
        e.add_argument(name, dest=name[2:].replace("-", "_"), type=int, default=None)
    e.add_argument("--x-low", dest="x_low", type=float, default=None)
    e.add_argument("--x-high", dest="x_high", type=float, default=None)
    e.set_defaults(func=cmd_evaluate)

    pr = sub.add_parser("predict", help="recover an expression for one CSV of points")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--points", required=True,
                    help="CSV rows of x columns followed by a y column")
    pr.add_argument("--beam-width", dest="beam_width", type=int, default=None)
    pr.add_argument("--n-candidates", dest="n_candidates", type=int, default=None)
    pr.add_argument("--max-len", dest="max_len", type=int, default=None)
    pr.add_argument("--alpha", type=float, default=None)
    pr.set_defaults(func=cmd_predict)

    a = sub.add_parser("ablate", help="train at several contrastive weights and compare")
    a.add_argument("--corpus", required=True)
    a.add_argument("--weights", default="0.0,1.0",
                   help="comma-separated w_con values")
    a.add_argument("--count", type=int, default=50,
                   help="pairs for the alignment margin")
    a.add_argument("--eval-count", dest="eval_count", type=int, default=20,
                   help="targets for the R^2 comparison")
    a.add_argument("--mode", choices=("one-step", "two-step"), default=None)
    a.add_argument("--epochs", type=int, default=None)
    a.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    a.add_argument("--lr", type=float, default=None)
    a.add_argument("--warmup-steps", dest="warmup_steps", type=int, default=None)
    a.add_argument("--lr-schedule", dest="lr_schedule",
                   choices=("constant", "cosine"), default=None)
    a.add_argument("--adam-beta2", dest="adam_beta2", type=float, default=None)
    a.add_argument("--w-ce", dest="w_ce", type=float, default=None)
    a.add_argument("--w-mse", dest="w_mse", type=float, default=None)
    a.add_argument("--eval-split", dest="eval_split", type=float, default=None)
    a.add_argument("--phase1-epochs", dest="phase1_epochs", type=int, default=None)
    a.add_argument("--beam-width", dest="beam_width", type=int, default=None)
    a.add_argument("--n-candidates", dest="n_candidates", type=int, default=None)
    a.add_argument("--max-len", dest="max_len", type=int, default=None)
    a.add_argument("--alpha", type=float, default=None)
    a.set_defaults(func=cmd_ablate)

    h = sub.add_parser("align-heatmap", help="cross-modal alignment heatmap + margin")
    h.add_argument("--checkpoint", required=True)
    h.add_argument("--count", type=int, default=50)
    for name in ("--d-max", "--max-depth", "--n-points", "--n-max"):
        h.add_argument(name, dest=name[2:].replace("-", "_"), type=int, default=None)
    h.add_argument("--x-low", dest="x_low", type=float, default=None)
    h.add_argument("--x-high", dest="x_high", type=float, default=None)
    h.set_defaults(func=cmd_align_heatmap)

    s = sub.add_parser("scaling", help="accuracy versus corpus size")
    s.add_argument("--sizes", default="1000,2000,4000")
    s.add_argument("--eval-count", dest="eval_count", type=int, default=20)
    s.add_argument("--mode", choices=("one-step", "two-step"), default=None)
    s.add_argument("--epochs", type=int, default=None)
    s.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    s.add_argument("--lr", type=float, default=None)
    s.add_argument("--warmup-steps", dest="warmup_steps", type=int, default=None)
    s.add_argument("--w-ce", dest="w_ce", type=float, default=None)
    s.add_argument("--w-mse", dest="w_mse", type=float, default=None)
    s.add_argument("--w-con", dest="w_con", type=float, default=None)
    s.add_argument("--eval-split", dest="eval_split", type=float, default=None)
    s.add_argument("--phase1-epochs", dest="phase1_epochs", type=int, default=None)
    s.add_argument("--beam-width", dest="beam_width", type=int, default=None)
    s.add_argument("--n-candidates", dest="n_candidates", type=int, default=None)
    s.add_argument("--max-len", dest="max_len", type=int, default=None)
    s.add_argument("--alpha", type=float, default=None)
    for name in ("--d-max", "--max-depth", "--n-points", "--n-max"):
        s.add_argument(name, dest=name[2:].replace("-", "_"), type=int, default=None)
    s.add_argument("--x-low", dest="x_low", type=float, default=None)
    s.add_argument("--x-high", dest="x_high", type=float, default=None)
    s.set_defaults(func=cmd_scaling)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (MmsrError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
