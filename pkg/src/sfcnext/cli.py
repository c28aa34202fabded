"""Command-line surface.

Subcommands: generate, train, cv, sweep, ablate, gradcheck, rankbench.
Configuration comes from an optional flat ``key = value`` file (see
``--config``); command-line flags override file values. Every command writes
schema-stable CSV reports into ``--out-dir``; with ``--deterministic`` and a
fixed seed the report files are bit-identical across runs (wall-clock timings
then go to stdout only).
"""

import argparse
import os
import sys
import time
from dataclasses import replace

import numpy as np

from . import data as data_mod
from . import gradcheck as gradcheck_mod
from . import model as model_mod
from . import train as train_mod
from .softrank import (SoftRankConfig, pairwise_rank_approx, permutahedron_vertices,
                       project_permutahedron, soft_rank, vertex_certificate)

_CONFIG_KEYS = ("batch_size", "ilr", "optimizer", "epochs", "seed", "primary_loss",
                "lambda1", "lambda2", "epsilon", "early_stop_patience",
                "stage_blocks", "stage_channels", "dw_kernel", "conformer_blocks",
                "attention_heads", "sex_embed_dim", "head_hidden", "use_sex_branch",
                "use_conformer", "input_dims")


def read_config_file(path):
    kv = {}
    with open(path, encoding="utf-8") as fh:
        for ln in fh:
            ln = ln.split("#", 1)[0].strip()
            if not ln:
                continue
            if "=" not in ln:
                raise ValueError(f"{path}: expected 'key = value', got {ln!r}")
            key, val = (s.strip() for s in ln.split("=", 1))
            if key not in _CONFIG_KEYS:
                raise ValueError(f"{path}: unknown config key {key!r}")
            kv[key] = val
    return kv


def _parse_bool(v):
    return str(v).strip().lower() in ("1", "true", "yes")


def _parse_ints(v):
    return tuple(int(x) for x in str(v).split(","))


def build_train_config(kv, args):
    """Merge file values and CLI overrides into a TrainConfig."""
    merged = dict(kv)
    for key in _CONFIG_KEYS:
        val = getattr(args, key, None)
        if val is not None:
            merged[key] = val
    model_kw = {}
    cfg_kw = {}
    casts = {
        "batch_size": int, "ilr": float, "optimizer": str, "epochs": int,
        "seed": int, "primary_loss": str, "lambda1": float, "lambda2": float,
        "epsilon": float, "early_stop_patience": int,
    }
    model_casts = {
        "stage_blocks": _parse_ints, "stage_channels": _parse_ints,
        "dw_kernel": int, "conformer_blocks": int, "attention_heads": int,
        "sex_embed_dim": int, "head_hidden": int, "use_sex_branch": _parse_bool,
        "use_conformer": _parse_bool, "input_dims": _parse_ints,
    }
    for key, val in merged.items():
        if key in casts:
            cfg_kw[key] = casts[key](val)
        elif key in model_casts:
            model_kw[key] = model_casts[key](val)
    if getattr(args, "tiny", False):
        base = model_mod.tiny_config()
        for key, val in model_kw.items():
            base = replace(base, **{key: val})
        model_cfg = base
    else:
        model_cfg = model_mod.ModelConfig(**model_kw) if model_kw \
            else model_mod.ModelConfig()
    cfg_kw["deterministic"] = bool(getattr(args, "deterministic", False))
    return train_mod.TrainConfig(model=model_cfg, **cfg_kw)


# ---------------------------------------------------------------------------
# report writers
# ---------------------------------------------------------------------------

def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path, columns, rows):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(row[c]) for c in columns) + "\n")


def write_config_echo(path, config):
    m = config.model
    lines = [
        f"batch_size = {config.batch_size}",
        f"ilr = {_fmt(config.ilr)}",
        f"optimizer = {config.optimizer}",
        f"epochs = {config.epochs}",
        f"seed = {config.seed}",
        f"primary_loss = {config.primary_loss}",
        f"lambda1 = {_fmt(config.lambda1)}",
        f"lambda2 = {_fmt(config.lambda2)}",
        f"epsilon = {_fmt(config.epsilon)}",
        f"early_stop_patience = {config.early_stop_patience}",
        f"stage_blocks = {','.join(map(str, m.stage_blocks))}",
        f"stage_channels = {','.join(map(str, m.stage_channels))}",
        f"dw_kernel = {m.dw_kernel}",
        f"conformer_blocks = {m.conformer_blocks}",
        f"attention_heads = {m.attention_heads}",
        f"sex_embed_dim = {m.sex_embed_dim}",
        f"head_hidden = {m.head_hidden}",
        f"use_sex_branch = {m.use_sex_branch}",
        f"use_conformer = {m.use_conformer}",
        f"input_dims = {','.join(map(str, m.input_dims))}",
    ]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


EPOCH_COLUMNS = ("epoch", "train_mse", "train_diff", "train_rank", "train_total",
                 "val_mse", "val_diff", "val_rank", "val_total", "val_mae")
AGG_COLUMNS = ("mae_mean", "mae_std", "pcc_mean", "pcc_std", "srcc_mean", "srcc_std")


def write_run_report(out_dir, report, deterministic):
    rows = []
    for e in report.epochs:
        rows.append({
            "epoch": e.epoch,
            "train_mse": e.train.mse, "train_diff": e.train.diff,
            "train_rank": e.train.rank, "train_total": e.train.total,
            "val_mse": e.val.mse, "val_diff": e.val.diff,
            "val_rank": e.val.rank, "val_total": e.val.total,
            "val_mae": e.val_mae,
        })
    write_csv(os.path.join(out_dir, "report.csv"), EPOCH_COLUMNS, rows)
    write_csv(os.path.join(out_dir, "scatter.csv"), ("id", "true_age", "pred_age"),
              [{"id": i, "true_age": t, "pred_age": p} for i, t, p in report.scatter])
    write_csv(os.path.join(out_dir, "metrics.csv"), ("mae", "pcc", "srcc", "n"),
              [{"mae": report.test.mae, "pcc": report.test.pcc,
                "srcc": report.test.srcc, "n": report.test.n}])
    write_config_echo(os.path.join(out_dir, "config-echo.txt"), report.config)
    if not deterministic:
        print(f"wall-clock: {report.wall_clock:.1f}s")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_generate(args):
    manifest = data_mod.generate_synthetic(
        n=args.n, dims=tuple(args.dims), seed=args.seed, out_dir=args.out)
    print(f"wrote {len(manifest.rows)} volumes under {manifest.root}")
    return 0


def cmd_train(args):
    config = build_train_config(args.file_config, args)
    manifest = data_mod.load_manifest(args.manifest)
    spec = data_mod.SplitSpec(repeat=args.repeat, seed=config.seed)
    ids = data_mod.split(manifest, spec)
    os.makedirs(args.out_dir, exist_ok=True)
    report, best_params = train_mod.train(config, manifest, ids)
    write_run_report(args.out_dir, report, config.deterministic)
    model_mod.save_checkpoint(
        os.path.join(args.out_dir, "checkpoint.bin"), config.model, best_params,
        extra={"target_mean": report.target_mean, "best_epoch": report.best_epoch})
    print(f"test MAE {report.test.mae:.3f}  PCC {report.test.pcc:.3f}  "
          f"SRCC {report.test.srcc:.3f}")
    return 0


def cmd_cv(args):
    config = build_train_config(args.file_config, args)
    manifest = data_mod.load_manifest(args.manifest)
    os.makedirs(args.out_dir, exist_ok=True)
    t0 = time.perf_counter()
    cv = train_mod.cross_validate(config, manifest, repeats=args.repeats,
                                  workers=args.workers)
    rows = [{"repeat": i, "mae": r.test.mae, "pcc": r.test.pcc, "srcc": r.test.srcc}
            for i, r in enumerate(cv.runs)]
    write_csv(os.path.join(args.out_dir, "report.csv"),
              ("repeat", "mae", "pcc", "srcc"), rows)
    agg = cv.aggregate()
    write_csv(os.path.join(args.out_dir, "aggregate.csv"), AGG_COLUMNS, [agg])
    scatter_rows = []
    for i, r in enumerate(cv.runs):
        for sid, t, p in r.scatter:
            scatter_rows.append({"repeat": i, "id": sid, "true_age": t, "pred_age": p})
    write_csv(os.path.join(args.out_dir, "scatter.csv"),
              ("repeat", "id", "true_age", "pred_age"), scatter_rows)
    write_config_echo(os.path.join(args.out_dir, "config-echo.txt"), config)
    if not config.deterministic:
        print(f"wall-clock: {time.perf_counter() - t0:.1f}s")
    print("aggregate: " + " ".join(f"{k}={v:.4f}" for k, v in agg.items()))
    return 0


def cmd_sweep(args):
    config = build_train_config(args.file_config, args)
    manifest = data_mod.load_manifest(args.manifest)
    os.makedirs(args.out_dir, exist_ok=True)
    rows = train_mod.sweep(config, manifest, repeats=args.repeats,
                           workers=args.workers)
    cols = train_mod.SWEEP_COLUMNS + ("status",) + AGG_COLUMNS
    write_csv(os.path.join(args.out_dir, "report.csv"), cols, rows)
    write_config_echo(os.path.join(args.out_dir, "config-echo.txt"), config)
    print(f"sweep finished: {len(rows)} cells")
    return 0


def cmd_ablate(args):
    config = build_train_config(args.file_config, args)
    manifest = data_mod.load_manifest(args.manifest)
    os.makedirs(args.out_dir, exist_ok=True)
    rows = train_mod.ablate(config, manifest, repeats=args.repeats,
                            workers=args.workers)
    cols = ("variant", "param_count") + AGG_COLUMNS
    write_csv(os.path.join(args.out_dir, "report.csv"), cols, rows)
    write_config_echo(os.path.join(args.out_dir, "config-echo.txt"), config)
    print(f"ablation finished: {len(rows)} variants")
    return 0


def cmd_gradcheck(args):
    os.makedirs(args.out_dir, exist_ok=True)
    results = gradcheck_mod.run_scope(args.scope, seed=args.seed)
    rows = []
    worst = None
    for r in results:
        status = "pass" if r.passed else "FAIL"
        print(f"{status}  {r.name}: rel_error {r.rel_error:.3e} (tol {r.tolerance:g})")
        rows.append({"op": r.name, "rel_error": r.rel_error,
                     "tolerance": r.tolerance, "status": status})
        if worst is None or r.rel_error > worst.rel_error:
            worst = r
    write_csv(os.path.join(args.out_dir, "report.csv"),
              ("op", "rel_error", "tolerance", "status"), rows)
    print(f"worst: {worst.name} rel_error {worst.rel_error:.3e}")
    return 0 if all(r.passed for r in results) else 1


def cmd_rankbench(args):
    os.makedirs(args.out_dir, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    cfg = SoftRankConfig(epsilon=1.0)
    rows = []
    prev = None
    for n in args.sizes:
        if n < 2:
            raise ValueError("rankbench sizes must be >= 2")
        theta = rng.standard_normal(n)
        soft_rank(theta, cfg)  # warm up (JIT compilation)
        t_soft = _best_time(lambda: soft_rank(theta, cfg), args.trials)
        if n <= args.pairwise_max_n:
            pairwise_rank_approx(theta, 0.1)
            t_pair = _best_time(lambda: pairwise_rank_approx(theta, 0.1),
                                max(1, args.trials if n <= 10_000 else 1))
        else:
            t_pair = float("nan")
        cert = ""
        if n <= 6:
            verts = permutahedron_vertices(n)
            ok = 0
            for _ in range(args.cert_cases):
                z = rng.standard_normal(n) * rng.uniform(0.5, 4.0)
                mu, _, _, _ = project_permutahedron(z)
                if vertex_certificate(z, mu, verts) <= 1e-6:
                    ok += 1
            cert = ok / args.cert_cases
        row = {"n": n, "t_soft_rank": t_soft, "t_pairwise": t_pair,
               "soft_growth": (t_soft / prev[0]) if prev else "",
               "pairwise_growth": (t_pair / prev[1]) if prev and prev[1] else "",
               "certificate_pass_rate": cert}
        rows.append(row)
        prev = (t_soft, t_pair)
        print(f"n={n}: soft_rank {t_soft:.4g}s  pairwise {t_pair:.4g}s")
    write_csv(os.path.join(args.out_dir, "report.csv"),
              ("n", "t_soft_rank", "t_pairwise", "soft_growth", "pairwise_growth",
               "certificate_pass_rate"), rows)
    return 0


def _best_time(fn, trials):
    """Best-of-trials wall time; the minimum is the most repeatable statistic
    on a shared machine."""
    times = []
    for _ in range(trials):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(min(times))


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _add_common(p, with_training=True):
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--deterministic", action="store_true")
    p.add_argument("--out-dir", default="out")
    if with_training:
        p.add_argument("--manifest", required=True, help="path to manifest.csv")
        p.add_argument("--tiny", action="store_true",
                       help="use the small test-scale model profile")
        p.add_argument("--workers", type=int, default=None)
        p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
        p.add_argument("--ilr", type=float, default=None)
        p.add_argument("--optimizer", default=None,
                       choices=("adam", "adamw", "adamax"))
        p.add_argument("--epochs", type=int, default=None)
        p.add_argument("--primary-loss", dest="primary_loss", default=None,
                       choices=("mse", "mae"))
        p.add_argument("--lambda1", type=float, default=None)
        p.add_argument("--lambda2", type=float, default=None)
        p.add_argument("--epsilon", type=float, default=None)


def make_parser():
    ap = argparse.ArgumentParser(prog="sfcnext")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic dataset")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--dims", type=int, nargs=3, default=[24, 24, 24])
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="single training run")
    _add_common(t)
    t.add_argument("--repeat", type=int, default=0, help="split repeat index")
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("cv", help="repeated-split cross-validation")
    _add_common(c)
    c.add_argument("--repeats", type=int, default=10)
    c.set_defaults(func=cmd_cv)

    s = sub.add_parser("sweep", help="hyperparameter grid")
    _add_common(s)
    s.add_argument("--repeats", type=int, default=10)
    s.set_defaults(func=cmd_sweep)

    a = sub.add_parser("ablate", help="architecture ablations")
    _add_common(a)
    a.add_argument("--repeats", type=int, default=10)
    a.set_defaults(func=cmd_ablate)

    gc = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    gc.add_argument("--scope", choices=("ops", "softrank", "model"), default="ops")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--out-dir", default="out")
    gc.set_defaults(func=cmd_gradcheck)

    rb = sub.add_parser("rankbench", help="soft-rank timing and certificates")
    rb.add_argument("--sizes", type=int, nargs="+",
                    default=[4, 6, 1000, 10_000, 100_000])
    rb.add_argument("--trials", type=int, default=5)
    rb.add_argument("--cert-cases", dest="cert_cases", type=int, default=200)
    rb.add_argument("--pairwise-max-n", dest="pairwise_max_n", type=int,
                    default=100_000)
    rb.add_argument("--seed", type=int, default=0)
    rb.add_argument("--out-dir", default="out")
    rb.set_defaults(func=cmd_rankbench)

    return ap


def main(argv=None):
    ap = make_parser()
    args = ap.parse_args(argv)
    args.file_config = read_config_file(args.config) if getattr(args, "config", None) \
        else {}
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
