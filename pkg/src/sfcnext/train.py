"""Training loop, 10-repeat cross-validation, hyperparameter sweep, ablations.

Targets are centered on the training mean before optimization (every loss term
is invariant to shifting predictions and targets together) and the offset is
added back at prediction time; the offset travels with the checkpoint.
"""

import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import data as data_mod
from . import model as model_mod
from .losses import LossBreakdown, LossWeights, hybrid_loss, total_loss
from .metrics import MetricsReport, evaluate
from .optim import init_optimizer, optimizer_step
from .softrank import SoftRankConfig
from .tensor import NumericsError, Tape, Tensor, backward


class DivergenceError(RuntimeError):
    def __init__(self, epoch, step, detail):
        super().__init__(f"training diverged at epoch {epoch}, step {step}: {detail}")
        self.epoch = epoch
        self.step = step
        self.detail = detail

    def __reduce__(self):  # keep picklable across worker processes
        return (DivergenceError, (self.epoch, self.step, self.detail))


@dataclass
class TrainConfig:
    batch_size: int = 8
    ilr: float = 1e-3
    optimizer: str = "adamax"
    epochs: int = 30
    seed: int = 0
    primary_loss: str = "mse"   # "mse" or "mae"
    lambda1: float = 0.1
    lambda2: float = 1.0
    epsilon: float = 1.0
    deterministic: bool = False
    early_stop_patience: int = 10
    model: model_mod.ModelConfig = field(default_factory=model_mod.ModelConfig)

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.ilr <= 0:
            raise ValueError("ilr must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.primary_loss not in ("mse", "mae"):
            raise ValueError("primary_loss must be 'mse' or 'mae'")

    @property
    def loss_weights(self):
        return LossWeights(lambda1=self.lambda1, lambda2=self.lambda2)

    @property
    def softrank_config(self):
        return SoftRankConfig(epsilon=self.epsilon)


@dataclass
class EpochStats:
    epoch: int
    train: LossBreakdown
    val: LossBreakdown
    val_mae: float


@dataclass
class RunReport:
    epochs: list
    test: MetricsReport
    config: TrainConfig
    wall_clock: float
    scatter: list          # (id, true_age, pred_age)
    best_epoch: int
    target_mean: float


def _stack(samples):
    vols = np.stack([s.volume for s in samples]).astype(np.float32)
    ages = np.array([s.age for s in samples], dtype=np.float64)
    sexes = np.array([[s.sex] for s in samples], dtype=np.float32)
    ids = [s.id for s in samples]
    return vols, ages, sexes, ids


def _predict(vols, sexes, config, params, batch_size, offset):
    preds = np.empty(len(vols), dtype=np.float64)
    for lo in range(0, len(vols), batch_size):
        hi = min(len(vols), lo + batch_size)
        out = model_mod.forward(Tensor(vols[lo:hi]), Tensor(sexes[lo:hi]),
                                config.model, params)
        preds[lo:hi] = out.data.astype(np.float64) + offset
    return preds


def _mean_breakdown(parts):
    n = len(parts)
    return LossBreakdown(
        mse=sum(p.mse for p in parts) / n,
        diff=sum(p.diff for p in parts) / n,
        rank=sum(p.rank for p in parts) / n,
        total=sum(p.total for p in parts) / n,
        batch_size=parts[0].batch_size,
    )


def _eval_loss(preds_centered, ages_centered, config):
    """Per-batch loss breakdown on precomputed centered predictions."""
    parts = []
    bs = config.batch_size
    for lo in range(0, len(preds_centered), bs):
        hi = min(len(preds_centered), lo + bs)
        parts.append(total_loss(preds_centered[lo:hi], ages_centered[lo:hi],
                                config.loss_weights, config.softrank_config,
                                config.primary_loss))
    return _mean_breakdown(parts)


def train(config, manifest, split_ids):
    """Run the mini-batch optimization protocol; returns a RunReport."""
    t0 = time.perf_counter()
    train_ids, val_ids, test_ids = split_ids
    tr_v, tr_y, tr_s, _ = _stack(data_mod.load_samples(manifest, train_ids))
    va_v, va_y, va_s, _ = _stack(data_mod.load_samples(manifest, val_ids))
    te_v, te_y, te_s, te_ids = _stack(data_mod.load_samples(manifest, test_ids))

    mu = float(tr_y.mean())
    tr_yc, va_yc = tr_y - mu, va_y - mu

    params = model_mod.init_params(config.model, seed=config.seed)
    plist = list(params.values())
    opt = init_optimizer(config.optimizer, plist, lr=config.ilr)
    weights, srcfg = config.loss_weights, config.softrank_config

    rng = np.random.default_rng([config.seed, 7])
    best_val = np.inf
    best_epoch = -1
    best_params = model_mod.clone_params(params)
    epochs_out = []
    since_best = 0
    n_train = len(tr_v)

    for epoch in range(config.epochs):
        order = rng.permutation(n_train)
        train_parts = []
        for step, lo in enumerate(range(0, n_train, config.batch_size)):
            idx = order[lo : lo + config.batch_size]
            with Tape() as tape:
                pred = model_mod.forward(Tensor(tr_v[idx]), Tensor(tr_s[idx]),
                                         config.model, params)
                try:
                    loss, bd = hybrid_loss(pred, tr_yc[idx], weights, srcfg,
                                           config.primary_loss)
                except NumericsError as err:
                    raise DivergenceError(epoch, step, str(err)) from err
            backward(tape, loss)
            try:
                optimizer_step(opt, plist)
            except NumericsError as err:
                raise DivergenceError(epoch, step, str(err)) from err
            for p in plist:
                p.zero_grad()
            train_parts.append(bd)
        val_raw = _predict(va_v, va_s, config, params, config.batch_size, 0.0)
        val_bd = _eval_loss(val_raw, va_yc, config)
        val_mae = float(np.abs(val_raw + mu - va_y).mean())
        epochs_out.append(EpochStats(epoch=epoch, train=_mean_breakdown(train_parts),
                                     val=val_bd, val_mae=val_mae))
        if val_mae < best_val:
            best_val = val_mae
            best_epoch = epoch
            best_params = model_mod.clone_params(params)
            since_best = 0
        else:
            since_best += 1
            if since_best > config.early_stop_patience:
                break

    test_pred = _predict(te_v, te_s, config, best_params, config.batch_size, mu)
    report = RunReport(
        epochs=epochs_out,
        test=evaluate(test_pred, te_y),
        config=config,
        wall_clock=time.perf_counter() - t0,
        scatter=[(sid, float(t), float(p)) for sid, t, p in zip(te_ids, te_y, test_pred)],
        best_epoch=best_epoch,
        target_mean=mu,
    )
    return report, best_params


def mean_predictor_baseline(manifest, split_ids):
    """MAE of always predicting the training-set mean age on the test set."""
    train_ids, _, test_ids = split_ids
    by_id = {r.id: r.age for r in manifest.rows}
    mu = np.mean([by_id[i] for i in train_ids])
    te = np.array([by_id[i] for i in test_ids])
    return float(np.abs(te - mu).mean())


# ---------------------------------------------------------------------------
# cross-validation / sweep / ablations
# ---------------------------------------------------------------------------

@dataclass
class CVResult:
    runs: list
    maes: np.ndarray
    pccs: np.ndarray
    srccs: np.ndarray

    def aggregate(self):
        return {
            "mae_mean": float(self.maes.mean()), "mae_std": float(self.maes.std()),
            "pcc_mean": float(self.pccs.mean()), "pcc_std": float(self.pccs.std()),
            "srcc_mean": float(self.srccs.mean()), "srcc_std": float(self.srccs.std()),
        }


def _cv_worker(args):
    config, manifest_path, repeat = args
    manifest = data_mod.load_manifest(manifest_path)
    spec = data_mod.SplitSpec(repeat=repeat, seed=config.seed)
    ids = data_mod.split(manifest, spec)
    report, _ = train(config, manifest, ids)
    return report


def cross_validate(config, manifest, repeats=10, workers=None):
    """Repeat the 80/10/10 split `repeats` times and aggregate test metrics."""
    manifest_path = os.path.join(manifest.root, "manifest.csv")
    jobs = [(config, manifest_path, r) for r in range(repeats)]
    if config.deterministic or (workers is not None and workers <= 1):
        runs = [_cv_worker(j) for j in jobs]
    else:
        workers = workers or min(repeats, os.cpu_count() or 1)
        ctx_env = os.environ.copy()
        try:
            os.environ["OMP_NUM_THREADS"] = "1"
            with ProcessPoolExecutor(max_workers=workers) as pool:
                runs = list(pool.map(_cv_worker, jobs))
        finally:
            os.environ.clear()
            os.environ.update(ctx_env)
    return CVResult(
        runs=runs,
        maes=np.array([r.test.mae for r in runs]),
        pccs=np.array([r.test.pcc for r in runs]),
        srccs=np.array([r.test.srcc for r in runs]),
    )


def table2_grid():
    """Cell list mirroring the hyperparameter table: loss/batch panel,
    ILR/optimizer panel, attention/conformer panel."""
    cells = []
    for loss in ("mae", "mse"):
        for bs in (4, 8, 20):
            cells.append({"primary_loss": loss, "batch_size": bs})
    for ilr in (1e-3, 2e-3, 4e-3):
        for opt in ("adam", "adamw", "adamax"):
            cells.append({"ilr": ilr, "optimizer": opt})
    for heads, blocks in ((2, 1), (2, 2), (2, 3), (4, 3)):
        cells.append({"attention_heads": heads, "conformer_blocks": blocks})
    return cells


SWEEP_COLUMNS = ("primary_loss", "batch_size", "ilr", "optimizer",
                 "attention_heads", "conformer_blocks")


def _apply_cell(config, cell):
    model_keys = {"attention_heads", "conformer_blocks"}
    cfg_kw = {k: v for k, v in cell.items() if k not in model_keys}
    mdl_kw = {k: v for k, v in cell.items() if k in model_keys}
    model = replace(config.model, **mdl_kw) if mdl_kw else config.model
    return replace(config, model=model, **cfg_kw)


def sweep(config, manifest, cells=None, repeats=10, workers=None):
    """One cross-validation per cell; a diverged cell is marked, not fatal."""
    if cells is None:
        cells = table2_grid()
    if not cells:
        raise ValueError("sweep: empty grid")
    rows = []
    for cell in cells:
        cfg = _apply_cell(config, cell)
        row = {
            "primary_loss": cfg.primary_loss,
            "batch_size": cfg.batch_size,
            "ilr": cfg.ilr,
            "optimizer": cfg.optimizer,
            "attention_heads": cfg.model.attention_heads,
            "conformer_blocks": cfg.model.conformer_blocks,
        }
        try:
            cv = cross_validate(cfg, manifest, repeats=repeats, workers=workers)
            row["status"] = "ok"
            row.update(cv.aggregate())
        except DivergenceError:
            row["status"] = "diverged"
            row.update({k: "" for k in ("mae_mean", "mae_std", "pcc_mean",
                                        "pcc_std", "srcc_mean", "srcc_std")})
        rows.append(row)
    return rows


ABLATION_VARIANTS = (
    ("full", {}),
    ("no_sex_label", {"use_sex_branch": False}),
    ("no_conformer_encoder", {"use_conformer": False}),
    ("original_convnext_stage", {"stage_blocks": (3, 3, 9, 3)}),
)


def ablate(config, manifest, repeats=10, workers=None):
    """Four runs differing in exactly one model field, identical seeds/splits."""
    rows = []
    for name, overrides in ABLATION_VARIANTS:
        cfg = replace(config, model=replace(config.model, **overrides))
        cv = cross_validate(cfg, manifest, repeats=repeats, workers=workers)
        row = {"variant": name,
               "param_count": model_mod.param_count(cfg.model)}
        row.update(cv.aggregate())
        rows.append(row)
    return rows
