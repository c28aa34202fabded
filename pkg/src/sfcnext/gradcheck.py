"""Finite-difference gradient checking.

Analytic gradients come from the float32 tape; the central-difference oracle
re-evaluates the same computation with float64 tensors (h = 1e-3), so the
comparison is not polluted by single-precision forward noise.
"""

from dataclasses import dataclass

import numpy as np

from . import losses, model
from . import tensor as T
from .softrank import SoftRankConfig, soft_rank, soft_rank_vjp
from .tensor import Tape, Tensor, backward


@dataclass
class CheckResult:
    name: str
    rel_error: float
    tolerance: float

    @property
    def passed(self):
        return self.rel_error < self.tolerance


def fd_gradient(f, x, h=1e-3):
    """Central differences of scalar f at x (x is float64, perturbed in place)."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def rel_error(analytic, numeric):
    analytic = np.asarray(analytic, dtype=np.float64).reshape(-1)
    numeric = np.asarray(numeric, dtype=np.float64).reshape(-1)
    denom = max(np.abs(numeric).max(), 1e-8)
    return float(np.abs(analytic - numeric).max() / denom)


def check_tensor_op(name, build, inputs, wrt=0, tol=1e-3, h=1e-3, seed=0):
    """Compare tape gradient of sum(R * op(...)) against the f64 FD oracle.

    ``build(tensors) -> Tensor`` composes the op from a list of Tensors;
    ``inputs`` is a list of float32 arrays; ``wrt`` selects the checked input.
    """
    rng = np.random.default_rng(seed)
    t32 = [Tensor(a, requires_grad=(i == wrt)) for i, a in enumerate(inputs)]
    with Tape() as tape:
        out = build(t32)
        r = rng.standard_normal(out.shape).astype(np.float32)
        loss = T.sum_all(T.mul(out, Tensor(r)))
    backward(tape, loss)
    analytic = t32[wrt].grad

    def f64_eval(x):
        ts = [Tensor(a, dtype=np.float64) for a in inputs]
        ts[wrt] = Tensor(x, dtype=np.float64)
        y = build(ts)
        return float((y.data * r.astype(np.float64)).sum())

    numeric = fd_gradient(f64_eval, inputs[wrt].astype(np.float64), h=h)
    return CheckResult(name, rel_error(analytic, numeric.reshape(analytic.shape)), tol)


# ---------------------------------------------------------------------------
# suites
# ---------------------------------------------------------------------------

def ops_suite(seed=0):
    rng = np.random.default_rng(seed)

    def arr(*shape):
        return rng.standard_normal(shape).astype(np.float32)

    results = []
    x = arr(2, 4, 5, 5, 5)
    w = arr(3, 4, 3, 3, 3)
    b = arr(3)
    results.append(check_tensor_op(
        "conv3d/input", lambda t: T.conv3d(t[0], t[1], t[2], stride=2, padding=1),
        [x, w, b], wrt=0))
    results.append(check_tensor_op(
        "conv3d/weight", lambda t: T.conv3d(t[0], t[1], t[2], stride=2, padding=1),
        [x, w, b], wrt=1))
    results.append(check_tensor_op(
        "conv3d/bias", lambda t: T.conv3d(t[0], t[1], t[2], stride=2, padding=1),
        [x, w, b], wrt=2))
    xg = arr(2, 4, 4, 4, 4)
    wg = arr(4, 1, 3, 3, 3)
    results.append(check_tensor_op(
        "depthwise_conv3d/input", lambda t: T.depthwise_conv3d(t[0], t[1]),
        [xg, wg], wrt=0))
    results.append(check_tensor_op(
        "depthwise_conv3d/weight", lambda t: T.depthwise_conv3d(t[0], t[1]),
        [xg, wg], wrt=1))
    xt = arr(2, 6, 5)
    wt = arr(5, 3)
    results.append(check_tensor_op(
        "dwconv_tokens/input", lambda t: T.dwconv_tokens(t[0], t[1]), [xt, wt], wrt=0))
    results.append(check_tensor_op(
        "dwconv_tokens/weight", lambda t: T.dwconv_tokens(t[0], t[1]), [xt, wt], wrt=1))
    xl, wl, bl = arr(3, 4, 6), arr(5, 6), arr(5)
    for i, nm in enumerate(("input", "weight", "bias")):
        results.append(check_tensor_op(
            f"linear/{nm}", lambda t: T.linear(t[0], t[1], t[2]), [xl, wl, bl], wrt=i))
    xn, g_, b_ = arr(3, 4, 8), arr(8), arr(8)
    for i, nm in enumerate(("input", "gamma", "beta")):
        results.append(check_tensor_op(
            f"layer_norm/{nm}", lambda t: T.layer_norm(t[0], t[1], t[2]),
            [xn, g_, b_], wrt=i))
    results.append(check_tensor_op("gelu", lambda t: T.gelu(t[0]), [arr(4, 7)]))
    results.append(check_tensor_op(
        "softmax", lambda t: T.softmax(t[0], axis=-1), [arr(3, 6)]))
    results.append(check_tensor_op(
        "add", lambda t: T.add(t[0], t[1]), [arr(3, 4), arr(3, 4)], wrt=1))
    results.append(check_tensor_op(
        "mul", lambda t: T.mul(t[0], t[1]), [arr(3, 4), arr(3, 4)], wrt=0))
    results.append(check_tensor_op(
        "mul_scalar", lambda t: T.mul_scalar(t[0], -1.7), [arr(5,)]))
    results.append(check_tensor_op(
        "concat", lambda t: T.concat([t[0], t[1]], axis=1), [arr(2, 3), arr(2, 5)],
        wrt=1))
    results.append(check_tensor_op(
        "matmul", lambda t: T.matmul(t[0], t[1]), [arr(2, 3, 4), arr(2, 4, 5)], wrt=0))
    results.append(check_tensor_op(
        "mean_pool_spatial", lambda t: T.mean_pool_spatial(t[0]), [arr(2, 3, 4, 4, 4)]))
    results.append(check_tensor_op(
        "mean_tokens", lambda t: T.mean_tokens(t[0]), [arr(2, 5, 3)]))
    return results


def losses_suite(seed=0, cases=20):
    rng = np.random.default_rng(seed)
    worst = {"mse_loss": 0.0, "age_difference_loss": 0.0, "soft_rank_loss": 0.0,
             "total_loss": 0.0}
    cfg = SoftRankConfig(epsilon=1.0)
    for _ in range(cases):
        n = int(rng.integers(2, 17))
        # well-separated ages keep soft-rank blocks away from their boundaries
        y = np.sort(rng.uniform(19, 72, n)) + np.arange(n) * 0.5
        yhat = y + rng.normal(0, 3.0, n)
        pairs = [
            ("mse_loss", lambda v: losses.mse_loss(v, y),
             losses.mse_loss_grad(yhat, y)),
            ("age_difference_loss", lambda v: losses.age_difference_loss(v, y),
             losses.age_difference_loss_grad(yhat, y)),
            ("soft_rank_loss", lambda v: losses.soft_rank_loss(v, y, cfg),
             losses.soft_rank_loss_grad(yhat, y, cfg)),
            ("total_loss", lambda v: losses.total_loss(v, y, config=cfg).total,
             losses.total_loss_grad(yhat, y, config=cfg)),
        ]
        for name, f, analytic in pairs:
            numeric = fd_gradient(lambda v: f(v), yhat.copy(), h=1e-4)
            worst[name] = max(worst[name], rel_error(analytic, numeric))
    return [CheckResult(k, v, 1e-3) for k, v in worst.items()]


def softrank_suite(seed=0, cases=50):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(cases):
        n = int(rng.integers(2, 24))
        eps = float(rng.uniform(0.3, 3.0))
        # distinct entries away from pooled-block boundaries
        theta = np.sort(rng.standard_normal(n)) + np.arange(n) * 0.05
        rng.shuffle(theta)
        upstream = rng.standard_normal(n)
        res = soft_rank(theta, SoftRankConfig(epsilon=eps))
        analytic = soft_rank_vjp(res, upstream, eps)
        numeric = fd_gradient(
            lambda v: float(soft_rank(v, SoftRankConfig(epsilon=eps)).ranks @ upstream),
            theta.copy(), h=1e-6)
        worst = max(worst, rel_error(analytic, numeric))
    return [CheckResult("soft_rank_vjp", worst, 1e-4)]


def model_suite(seed=0, n_params=32, h=1e-3):
    """FD check of the hybrid loss through the full tiny model on a random
    32-parameter subsample (f64 oracle, f32 analytic path)."""
    rng = np.random.default_rng(seed)
    cfg = model.tiny_config(input_dims=(24, 24, 24), stage_channels=(4, 8, 16, 16),
                            conformer_blocks=1, head_hidden=16)
    params = model.init_params(cfg, seed=seed)
    # perturb the zero-initialized projections so no branch is dead
    for name, p in params.items():
        if np.all(p.data == 0):
            p.data += rng.standard_normal(p.data.shape).astype(np.float32) * 0.02
    vol = rng.standard_normal((3, 1, 24, 24, 24)).astype(np.float32)
    sex = rng.integers(0, 2, size=(3, 1)).astype(np.float32)
    y = np.array([25.0, 41.0, 63.0])
    weights = losses.LossWeights()
    srcfg = SoftRankConfig()

    vol_t, sex_t = Tensor(vol), Tensor(sex)
    with Tape() as tape:
        pred = model.forward(vol_t, sex_t, cfg, params)
        loss, _ = losses.hybrid_loss(pred, y, weights, srcfg)
    backward(tape, loss)

    p64 = model.cast_params(params, np.float64)
    vol64, sex64 = Tensor(vol, dtype=np.float64), Tensor(sex, dtype=np.float64)

    def eval64():
        pred = model.forward(vol64, sex64, cfg, p64)
        return losses.total_loss(pred.data, y, weights, srcfg).total

    names = list(params)
    picks = []
    while len(picks) < n_params:
        nm = names[int(rng.integers(len(names)))]
        idx = int(rng.integers(params[nm].data.size))
        picks.append((nm, idx))
    analytic = np.empty(len(picks))
    numeric = np.empty(len(picks))
    for i, (nm, idx) in enumerate(picks):
        analytic[i] = params[nm].grad.reshape(-1)[idx]
        flat = p64[nm].data.reshape(-1)
        orig = flat[idx]
        flat[idx] = orig + h
        fp = eval64()
        flat[idx] = orig - h
        fm = eval64()
        flat[idx] = orig
        numeric[i] = (fp - fm) / (2.0 * h)
    return [CheckResult("model/hybrid_loss", rel_error(analytic, numeric), 1e-2)]


def run_scope(scope, seed=0):
    if scope == "ops":
        return ops_suite(seed) + losses_suite(seed)
    if scope == "softrank":
        return softrank_suite(seed)
    if scope == "model":
        return model_suite(seed)
    raise ValueError(f"unknown gradcheck scope {scope!r}")
