"""Network architecture: shapes, init properties, ablation flags, checkpoints."""

import numpy as np
import pytest

from sfcnext import model
from sfcnext.tensor import ShapeError, Tape, Tensor, backward


def _tiny():
    return model.tiny_config()


def _batch(rng, n=2, dims=(24, 24, 24)):
    vol = rng.standard_normal((n, 1) + dims).astype(np.float32)
    sex = rng.integers(0, 2, (n, 1)).astype(np.float32)
    return Tensor(vol), Tensor(sex)


def test_config_validation():
    with pytest.raises(ValueError, match="length 4"):
        model.ModelConfig(stage_blocks=(1, 1, 1))
    with pytest.raises(ValueError, match="exceed"):
        model.ModelConfig(down_kernel=2, down_stride=2)
    with pytest.raises(ValueError, match="odd"):
        model.ModelConfig(dw_kernel=4)
    with pytest.raises(ValueError, match="divisible"):
        model.ModelConfig(stage_channels=(8, 16, 32, 63), attention_heads=2)


def test_token_count_tiny():
    # 24 -> 12 -> 6 -> 3 -> 2 per axis, so 8 tokens of width model_dim
    assert model.token_count(_tiny()) == (8, (2, 2, 2))


def test_forward_output_shape(rng):
    cfg = _tiny()
    params = model.init_params(cfg, seed=0)
    vol, sex = _batch(rng, n=3)
    out = model.forward(vol, sex, cfg, params)
    assert out.shape == (3,)
    assert np.isfinite(out.data).all()


def test_forward_input_validation(rng):
    cfg = _tiny()
    params = model.init_params(cfg, seed=0)
    vol, sex = _batch(rng)
    with pytest.raises(ShapeError, match="volume"):
        model.forward(Tensor(vol.data[:, 0]), sex, cfg, params)
    with pytest.raises(ShapeError, match="sex"):
        model.forward(vol, Tensor(np.zeros((2, 2), dtype=np.float32)), cfg, params)
    small = Tensor(np.zeros((1, 1, 16, 16, 16), dtype=np.float32))
    with pytest.raises(ShapeError, match="stage 3"):
        # 16 -> 8 -> 4 -> 2, smaller than the stage-4 kernel
        model.forward(small, Tensor(np.zeros((1, 1), dtype=np.float32)), cfg, params)


def test_zero_init_makes_residual_branches_identity(rng):
    """With zero-initialized projections the conformer blocks reduce to their
    closing layer norm; perturbing a residual projection changes the output."""
    cfg = _tiny()
    params = model.init_params(cfg, seed=0)
    vol, sex = _batch(rng)
    base = model.forward(vol, sex, cfg, params).data.copy()
    for name in ("conf0.attn.wo", "conf1.conv.wproj", "stage2.block1.pw2.w"):
        assert np.all(params[name].data == 0)
        # random (not uniform) perturbation: later layer norms would cancel a
        # constant shift exactly
        bump = rng.standard_normal(params[name].shape).astype(np.float32) * 0.05
        params[name].data += bump
        changed = model.forward(vol, sex, cfg, params).data
        assert not np.allclose(changed, base)
        params[name].data -= bump


def test_seeded_init_is_deterministic():
    cfg = _tiny()
    a = model.init_params(cfg, seed=7)
    b = model.init_params(cfg, seed=7)
    c = model.init_params(cfg, seed=8)
    assert all(np.array_equal(a[k].data, b[k].data) for k in a)
    assert any(not np.array_equal(a[k].data, c[k].data) for k in a)


def test_trunc_normal_bounded():
    cfg = _tiny()
    params = model.init_params(cfg, seed=0)
    w = params["stage0.down.conv.w"].data
    assert np.abs(w).max() <= 2.0 * 0.02 + 1e-6
    assert w.std() > 0.01


def test_batch_independence(rng):
    cfg = _tiny()
    params = model.init_params(cfg, seed=1)
    for name, p in params.items():
        if np.all(p.data == 0):
            p.data += rng.standard_normal(p.data.shape).astype(np.float32) * 0.02
    vol, sex = _batch(rng, n=4)
    full = model.forward(vol, sex, cfg, params).data
    solo = model.forward(Tensor(vol.data[2:3]), Tensor(sex.data[2:3]),
                         cfg, params).data
    np.testing.assert_allclose(full[2], solo[0], atol=1e-4)


def test_ablation_flags_change_param_count():
    cfg = _tiny()
    n_full = model.param_count(cfg)
    n_nosex = model.param_count(model.tiny_config(use_sex_branch=False))
    n_noconf = model.param_count(model.tiny_config(use_conformer=False))
    n_deep = model.param_count(model.tiny_config(stage_blocks=(3, 3, 9, 3)))
    assert n_nosex < n_full
    assert n_noconf < n_full
    assert n_deep > n_full


def test_sex_branch_flag_wiring(rng):
    cfg = model.tiny_config(use_sex_branch=False)
    params = model.init_params(cfg, seed=0)
    assert "sex.w1" not in params
    vol, sex = _batch(rng)
    a = model.forward(vol, sex, cfg, params).data
    b = model.forward(vol, Tensor(1.0 - sex.data), cfg, params).data
    np.testing.assert_allclose(a, b)  # sex ignored without the branch


def test_gradients_reach_the_stem(rng):
    cfg = _tiny()
    params = model.init_params(cfg, seed=0)
    vol, sex = _batch(rng)
    with Tape() as tape:
        out = model.forward(vol, sex, cfg, params)
        loss = __import__("sfcnext.tensor", fromlist=["sum_all"]).sum_all(out)
    backward(tape, loss)
    g = params["stage0.down.conv.w"].grad
    assert g is not None and np.abs(g).max() > 0


def test_checkpoint_roundtrip(tmp_path, rng):
    cfg = _tiny()
    params = model.init_params(cfg, seed=3)
    path = tmp_path / "model.bin"
    model.save_checkpoint(str(path), cfg, params, extra={"target_mean": 37.5})
    cfg2, params2, extra = model.load_checkpoint(str(path))
    assert cfg2 == cfg
    assert extra["target_mean"] == 37.5
    assert list(params2) == list(params)
    for k in params:
        np.testing.assert_array_equal(params[k].data, params2[k].data)


def test_checkpoint_corruption_detected(tmp_path):
    cfg = _tiny()
    params = model.init_params(cfg, seed=0)
    path = tmp_path / "model.bin"
    model.save_checkpoint(str(path), cfg, params)
    raw = path.read_bytes()
    (tmp_path / "trunc.bin").write_bytes(raw[:-100])
    with pytest.raises(ValueError, match="truncated"):
        model.load_checkpoint(str(tmp_path / "trunc.bin"))
    (tmp_path / "magic.bin").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ValueError, match="magic"):
        model.load_checkpoint(str(tmp_path / "magic.bin"))
