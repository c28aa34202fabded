"""The brain-age regression network.

Four-stage ConvNeXt-style 3D backbone with overlapped strided downsampling
(kernel > stride), a conformer encoder over the flattened stage-4 feature map,
a small sex-embedding branch, and an MLP regression head. Flags turn the sex
branch and the conformer encoder off for ablations.

Parameters live in an ordered ``{name: Tensor}`` dict; residual-branch output
projections are zero-initialized so a fresh network is near-identity.
"""

import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy import special

from . import tensor as T
from .tensor import ShapeError, Tensor

CHECKPOINT_MAGIC = b"SFXC"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    stage_blocks: tuple = (1, 1, 3, 1)
    stage_channels: tuple = (32, 64, 128, 256)
    dw_kernel: int = 5
    down_kernel: int = 3
    down_stride: int = 2
    conformer_blocks: int = 3
    attention_heads: int = 2
    ff_expansion: int = 4
    conv_module_expansion: int = 2
    conv_module_kernel: int = 3
    sex_embed_dim: int = 16
    head_hidden: int = 64
    use_sex_branch: bool = True
    use_conformer: bool = True
    input_dims: tuple = (91, 109, 91)

    def __post_init__(self):
        self.stage_blocks = tuple(self.stage_blocks)
        self.stage_channels = tuple(self.stage_channels)
        self.input_dims = tuple(self.input_dims)
        if len(self.stage_blocks) != 4 or len(self.stage_channels) != 4:
            raise ValueError("stage_blocks and stage_channels must have length 4")
        if self.down_kernel <= self.down_stride:
            raise ValueError("down_kernel must exceed down_stride (overlapped downsampling)")
        if self.dw_kernel % 2 == 0:
            raise ValueError("dw_kernel must be odd")
        if self.stage_channels[3] % self.attention_heads != 0:
            raise ValueError("stage_channels[3] must be divisible by attention_heads")

    @property
    def model_dim(self):
        return self.stage_channels[3]


def tiny_config(input_dims=(24, 24, 24), **overrides):
    """Small profile used by tests and the desk-scale experiments."""
    kw = dict(stage_channels=(8, 16, 32, 64), dw_kernel=3, head_hidden=32,
              input_dims=input_dims)
    kw.update(overrides)
    return ModelConfig(**kw)


# ---------------------------------------------------------------------------
# parameter registry
# ---------------------------------------------------------------------------

# weights listed here close residual branches and start at zero
_ZERO_SUFFIXES = (".pw2.w", ".pw2.b", ".ff1.w2", ".ff1.b2", ".ff2.w2", ".ff2.b2",
                  ".attn.wo", ".attn.bo", ".conv.wproj", ".conv.bproj")


def param_shapes(config):
    """Ordered name -> shape map; a pure function of the config."""
    shapes = {}
    dk = config.down_kernel
    k = config.dw_kernel
    ff = config.ff_expansion
    in_ch = 1
    for i, (blocks, ch) in enumerate(zip(config.stage_blocks, config.stage_channels)):
        if i == 0:
            # stem: conv then channel norm (no pre-norm on the 1-channel input)
            shapes[f"stage0.down.conv.w"] = (ch, in_ch, dk, dk, dk)
            shapes[f"stage0.down.conv.b"] = (ch,)
            shapes[f"stage0.down.norm.g"] = (ch,)
            shapes[f"stage0.down.norm.b"] = (ch,)
        else:
            shapes[f"stage{i}.down.norm.g"] = (in_ch,)
            shapes[f"stage{i}.down.norm.b"] = (in_ch,)
            shapes[f"stage{i}.down.conv.w"] = (ch, in_ch, dk, dk, dk)
            shapes[f"stage{i}.down.conv.b"] = (ch,)
        for j in range(blocks):
            p = f"stage{i}.block{j}"
            shapes[f"{p}.dw.w"] = (ch, 1, k, k, k)
            shapes[f"{p}.dw.b"] = (ch,)
            shapes[f"{p}.norm.g"] = (ch,)
            shapes[f"{p}.norm.b"] = (ch,)
            shapes[f"{p}.pw1.w"] = (ff * ch, ch)
            shapes[f"{p}.pw1.b"] = (ff * ch,)
            shapes[f"{p}.pw2.w"] = (ch, ff * ch)
            shapes[f"{p}.pw2.b"] = (ch,)
        in_ch = ch
    dm = config.model_dim
    if config.use_conformer:
        e = config.ff_expansion
        ce = config.conv_module_expansion
        for l in range(config.conformer_blocks):
            b = f"conf{l}"
            for ffname in ("ff1", "ff2"):
                shapes[f"{b}.{ffname}.norm.g"] = (dm,)
                shapes[f"{b}.{ffname}.norm.b"] = (dm,)
                shapes[f"{b}.{ffname}.w1"] = (e * dm, dm)
                shapes[f"{b}.{ffname}.b1"] = (e * dm,)
                shapes[f"{b}.{ffname}.w2"] = (dm, e * dm)
                shapes[f"{b}.{ffname}.b2"] = (dm,)
            shapes[f"{b}.attn.norm.g"] = (dm,)
            shapes[f"{b}.attn.norm.b"] = (dm,)
            for qkv in ("wq", "wk", "wv"):
                shapes[f"{b}.attn.{qkv}"] = (dm, dm)
                shapes[f"{b}.attn.{qkv[1]}b"] = (dm,)
            shapes[f"{b}.attn.wo"] = (dm, dm)
            shapes[f"{b}.attn.bo"] = (dm,)
            shapes[f"{b}.conv.norm.g"] = (dm,)
            shapes[f"{b}.conv.norm.b"] = (dm,)
            shapes[f"{b}.conv.wexp"] = (ce * dm, dm)
            shapes[f"{b}.conv.bexp"] = (ce * dm,)
            shapes[f"{b}.conv.dw.w"] = (ce * dm, config.conv_module_kernel)
            shapes[f"{b}.conv.dw.b"] = (ce * dm,)
            shapes[f"{b}.conv.wproj"] = (dm, ce * dm)
            shapes[f"{b}.conv.bproj"] = (dm,)
            shapes[f"{b}.final_norm.g"] = (dm,)
            shapes[f"{b}.final_norm.b"] = (dm,)
    feat = dm
    if config.use_sex_branch:
        sd = config.sex_embed_dim
        shapes["sex.w1"] = (sd, 1)
        shapes["sex.b1"] = (sd,)
        shapes["sex.w2"] = (sd, sd)
        shapes["sex.b2"] = (sd,)
        feat += sd
    shapes["head.w1"] = (config.head_hidden, feat)
    shapes["head.b1"] = (config.head_hidden,)
    shapes["head.w2"] = (1, config.head_hidden)
    shapes["head.b2"] = (1,)
    return shapes


def param_count(config):
    return sum(int(np.prod(s)) for s in param_shapes(config).values())


def _trunc_normal(rng, shape, std=0.02, bound=2.0):
    # inverse-CDF sampling of a +-2 sigma truncated normal; deterministic per rng
    lo = special.ndtr(-bound)
    hi = special.ndtr(bound)
    u = rng.uniform(lo, hi, size=shape)
    return (special.ndtri(u) * std).astype(np.float32)


def init_params(config, seed=0):
    """Deterministic initialization: truncated normal (std 0.02) weights, zero
    biases, unit norm gains, zero residual-branch output projections."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".norm.g") or name.endswith("_norm.g"):
            data = np.ones(shape, dtype=np.float32)
        elif name.endswith(tuple(s for s in _ZERO_SUFFIXES)):
            data = np.zeros(shape, dtype=np.float32)
        elif name.endswith(".b") or name.endswith(".b1") or name.endswith(".b2") \
                or name.endswith("qb") or name.endswith("kb") or name.endswith("vb") \
                or name.endswith(".bexp"):
            data = np.zeros(shape, dtype=np.float32)
        else:
            data = _trunc_normal(rng, shape)
        params[name] = Tensor(data, requires_grad=True)
    return params


def clone_params(params):
    return {k: Tensor(v.data.copy(), requires_grad=v.requires_grad, dtype=v.dtype)
            for k, v in params.items()}


def cast_params(params, dtype):
    return {k: Tensor(v.data.astype(dtype), requires_grad=v.requires_grad, dtype=dtype)
            for k, v in params.items()}


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------

def _channels_last(x):
    return T.transpose(x, (0, 2, 3, 4, 1))


def _channels_first(x):
    return T.transpose(x, (0, 4, 1, 2, 3))


def convnext_block(x, params, prefix, config):
    """Depthwise conv -> channel norm -> MLP (expand, GELU, project) -> residual."""
    if x.shape[1] != params[f"{prefix}.dw.w"].shape[0]:
        raise ShapeError(
            f"convnext_block {prefix}: {x.shape[1]} channels, expected "
            f"{params[f'{prefix}.dw.w'].shape[0]}"
        )
    y = T.depthwise_conv3d(x, params[f"{prefix}.dw.w"], params[f"{prefix}.dw.b"])
    y = _channels_last(y)
    y = T.layer_norm(y, params[f"{prefix}.norm.g"], params[f"{prefix}.norm.b"])
    y = T.linear(y, params[f"{prefix}.pw1.w"], params[f"{prefix}.pw1.b"])
    y = T.gelu(y)
    y = T.linear(y, params[f"{prefix}.pw2.w"], params[f"{prefix}.pw2.b"])
    y = _channels_first(y)
    return T.add(x, y)


def overlapped_downsample(x, params, prefix, config, pre_norm=True):
    """Channel norm (skipped at the stem) then strided conv with kernel > stride,
    so adjacent receptive fields share kernel-stride voxels per axis."""
    dk, ds = config.down_kernel, config.down_stride
    pad = (dk - ds + 1) // 2
    for ax in (2, 3, 4):
        if x.shape[ax] < dk:
            raise ShapeError(
                f"overlapped_downsample {prefix}: axis {ax} size {x.shape[ax]} "
                f"smaller than kernel {dk}"
            )
    if pre_norm:
        y = _channels_last(x)
        y = T.layer_norm(y, params[f"{prefix}.norm.g"], params[f"{prefix}.norm.b"])
        y = _channels_first(y)
        return T.conv3d(y, params[f"{prefix}.conv.w"], params[f"{prefix}.conv.b"],
                        stride=ds, padding=pad)
    y = T.conv3d(x, params[f"{prefix}.conv.w"], params[f"{prefix}.conv.b"],
                 stride=ds, padding=pad)
    z = _channels_last(y)
    z = T.layer_norm(z, params[f"{prefix}.norm.g"], params[f"{prefix}.norm.b"])
    return _channels_first(z)


def _feed_forward(x, params, prefix):
    y = T.layer_norm(x, params[f"{prefix}.norm.g"], params[f"{prefix}.norm.b"])
    y = T.linear(y, params[f"{prefix}.w1"], params[f"{prefix}.b1"])
    y = T.gelu(y)
    return T.linear(y, params[f"{prefix}.w2"], params[f"{prefix}.b2"])


def _self_attention(x, params, prefix, heads):
    N, Tn, dm = x.shape
    dh = dm // heads
    y = T.layer_norm(x, params[f"{prefix}.norm.g"], params[f"{prefix}.norm.b"])
    q = T.linear(y, params[f"{prefix}.wq"], params[f"{prefix}.qb"])
    k = T.linear(y, params[f"{prefix}.wk"], params[f"{prefix}.kb"])
    v = T.linear(y, params[f"{prefix}.wv"], params[f"{prefix}.vb"])

    def split(t):
        return T.transpose(T.reshape(t, (N, Tn, heads, dh)), (0, 2, 1, 3))

    q, k, v = split(q), split(k), split(v)
    scores = T.mul_scalar(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    attn = T.softmax(scores, axis=-1)
    ctx = T.matmul(attn, v)
    ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (N, Tn, dm))
    return T.linear(ctx, params[f"{prefix}.wo"], params[f"{prefix}.bo"])


def _conv_module(x, params, prefix):
    y = T.layer_norm(x, params[f"{prefix}.norm.g"], params[f"{prefix}.norm.b"])
    y = T.linear(y, params[f"{prefix}.wexp"], params[f"{prefix}.bexp"])
    y = T.gelu(y)
    y = T.dwconv_tokens(y, params[f"{prefix}.dw.w"], params[f"{prefix}.dw.b"])
    return T.linear(y, params[f"{prefix}.wproj"], params[f"{prefix}.bproj"])


def conformer_block(x, params, prefix, config):
    """Half-step FF, self-attention, conv module, half-step FF; four residual
    connections, then one closing layer normalization."""
    dm = config.model_dim
    if dm % config.attention_heads != 0:
        raise ShapeError(
            f"model_dim {dm} not divisible by attention_heads {config.attention_heads}"
        )
    x = T.add(x, T.mul_scalar(_feed_forward(x, params, f"{prefix}.ff1"), 0.5))
    x = T.add(x, _self_attention(x, params, f"{prefix}.attn", config.attention_heads))
    x = T.add(x, _conv_module(x, params, f"{prefix}.conv"))
    x = T.add(x, T.mul_scalar(_feed_forward(x, params, f"{prefix}.ff2"), 0.5))
    return T.layer_norm(x, params[f"{prefix}.final_norm.g"],
                        params[f"{prefix}.final_norm.b"])


def forward(volume, sex, config, params):
    """volume[N,1,D,H,W], sex[N,1] in {0,1} -> predicted ages [N]."""
    if volume.data.ndim != 5 or volume.shape[1] != 1:
        raise ShapeError(f"forward: volume must be [N,1,D,H,W], got {volume.shape}")
    if sex.data.ndim != 2 or sex.shape != (volume.shape[0], 1):
        raise ShapeError(f"forward: sex must be [N,1], got {sex.shape}")
    x = volume
    for i in range(4):
        try:
            x = overlapped_downsample(x, params, f"stage{i}.down", config,
                                      pre_norm=(i > 0))
        except ShapeError as err:
            raise ShapeError(f"stage {i}: {err}") from err
        for j in range(config.stage_blocks[i]):
            x = convnext_block(x, params, f"stage{i}.block{j}", config)
    N, C = x.shape[0], x.shape[1]
    tokens = T.reshape(_channels_last(x), (N, x.shape[2] * x.shape[3] * x.shape[4], C))
    if config.use_conformer:
        for l in range(config.conformer_blocks):
            tokens = conformer_block(tokens, params, f"conf{l}", config)
    feat = T.mean_tokens(tokens)
    if config.use_sex_branch:
        s = T.linear(sex, params["sex.w1"], params["sex.b1"])
        s = T.gelu(s)
        s = T.linear(s, params["sex.w2"], params["sex.b2"])
        feat = T.concat([feat, s], axis=1)
    h = T.linear(feat, params["head.w1"], params["head.b1"])
    h = T.gelu(h)
    h = T.linear(h, params["head.w2"], params["head.b2"])
    return T.reshape(h, (N,))


def token_count(config):
    d = list(config.input_dims)
    dk, ds = config.down_kernel, config.down_stride
    pad = (dk - ds + 1) // 2
    for _ in range(4):
        d = [(s + 2 * pad - dk) // ds + 1 for s in d]
    return int(np.prod(d)), tuple(d)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, config, params, extra=None):
    """Single binary file: magic, version, JSON config echo, named f32 arrays."""
    meta = {"config": asdict(config), "extra": extra or {}}
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(params)))
        for name, t in params.items():
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", t.data.ndim))
            for s in t.data.shape:
                fh.write(struct.pack("<I", s))
            fh.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())


def load_checkpoint(path):
    """Returns (config, params, extra)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"bad checkpoint magic {raw[:4]!r}")
    off = 4
    version, blob_len = struct.unpack_from("<II", raw, off)
    off += 8
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    meta = json.loads(raw[off : off + blob_len].decode("utf-8"))
    off += blob_len
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    params = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off : off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<B", raw, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        nbytes = 4 * int(np.prod(shape))
        if off + nbytes > len(raw):
            raise ValueError(f"truncated checkpoint while reading {name}")
        data = np.frombuffer(raw[off : off + nbytes], dtype="<f4").reshape(shape)
        off += nbytes
        params[name] = Tensor(data.copy(), requires_grad=True)
    cfg = meta["config"]
    config = ModelConfig(**cfg)
    return config, params, meta.get("extra", {})
