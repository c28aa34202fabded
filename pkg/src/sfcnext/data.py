"""Synthetic volumetric dataset with a known age-encoding law.

Each volume is a concentric-ellipsoid phantom: a bright outer shell whose
thickness shrinks linearly with age, an interior tissue level, and a central
dark ventricle whose radius grows linearly with age, plus Gaussian noise and a
small sex-dependent lateral intensity asymmetry. Ages follow a two-component
mixture on [19, 72] matching the target cohort statistics (mean ~37.6,
std ~14.3).

On-disk formats (little-endian):

* volume file: magic ``SFXV``, u32 version, u32 D, u32 H, u32 W, then D*H*W
  float32 voxels in row-major order;
* manifest: UTF-8 CSV with ``# key=value`` metadata lines (dims, seed,
  version, count) followed by a ``id,path,age,sex,site`` header and one row
  per sample.
"""

import os
import struct
from dataclasses import dataclass, field

import numpy as np

VOLUME_MAGIC = b"SFXV"
FORMAT_VERSION = 1

AGE_LO, AGE_HI = 19.0, 72.0
SITES = ("S01", "S02", "S03", "S04", "S05")
NOISE_SIGMA = 0.05  # fraction of the signal range (which is 1.0)


class DataFormatError(ValueError):
    """Base class for on-disk format problems."""


class BadMagicError(DataFormatError):
    pass


class TruncatedFileError(DataFormatError):
    pass


class ManifestIntegrityError(DataFormatError):
    pass


@dataclass
class VolumeSample:
    id: str
    volume: np.ndarray  # [1, D, H, W] float32
    age: float
    sex: int
    site: str


@dataclass
class ManifestRow:
    id: str
    path: str
    age: float
    sex: int
    site: str


@dataclass
class DatasetManifest:
    rows: list
    dims: tuple
    seed: int
    version: int
    root: str

    @property
    def ids(self):
        return [r.id for r in self.rows]


@dataclass
class SplitSpec:
    fractions: tuple = (0.8, 0.1, 0.1)
    repeat: int = 0
    seed: int = 0

    def __post_init__(self):
        if abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ValueError("split fractions must sum to 1")


# ---------------------------------------------------------------------------
# generative law
# ---------------------------------------------------------------------------

def _age_unit(age):
    return (np.asarray(age, dtype=np.float64) - AGE_LO) / (AGE_HI - AGE_LO)


def shell_thickness(age):
    """Cortical shell thickness (normalized radius units); shrinks with age."""
    return 0.30 - 0.18 * _age_unit(age)


def ventricle_radius(age):
    """Central ventricle radius (normalized radius units); grows with age."""
    return 0.12 + 0.30 * _age_unit(age)


def _smoothstep(x, edge, width):
    t = np.clip((x - edge) / width + 0.5, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def synth_volume(age, sex, dims, rng=None, noise=NOISE_SIGMA):
    """Deterministic phantom for (age, sex); rng only supplies the noise."""
    D, H, W = dims
    zz = np.linspace(-1.0, 1.0, D)[:, None, None]
    yy = np.linspace(-1.0, 1.0, H)[None, :, None]
    xx = np.linspace(-1.0, 1.0, W)[None, None, :]
    rho = np.sqrt((zz / 0.85) ** 2 + (yy / 0.95) ** 2 + (xx / 0.80) ** 2)
    edge = 2.0 / min(dims)  # transition width ~1 voxel
    inside = 1.0 - _smoothstep(rho, 1.0, edge)
    t = float(shell_thickness(age))
    rv = float(ventricle_radius(age))
    shell = _smoothstep(rho, 1.0 - t, edge) * inside
    vent = 1.0 - _smoothstep(rho, rv, edge)
    vol = inside * (0.55 + 0.45 * shell - 0.43 * vent)
    lateral = 1.0 + 0.04 * (1.0 if sex else -1.0) * _smoothstep(xx, 0.0, edge)
    vol = vol * np.broadcast_to(lateral, vol.shape)
    if noise > 0.0:
        if rng is None:
            raise ValueError("rng required when noise > 0")
        # noise confined to the head so the background stays exactly zero
        vol = vol + rng.normal(0.0, noise, size=vol.shape) * (inside > 0.0)
    return vol.astype(np.float32)


def _sample_ages(rng, n):
    ages = np.empty(n, dtype=np.float64)
    for i in range(n):
        while True:
            if rng.random() < 0.55:
                a = rng.normal(27.0, 6.5)
            else:
                a = rng.normal(50.5, 9.0)
            if AGE_LO <= a <= AGE_HI:
                ages[i] = a
                break
    return ages


def generate_synthetic(n, dims, seed, out_dir):
    """Write n phantom volumes plus a manifest; byte-deterministic per inputs."""
    if n < 10:
        raise ValueError("need at least 10 samples")
    dims = tuple(int(d) for d in dims)
    if any(d < 16 for d in dims):
        raise ValueError("each volume dimension must be at least 16")
    os.makedirs(out_dir, exist_ok=True)
    vol_dir = os.path.join(out_dir, "volumes")
    os.makedirs(vol_dir, exist_ok=True)
    rng = np.random.default_rng(seed)
    ages = _sample_ages(rng, n)
    sexes = rng.integers(0, 2, size=n)
    rows = []
    for i in range(n):
        sid = f"sub-{i:05d}"
        rel = os.path.join("volumes", f"{sid}.vol")
        vol = synth_volume(ages[i], int(sexes[i]), dims, rng=rng)
        write_volume(os.path.join(out_dir, rel), vol)
        rows.append(ManifestRow(id=sid, path=rel, age=float(ages[i]),
                                sex=int(sexes[i]), site=SITES[i % len(SITES)]))
    manifest = DatasetManifest(rows=rows, dims=dims, seed=int(seed),
                               version=FORMAT_VERSION, root=out_dir)
    write_manifest(os.path.join(out_dir, "manifest.csv"), manifest)
    return manifest


# ---------------------------------------------------------------------------
# file IO
# ---------------------------------------------------------------------------

def write_volume(path, vol):
    vol = np.asarray(vol, dtype=np.float32)
    if vol.ndim == 4 and vol.shape[0] == 1:
        vol = vol[0]
    if vol.ndim != 3:
        raise ValueError(f"volume must be 3-d, got shape {vol.shape}")
    with open(path, "wb") as fh:
        fh.write(VOLUME_MAGIC)
        fh.write(struct.pack("<IIII", FORMAT_VERSION, *vol.shape))
        fh.write(np.ascontiguousarray(vol, dtype="<f4").tobytes())


def read_volume(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 20:
        raise TruncatedFileError(f"{path}: shorter than the 20-byte header")
    if raw[:4] != VOLUME_MAGIC:
        raise BadMagicError(f"{path}: bad magic {raw[:4]!r}")
    version, D, H, W = struct.unpack_from("<IIII", raw, 4)
    if version != FORMAT_VERSION:
        raise DataFormatError(f"{path}: unsupported version {version}")
    need = 20 + 4 * D * H * W
    if len(raw) < need:
        raise TruncatedFileError(
            f"{path}: expected {need} bytes for dims {(D, H, W)}, got {len(raw)}"
        )
    return np.frombuffer(raw[20:need], dtype="<f4").reshape(D, H, W).copy()


def write_manifest(path, manifest):
    lines = [
        f"# dims={manifest.dims[0]},{manifest.dims[1]},{manifest.dims[2]}",
        f"# seed={manifest.seed}",
        f"# version={manifest.version}",
        f"# count={len(manifest.rows)}",
        "id,path,age,sex,site",
    ]
    for r in manifest.rows:
        lines.append(f"{r.id},{r.path},{r.age!r},{r.sex},{r.site}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_manifest(path):
    root = os.path.dirname(os.path.abspath(path))
    meta = {}
    rows = []
    with open(path, encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    body = []
    for ln in lines:
        if ln.startswith("# "):
            key, _, val = ln[2:].partition("=")
            meta[key] = val
        else:
            body.append(ln)
    for key in ("dims", "seed", "version", "count"):
        if key not in meta:
            raise ManifestIntegrityError(f"{path}: missing metadata line '# {key}='")
    if not body or body[0] != "id,path,age,sex,site":
        raise ManifestIntegrityError(f"{path}: missing or wrong header row")
    for ln in body[1:]:
        parts = ln.split(",")
        if len(parts) != 5:
            raise ManifestIntegrityError(f"{path}: malformed row {ln!r}")
        rows.append(ManifestRow(id=parts[0], path=parts[1], age=float(parts[2]),
                                sex=int(parts[3]), site=parts[4]))
    if len(rows) != int(meta["count"]):
        raise ManifestIntegrityError(
            f"{path}: declared count {meta['count']} != {len(rows)} rows"
        )
    ids = [r.id for r in rows]
    if len(set(ids)) != len(ids):
        raise ManifestIntegrityError(f"{path}: duplicate sample ids")
    for r in rows:
        if not os.path.exists(os.path.join(root, r.path)):
            raise ManifestIntegrityError(f"{path}: missing volume file {r.path}")
    dims = tuple(int(d) for d in meta["dims"].split(","))
    return DatasetManifest(rows=rows, dims=dims, seed=int(meta["seed"]),
                           version=int(meta["version"]), root=root)


# ---------------------------------------------------------------------------
# normalization and splits
# ---------------------------------------------------------------------------

def normalize_volume(vol):
    """Z-score over the brain mask; background voxels stay untouched.

    The background level is taken from the corner voxel, which makes the mask
    (and hence the output) invariant to affine rescalings of the input and the
    whole operation idempotent.
    """
    vol = np.asarray(vol, dtype=np.float32)
    v3 = vol[0] if vol.ndim == 4 else vol
    bg = v3.flat[0]
    mask = v3 != bg
    vals = v3[mask].astype(np.float64)
    if vals.size == 0 or vals.std() == 0.0:
        raise ValueError("normalize_volume: constant volume")
    out = v3.astype(np.float64).copy()
    out[mask] = (vals - vals.mean()) / vals.std()
    out[~mask] = 0.0
    out = out.astype(np.float32)
    return out[None] if vol.ndim == 4 else out


def split(manifest, spec):
    """Deterministic 80/10/10 partition of the manifest ids."""
    ids = manifest.ids
    n = len(ids)
    if n < 10:
        raise ValueError(f"split needs at least 10 samples, got {n}")
    rng = np.random.default_rng([spec.seed, spec.repeat])
    perm = rng.permutation(n)
    n_train = int(np.floor(spec.fractions[0] * n))
    n_val = int(np.floor(spec.fractions[1] * n))
    train = [ids[i] for i in perm[:n_train]]
    val = [ids[i] for i in perm[n_train : n_train + n_val]]
    test = [ids[i] for i in perm[n_train + n_val :]]
    return train, val, test


def load_samples(manifest, ids=None, normalize=True):
    """Materialize (normalized) samples for the given ids, manifest order."""
    by_id = {r.id: r for r in manifest.rows}
    if ids is None:
        ids = manifest.ids
    out = []
    for sid in ids:
        r = by_id[sid]
        vol = read_volume(os.path.join(manifest.root, r.path))
        if not np.all(np.isfinite(vol)):
            raise DataFormatError(f"{r.path}: non-finite voxels")
        if normalize:
            vol = normalize_volume(vol)
        out.append(VolumeSample(id=r.id, volume=vol[None], age=r.age, sex=r.sex,
                                site=r.site))
    return out
