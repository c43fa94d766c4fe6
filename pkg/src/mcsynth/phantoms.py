"""Deterministic co-registered multi-contrast brain-like phantoms.

Every stack is rendered from one :class:`AnatomyMap` (soft tissue fractions
for background, CSF, gray matter, white matter and an optional lesion), so
the contrasts are aligned by construction. Each contrast is a fixed linear mix
of the tissue fractions, scaled by a shared smooth bias field, plus Gaussian
noise. The mixing table makes single contrasts ambiguous:

* ``c1`` (T1-like): lesion has the same intensity as white matter.
* ``c2`` (T2-like): lesion has the same intensity as CSF.
* ``c3`` (FLAIR-like): CSF suppressed, lesion brightest.

so ``c3`` cannot be read off ``c1`` or ``c2`` alone but is recoverable from
the pair.

On-disk layout: ``manifest.json`` plus one ``<split>.f32`` file per split of
little-endian float32 values in ``[N, K+1, H, W]`` order, channel 0 being
the target contrast and channels ``1..K`` the conditions, raw range [0, 1].
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

TISSUES = ("background", "csf", "gm", "wm", "lesion")
CONTRASTS = ("c1", "c2", "c3")

# rows = contrasts, columns = TISSUES
MIXING = {
    "c1": (0.0, 0.15, 0.50, 0.80, 0.80),
    "c2": (0.0, 0.90, 0.60, 0.35, 0.90),
    "c3": (0.0, 0.10, 0.55, 0.40, 0.95),
}

# (target, conditions) role assignments
ROLES = {
    "c3": ("c3", ("c1", "c2")),
    "c2": ("c2", ("c1", "c3")),
    "c1": ("c1", ("c2", "c3")),
}

SPLITS = ("train", "val", "test")
FORMAT_VERSION = 1
MIN_SIZE = 16


class DatasetError(ValueError):
    """Malformed dataset on disk."""


class TruncatedBlobError(DatasetError):
    pass


class SizeMismatchError(DatasetError):
    pass


@dataclass
class AnatomyMap:
    tissue_fields: list[np.ndarray]  # ordered as TISSUES, each [H, W] in [0, 1]
    seed: int
    bias: np.ndarray  # smooth multiplicative bias field, [H, W]

    def field(self, name: str) -> np.ndarray:
        return self.tissue_fields[TISSUES.index(name)]


@dataclass
class ContrastStack:
    target: np.ndarray  # [1, H, W]
    conditions: np.ndarray  # [K, H, W]
    contrast_ids: list[str]  # target first, then conditions
    normalized: bool = False


def _soft(sd: np.ndarray, width: float) -> np.ndarray:
    """Smooth indicator of ``sd < 0`` (negative inside)."""
    return 0.5 * (1.0 - np.tanh(sd / width))


def _ellipse_sd(xx, yy, cx, cy, ax, ay, theta, radial=None):
    c, s = np.cos(theta), np.sin(theta)
    u = (xx - cx) * c + (yy - cy) * s
    v = -(xx - cx) * s + (yy - cy) * c
    r = np.sqrt((u / ax) ** 2 + (v / ay) ** 2)
    if radial is not None:
        r = r / radial(np.arctan2(v / ay, u / ax))
    # approximate signed distance in units of the mean semi-axis
    return (r - 1.0) * 0.5 * (ax + ay)


def make_anatomy(seed: int, size: int = 64, with_lesion: bool = True) -> AnatomyMap:
    if size < MIN_SIZE:
        raise ValueError(f"phantom size must be >= {MIN_SIZE}, got {size}")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5EED]))
    coords = (np.arange(size) + 0.5) / size * 2.0 - 1.0
    xx, yy = np.meshgrid(coords, coords, indexing="xy")
    edge = 1.5 / size

    cx, cy = rng.uniform(-0.06, 0.06, 2)
    ax, ay = rng.uniform(0.68, 0.82), rng.uniform(0.78, 0.92)
    theta = rng.uniform(-0.25, 0.25)
    head = _soft(_ellipse_sd(xx, yy, cx, cy, ax, ay, theta), edge)
    brain_in = _soft(_ellipse_sd(xx, yy, cx, cy, ax - 0.08, ay - 0.08, theta), edge)

    # folded white-matter boundary: radius modulated by random angular harmonics
    k = rng.integers(5, 13, size=4)
    amp = rng.uniform(0.02, 0.05, size=4)
    phase = rng.uniform(0, 2 * np.pi, size=4)

    def folds(ang):
        return 1.0 + sum(a * np.cos(kk * ang + p) for a, kk, p in zip(amp, k, phase))

    wm_in = _soft(_ellipse_sd(xx, yy, cx, cy, ax - 0.22, ay - 0.22, theta, folds), edge)

    vents = np.zeros_like(xx)
    vx, vy = rng.uniform(0.06, 0.12), rng.uniform(-0.05, 0.08)
    for side in (-1, 1):
        sd = _ellipse_sd(xx, yy, cx + side * vx, cy + vy, rng.uniform(0.04, 0.08),
                         rng.uniform(0.12, 0.22), theta + side * rng.uniform(0.1, 0.4))
        vents = np.maximum(vents, _soft(sd, edge))

    lesion_in = np.zeros_like(xx)
    if with_lesion:
        n_blobs = rng.integers(1, 4)
        lx, ly = rng.uniform(-0.35, 0.35, 2)
        blob = np.zeros_like(xx)
        for _ in range(n_blobs):
            bx, by = lx + rng.uniform(-0.1, 0.1), ly + rng.uniform(-0.1, 0.1)
            sx, sy = rng.uniform(0.06, 0.14, 2)
            blob += np.exp(-(((xx - bx) / sx) ** 2 + ((yy - by) / sy) ** 2))
        lesion_in = _soft(0.5 - blob, 0.06)

    brain = head * brain_in
    csf_ring = head - brain
    vent = brain * vents
    paren = brain - vent
    lesion = paren * lesion_in
    rest = paren - lesion
    wm = rest * wm_in
    gm = rest - wm
    csf = csf_ring + vent
    background = 1.0 - head

    # shared smooth bias field, quadratic in space, within ~[0.9, 1.1]
    c = rng.uniform(-0.05, 0.05, 5)
    bias = 1.0 + c[0] * xx + c[1] * yy + c[2] * xx * yy + c[3] * xx**2 + c[4] * yy**2

    fields = [np.clip(f, 0.0, 1.0) for f in (background, csf, gm, wm, lesion)]
    return AnatomyMap(fields, int(seed), bias)


def render_contrast(a: AnatomyMap, contrast: str) -> np.ndarray:
    mix = MIXING[contrast]
    return sum(m * f for m, f in zip(mix, a.tissue_fields)) * a.bias


def render_contrasts(a: AnatomyMap, noise_level: float = 0.02, role: str = "c3") -> ContrastStack:
    """Render target and condition contrasts for ``role`` (see :data:`ROLES`)."""
    if noise_level < 0:
        raise ValueError("noise_level must be >= 0")
    target_id, cond_ids = ROLES[role]
    ids = [target_id, *cond_ids]
    rng = np.random.default_rng(np.random.SeedSequence([a.seed, 0xC0DE]))
    # noise order fixed by CONTRASTS so roles share identical images
    rendered = {}
    for cid in CONTRASTS:
        img = render_contrast(a, cid)
        if noise_level > 0:
            img = img + noise_level * rng.standard_normal(img.shape)
        rendered[cid] = np.clip(img, 0.0, 1.0)
    imgs = [rendered[c] for c in ids]
    return ContrastStack(imgs[0][None].astype(np.float32), np.stack(imgs[1:]).astype(np.float32), ids)


def normalize(x):
    """Map raw [0, 1] to [-1, 1]."""
    return x * 2.0 - 1.0


def denormalize(x):
    return (x + 1.0) * 0.5


@dataclass
class DatasetManifest:
    n_train: int
    n_val: int
    n_test: int
    image_size: int = 64
    seed: int = 0
    role: str = "c3"
    lesions: bool = True
    noise_level: float = 0.02
    format_version: int = FORMAT_VERSION
    splits: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}; choose from {sorted(ROLES)}")
        if not self.splits:
            start = 0
            for name in SPLITS:
                n = getattr(self, f"n_{name}")
                self.splits[name] = {"file": f"{name}.f32", "seed_start": start, "count": n}
                start += n

    @property
    def contrast_ids(self) -> list[str]:
        t, c = ROLES[self.role]
        return [t, *c]

    @property
    def n_channels(self) -> int:
        return len(self.contrast_ids)

    def check_disjoint(self) -> None:
        ranges = sorted((s["seed_start"], s["seed_start"] + s["count"]) for s in self.splits.values())
        for (a0, a1), (b0, b1) in zip(ranges, ranges[1:]):
            if b0 < a1:
                raise DatasetError(f"split seed ranges overlap: [{a0},{a1}) and [{b0},{b1})")

    def to_json(self) -> str:
        d = asdict(self)
        d["contrast_ids"] = self.contrast_ids
        d["dtype"] = "<f4"
        d["layout"] = "N,K+1,H,W"
        return json.dumps(d, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        try:
            d = json.loads(text)
            d.pop("contrast_ids", None)
            d.pop("dtype", None)
            d.pop("layout", None)
            m = cls(**d)
        except (json.JSONDecodeError, TypeError, ValueError) as e:
            raise DatasetError(f"corrupt manifest: {e}") from e
        if m.format_version != FORMAT_VERSION:
            raise DatasetError(f"unsupported format_version {m.format_version}")
        for name in SPLITS:
            if name not in m.splits or m.splits[name]["count"] != getattr(m, f"n_{name}"):
                raise SizeMismatchError(f"manifest split {name!r} inconsistent with n_{name}")
        m.check_disjoint()
        return m


def sample_seed(manifest: DatasetManifest, split: str, index: int) -> int:
    # dataset seed and per-sample index combined; splits use disjoint index ranges
    return int(np.random.SeedSequence([manifest.seed, manifest.splits[split]["seed_start"] + index])
               .generate_state(1)[0])


def make_split(manifest: DatasetManifest, split: str) -> np.ndarray:
    n = manifest.splits[split]["count"]
    s = manifest.image_size
    out = np.empty((n, manifest.n_channels, s, s), dtype=np.float32)
    for i in range(n):
        a = make_anatomy(sample_seed(manifest, split, i), s, manifest.lesions)
        st = render_contrasts(a, manifest.noise_level, manifest.role)
        out[i, 0] = st.target[0]
        out[i, 1:] = st.conditions
    return out


@dataclass
class Dataset:
    manifest: DatasetManifest
    arrays: dict[str, np.ndarray]  # split -> [N, K+1, H, W] raw float32

    def split(self, name: str) -> np.ndarray:
        if name not in self.arrays:
            raise KeyError(f"unknown split {name!r}; choose from {list(self.arrays)}")
        return self.arrays[name]

    def target(self, name: str) -> np.ndarray:
        return self.split(name)[:, :1]

    def conditions(self, name: str) -> np.ndarray:
        return self.split(name)[:, 1:]


def generate_dataset(manifest: DatasetManifest) -> Dataset:
    manifest.check_disjoint()
    return Dataset(manifest, {name: make_split(manifest, name) for name in SPLITS})


def save_dataset(path, ds: Dataset) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for name in SPLITS:
        arr = np.ascontiguousarray(ds.arrays[name], dtype="<f4")
        (path / ds.manifest.splits[name]["file"]).write_bytes(arr.tobytes())
    (path / "manifest.json").write_text(ds.manifest.to_json())


def load_dataset(path, manifest: DatasetManifest | None = None) -> Dataset:
    path = Path(path)
    if manifest is None:
        mpath = path / "manifest.json"
        if not mpath.exists():
            raise DatasetError(f"no manifest.json in {path}")
        manifest = DatasetManifest.from_json(mpath.read_text())
    arrays = {}
    per = manifest.n_channels * manifest.image_size**2 * 4
    for name in SPLITS:
        info = manifest.splits[name]
        f = path / info["file"]
        if not f.exists():
            raise DatasetError(f"missing blob {f}")
        nbytes = os.path.getsize(f)
        expect = info["count"] * per
        if nbytes < expect:
            raise TruncatedBlobError(f"{f}: {nbytes} bytes, expected {expect} (truncated)")
        if nbytes != expect:
            raise SizeMismatchError(f"{f}: {nbytes} bytes, expected {expect} for N={info['count']}")
        raw = np.frombuffer(f.read_bytes(), dtype="<f4")
        arrays[name] = raw.reshape(info["count"], manifest.n_channels, manifest.image_size,
                                   manifest.image_size).astype(np.float32)
    return Dataset(manifest, arrays)
