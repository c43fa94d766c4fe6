"""Ablation arms, the shared-seed suite runner, and the sampling-speed benchmark."""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .config import TrainConfig
from .diffusion import build_schedule, reverse_sample_loop
from .metrics import evaluate
from .nets import Generator
from .phantoms import Dataset, DatasetManifest, generate_dataset
from .training import pretrain_ae, score, synthesize, to_tensors, train

log = logging.getLogger(__name__)

ARMS = {
    "full": {},
    "no_multiscale": {"no_multiscale": True},
    "no_fm_fa": {"no_fm": True, "no_fa_loss": True},
    "single_contrast": {"single_contrast": True},
    "no_adv": {"no_adv": True},
}

# laptop-sized run that fits the CPU budget; see README for the numbers it produces
DESK_MANIFEST = dict(n_train=512, n_val=64, n_test=64, image_size=64, seed=0)
DESK_CONFIG = dict(epochs=4, ae_epochs=3, batch_size=8, base_channels=16, val_every=0, seed=0)


def desk_config(**kw) -> TrainConfig:
    d = dict(DESK_CONFIG)
    d.update(kw)
    return TrainConfig(**d)


def desk_manifest(role: str = "c3", **kw) -> DatasetManifest:
    d = dict(DESK_MANIFEST)
    d.update(kw)
    return DatasetManifest(role=role, **d)


def parse_suite(text: str) -> list[str]:
    arms = [a.strip() for a in text.split(",") if a.strip()]
    if not arms:
        raise ValueError("empty ablation suite")
    bad = [a for a in arms if a not in ARMS]
    if bad:
        raise ValueError(f"unknown arm(s) {bad}; choose from {list(ARMS)}")
    return arms


def mean_image_baseline(data: Dataset, split: str = "val"):
    """Metrics of predicting the training-set mean target image for every sample."""
    mean = data.target("train").astype(np.float64).mean(axis=0)
    truth = data.target(split).astype(np.float64)
    return evaluate(np.broadcast_to(mean, truth.shape), truth)


@dataclass
class ArmResult:
    arm: str
    role: str
    seed: int
    val_psnr: float
    val_psnr_std: float
    val_ssim: float
    val_ssim_std: float
    test_psnr: float
    test_psnr_std: float
    test_ssim: float
    test_ssim_std: float
    baseline_val_psnr: float
    baseline_test_psnr: float
    train_seconds: float
    ae_seconds: float
    steps: int


# modules whose code can change a training result
_RESULT_MODULES = ("checkpoint", "config", "diffusion", "experiments", "fusion", "losses", "metrics", "nets",
                   "phantoms", "training")


def source_fingerprint() -> str:
    h = hashlib.sha256()
    for p in (Path(__file__).parent / f"{m}.py" for m in _RESULT_MODULES):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def _cache_key(arm: str, manifest: DatasetManifest, config: TrainConfig) -> str:
    blob = json.dumps({"arm": arm, "manifest": manifest.to_json(), "config": config.to_dict(),
                       "source": source_fingerprint(), "torch": torch.__version__}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:24]


def arm_cache_path(cache_dir, arm: str, role: str, config: TrainConfig, manifest_kw: dict | None = None) -> Path:
    """JSON result path for one suite entry; its run directory is the same path without suffix."""
    manifest = desk_manifest(role, **(manifest_kw or {}))
    cfg = config.replace(**ARMS[arm])
    return Path(cache_dir) / f"{arm}-{role}-{_cache_key(arm, manifest, cfg)}.json"


def run_arm(arm: str, data: Dataset, config: TrainConfig, ae=None, ae_seconds: float = 0.0,
            out_dir=None) -> ArmResult:
    """Train one arm from scratch on ``data`` and score it on the val and test splits."""
    cfg = config.replace(**ARMS[arm])
    if ae is None and not cfg.no_fa_loss:
        t0 = time.perf_counter()
        ae = pretrain_ae(data.target("train"), cfg).model
        ae_seconds = time.perf_counter() - t0
    res = train(data, cfg, out_dir=out_dir, ae=ae if not cfg.no_fa_loss else None)
    sched = build_schedule(cfg.T, cfg.beta_min, cfg.beta_max)
    scores = {}
    for split in ("val", "test"):
        arr = data.split(split)
        _, y = to_tensors(arr, cfg.single_contrast)
        scores[split] = score(synthesize(res.state.g, y, sched, cfg.val_seed, cfg.z_mode), arr[:, :1])
    bv, bt = mean_image_baseline(data, "val"), mean_image_baseline(data, "test")
    v, t = scores["val"], scores["test"]
    return ArmResult(arm, data.manifest.role, cfg.seed, v.psnr_db, v.psnr_std, v.ssim, v.ssim_std,
                     t.psnr_db, t.psnr_std, t.ssim, t.ssim_std, bv.psnr_db, bt.psnr_db, res.seconds, ae_seconds,
                     res.state.step)


def run_suite(arms: list[str], roles: list[str], config: TrainConfig, manifest_kw: dict | None = None,
              cache_dir=None, refresh: bool = False) -> list[ArmResult]:
    """Every (role, arm) pair shares the dataset seed and the model seed.

    One autoencoder is pretrained per role and reused by every arm in that role.
    Results are cached as JSON under ``cache_dir`` keyed by data, config and source, next to
    a run directory holding the final checkpoint and per-epoch metrics.
    """
    cache = Path(cache_dir) if cache_dir else None
    if cache:
        cache.mkdir(parents=True, exist_ok=True)
    out = []
    for role in roles:
        manifest = desk_manifest(role, **(manifest_kw or {}))
        data, ae, ae_seconds = None, None, 0.0
        for arm in arms:
            cfg = config.replace(**ARMS[arm])
            path = arm_cache_path(cache, arm, role, config, manifest_kw) if cache else None
            if path and path.exists() and not refresh:
                out.append(ArmResult(**json.loads(path.read_text())))
                log.info("cached %s/%s: val %.2f dB", role, arm, out[-1].val_psnr)
                continue
            if data is None:
                data = generate_dataset(manifest)
            if ae is None and not cfg.no_fa_loss:
                t0 = time.perf_counter()
                ae = pretrain_ae(data.target("train"), config).model
                ae_seconds = time.perf_counter() - t0
            run_dir = path.with_suffix("") if path else None
            r = run_arm(arm, data, config, ae=ae, ae_seconds=ae_seconds, out_dir=run_dir)
            log.info("%s/%s: val %.2f dB ssim %.3f (%.0fs)", role, arm, r.val_psnr, r.val_ssim, r.train_seconds)
            if path:
                path.write_text(json.dumps(asdict(r), indent=1))
            out.append(r)
    return out


TABLE_COLUMNS = ("role", "arm", "val_psnr", "val_ssim", "test_psnr", "test_ssim", "train_s")


def results_table(results: list[ArmResult]) -> tuple[str, str]:
    """(CSV, aligned text) comparison tables; the header records the shared seed."""
    seeds = sorted({r.seed for r in results})
    rows = [(r.role, r.arm, f"{r.val_psnr:.2f}±{r.val_psnr_std:.2f}", f"{r.val_ssim:.3f}±{r.val_ssim_std:.3f}",
             f"{r.test_psnr:.2f}±{r.test_psnr_std:.2f}", f"{r.test_ssim:.3f}±{r.test_ssim_std:.3f}",
             f"{r.train_seconds:.0f}") for r in results]
    csv_lines = [f"# shared seed={','.join(map(str, seeds))}", ",".join(TABLE_COLUMNS)]
    csv_lines += [",".join(row) for row in rows]
    widths = [max(len(str(x)) for x in col) for col in zip(TABLE_COLUMNS, *rows)]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    text = [f"shared seed = {','.join(map(str, seeds))}", fmt.format(*TABLE_COLUMNS)]
    text += [fmt.format(*row) for row in rows]
    base = {r.role: r.baseline_val_psnr for r in results}
    text += [f"mean-image baseline ({role}): val {p:.2f} dB" for role, p in base.items()]
    return "\n".join(csv_lines) + "\n", "\n".join(text) + "\n"


# --- benchmark ------------------------------------------------------------------

@dataclass
class BenchRow:
    steps: int
    mean_ms: float
    std_ms: float
    n: int


def bench_sampling(g: Generator, y: torch.Tensor, steps: list[int], beta_min: float = 0.1,
                   beta_max: float = 20.0, seed: int = 0) -> list[BenchRow]:
    """Per-image wall clock of the reverse loop for each step count, one image at a time.

    Many-step rows emulate an ancestral baseline with the same network and no latent.
    """
    if y.shape[0] < 1:
        raise ValueError("need at least one image to benchmark")
    g.eval()
    rows = []
    for T in steps:
        sched = build_schedule(T, beta_min, beta_max)
        z_mode = "fresh" if T == min(steps) else "zero"
        reverse_sample_loop(g, y[:1], sched, seed, z_dim=g.cfg.z_dim, z_mode=z_mode)  # warm-up
        times = []
        for i in range(y.shape[0]):
            t0 = time.perf_counter()
            reverse_sample_loop(g, y[i:i + 1], sched, seed + i, z_dim=g.cfg.z_dim, z_mode=z_mode)
            times.append((time.perf_counter() - t0) * 1e3)
        rows.append(BenchRow(T, float(np.mean(times)), float(np.std(times)), len(times)))
    return rows


def bench_table(rows: list[BenchRow]) -> str:
    fast = min(rows, key=lambda r: r.steps)
    lines = ["steps,mean_ms,std_ms,n,ratio_vs_fewest"]
    for r in rows:
        lines.append(f"{r.steps},{r.mean_ms:.3f},{r.std_ms:.3f},{r.n},{r.mean_ms / fast.mean_ms:.2f}")
    return "\n".join(lines) + "\n"
