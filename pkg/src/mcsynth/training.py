"""Autoencoder pretraining and adversarial diffusion training."""

from __future__ import annotations

import base64
import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import checkpoint
from .config import TrainConfig
from .diffusion import NoiseSchedule, NonFiniteError, build_schedule, posterior_params, q_sample_pairs, reverse_sample_loop
from .losses import LossReport, d_loss, r1_penalty, total_generator_loss
from .metrics import MetricResult, evaluate, psnr
from .nets import AttentionAutoencoder, Discriminator, Generator, GeneratorConfig, build_models
from .phantoms import Dataset, denormalize, normalize

log = logging.getLogger(__name__)

HISTORY_FIELDS = ("epoch", "step", "d_loss", "g_adv", "l1", "fa", "val_psnr", "val_ssim")


def _adam(params, cfg: TrainConfig):
    return torch.optim.Adam(params, lr=cfg.lr, betas=(cfg.adam_beta1, cfg.adam_beta2))


def to_tensors(arr: np.ndarray, single_contrast: bool = False):
    """Raw ``[N, K+1, H, W]`` stack -> normalized ``(x0, y)`` float32 tensors."""
    t = torch.from_numpy(normalize(np.asarray(arr, dtype=np.float32)))
    x0, y = t[:, :1].contiguous(), t[:, 1:].contiguous()
    if single_contrast:
        y = y[:, :1].contiguous()
    return x0, y


def epoch_permutation(seed: int, epoch: int, n: int) -> torch.Tensor:
    # a pure function of (seed, epoch) so a resumed run sees the same batches
    g = torch.Generator().manual_seed(int(seed) * 1_000_003 + int(epoch))
    return torch.randperm(n, generator=g)


def freeze(model: torch.nn.Module) -> torch.nn.Module:
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


@dataclass
class AEResult:
    model: AttentionAutoencoder
    losses: list[float]  # per-epoch mean L1
    psnr_db: float | None = None


def pretrain_ae(targets: np.ndarray, config: TrainConfig, val_targets: np.ndarray | None = None,
                model: AttentionAutoencoder | None = None) -> AEResult:
    """Fit the attention autoencoder to target-contrast images with an L1 loss.

    ``targets`` are raw ``[N, 1, H, W]`` images in [0, 1]. The returned model is frozen.
    """
    gcfg = config.generator_config()
    if model is None:
        _, _, model = build_models(gcfg, config.seed)
    x = torch.from_numpy(normalize(np.asarray(targets, dtype=np.float32)))
    opt = _adam(model.parameters(), config)
    n, bs = x.shape[0], config.batch_size
    spe = max(n // bs, 1)
    total = config.ae_epochs * spe
    if config.max_ae_steps:
        total = min(total, config.max_ae_steps)
    losses, running, count = [], 0.0, 0
    model.train()
    for step in range(total):
        epoch, i = divmod(step, spe)
        idx = epoch_permutation(config.seed + 7919, epoch, n)[i * bs:(i + 1) * bs]
        xb = x[idx]
        rec, _ = model(xb)
        loss = (rec - xb).abs().mean()
        if not torch.isfinite(loss):
            raise NonFiniteError(f"autoencoder loss diverged at step {step}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        running += float(loss.detach())
        count += 1
        if i == spe - 1 or step == total - 1:
            losses.append(running / count)
            log.info("ae epoch %d loss %.5f", epoch, losses[-1])
            running, count = 0.0, 0
    freeze(model)
    result = AEResult(model, losses)
    if val_targets is not None:
        result.psnr_db = ae_psnr(model, val_targets)
    return result


@torch.no_grad()
def ae_psnr(model: AttentionAutoencoder, targets: np.ndarray, batch: int = 32) -> float:
    x = torch.from_numpy(normalize(np.asarray(targets, dtype=np.float32)))
    recs = torch.cat([model(x[i:i + batch])[0] for i in range(0, x.shape[0], batch)])
    pred = np.clip(denormalize(recs.numpy()), 0, 1)
    return float(np.mean([psnr(p[0], t[0]) for p, t in zip(pred, np.asarray(targets))]))


@dataclass
class TrainState:
    config: TrainConfig
    gen_config: GeneratorConfig
    g: Generator
    d: Discriminator
    ae: AttentionAutoencoder | None
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    step: int = 0
    rng: torch.Generator = field(default_factory=torch.Generator)
    history: list[dict] = field(default_factory=list)


def make_state(config: TrainConfig, n_conditions: int = 2, ae: AttentionAutoencoder | None = None) -> TrainState:
    gcfg = config.generator_config(n_conditions)
    g, d, _ = build_models(gcfg, config.seed)
    if ae is not None:
        freeze(ae)
    rng = torch.Generator().manual_seed(config.seed + 104729)
    return TrainState(config, gcfg, g, d, ae, _adam(g.parameters(), config), _adam(d.parameters(), config), 0, rng)


def _requires_grad(model, flag: bool):
    for p in model.parameters():
        p.requires_grad_(flag)


def train_step(x0: torch.Tensor, y: torch.Tensor, state: TrainState, sched: NoiseSchedule) -> LossReport:
    """One discriminator update followed by one generator update.

    ``x0`` and ``y`` are normalized; ``t`` is drawn per batch element.
    """
    cfg, g, d, rng = state.config, state.g, state.d, state.rng
    b = x0.shape[0]
    t = torch.randint(1, sched.T + 1, (b,), generator=rng)
    x_prev, x_t = q_sample_pairs(x0, t, sched, rng)
    dy = y if cfg.disc_sees_cond else None
    use_fa = not cfg.no_fa_loss and cfg.lambda2 > 0 and state.ae is not None
    g.train()
    d.train()

    def draw_z():
        return torch.randn((b, cfg.z_dim), generator=rng) if cfg.z_dim > 0 else None

    def fake_prev(x0_hat):
        post = posterior_params(x0_hat, x_t, t, sched)
        return post.sample(torch.randn(x_t.shape, generator=rng))

    d_val = x0.new_zeros(())
    r1_val = None
    if not cfg.no_adv:
        _requires_grad(d, True)
        with torch.no_grad():
            x0_hat, _ = g(x_t, y, draw_z(), t)
            xf = fake_prev(x0_hat)
        real_logits = d(x_prev, x_t, t, dy)
        fake_logits = d(xf, x_t, t, dy)
        loss_d = d_loss(real_logits, fake_logits)
        d_val = loss_d.detach()
        if cfg.r1_gamma > 0:
            r1_val = r1_penalty(d, x_prev, x_t, t, cfg.r1_gamma, dy)
            loss_d = loss_d + r1_val
        if not torch.isfinite(loss_d):
            raise NonFiniteError(f"discriminator loss non-finite at step {state.step}")
        state.opt_d.zero_grad(set_to_none=True)
        loss_d.backward()
        state.opt_d.step()
        _requires_grad(d, False)

    x0_hat, gen_records = g(x_t, y, draw_z(), t)
    fake_logits = None
    if not cfg.no_adv:
        fake_logits = d(fake_prev(x0_hat), x_t, t, dy)
    ae_records = None
    if use_fa:
        with torch.no_grad():
            _, ae_records = state.ae(x0)
    try:
        report = total_generator_loss(fake_logits, x0_hat, x0, gen_records, ae_records, cfg.lambda1,
                                      cfg.lambda2 if use_fa else 0.0)
    except ValueError as e:
        raise NonFiniteError(f"generator loss failed at step {state.step}: {e}") from e
    state.opt_g.zero_grad(set_to_none=True)
    report.total_g.backward()
    state.opt_g.step()
    report.d_loss = d_val
    report.r1 = r1_val.detach() if r1_val is not None else None
    state.step += 1
    return report


@torch.no_grad()
def synthesize(g: Generator, y: torch.Tensor, sched: NoiseSchedule, seed: int, z_mode: str = "fresh",
               batch: int = 32) -> torch.Tensor:
    """Sample normalized target images for conditions ``y`` in fixed-size chunks."""
    g.eval()
    outs = []
    for j, i in enumerate(range(0, y.shape[0], batch)):
        outs.append(reverse_sample_loop(g, y[i:i + batch], sched, seed + j, out_channels=g.cfg.in_channels_target,
                                        z_dim=g.cfg.z_dim, z_mode=z_mode))
    return torch.cat(outs)


def score(pred_norm: torch.Tensor, truth_raw: np.ndarray) -> MetricResult:
    pred = np.clip(denormalize(pred_norm.numpy().astype(np.float64)), 0.0, 1.0)
    return evaluate(pred, np.asarray(truth_raw, dtype=np.float64))


def validate(state: TrainState, arr: np.ndarray, sched: NoiseSchedule) -> MetricResult:
    cfg = state.config
    if cfg.val_limit:
        arr = arr[:cfg.val_limit]
    _, y = to_tensors(arr, cfg.single_contrast)
    pred = synthesize(state.g, y, sched, cfg.val_seed, cfg.z_mode)
    return score(pred, arr[:, :1])


# --- persistence -----------------------------------------------------------

def _opt_tensors(prefix: str, opt: torch.optim.Optimizer, model: torch.nn.Module) -> tuple[dict, int]:
    out, step = {}, 0
    for name, p in model.named_parameters():
        st = opt.state.get(p)
        if not st:
            continue
        out[f"{prefix}.{name}.exp_avg"] = st["exp_avg"]
        out[f"{prefix}.{name}.exp_avg_sq"] = st["exp_avg_sq"]
        step = int(st["step"])
    return out, step


def _load_opt(prefix: str, opt: torch.optim.Optimizer, model: torch.nn.Module, tensors: dict, step: int):
    for name, p in model.named_parameters():
        key = f"{prefix}.{name}.exp_avg"
        if key not in tensors:
            continue
        opt.state[p] = {
            "step": torch.tensor(float(step)),
            "exp_avg": torch.from_numpy(tensors[key]).clone(),
            "exp_avg_sq": torch.from_numpy(tensors[f"{prefix}.{name}.exp_avg_sq"]).clone(),
        }


def save_state(path, state: TrainState) -> None:
    tensors = checkpoint.module_tensors("g", state.g)
    tensors.update(checkpoint.module_tensors("d", state.d))
    if state.ae is not None:
        tensors.update(checkpoint.module_tensors("ae", state.ae))
    og, sg = _opt_tensors("opt_g", state.opt_g, state.g)
    od, sd = _opt_tensors("opt_d", state.opt_d, state.d)
    tensors.update(og)
    tensors.update(od)
    header = {
        "kind": "train_state",
        "config": state.config.to_dict(),
        "n_conditions": state.gen_config.in_channels_cond,
        "step": state.step,
        "seed": state.config.seed,
        "opt_steps": {"g": sg, "d": sd},
        "has_ae": state.ae is not None,
        "rng_state": base64.b64encode(state.rng.get_state().numpy().tobytes()).decode("ascii"),
        "history": state.history,
    }
    checkpoint.save(path, header, tensors)


def load_state(path) -> TrainState:
    header, tensors = checkpoint.load(path)
    if header.get("kind") != "train_state":
        raise checkpoint.CheckpointError(f"{path}: not a training checkpoint (kind={header.get('kind')!r})")
    cfg = TrainConfig.from_dict(header["config"])
    ae = None
    if header["has_ae"]:
        _, _, ae = build_models(cfg.generator_config(), cfg.seed)
        checkpoint.load_module("ae", ae, tensors)
    state = make_state(cfg, header["n_conditions"], ae)
    checkpoint.load_module("g", state.g, tensors)
    checkpoint.load_module("d", state.d, tensors)
    _load_opt("opt_g", state.opt_g, state.g, tensors, header["opt_steps"]["g"])
    _load_opt("opt_d", state.opt_d, state.d, tensors, header["opt_steps"]["d"])
    state.step = header["step"]
    raw = np.frombuffer(base64.b64decode(header["rng_state"]), dtype=np.uint8).copy()
    state.rng.set_state(torch.from_numpy(raw))
    state.history = header["history"]
    return state


def save_ae(path, result: AEResult, config: TrainConfig) -> None:
    header = {"kind": "autoencoder", "config": config.to_dict(), "seed": config.seed,
              "losses": result.losses, "psnr_db": result.psnr_db}
    checkpoint.save(path, header, checkpoint.module_tensors("ae", result.model))


def load_ae(path) -> AEResult:
    header, tensors = checkpoint.load(path)
    if header.get("kind") != "autoencoder":
        raise checkpoint.CheckpointError(f"{path}: not an autoencoder checkpoint")
    cfg = TrainConfig.from_dict(header["config"])
    _, _, ae = build_models(cfg.generator_config(), cfg.seed)
    checkpoint.load_module("ae", ae, tensors)
    return AEResult(freeze(ae), header["losses"], header["psnr_db"])


def write_history_csv(path, history: list[dict]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=HISTORY_FIELDS, extrasaction="ignore")
        w.writeheader()
        for row in history:
            w.writerow(row)


# --- loop --------------------------------------------------------------------

@dataclass
class TrainResult:
    state: TrainState
    history: list[dict]
    seconds: float


def train(data: Dataset, config: TrainConfig, out_dir=None, ae: AttentionAutoencoder | None = None,
          resume=None, on_step=None) -> TrainResult:
    """Full training run; checkpoints ``ckpt_last.bin`` and ``metrics.csv`` every epoch.

    ``resume`` is a checkpoint path (or a :class:`TrainState`) to continue from.
    Without a pretrained ``ae`` one is fitted first unless the FA loss is disabled.
    """
    t0 = time.perf_counter()
    out_dir = Path(out_dir) if out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    train_arr = data.split("train")
    n_cond = train_arr.shape[1] - 1
    if resume is not None:
        state = resume if isinstance(resume, TrainState) else load_state(resume)
        # the checkpoint fixes the model and objective; only the step budget may grow
        config = state.config.replace(epochs=config.epochs, max_steps=config.max_steps)
        state.config = config
    else:
        if ae is None and not config.no_fa_loss and config.lambda2 > 0:
            ae = pretrain_ae(data.target("train"), config).model
        state = make_state(config, n_cond, ae)
    sched = build_schedule(config.T, config.beta_min, config.beta_max)
    x0_all, y_all = to_tensors(train_arr, config.single_contrast)
    n, bs = x0_all.shape[0], config.batch_size
    spe = n // bs
    if spe == 0:
        raise ValueError(f"batch_size {bs} larger than training set ({n})")
    total = config.epochs * spe
    if config.max_steps:
        total = min(total, config.max_steps)
    acc: dict[str, float] = {}
    count = 0
    while state.step < total:
        epoch, i = divmod(state.step, spe)
        idx = epoch_permutation(config.seed, epoch, n)[i * bs:(i + 1) * bs]
        try:
            report = train_step(x0_all[idx], y_all[idx], state, sched)
        except NonFiniteError:
            if out_dir:
                save_state(out_dir / "crash_state.bin", state)
            raise
        for k, v in report.as_dict().items():
            acc[k] = acc.get(k, 0.0) + v
        count += 1
        if on_step is not None:
            on_step(state, report)
        end_of_epoch = (state.step % spe == 0) or state.step == total
        if end_of_epoch:
            row = {"epoch": epoch, "step": state.step}
            row.update({k: acc[k] / count for k in ("d_loss", "g_adv", "l1", "fa")})
            if config.val_every and ((epoch + 1) % config.val_every == 0 or state.step == total):
                m = validate(state, data.split("val"), sched)
                row["val_psnr"], row["val_ssim"] = m.psnr_db, m.ssim
            state.history.append(row)
            log.info("epoch %d step %d %s", epoch, state.step,
                     " ".join(f"{k}={v:.4g}" for k, v in row.items() if isinstance(v, float)))
            acc, count = {}, 0
            if out_dir:
                save_state(out_dir / "ckpt_last.bin", state)
                write_history_csv(out_dir / "metrics.csv", state.history)
    return TrainResult(state, state.history, time.perf_counter() - t0)
