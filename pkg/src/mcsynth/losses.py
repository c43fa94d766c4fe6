"""Training objectives for the adversarial denoiser."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F


def _finite(x: torch.Tensor, name: str) -> None:
    if not torch.isfinite(x).all():
        raise ValueError(f"{name} contains non-finite values")


def d_loss(real_logits: torch.Tensor, fake_logits: torch.Tensor) -> torch.Tensor:
    """``mean(-log sigmoid(real)) + mean(-log(1 - sigmoid(fake)))`` in softplus form."""
    _finite(real_logits, "real_logits")
    _finite(fake_logits, "fake_logits")
    return F.softplus(-real_logits).mean() + F.softplus(fake_logits).mean()


def g_adv_loss(fake_logits: torch.Tensor) -> torch.Tensor:
    """Non-saturating generator loss ``mean(-log sigmoid(fake))``."""
    _finite(fake_logits, "fake_logits")
    return F.softplus(-fake_logits).mean()


def r1_penalty(disc, x_real_prev: torch.Tensor, x_t: torch.Tensor, t, gamma: float = 1.0,
               y: torch.Tensor | None = None) -> torch.Tensor:
    """``gamma/2 * E ||d D(x_prev, x_t, t) / d x_prev||^2`` on real samples."""
    if gamma == 0:
        return x_real_prev.new_zeros(())
    x = x_real_prev.detach().requires_grad_(True)
    logits = disc(x, x_t, t) if y is None else disc(x, x_t, t, y)
    (grad,) = torch.autograd.grad(logits.sum(), x, create_graph=True)
    return 0.5 * gamma * grad.pow(2).flatten(1).sum(1).mean()


def _record_saliency(raw: torch.Tensor, spatial: tuple[int, int]) -> torch.Tensor:
    # raw: [B, heads, queries, keys] -> mean over heads and queries -> per-key map
    b = raw.shape[0]
    h, w = spatial
    return raw.mean(dim=(1, 2)).reshape(b, 1, h, w)


def attention_saliency(records, target_size: tuple[int, int]) -> torch.Tensor:
    """Per-layer key saliency, bilinearly upsampled and averaged over layers.

    Returns ``[B, 1, H, W]``.
    """
    if not records:
        raise ValueError("no attention records")
    maps = []
    for rec in records:
        s = _record_saliency(rec.raw, rec.spatial)
        maps.append(F.interpolate(s, size=tuple(target_size), mode="bilinear", align_corners=False))
    return torch.stack(maps, dim=0).mean(dim=0)


def fa_loss(gen_records, ae_records, target_size: tuple[int, int]) -> torch.Tensor:
    """Mean absolute difference between generator and autoencoder saliency maps."""
    if len(gen_records) != len(ae_records):
        raise ValueError(f"attention layer count mismatch: {len(gen_records)} vs {len(ae_records)}")
    for g, a in zip(gen_records, ae_records):
        if g.spatial != a.spatial:
            raise ValueError(f"attention resolution mismatch: {g.spatial} vs {a.spatial}")
    sg = attention_saliency(gen_records, target_size)
    sa = attention_saliency(ae_records, target_size)
    return (sg - sa).abs().mean()


@dataclass
class LossReport:
    d_loss: torch.Tensor
    g_adv: torch.Tensor
    l1: torch.Tensor
    fa: torch.Tensor
    total_g: torch.Tensor
    lambda1: float
    lambda2: float
    r1: torch.Tensor | None = None

    def as_dict(self) -> dict[str, float]:
        out = {k: float(getattr(self, k).detach()) for k in ("d_loss", "g_adv", "l1", "fa", "total_g")}
        out["r1"] = float(self.r1.detach()) if self.r1 is not None else 0.0
        return out


def total_generator_loss(fake_logits, x0_hat, x0, gen_records, ae_records,
                         lambda1: float = 100.0, lambda2: float = 1.0) -> LossReport:
    """Adversarial + ``lambda1`` * L1 + ``lambda2`` * FA.

    ``fake_logits=None`` drops the adversarial term; ``ae_records=None``
    drops the FA term. ``d_loss`` is left at zero for the caller to fill in.
    """
    if x0_hat.shape != x0.shape:
        raise ValueError(f"shape mismatch: {tuple(x0_hat.shape)} vs {tuple(x0.shape)}")
    zero = x0_hat.new_zeros(())
    g_adv = g_adv_loss(fake_logits) if fake_logits is not None else zero
    l1 = (x0_hat - x0).abs().mean()
    fa = fa_loss(gen_records, ae_records, x0.shape[-2:]) if ae_records is not None else zero
    total = g_adv + lambda1 * l1 + lambda2 * fa
    if not torch.isfinite(total):
        raise ValueError(f"non-finite generator loss: adv={float(g_adv)} l1={float(l1)} fa={float(fa)}")
    return LossReport(zero.detach(), g_adv, l1, fa, total, lambda1, lambda2)
