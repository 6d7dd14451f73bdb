"""Toy denoiser training: noise-prediction MSE with classifier-free dropout.

Deterministic for a fixed seed in single-threaded mode: one generator
drives batch sampling, timesteps, noise, and condition dropout, and no
global RNG state is touched.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from ..errors import DataError, TrainingError
from ..schedule import NoiseSchedule, build_schedule
from .text import NULL_ID
from .unet import Backbone


@dataclass
class TrainResult:
    weights: "OrderedDict[str, torch.Tensor]"
    loss_history: list[float]


def _snapshot(backbone: Backbone) -> "OrderedDict[str, torch.Tensor]":
    return OrderedDict((k, v.detach().clone()) for k, v in backbone.state_dict().items())


def _prepare_tensors(backbone: Backbone, dataset):
    """Encode images and embed padded prompts once."""
    if len(dataset) == 0:
        raise DataError("empty dataset")
    z0 = torch.stack([backbone.encode_image(s.image) for s in dataset.samples])
    max_len = max(len(s.token_ids) for s in dataset.samples)
    text = torch.stack(
        [
            backbone.embed_prompt(list(s.token_ids) + [NULL_ID] * (max_len - len(s.token_ids))).embeddings
            for s in dataset.samples
        ]
    )
    null_text = backbone.embed_prompt([NULL_ID] * max_len).embeddings
    return z0, text, null_text


def train_toy(
    backbone: Backbone,
    dataset,
    steps: int,
    seed: int,
    batch_size: int = 8,
    lr: float = 2e-3,
    cond_dropout: float = 0.1,
    schedule: NoiseSchedule | None = None,
) -> TrainResult:
    """Minimize E ||eps - eps_theta(z_t; t, P)||^2 by Adam; updates the
    backbone in place and returns a weight snapshot plus the loss history."""
    if steps < 0:
        raise TrainingError(f"steps must be >= 0, got {steps}")
    if steps == 0:
        return TrainResult(weights=_snapshot(backbone), loss_history=[])
    s = schedule or build_schedule(1000, 1e-4, 0.02, 50)
    z0, text, null_text = _prepare_tensors(backbone, dataset)
    abar = torch.from_numpy(s.alpha_bar).to(torch.float32)
    gen = torch.Generator().manual_seed(seed)
    unet = backbone.unet
    unet.train()
    opt = torch.optim.Adam(unet.parameters(), lr=lr)
    history: list[float] = []
    n = z0.shape[0]
    try:
        for step in range(steps):
            idx = torch.randint(0, n, (batch_size,), generator=gen)
            batch_z0 = z0[idx]
            batch_text = text[idx].clone()
            drop = torch.rand(batch_size, generator=gen) < cond_dropout
            if drop.any():
                batch_text[drop] = null_text
            t = torch.randint(1, s.T + 1, (batch_size,), generator=gen)
            eps = torch.randn(batch_z0.shape, generator=gen)
            a = abar[t].view(-1, 1, 1, 1)
            z_t = a.sqrt() * batch_z0 + (1.0 - a).sqrt() * eps
            pred, _ = unet(z_t, t, batch_text, fast_attention=True)
            loss = F.mse_loss(pred, eps)
            if not torch.isfinite(loss):
                raise TrainingError(f"loss diverged (non-finite) at step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            history.append(float(loss.detach()))
    finally:
        unet.eval()
    return TrainResult(weights=_snapshot(backbone), loss_history=history)


def evaluate_loss(
    backbone: Backbone,
    dataset,
    seed: int,
    schedule: NoiseSchedule | None = None,
    max_samples: int = 128,
) -> float:
    """Deterministic noise-prediction loss on a held-out batch (no updates)."""
    s = schedule or build_schedule(1000, 1e-4, 0.02, 50)
    z0, text, _ = _prepare_tensors(backbone, dataset)
    z0, text = z0[:max_samples], text[:max_samples]
    abar = torch.from_numpy(s.alpha_bar).to(torch.float32)
    gen = torch.Generator().manual_seed(seed)
    t = torch.randint(1, s.T + 1, (z0.shape[0],), generator=gen)
    eps = torch.randn(z0.shape, generator=gen)
    a = abar[t].view(-1, 1, 1, 1)
    z_t = a.sqrt() * z0 + (1.0 - a).sqrt() * eps
    with torch.no_grad():
        pred, _ = backbone.unet(z_t, t, text, fast_attention=True)
        loss = F.mse_loss(pred, eps)
    return float(loss)
