"""Entity switching path: cross-attention energy guidance and regulation.

Each target entity pairs a prompt token span with a reference-image mask.
The energy for one entity is the squared shortfall of its attention mass
ratio inside the mask:

    g = (1 - sum_p CA_i[p] m_i[p] / (sum_p CA_i[p] + eps))^2

where CA_i is the head-mean cross-attention summed over the entity's token
span. The latent update subtracts sigma_t^2 * eta * grad(total energy).
Regulation multiplies each entity token's attention column by its mask,
with no renormalization.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .backbone import AttentionTrace, Backbone, InterventionSet, LayerAddress, PromptEmbedding
from .errors import AddressError, DataError, NumericError, ParameterError, ShapeError
from .schedule import NoiseSchedule, sigma_t

EPS_STAB = 1e-8


@dataclass(frozen=True)
class EntitySpec:
    """One reference/target entity: prompt token span plus spatial mask."""

    entity_id: int
    token_span: tuple[int, int]  # inclusive token index range
    mask: np.ndarray  # (H, W), values in [0, 1]

    def __post_init__(self):
        lo, hi = self.token_span
        if lo < 0 or hi < lo:
            raise ParameterError(f"entity {self.entity_id}: bad token span {self.token_span}")
        if self.mask.ndim != 2:
            raise ShapeError(f"entity {self.entity_id}: mask must be 2-D, got {self.mask.shape}")
        if not np.any(self.mask > 0.5):
            raise DataError(f"entity {self.entity_id}: mask has no foreground")

    @property
    def token_indices(self) -> range:
        return range(self.token_span[0], self.token_span[1] + 1)


def validate_entities(entities, n_tokens: int | None = None, image_hw: tuple[int, int] | None = None):
    """Spans disjoint, in range; masks match the reference geometry."""
    seen: set[int] = set()
    for e in entities:
        idxs = set(e.token_indices)
        if idxs & seen:
            raise ParameterError(f"entity {e.entity_id}: token span overlaps another entity")
        seen |= idxs
        if n_tokens is not None and e.token_span[1] >= n_tokens:
            raise IndexError(
                f"entity {e.entity_id}: token span {e.token_span} outside prompt of {n_tokens} tokens"
            )
        if image_hw is not None and e.mask.shape != image_hw:
            raise ShapeError(
                f"entity {e.entity_id}: mask {e.mask.shape} != reference image {image_hw}"
            )


@dataclass(frozen=True)
class GuidanceConfig:
    eta: float
    guidance_step_count: int = 10
    regulate_all_steps: bool = True
    energy_layers: tuple[LayerAddress, ...] | None = None  # None: all CA-bearing layers
    eps_stab: float = EPS_STAB

    def __post_init__(self):
        if not np.isfinite(self.eta) or self.eta <= 0:
            raise ParameterError(f"eta must be finite and positive, got {self.eta}")
        if self.guidance_step_count < 0:
            raise ParameterError("guidance_step_count must be >= 0")


def resample_mask(mask: np.ndarray, target: tuple[int, int], mode: str) -> np.ndarray:
    """Downsample a mask to a layer resolution.

    coverage: binary max-pool (any covered source pixel on -> 1).
    area: mean of covered source pixels, in [0, 1].
    """
    if mode not in ("coverage", "area"):
        raise ParameterError(f"unknown resample mode {mode!r}")
    H, W = mask.shape
    h, w = target
    if h > H or w > W or H % h or W % w:
        raise ShapeError(f"cannot resample {H}x{W} mask to {h}x{w}: non-divisible geometry")
    blocks = mask.astype(np.float64).reshape(h, H // h, w, W // w)
    if mode == "coverage":
        return (blocks > 0.5).any(axis=(1, 3)).astype(np.float64)
    return blocks.mean(axis=(1, 3))


def attention_energy(ca_i: torch.Tensor, m_i: torch.Tensor, eps_stab: float = EPS_STAB) -> torch.Tensor:
    """Squared shortfall of in-mask attention ratio; scalar in [0, 1]."""
    ca_i = ca_i.reshape(-1)
    m_i = m_i.reshape(-1)
    if ca_i.shape != m_i.shape:
        raise ShapeError(f"attention/mask size mismatch: {ca_i.shape[0]} vs {m_i.shape[0]}")
    if (ca_i < 0).any():
        raise DataError("negative cross-attention entries")
    inside = (ca_i * m_i).sum()
    total = ca_i.sum() + eps_stab
    return (1.0 - inside / total) ** 2


def entity_attention(ca: torch.Tensor, entity: EntitySpec) -> torch.Tensor:
    """Head-mean attention summed over the entity's token span: (positions,)."""
    n_tokens = ca.shape[-1]
    if entity.token_span[1] >= n_tokens:
        raise IndexError(
            f"entity {entity.entity_id}: span {entity.token_span} outside {n_tokens} tokens"
        )
    cols = ca.mean(dim=0)[:, entity.token_span[0] : entity.token_span[1] + 1]
    return cols.sum(dim=1)


def total_energy(trace: AttentionTrace, entities, cfg: GuidanceConfig) -> torch.Tensor:
    """Mean over layers of the per-entity energy sum (masks area-resampled)."""
    layers = cfg.energy_layers if cfg.energy_layers is not None else tuple(sorted(trace.ca))
    if not layers:
        raise AddressError("no cross-attention layers to aggregate")
    total = None
    for address in layers:
        ca = trace.get(address, "ca")
        hw = trace.geometry[address]
        layer_sum = None
        for entity in entities:
            m = torch.from_numpy(resample_mask(entity.mask, hw, "area")).to(ca.dtype)
            g = attention_energy(entity_attention(ca, entity), m, cfg.eps_stab)
            layer_sum = g if layer_sum is None else layer_sum + g
        total = layer_sum if total is None else total + layer_sum
    return total / len(layers)


def energy_gradient(
    z_tA: torch.Tensor,
    t: int,
    prompt: PromptEmbedding,
    entities,
    cfg: GuidanceConfig,
    backbone: Backbone,
) -> torch.Tensor:
    """Exact reverse-mode gradient of total_energy with respect to the latent."""
    layers = cfg.energy_layers if cfg.energy_layers is not None else backbone.cross_attention_addresses()
    z = z_tA.detach().to(backbone.unet.dtype).clone().requires_grad_(True)
    interventions = InterventionSet(record={(a, "ca") for a in layers})
    _, trace = backbone.denoise_forward(z, t, prompt, interventions, keep_graph=True)
    energy = total_energy(trace, entities, cfg)
    (grad,) = torch.autograd.grad(energy, z)
    if not torch.isfinite(grad).all():
        for address in layers:
            if not torch.isfinite(trace.get(address, "ca")).all():
                raise NumericError(f"non-finite cross-attention at layer {address}")
        raise NumericError(f"non-finite energy gradient at timestep {t}")
    return grad.detach()


def guidance_update(
    z_tA: torch.Tensor,
    grad: torch.Tensor,
    t: int,
    cfg: GuidanceConfig,
    s: NoiseSchedule,
) -> torch.Tensor:
    """z - sigma_t^2 * eta * grad; no normalization or clipping."""
    if tuple(z_tA.shape) != tuple(grad.shape):
        raise ShapeError(f"latent {tuple(z_tA.shape)} vs gradient {tuple(grad.shape)}")
    sig = sigma_t(t, s)
    return z_tA - (sig * sig * cfg.eta) * grad.to(z_tA.dtype)


def regulate_cross_attention(
    ca: torch.Tensor,
    entities,
    layer_res: tuple[int, int],
    renormalize: bool = False,
    eps_stab: float = EPS_STAB,
) -> torch.Tensor:
    """Multiply each entity token's attention column by its coverage mask.

    Non-entity columns are untouched; no renormalization unless asked
    (renormalize rescales each position row to sum 1 again).
    """
    heads, positions, n_tokens = ca.shape
    if positions != layer_res[0] * layer_res[1]:
        raise ShapeError(f"{positions} positions != {layer_res[0]}x{layer_res[1]}")
    out = ca.clone()
    for entity in entities:
        if entity.token_span[1] >= n_tokens:
            raise IndexError(
                f"entity {entity.entity_id}: span {entity.token_span} outside {n_tokens} tokens"
            )
        m = torch.from_numpy(resample_mask(entity.mask, layer_res, "coverage"))
        m = m.reshape(-1).to(ca.dtype)
        for tok in entity.token_indices:
            out[:, :, tok] = out[:, :, tok] * m
    if renormalize:
        out = out / (out.sum(dim=-1, keepdim=True) + eps_stab)
    return out


def regulation_transform(entities, renormalize: bool = False):
    """transform_ca callback applying regulation at every cross-attention site."""

    def transform(address, ca, hw):
        return regulate_cross_attention(ca, entities, hw, renormalize=renormalize)

    return transform
