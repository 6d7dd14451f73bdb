"""Instrumentable toy denoising U-Net.

Layer anatomy follows the residual -> self-attention -> cross-attention
pattern. Architecture: 3 encoder blocks (residual only), 1 mid block, and
3 decoder blocks numbered 1..3. Decoder block 1 carries attention from
layer 1 up; decoder blocks 2 and 3 carry attention on all three layers, so
the published injection addresses (dec1:[1,2], dec2:[0,1,2], dec3:[0,1,2])
all resolve. Every layer exposes record/replace/transform hooks on f, SA,
and CA; hooks never change the computation unless a replacement or
transform is present.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import AddressError, NumericError, ParameterError, ShapeError
from .autoencoder import ToyAutoencoder
from .hooks import AttentionTrace, InterventionSet, LayerAddress, check_replacement_shape
from .text import TEXT_TABLE_SEED, VOCAB, PromptEmbedding, TextEmbedder


@dataclass(frozen=True)
class BackboneConfig:
    latent_channels: int = 3
    latent_size: int = 16
    channels: tuple[int, int, int] = (16, 32, 48)
    heads: int = 2
    d_text: int = 32
    time_dim: int = 64
    groups: int = 8
    ae_mode: str = "identity"
    text_seed: int = TEXT_TABLE_SEED

    def __post_init__(self):
        if self.latent_size % 4:
            raise ParameterError(f"latent_size {self.latent_size} must be divisible by 4")
        for c in self.channels:
            if c % self.groups or (c // self.heads) % 1:
                raise ParameterError(f"channel width {c} incompatible with groups={self.groups}")
            if c % self.heads:
                raise ParameterError(f"channel width {c} not divisible by heads={self.heads}")


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Standard sinusoidal timestep embedding, (B,) -> (B, dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64).unsqueeze(1) * freqs.unsqueeze(0)
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class ResidualModule(nn.Module):
    """GroupNorm/SiLU/conv pair with additive timestep conditioning."""

    def __init__(self, c_in: int, c_out: int, time_dim: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, c_out)
        self.norm2 = nn.GroupNorm(groups, c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()
        nn.init.zeros_(self.conv2.weight)
        nn.init.zeros_(self.conv2.bias)

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time_proj(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


def _split_heads(x: torch.Tensor, heads: int) -> torch.Tensor:
    b, n, c = x.shape
    return x.view(b, n, heads, c // heads).permute(0, 2, 1, 3)


def _merge_heads(x: torch.Tensor) -> torch.Tensor:
    b, h, n, d = x.shape
    return x.permute(0, 2, 1, 3).reshape(b, n, h * d)


class SelfAttentionModule(nn.Module):
    def __init__(self, channels: int, heads: int, groups: int):
        super().__init__()
        self.heads = heads
        self.norm = nn.GroupNorm(groups, channels)
        self.qkv = nn.Linear(channels, 3 * channels)
        self.proj = nn.Linear(channels, channels)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, h: torch.Tensor, replace: torch.Tensor | None = None, fast: bool = False):
        b, c, hh, ww = h.shape
        x = self.norm(h).flatten(2).transpose(1, 2)  # (B, hw, C)
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        q = _split_heads(q, self.heads)
        k = _split_heads(k, self.heads)
        v = _split_heads(v, self.heads)
        if fast and replace is None:
            out = F.scaled_dot_product_attention(q, k, v)
            attn = None
        else:
            scale = 1.0 / math.sqrt(q.shape[-1])
            attn = torch.softmax(q @ k.transpose(-2, -1) * scale, dim=-1)  # (B, heads, hw, hw)
            if replace is not None:
                attn = replace
            out = attn @ v
        out = self.proj(_merge_heads(out)).transpose(1, 2).view(b, c, hh, ww)
        return h + out, attn


class CrossAttentionModule(nn.Module):
    def __init__(self, channels: int, d_text: int, heads: int, groups: int):
        super().__init__()
        self.heads = heads
        self.norm = nn.GroupNorm(groups, channels)
        self.q = nn.Linear(channels, channels)
        self.kv = nn.Linear(d_text, 2 * channels)
        self.proj = nn.Linear(channels, channels)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, h: torch.Tensor, text: torch.Tensor, transform=None, address=None, fast: bool = False):
        b, c, hh, ww = h.shape
        x = self.norm(h).flatten(2).transpose(1, 2)
        k, v = self.kv(text).chunk(2, dim=-1)
        q = _split_heads(self.q(x), self.heads)
        k = _split_heads(k, self.heads)
        v = _split_heads(v, self.heads)
        if fast and transform is None:
            out = F.scaled_dot_product_attention(q, k, v)
            attn = None
        else:
            scale = 1.0 / math.sqrt(q.shape[-1])
            attn = torch.softmax(q @ k.transpose(-2, -1) * scale, dim=-1)  # (B, heads, hw, n)
            if transform is not None:
                if b != 1:
                    raise ParameterError("cross-attention transforms require batch size 1")
                attn = transform(address, attn[0], (hh, ww)).unsqueeze(0)
            out = attn @ v
        out = self.proj(_merge_heads(out)).transpose(1, 2).view(b, c, hh, ww)
        return h + out, attn


class UNetLayer(nn.Module):
    """One residual module, optionally followed by self- and cross-attention."""

    def __init__(self, c_in: int, c_out: int, cfg: BackboneConfig, with_attention: bool):
        super().__init__()
        self.res = ResidualModule(c_in, c_out, cfg.time_dim, cfg.groups)
        self.with_attention = with_attention
        if with_attention:
            self.self_attn = SelfAttentionModule(c_out, cfg.heads, cfg.groups)
            self.cross_attn = CrossAttentionModule(c_out, cfg.d_text, cfg.heads, cfg.groups)


@dataclass(frozen=True)
class LayerInfo:
    address: LayerAddress
    channels: int
    resolution: tuple[int, int]
    with_attention: bool


class TinyUNet(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        ch0, ch1, ch2 = cfg.channels
        s = cfg.latent_size
        self.stem = nn.Conv2d(cfg.latent_channels, ch0, 3, padding=1)
        self.time_mlp = nn.Sequential(
            nn.Linear(cfg.time_dim, cfg.time_dim), nn.SiLU(), nn.Linear(cfg.time_dim, cfg.time_dim)
        )
        self.enc_blocks = nn.ModuleList(
            [
                nn.ModuleList([UNetLayer(ch0, ch0, cfg, False)]),
                nn.ModuleList([UNetLayer(ch1, ch1, cfg, False)]),
                nn.ModuleList([UNetLayer(ch2, ch2, cfg, False)]),
            ]
        )
        self.downs = nn.ModuleList(
            [nn.Conv2d(ch0, ch1, 3, stride=2, padding=1), nn.Conv2d(ch1, ch2, 3, stride=2, padding=1)]
        )
        self.mid_layer = UNetLayer(ch2, ch2, cfg, True)
        self.dec_blocks = nn.ModuleList(
            [
                nn.ModuleList(
                    [
                        UNetLayer(2 * ch2, ch2, cfg, False),
                        UNetLayer(ch2, ch2, cfg, True),
                        UNetLayer(ch2, ch2, cfg, True),
                    ]
                ),
                nn.ModuleList(
                    [
                        UNetLayer(2 * ch1, ch1, cfg, True),
                        UNetLayer(ch1, ch1, cfg, True),
                        UNetLayer(ch1, ch1, cfg, True),
                    ]
                ),
                nn.ModuleList(
                    [
                        UNetLayer(2 * ch0, ch0, cfg, True),
                        UNetLayer(ch0, ch0, cfg, True),
                        UNetLayer(ch0, ch0, cfg, True),
                    ]
                ),
            ]
        )
        self.ups = nn.ModuleList(
            [
                nn.Sequential(nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(ch2, ch1, 3, padding=1)),
                nn.Sequential(nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(ch1, ch0, 3, padding=1)),
            ]
        )
        self.head_norm = nn.GroupNorm(cfg.groups, ch0)
        self.head = nn.Conv2d(ch0, cfg.latent_channels, 3, padding=1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

        res = {"enc": (s, s // 2, s // 4), "dec": (s // 4, s // 2, s)}
        self._layers: dict[LayerAddress, UNetLayer] = {}
        self._info: dict[LayerAddress, LayerInfo] = {}
        widths = (ch0, ch1, ch2)
        for bi, block in enumerate(self.enc_blocks):
            for li, layer in enumerate(block):
                self._register(LayerAddress("encoder", bi, li), layer, widths[bi], res["enc"][bi])
        self._register(LayerAddress("mid", 0, 0), self.mid_layer, ch2, s // 4)
        dec_widths = (ch2, ch1, ch0)
        for bi, block in enumerate(self.dec_blocks):
            for li, layer in enumerate(block):
                self._register(LayerAddress("decoder", bi + 1, li), layer, dec_widths[bi], res["dec"][bi])

    def _register(self, address: LayerAddress, layer: UNetLayer, channels: int, size: int):
        self._layers[address] = layer
        self._info[address] = LayerInfo(address, channels, (size, size), layer.with_attention)

    # --- architecture introspection -------------------------------------

    def addresses(self) -> tuple[LayerAddress, ...]:
        return tuple(self._info)

    def info(self, address: LayerAddress) -> LayerInfo:
        if address not in self._info:
            raise AddressError(f"no layer at {address}; valid: {', '.join(map(str, self._info))}")
        return self._info[address]

    def attention_addresses(self) -> tuple[LayerAddress, ...]:
        return tuple(a for a, i in self._info.items() if i.with_attention)

    @property
    def dtype(self) -> torch.dtype:
        return self.stem.weight.dtype

    # --- forward ---------------------------------------------------------

    def _validate_interventions(self, iv: InterventionSet, n_tokens: int) -> None:
        iv.validate_quantities()
        for address in iv.addresses():
            info = self.info(address)
            needs_attn = (
                address in iv.replace_sa
                or any(q in ("sa", "ca") and a == address for a, q in iv.record)
            )
            if needs_attn and not info.with_attention:
                raise AddressError(f"layer {address} has no attention modules")
        for address, tensor in iv.replace_f.items():
            info = self.info(address)
            check_replacement_shape(address, tensor, (info.channels,) + info.resolution, "feature")
        for address, tensor in iv.replace_sa.items():
            info = self.info(address)
            hw = info.resolution[0] * info.resolution[1]
            check_replacement_shape(address, tensor, (self.cfg.heads, hw, hw), "self-attention")

    def _run_layer(self, address, layer, h, temb, text, iv, trace, keep_graph, fast):
        f = layer.res(h, temb)
        hw = (f.shape[2], f.shape[3])
        if iv is not None and address in iv.replace_f:
            f = iv.replace_f[address].to(f.dtype).unsqueeze(0)
        snap = (lambda x: x[0]) if keep_graph else (lambda x: x[0].detach().clone())
        if iv is not None and (address, "f") in iv.record:
            trace.store(address, "f", snap(f), hw)
        h = f
        if layer.with_attention:
            replace = None
            if iv is not None and address in iv.replace_sa:
                replace = iv.replace_sa[address].to(f.dtype).unsqueeze(0)
            h, sa = layer.self_attn(h, replace=replace, fast=fast)
            if iv is not None and (address, "sa") in iv.record:
                trace.store(address, "sa", snap(sa), hw)
            transform = iv.transform_ca if iv is not None else None
            h, ca = layer.cross_attn(h, text, transform=transform, address=address, fast=fast)
            if iv is not None and (address, "ca") in iv.record:
                trace.store(address, "ca", snap(ca), hw)
        return h

    def forward(
        self,
        z: torch.Tensor,
        t: torch.Tensor,
        text: torch.Tensor,
        interventions: InterventionSet | None = None,
        keep_graph: bool = False,
        fast_attention: bool = False,
    ) -> tuple[torch.Tensor, AttentionTrace]:
        """Batched denoising pass; interventions require batch size 1.

        fast_attention uses a fused kernel that never materializes attention
        maps; it is only taken when no interventions are present, so hooked
        passes always share one bit-exact code path.
        """
        if z.ndim != 4:
            raise ShapeError(f"expected z of shape (B, C, H, W), got {tuple(z.shape)}")
        iv = interventions
        if iv is not None and iv.is_empty():
            iv = None
        if iv is not None:
            if z.shape[0] != 1:
                raise ParameterError("interventions require batch size 1")
            self._validate_interventions(iv, text.shape[1])
        fast = fast_attention and iv is None
        trace = AttentionTrace()
        z = z.to(self.dtype)
        text = text.to(self.dtype)
        temb = self.time_mlp(sinusoidal_embedding(t, self.cfg.time_dim).to(self.dtype))
        h = self.stem(z)
        skips = []
        for bi, block in enumerate(self.enc_blocks):
            for li, layer in enumerate(block):
                h = self._run_layer(LayerAddress("encoder", bi, li), layer, h, temb, text, iv, trace, keep_graph, fast)
            skips.append(h)
            if bi < 2:
                h = self.downs[bi](h)
        h = self._run_layer(LayerAddress("mid", 0, 0), self.mid_layer, h, temb, text, iv, trace, keep_graph, fast)
        for bi, block in enumerate(self.dec_blocks):
            h = torch.cat([h, skips[2 - bi]], dim=1)
            for li, layer in enumerate(block):
                h = self._run_layer(LayerAddress("decoder", bi + 1, li), layer, h, temb, text, iv, trace, keep_graph, fast)
            if bi < 2:
                h = self.ups[bi](h)
        eps = self.head(F.silu(self.head_norm(h)))
        return eps, trace


class Backbone:
    """Autoencoder + frozen text embedder + instrumentable U-Net."""

    def __init__(self, config: BackboneConfig | None = None, init_seed: int = 0):
        self.config = config or BackboneConfig()
        self.autoencoder = ToyAutoencoder(self.config.ae_mode, self.config.latent_channels)
        self.text = TextEmbedder(d_text=self.config.d_text, vocab=VOCAB, seed=self.config.text_seed)
        with torch.random.fork_rng():
            torch.manual_seed(init_seed)
            self.unet = TinyUNet(self.config)
        self.unet.eval()

    # --- autoencoder / text ----------------------------------------------

    def encode_image(self, image: np.ndarray) -> torch.Tensor:
        return self.autoencoder.encode(image)

    def decode_latent(self, z: torch.Tensor) -> np.ndarray:
        return self.autoencoder.decode(z.detach().to(torch.float32))

    def embed_prompt(self, token_ids) -> PromptEmbedding:
        return self.text.embed(token_ids)

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        c = self.config.latent_channels
        s = self.config.latent_size
        return (c, s, s)

    # --- introspection -----------------------------------------------------

    def layer_addresses(self) -> tuple[LayerAddress, ...]:
        return self.unet.addresses()

    def attention_addresses(self) -> tuple[LayerAddress, ...]:
        return self.unet.attention_addresses()

    def cross_attention_addresses(self) -> tuple[LayerAddress, ...]:
        return self.unet.attention_addresses()

    def layer_info(self, address: LayerAddress) -> LayerInfo:
        return self.unet.info(address)

    # --- denoising ---------------------------------------------------------

    def denoise_forward(
        self,
        z_t: torch.Tensor,
        t: int,
        prompt: PromptEmbedding,
        interventions: InterventionSet | None = None,
        keep_graph: bool = False,
    ) -> tuple[torch.Tensor, AttentionTrace]:
        """Single-sample pass: z (C, H, W) -> (eps_pred, trace)."""
        if tuple(z_t.shape) != self.latent_shape:
            raise ShapeError(f"latent shape {tuple(z_t.shape)} != expected {self.latent_shape}")
        if not torch.isfinite(z_t).all():
            raise NumericError("non-finite values in z_t")
        t_b = torch.tensor([int(t)], dtype=torch.long)
        with torch.set_grad_enabled(keep_graph):
            eps, trace = self.unet(
                z_t.unsqueeze(0), t_b, prompt.embeddings.unsqueeze(0), interventions, keep_graph
            )
        return eps[0] if keep_graph else eps[0].detach(), trace

    def randomize_weights(self, seed: int, scale: float = 0.1) -> None:
        """Fill every parameter with seeded Gaussian noise (tests, calibration)."""
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for p in self.unet.parameters():
                p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float32).to(p.dtype) * scale)

    def to_double(self) -> "Backbone":
        self.unet.double()
        return self

    def state_dict(self):
        return self.unet.state_dict()

    def load_state_dict(self, state) -> None:
        self.unet.load_state_dict(state)
