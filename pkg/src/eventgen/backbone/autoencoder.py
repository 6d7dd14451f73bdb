"""Toy latent autoencoder.

Default is the exact identity map x -> 2x - 1 (stride 1), which isolates
the guidance/injection mechanics from autoencoder quality. An optional
stride-2 mode uses fixed 2x average pooling on encode and nearest-neighbor
unpooling on decode.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

from ..errors import ParameterError, ShapeError

AE_MODES = ("identity", "pool2")


class ToyAutoencoder:
    def __init__(self, mode: str = "identity", channels: int = 3):
        if mode not in AE_MODES:
            raise ParameterError(f"autoencoder mode {mode!r} not in {AE_MODES}")
        self.mode = mode
        self.channels = channels

    @property
    def stride(self) -> int:
        return 1 if self.mode == "identity" else 2

    def encode(self, image: np.ndarray) -> torch.Tensor:
        """Pixel array (H, W, C) in [0, 1] -> latent (C, H/stride, W/stride)."""
        if image.ndim != 3 or image.shape[2] != self.channels:
            raise ShapeError(
                f"expected image (H, W, {self.channels}), got {tuple(image.shape)}"
            )
        h, w = image.shape[:2]
        s = self.stride
        if h % s or w % s:
            pad_h, pad_w = (s - h % s) % s, (s - w % s) % s
            raise ShapeError(
                f"image {h}x{w} not divisible by stride {s}; pad to {h + pad_h}x{w + pad_w}"
            )
        z = torch.from_numpy(np.ascontiguousarray(image)).to(torch.float32)
        z = z.permute(2, 0, 1) * 2.0 - 1.0
        if self.mode == "pool2":
            z = F.avg_pool2d(z.unsqueeze(0), kernel_size=2).squeeze(0)
        return z

    def decode(self, z: torch.Tensor) -> np.ndarray:
        """Latent (C, h, w) -> pixel array (H, W, C) clamped to [0, 1]."""
        if z.ndim != 3 or z.shape[0] != self.channels:
            raise ShapeError(f"expected latent ({self.channels}, h, w), got {tuple(z.shape)}")
        x = z.to(torch.float32)
        if self.mode == "pool2":
            x = F.interpolate(x.unsqueeze(0), scale_factor=2, mode="nearest").squeeze(0)
        x = ((x + 1.0) / 2.0).clamp(0.0, 1.0)
        return x.permute(1, 2, 0).contiguous().numpy()
