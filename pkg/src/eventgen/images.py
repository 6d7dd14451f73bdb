"""PNG and mask I/O.

Images are float arrays (H, W, 3) in [0, 1]; quantization to uint8 rounds
half away from zero so identical arrays always produce identical files.
Masks are single-channel: PNG (0 = background, 255 = entity) or a
run-length-encoded text sidecar (first line "H W", second line run lengths
of alternating 0/1 values, starting with 0).
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError


def save_image(path, image: np.ndarray) -> None:
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    data = np.floor(arr * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(path, format="PNG")


def load_image(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such image: {path}")
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return arr


def save_mask(path, mask: np.ndarray) -> None:
    data = (np.asarray(mask) > 0.5).astype(np.uint8) * 255
    Image.fromarray(data, mode="L").save(path, format="PNG")


def load_mask(path) -> np.ndarray:
    """Binary (H, W) float mask from PNG or .rle sidecar; binarized at 0.5."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such mask: {path}")
    if path.suffix == ".rle":
        return rle_to_mask(path.read_text())
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
    return (arr > 0.5).astype(np.float64)


def mask_to_rle(mask: np.ndarray) -> str:
    flat = (np.asarray(mask).reshape(-1) > 0.5).astype(np.uint8)
    runs = []
    current, count = 0, 0
    for v in flat:
        if v == current:
            count += 1
        else:
            runs.append(count)
            current, count = v, 1
    runs.append(count)
    h, w = mask.shape
    return f"{h} {w}\n{' '.join(map(str, runs))}\n"


def rle_to_mask(text: str) -> np.ndarray:
    lines = [ln for ln in text.strip().splitlines() if ln.strip()]
    if len(lines) != 2:
        raise DataError("RLE mask must have a size line and a runs line")
    try:
        h, w = (int(v) for v in lines[0].split())
        runs = [int(v) for v in lines[1].split()]
    except ValueError as exc:
        raise DataError(f"bad RLE mask: {exc}") from exc
    if sum(runs) != h * w:
        raise DataError(f"RLE runs sum to {sum(runs)}, expected {h * w}")
    flat = np.zeros(h * w, dtype=np.float64)
    pos, value = 0, 0
    for run in runs:
        if value:
            flat[pos : pos + run] = 1.0
        pos += run
        value ^= 1
    return flat.reshape(h, w)
