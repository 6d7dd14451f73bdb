"""Synthetic shapes domain: renderer, event layout templates, datasets.

Entities are solid-color shapes on a dark gray background; entity nouns
are the color words, so prompt binding is purely about which color goes
where and the injected structure carries shape and arrangement. An event
class is a fixed multi-slot layout template; references within a class
jitter the slot positions and sizes and draw fresh color combinations.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .backbone import COLOR_IDS, COLOR_WORDS, NULL_ID, START_ID, VOCAB
from .errors import DataError, VocabularyError
from .images import load_image, save_image, save_mask

BACKGROUND = (0.25, 0.25, 0.25)
PALETTE = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "magenta": (1.0, 0.0, 1.0),
    "cyan": (0.0, 1.0, 1.0),
}
PALETTE_BY_ID = {VOCAB.index(word): rgb for word, rgb in PALETTE.items()}

SHAPES = ("square", "circle", "triangle", "hbar", "vbar", "diamond")


def shape_mask(shape: str, size: int, cy: int, cx: int, r: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    dy, dx = yy - cy, xx - cx
    if shape == "square":
        m = (np.abs(dy) <= r) & (np.abs(dx) <= r)
    elif shape == "circle":
        m = dy * dy + dx * dx <= r * r
    elif shape == "triangle":
        m = (dy >= -r) & (dy <= r) & (np.abs(dx) * 2 <= dy + r)
    elif shape == "hbar":
        m = (np.abs(dy) <= max(1, r // 2)) & (np.abs(dx) <= r)
    elif shape == "vbar":
        m = (np.abs(dx) <= max(1, r // 2)) & (np.abs(dy) <= r)
    elif shape == "diamond":
        m = np.abs(dy) + np.abs(dx) <= r
    else:
        raise DataError(f"unknown shape {shape!r}")
    return m.astype(np.float64)


@dataclass(frozen=True)
class Slot:
    shape: str
    cy: float  # unit coordinates
    cx: float
    r: float  # unit radius


# Ten event classes: distinct arrangements of 2-3 slots.
TEMPLATES: tuple[tuple[Slot, ...], ...] = (
    (Slot("square", 0.48, 0.25, 0.18), Slot("square", 0.48, 0.75, 0.18)),
    (Slot("circle", 0.25, 0.5, 0.16), Slot("circle", 0.75, 0.5, 0.16)),
    (Slot("square", 0.28, 0.28, 0.20), Slot("circle", 0.74, 0.74, 0.13)),
    (Slot("triangle", 0.26, 0.74, 0.17), Slot("hbar", 0.75, 0.3, 0.2)),
    (Slot("circle", 0.5, 0.42, 0.22), Slot("square", 0.22, 0.83, 0.1)),
    (Slot("circle", 0.5, 0.16, 0.12), Slot("circle", 0.5, 0.5, 0.12), Slot("circle", 0.5, 0.84, 0.12)),
    (Slot("square", 0.25, 0.25, 0.13), Slot("square", 0.75, 0.25, 0.13), Slot("square", 0.75, 0.75, 0.13)),
    (Slot("vbar", 0.5, 0.18, 0.26), Slot("circle", 0.52, 0.68, 0.17)),
    (Slot("triangle", 0.3, 0.3, 0.16), Slot("triangle", 0.72, 0.72, 0.16)),
    (Slot("diamond", 0.26, 0.5, 0.17), Slot("hbar", 0.76, 0.5, 0.26)),
)


def render_scene(size: int, items) -> tuple[np.ndarray, list[np.ndarray]]:
    """Draw (shape, color_id, cy, cx, r) items back-to-front.

    Returns the image and one visible-region mask per item; later items
    occlude earlier ones, so masks never overlap.
    """
    image = np.empty((size, size, 3), dtype=np.float64)
    image[:] = BACKGROUND
    masks = [np.zeros((size, size), dtype=np.float64) for _ in items]
    for i, (shape, color_id, cy, cx, r) in enumerate(items):
        if color_id not in PALETTE_BY_ID:
            raise VocabularyError(f"token id {color_id} is not a color noun")
        m = shape_mask(shape, size, cy, cx, r)
        for j in range(i):
            masks[j] = masks[j] * (1.0 - m)
        masks[i] = m
        image[m > 0.5] = PALETTE_BY_ID[color_id]
    for i, m in enumerate(masks):
        if not m.any():
            raise DataError(f"item {i} fully occluded; adjust the layout")
    return image, masks


def _jitter_slot(slot: Slot, size: int, rng: np.random.Generator) -> tuple[int, int, int]:
    cy = int(round(slot.cy * (size - 1))) + int(rng.integers(-2, 3))
    cx = int(round(slot.cx * (size - 1))) + int(rng.integers(-2, 3))
    r = max(2, int(round(slot.r * size)) + int(rng.integers(-1, 2)))
    cy = int(np.clip(cy, r, size - 1 - r))
    cx = int(np.clip(cx, r, size - 1 - r))
    return cy, cx, r


def render_reference(class_index: int, size: int, rng: np.random.Generator):
    """One jittered rendering of a template with fresh distinct colors.

    Returns (image, masks, color token ids).
    """
    template = TEMPLATES[class_index % len(TEMPLATES)]
    colors = rng.choice(len(COLOR_IDS), size=len(template), replace=False)
    color_ids = [COLOR_IDS[int(c)] for c in colors]
    items = []
    for slot, color_id in zip(template, color_ids):
        cy, cx, r = _jitter_slot(slot, size, rng)
        items.append((slot.shape, color_id, cy, cx, r))
    image, masks = render_scene(size, items)
    return image, masks, color_ids


PROMPT_LENGTH = 4  # <start> + up to 3 color nouns, null-padded


def prompt_for_colors(color_ids) -> list[int]:
    tokens = [START_ID] + list(color_ids)
    while len(tokens) < PROMPT_LENGTH:
        tokens.append(NULL_ID)
    return tokens


# --- training dataset --------------------------------------------------------


def make_training_dataset(root, n_images: int = 4000, size: int = 16, seed: int = 0) -> Path:
    """Random multi-entity scenes with color-word labels.

    Layout: images/*.png + labels.tsv (filename, space-separated token ids).
    """
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    rows = []
    for i in range(n_images):
        n_entities = int(rng.integers(2, 4))  # 2 or 3
        for _attempt in range(50):
            items = []
            occupied = np.zeros((size, size), dtype=bool)
            colors = rng.choice(len(COLOR_IDS), size=n_entities, replace=False)
            ok = True
            for c in colors:
                shape = SHAPES[int(rng.integers(0, len(SHAPES)))]
                r = int(rng.integers(2, 5))
                cy = int(rng.integers(r, size - r))
                cx = int(rng.integers(r, size - r))
                m = shape_mask(shape, size, cy, cx, r) > 0.5
                if (occupied & m).any():
                    ok = False
                    break
                occupied |= m
                items.append((shape, COLOR_IDS[int(c)], cy, cx, r))
            if ok:
                break
        if not ok:
            continue
        image, _ = render_scene(size, items)
        nouns = [it[1] for it in items]
        nouns = [nouns[j] for j in rng.permutation(len(nouns))]  # order carries no layout info
        tokens = prompt_for_colors(nouns)
        name = f"img_{i:05d}.png"
        save_image(root / "images" / name, image)
        rows.append(f"{name}\t{' '.join(map(str, tokens))}")
    if not rows:
        raise DataError("failed to place any scene; size too small for the requested entities")
    (root / "labels.tsv").write_text("\n".join(rows) + "\n")
    return root


@dataclass
class ToySample:
    image: np.ndarray
    token_ids: tuple[int, ...]


class ToyDataset:
    """Loader for the images/ + labels.tsv layout."""

    def __init__(self, samples: list[ToySample]):
        if not samples:
            raise DataError("empty dataset")
        self.samples = samples

    def __len__(self) -> int:
        return len(self.samples)

    @classmethod
    def load(cls, root) -> "ToyDataset":
        root = Path(root)
        labels = root / "labels.tsv"
        if not labels.exists():
            raise DataError(f"no labels.tsv under {root}")
        samples = []
        for lineno, line in enumerate(labels.read_text().splitlines(), start=1):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) < 2:
                raise DataError(f"labels.tsv line {lineno}: expected filename<TAB>token ids")
            name, token_text = parts[0], parts[1]
            token_ids = tuple(int(v) for v in token_text.split())
            for tid in token_ids:
                if not 0 <= tid < len(VOCAB):
                    raise VocabularyError(f"labels.tsv line {lineno}: token id {tid} out of vocabulary")
            samples.append(ToySample(load_image(root / "images" / name), token_ids))
        return cls(samples)
