"""Benchmark ingestion, image embedding, retrieval Recall@k, toy metrics.

The retrieval protocol ranks each generated target against all references
of the same event class by cosine similarity (ties broken by ascending
reference id) and reports the fraction whose true reference lands in the
top k. The built-in featurizer is a deterministic grayscale downsample;
real visual encoders plug in through the registry.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .backbone import COLOR_IDS, VOCAB
from .errors import ConfigError, DataError
from .images import load_image, load_mask, save_image, save_mask
from .switching import EntitySpec, resample_mask
from .toydata import BACKGROUND, PALETTE_BY_ID, prompt_for_colors, render_reference

EPS_STAB = 1e-8

# --- benchmark samples -------------------------------------------------------


@dataclass(frozen=True)
class BenchEntity:
    noun_tokens: tuple[int, ...]
    bbox: tuple[int, int, int, int]  # x0, y0, x1, y1 (inclusive)
    mask_path: str


@dataclass(frozen=True)
class EventSample:
    sample_id: str
    image_path: str
    event_class: str
    entities: tuple[BenchEntity, ...]


@dataclass
class IngestReport:
    samples: list[EventSample]
    errors: list[tuple[int, str]]  # (line number, message)


def ingest_benchmark(root) -> IngestReport:
    """Parse manifest.tsv; malformed rows go to the error report, valid rows
    are still returned. Columns: sample_id, image_path, event_class, then
    repeated (noun_tokens, x0:y0:x1:y1, mask_path) triples."""
    root = Path(root)
    manifest = root / "manifest.tsv"
    if not manifest.exists():
        raise DataError(f"no manifest.tsv under {root}")
    samples: list[EventSample] = []
    errors: list[tuple[int, str]] = []
    seen_ids: set[str] = set()
    for lineno, line in enumerate(manifest.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            samples.append(_parse_row(root, line, seen_ids))
            seen_ids.add(samples[-1].sample_id)
        except DataError as exc:
            errors.append((lineno, str(exc)))
    if not samples:
        raise DataError(f"{manifest}: no valid samples (first error: {errors[0][1] if errors else 'none'})")
    return IngestReport(samples=samples, errors=errors)


def _parse_row(root: Path, line: str, seen_ids: set[str]) -> EventSample:
    parts = line.rstrip("\n").split("\t")
    if len(parts) < 6 or (len(parts) - 3) % 3:
        raise DataError(f"expected 3 + 3k columns, got {len(parts)}")
    sample_id, image_path, event_class = parts[0], parts[1], parts[2]
    if sample_id in seen_ids:
        raise DataError(f"duplicate sample_id {sample_id!r}")
    if not event_class:
        raise DataError(f"sample {sample_id!r}: empty event_class")
    image_file = root / image_path
    if not image_file.exists():
        raise DataError(f"sample {sample_id!r}: missing image {image_path}")
    image = load_image(image_file)
    h, w = image.shape[:2]
    entities = []
    for i in range(3, len(parts), 3):
        tokens = tuple(int(v) for v in parts[i].split())
        if not tokens or any(not 0 <= t < len(VOCAB) for t in tokens):
            raise DataError(f"sample {sample_id!r}: bad noun tokens {parts[i]!r}")
        try:
            x0, y0, x1, y1 = (int(v) for v in parts[i + 1].split(":"))
        except ValueError as exc:
            raise DataError(f"sample {sample_id!r}: bad bbox {parts[i + 1]!r}") from exc
        if not (0 <= x0 <= x1 < w and 0 <= y0 <= y1 < h):
            raise DataError(f"sample {sample_id!r}: bbox {parts[i + 1]} outside {w}x{h} image")
        mask_file = root / parts[i + 2]
        if not mask_file.exists():
            raise DataError(f"sample {sample_id!r}: missing mask {parts[i + 2]}")
        mask = load_mask(mask_file)
        if mask.shape != (h, w):
            raise DataError(f"sample {sample_id!r}: mask {mask.shape} does not match image {h}x{w}")
        entities.append(BenchEntity(tokens, (x0, y0, x1, y1), str(parts[i + 2])))
    if not entities:
        raise DataError(f"sample {sample_id!r}: no entities")
    return EventSample(sample_id, image_path, event_class, tuple(entities))


def sample_entities(root, sample: EventSample) -> list[EntitySpec]:
    """EntitySpecs for a benchmark sample; entity i binds prompt position i+1
    (prompts are <start> + nouns in entity order)."""
    root = Path(root)
    out = []
    for i, ent in enumerate(sample.entities):
        mask = load_mask(root / ent.mask_path)
        out.append(EntitySpec(entity_id=i + 1, token_span=(i + 1, i + 1), mask=mask))
    return out


def sample_prompt(sample: EventSample) -> list[int]:
    colors = [ent.noun_tokens[0] for ent in sample.entities]
    return prompt_for_colors(colors)


# --- embedding ---------------------------------------------------------------


def _luma(image: np.ndarray) -> np.ndarray:
    return 0.299 * image[..., 0] + 0.587 * image[..., 1] + 0.114 * image[..., 2]


def _block_mean(gray: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    h, w = gray.shape
    th, tw = target
    if h % th or w % tw:
        raise DataError(f"cannot area-downsample {h}x{w} to {th}x{tw}")
    return gray.reshape(th, h // th, tw, w // tw).mean(axis=(1, 3))


def downsample_featurizer(image: np.ndarray, grid: int = 16) -> np.ndarray:
    """Grayscale area-downsample, flatten, subtract mean, L2-normalize.

    Degenerate (constant) images embed to the zero vector.
    """
    gray = _luma(np.asarray(image, dtype=np.float64))
    if gray.shape[0] < grid or gray.shape[1] < grid:
        grid_h, grid_w = gray.shape
    else:
        grid_h = grid_w = grid
    v = _block_mean(gray, (grid_h, grid_w)).reshape(-1)
    v = v - v.mean()
    norm = np.linalg.norm(v)
    if norm < 1e-12:
        return np.zeros_like(v)
    return v / norm


ENCODERS = {"downsample16": downsample_featurizer}


def register_encoder(name: str, fn) -> None:
    ENCODERS[name] = fn


def embed_image(image: np.ndarray, encoder: str = "downsample16") -> np.ndarray:
    if encoder not in ENCODERS:
        raise ConfigError(f"unregistered encoder {encoder!r}; have {sorted(ENCODERS)}")
    return ENCODERS[encoder](image)


# --- retrieval ---------------------------------------------------------------


@dataclass
class RetrievalReport:
    recall_at: dict[int, float]
    per_class: dict[str, dict[int, float]]
    n_queries: int

    def lines(self) -> list[str]:
        out = [f"n_queries = {self.n_queries}"]
        for k in sorted(self.recall_at):
            out.append(f"recall@{k} = {self.recall_at[k]:.4f}")
        for cls in sorted(self.per_class):
            for k in sorted(self.per_class[cls]):
                out.append(f"class.{cls}.recall@{k} = {self.per_class[cls][k]:.4f}")
        return out


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < 1e-12 or nb < 1e-12:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def recall_at_k(targets, references, ks) -> RetrievalReport:
    """targets: (vector, true_ref_id, event_class); references: (vector,
    ref_id, event_class). Ranks same-class references by cosine similarity
    descending, ties by ascending ref_id."""
    ks = sorted(set(int(k) for k in ks))
    if not ks or ks[0] < 1:
        raise DataError(f"ks must be positive integers, got {ks}")
    by_class: dict[str, list[tuple[np.ndarray, object]]] = {}
    for vec, ref_id, event_class in references:
        by_class.setdefault(event_class, []).append((vec, ref_id))
    hits = {k: 0 for k in ks}
    class_hits: dict[str, dict[int, int]] = {}
    class_counts: dict[str, int] = {}
    for vec, true_ref_id, event_class in targets:
        pool = by_class.get(event_class)
        if pool is None or len(pool) < ks[-1]:
            raise DataError(
                f"class {event_class!r} has {0 if pool is None else len(pool)} references; need >= {ks[-1]}"
            )
        if all(ref_id != true_ref_id for _, ref_id in pool):
            raise DataError(f"true reference {true_ref_id!r} absent from class {event_class!r}")
        ranked = sorted(pool, key=lambda item: (-_cosine(vec, item[0]), item[1]))
        rank = next(i for i, (_, ref_id) in enumerate(ranked) if ref_id == true_ref_id)
        class_counts[event_class] = class_counts.get(event_class, 0) + 1
        ch = class_hits.setdefault(event_class, {k: 0 for k in ks})
        for k in ks:
            if rank < k:
                hits[k] += 1
                ch[k] += 1
    n = sum(class_counts.values())
    if n == 0:
        raise DataError("no targets")
    per_class = {
        cls: {k: class_hits[cls][k] / class_counts[cls] for k in ks} for cls in class_counts
    }
    return RetrievalReport(
        recall_at={k: hits[k] / n for k in ks}, per_class=per_class, n_queries=n
    )


# --- toy metrics -------------------------------------------------------------


class ColorLabelModel:
    """Nearest-palette-color pixel classifier over the toy domain."""

    def __init__(self, palette: dict[int, tuple[float, float, float]] | None = None, background=BACKGROUND):
        self.palette = dict(palette or PALETTE_BY_ID)
        self.background = background

    def classify(self, image: np.ndarray) -> np.ndarray:
        """(H, W) array of color token ids; -1 where background is nearest."""
        ids = list(self.palette)
        centers = np.array([self.palette[i] for i in ids] + [self.background])
        dists = ((image[:, :, None, :] - centers[None, None, :, :]) ** 2).sum(axis=-1)
        nearest = dists.argmin(axis=-1)
        out = np.full(image.shape[:2], -1, dtype=np.int64)
        for j, token in enumerate(ids):
            out[nearest == j] = token
        return out


@dataclass
class LayoutFidelity:
    score: float
    per_entity: list[float]
    no_detection: bool


def layout_fidelity(
    image: np.ndarray,
    entities,
    prompt_tokens,
    model: ColorLabelModel | None = None,
    eps_stab: float = EPS_STAB,
) -> LayoutFidelity:
    """Mean over entities of detected-color mass inside the entity's mask
    over total detected mass of that color. 0 with a warning flag when no
    entity pixels are detected at all."""
    model = model or ColorLabelModel()
    labels = model.classify(np.asarray(image, dtype=np.float64))
    per_entity = []
    any_detected = False
    for entity in entities:
        token = prompt_tokens[entity.token_span[0]]
        detected = (labels == token).astype(np.float64)
        total = detected.sum()
        if total > 0:
            any_detected = True
            inside = (detected * (entity.mask > 0.5)).sum()
            per_entity.append(float(inside / (total + eps_stab)))
        else:
            per_entity.append(0.0)
    if not any_detected:
        return LayoutFidelity(score=0.0, per_entity=per_entity, no_detection=True)
    return LayoutFidelity(
        score=float(np.mean(per_entity)), per_entity=per_entity, no_detection=False
    )


def structure_correlation(image: np.ndarray, reference: np.ndarray, grid: int = 8) -> float:
    """Pearson correlation of area-downsampled grayscales (default 8x8)."""
    a = _block_mean(_luma(np.asarray(image, dtype=np.float64)), (grid, grid)).reshape(-1)
    b = _block_mean(_luma(np.asarray(reference, dtype=np.float64)), (grid, grid)).reshape(-1)
    a = a - a.mean()
    b = b - b.mean()
    denom = np.linalg.norm(a) * np.linalg.norm(b)
    if denom < 1e-12:
        return 0.0
    return float(np.dot(a, b) / denom)


def attention_leakage(records, entities, eps_stab: float = EPS_STAB) -> float:
    """Mean over probe records and entities of entity-token attention mass
    outside the entity's coverage mask."""
    if not records:
        raise DataError("no probe records")
    values = []
    for rec in records:
        ca = rec.value.numpy()  # (heads, positions, tokens)
        mean_ca = ca.mean(axis=0)
        for entity in entities:
            cov = resample_mask(entity.mask, rec.hw, "coverage").reshape(-1)
            span = mean_ca[:, entity.token_span[0] : entity.token_span[1] + 1].sum(axis=1)
            outside = float((span * (1.0 - cov)).sum())
            total = float(span.sum()) + eps_stab
            values.append(outside / total)
    return float(np.mean(values))


# --- toy benchmark generator -------------------------------------------------


def make_toy_benchmark(root, n_classes: int = 10, n_refs: int = 20, size: int = 16, seed: int = 0) -> Path:
    """Class-templated layouts with masks and nouns in manifest format."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    rows = []
    for c in range(n_classes):
        for j in range(n_refs):
            image, masks, color_ids = render_reference(c, size, rng)
            sample_id = f"c{c:02d}r{j:03d}"
            image_rel = f"images/{sample_id}.png"
            save_image(root / image_rel, image)
            fields = [sample_id, image_rel, f"class{c:02d}"]
            for i, (mask, color_id) in enumerate(zip(masks, color_ids)):
                mask_rel = f"masks/{sample_id}_e{i}.png"
                save_mask(root / mask_rel, mask)
                ys, xs = np.nonzero(mask > 0.5)
                bbox = f"{xs.min()}:{ys.min()}:{xs.max()}:{ys.max()}"
                fields += [str(color_id), bbox, mask_rel]
            rows.append("\t".join(fields))
    (root / "manifest.tsv").write_text("\n".join(rows) + "\n")
    return root
