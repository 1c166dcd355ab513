"""Image and question importance by guided backprop and by occlusion.

Both methods explain the model's own prediction: the answer with the
highest probability on the unmasked input, not the ground-truth label.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .model import AnswerDistribution, VqaModel, build_graph, forward, predict_images
from .tensor import ReluMode

PAD_INDEX = 0
OCCLUSION_CHUNK = 64


class MapSource(str, enum.Enum):
    GUIDED = "guided"
    OCCLUSION = "occlusion"
    RANDOM = "random"
    REFERENCE = "reference"


@dataclass
class ImportanceMap:
    grid: np.ndarray
    source: MapSource

    @property
    def dims(self) -> tuple[int, int]:
        return self.grid.shape

    def to_json(self) -> str:
        return json.dumps({"source": MapSource(self.source).value, "dims": list(self.dims),
                           "scores": [float(v) for v in self.grid.reshape(-1)]})

    @classmethod
    def from_json(cls, text: str) -> "ImportanceMap":
        obj = json.loads(text)
        rows, cols = obj["dims"]
        scores = np.asarray(obj["scores"], dtype=np.float64)
        if scores.size != rows * cols:
            raise ValueError(f"map declares dims {rows}x{cols} but holds {scores.size} scores")
        return cls(scores.reshape(rows, cols), MapSource(obj["source"]))

    def to_pgm(self) -> bytes:
        """Binary 8-bit PGM after min-max scaling to 0..255."""
        g = np.asarray(self.grid, dtype=np.float64)
        lo, hi = g.min(), g.max()
        scaled = np.zeros_like(g) if hi == lo else (g - lo) / (hi - lo) * 255.0
        pixels = np.round(scaled).astype(np.uint8)
        rows, cols = g.shape
        return f"P5\n{cols} {rows}\n255\n".encode("ascii") + pixels.tobytes()


@dataclass
class WordImportance:
    scores: np.ndarray
    source: MapSource
    tokens: list[int] = field(default_factory=list)

    def to_json(self, vocab: Sequence[str] | None = None) -> str:
        obj = {"source": MapSource(self.source).value,
               "tokens": [int(t) for t in self.tokens],
               "scores": [float(s) for s in self.scores]}
        if vocab is not None:
            obj["words"] = [vocab[t] for t in self.tokens]
        return json.dumps(obj)


@dataclass
class OcclusionConfig:
    grid_rows: int = 16
    grid_cols: int = 16
    patch_value: np.ndarray | None = None  # falls back to the model's patch value

    def patch_for(self, model: VqaModel) -> np.ndarray:
        value = model.patch_value if self.patch_value is None else self.patch_value
        value = np.asarray(value, dtype=np.float32).reshape(-1)
        if value.size != 3 or not np.all(np.isfinite(value)):
            raise ValueError(f"patch value must be 3 finite channel values, got {value}")
        return value


def grid_cells(height: int, width: int, rows: int, cols: int) -> list[tuple[int, int, int, int]]:
    """Row-major (r0, r1, c0, c1) pixel bounds; the last row/column is clipped."""
    ch, cw = math.ceil(height / rows), math.ceil(width / cols)
    cells = []
    for i in range(rows):
        for j in range(cols):
            cells.append((min(i * ch, height), min((i + 1) * ch, height),
                          min(j * cw, width), min((j + 1) * cw, width)))
    return cells


# ---------------------------------------------------------------------------
# guided backpropagation


def guided_bp_attribute(model: VqaModel, image, question: Sequence[int], *,
                        word_norm: str = "l2", seed_target: str = "prob",
                        relu_mode: ReluMode = ReluMode.GUIDED) -> tuple[ImportanceMap, WordImportance]:
    """Gradients of the predicted answer w.r.t. pixels and word embeddings.

    Pixel score is the channel sum of |gradient| (32x32). Word score is the
    L2 (or L-infinity) norm of the gradient on that token's embedding row.
    """
    dist, tape = forward(model, image, question, relu_mode=relu_mode)
    if seed_target == "prob":
        seed = T.select(tape["probs"], (0, dist.predicted))
    elif seed_target == "logit":
        seed = T.select(tape["logits"], (0, dist.predicted))
    else:
        raise ValueError(f"unknown seed target {seed_target!r}")
    grads = T.backward(tape, seed)

    pixel = np.abs(grads["image"][0]).sum(axis=0).astype(np.float64)
    rows = grads["tokens"].astype(np.float64)
    if word_norm == "l2":
        words = np.sqrt((rows * rows).sum(axis=1))
    elif word_norm == "linf":
        words = np.abs(rows).max(axis=1)
    else:
        raise ValueError(f"unknown word norm {word_norm!r}")
    return (ImportanceMap(pixel, MapSource.GUIDED),
            WordImportance(words, MapSource.GUIDED, [int(t) for t in question]))


# ---------------------------------------------------------------------------
# occlusion


def occluded_images(image: np.ndarray, config: OcclusionConfig, patch: np.ndarray) -> np.ndarray:
    """One copy of ``image`` per grid cell with that cell filled by ``patch``."""
    image = np.asarray(image, dtype=np.float32)
    _, h, w = image.shape
    cells = grid_cells(h, w, config.grid_rows, config.grid_cols)
    out = np.repeat(image[None], len(cells), axis=0)
    for k, (r0, r1, c0, c1) in enumerate(cells):
        out[k, :, r0:r1, c0:c1] = patch[:, None, None]
    return out


def occlusion_image_probs(model: VqaModel, image, question: Sequence[int],
                          config: OcclusionConfig | None = None) -> tuple[AnswerDistribution, np.ndarray]:
    """Original prediction plus answer probabilities for every occluded cell.

    Returns ``(dist, probs)`` with ``probs`` of shape (rows*cols, A).
    """
    config = config or OcclusionConfig()
    image = np.asarray(image, dtype=np.float32)
    orig = AnswerDistribution.from_probs(predict_images(model, image[None], question)[0])
    batch = occluded_images(image, config, config.patch_for(model))
    chunks = [predict_images(model, batch[s:s + OCCLUSION_CHUNK], question)
              for s in range(0, len(batch), OCCLUSION_CHUNK)]
    return orig, np.concatenate(chunks, axis=0)


def occlusion_attribute_image(model: VqaModel, image, question: Sequence[int],
                              config: OcclusionConfig | None = None) -> ImportanceMap:
    """Drop in the predicted answer's probability when each cell is patched."""
    config = config or OcclusionConfig()
    orig, probs = occlusion_image_probs(model, image, question, config)
    scores = orig.predicted_prob - probs[:, orig.predicted].astype(np.float64)
    return ImportanceMap(scores.reshape(config.grid_rows, config.grid_cols), MapSource.OCCLUSION)


def drop_token(question: Sequence[int], position: int) -> list[int]:
    """``question`` without ``position``; a lone token becomes the PAD token."""
    dropped = [int(t) for i, t in enumerate(question) if i != position]
    return dropped or [PAD_INDEX]


def occlusion_word_probs(model: VqaModel, image, question: Sequence[int]) -> tuple[AnswerDistribution, np.ndarray]:
    image = np.asarray(image, dtype=np.float32)
    orig = AnswerDistribution.from_probs(predict_images(model, image[None], question)[0])
    probs = np.stack([predict_images(model, image[None], drop_token(question, t))[0]
                      for t in range(len(question))])
    return orig, probs


def occlusion_attribute_words(model: VqaModel, image, question: Sequence[int]) -> WordImportance:
    if len(question) < 1:
        raise ValueError("question must have at least one token")
    orig, probs = occlusion_word_probs(model, image, question)
    scores = orig.predicted_prob - probs[:, orig.predicted].astype(np.float64)
    return WordImportance(scores, MapSource.OCCLUSION, [int(t) for t in question])


# ---------------------------------------------------------------------------
# baselines and resampling


def random_map(rng_seed: int, dims: tuple[int, int] = (16, 16)) -> ImportanceMap:
    rng = np.random.default_rng(rng_seed)
    return ImportanceMap(rng.random(tuple(dims)), MapSource.RANDOM)


def cell_aggregate(imap: ImportanceMap, target: tuple[int, int] = (16, 16)) -> ImportanceMap:
    """Mean over each target cell's pixel block (final blocks clipped)."""
    grid = np.asarray(imap.grid, dtype=np.float64)
    h, w = grid.shape
    rows, cols = target
    out = np.zeros((rows, cols))
    for k, (r0, r1, c0, c1) in enumerate(grid_cells(h, w, rows, cols)):
        block = grid[r0:r1, c0:c1]
        out.flat[k] = block.mean() if block.size else 0.0
    return ImportanceMap(out, imap.source)
