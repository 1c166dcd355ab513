"""Synthetic shapes-and-colors VQA task.

Images are 3x32x32 rasters holding one to three non-overlapping shapes.
Each example carries the question tokens, their coarse part-of-speech tags,
the answer index and a 32x32 relevance mask covering the object the
question refers to.
"""

from __future__ import annotations

import base64
import enum
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IMAGE_SIZE = 32
PAD = "<pad>"

COLORS = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
}
SHAPES = ("square", "circle", "triangle")

VOCAB = (PAD, "what", "color", "is", "the", "shape", "there", "a",
         *SHAPES, *COLORS)
ANSWERS = (*COLORS, *SHAPES, "yes", "no")

TEMPLATES = ("color", "shape", "exists")

NOISE = 0.05
MIN_SIZE, MAX_SIZE = 6, 10
SIZES = (6, 8, 10)
PLACEMENT_RETRIES = 100


class PosTag(str, enum.Enum):
    WH = "WhWord"
    NOUN = "Noun"
    ADJ = "Adjective"
    VERB = "Verb"
    DET = "Determiner"
    OTHER = "Other"


POS = {
    PAD: PosTag.OTHER,
    "what": PosTag.WH,
    "is": PosTag.VERB,
    "there": PosTag.OTHER,
    "the": PosTag.DET,
    "a": PosTag.DET,
    "color": PosTag.NOUN,
    "shape": PosTag.NOUN,
    **{s: PosTag.NOUN for s in SHAPES},
    **{c: PosTag.ADJ for c in COLORS},
}


class DatasetFormatError(ValueError):
    """A dataset file could not be parsed.

    ``record`` is the zero-based example index (None for the header) and
    ``offset`` the byte offset where the offending line starts.
    """

    def __init__(self, message: str, record: int | None = None, offset: int | None = None):
        super().__init__(message)
        self.record = record
        self.offset = offset


@dataclass
class ShapeRecord:
    kind: str
    color: str
    top: int
    left: int
    size: int

    def raster(self) -> np.ndarray:
        """Boolean 32x32 footprint of the shape."""
        s = self.size
        yy, xx = np.mgrid[0:s, 0:s]
        if self.kind == "square":
            local = np.ones((s, s), dtype=bool)
        elif self.kind == "circle":
            c = (s - 1) / 2.0
            local = (yy - c) ** 2 + (xx - c) ** 2 <= (s / 2.0 - 0.25) ** 2
        elif self.kind == "triangle":
            # apex at the top row, base spanning the bottom row
            half = (yy + 1) * (s / 2.0) / s
            local = np.abs(xx - (s - 1) / 2.0) <= half
        else:
            raise ValueError(f"unknown shape kind {self.kind!r}")
        full = np.zeros((IMAGE_SIZE, IMAGE_SIZE), dtype=bool)
        full[self.top:self.top + s, self.left:self.left + s] = local
        return full

    def overlaps(self, other: "ShapeRecord", gap: int = 1) -> bool:
        return not (self.top + self.size + gap <= other.top
                    or other.top + other.size + gap <= self.top
                    or self.left + self.size + gap <= other.left
                    or other.left + other.size + gap <= self.left)


@dataclass
class VqaExample:
    example_id: str
    image: np.ndarray          # (3, 32, 32) float32
    question: list[int]
    answer: int
    relevance_mask: np.ndarray  # (32, 32) float32
    pos_tags: list[PosTag] = field(default_factory=list)
    objects: list[ShapeRecord] = field(default_factory=list)

    def words(self, vocab=VOCAB) -> list[str]:
        return [vocab[i] for i in self.question]

    @property
    def template(self) -> str:
        first = VOCAB[self.question[0]]
        if first == "is":
            return "exists"
        return "color" if VOCAB[self.question[1]] == "color" else "shape"


@dataclass
class Dataset:
    examples: list[VqaExample]
    vocab: tuple[str, ...] = VOCAB
    answers: tuple[str, ...] = ANSWERS
    pos: dict[str, PosTag] = field(default_factory=lambda: dict(POS))

    def __len__(self) -> int:
        return len(self.examples)

    def __iter__(self):
        return iter(self.examples)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return Dataset(self.examples[i], self.vocab, self.answers, self.pos)
        return self.examples[i]


SLOT = IMAGE_SIZE // 2
JITTER = 0


def _place_objects(rng: np.random.Generator, count: int) -> list[ShapeRecord]:
    # one object per 16x16 quadrant, centred and offset by up to JITTER pixels
    slots = rng.permutation(4)[:count]
    placed = []
    for slot in (int(s) for s in slots):
        size = int(rng.choice(SIZES))
        base_top = (slot // 2) * SLOT + (SLOT - size) // 2
        base_left = (slot % 2) * SLOT + (SLOT - size) // 2
        placed.append(ShapeRecord(
            kind=SHAPES[int(rng.integers(len(SHAPES)))],
            color=list(COLORS)[int(rng.integers(len(COLORS)))],
            top=base_top + int(rng.integers(-JITTER, JITTER + 1)),
            left=base_left + int(rng.integers(-JITTER, JITTER + 1)),
            size=size,
        ))
    return placed


def render(objects: list[ShapeRecord], rng: np.random.Generator) -> np.ndarray:
    image = np.zeros((3, IMAGE_SIZE, IMAGE_SIZE), dtype=np.float64)
    for obj in objects:
        image[:, obj.raster()] = np.asarray(COLORS[obj.color])[:, None]
    image += rng.uniform(-NOISE, NOISE, size=image.shape)
    return np.clip(image, 0.0, 1.0).astype(np.float32)


def answer_question(words: list[str], objects: list[ShapeRecord]) -> tuple[str, list[ShapeRecord]]:
    """Rule-based answer straight from the shape records.

    Returns the answer word and the objects the question refers to (empty
    for a "no" existence answer). Raises ValueError on an ambiguous or
    unanswerable question.
    """
    if words[:2] == ["what", "color"]:
        hits = [o for o in objects if o.kind == words[-1]]
        if len(hits) != 1:
            raise ValueError(f"{' '.join(words)!r} is ambiguous for {len(hits)} matches")
        return hits[0].color, hits
    if words[:2] == ["what", "shape"]:
        hits = [o for o in objects if o.color == words[-1]]
        if len(hits) != 1:
            raise ValueError(f"{' '.join(words)!r} is ambiguous for {len(hits)} matches")
        return hits[0].kind, hits
    if words[:2] == ["is", "there"]:
        color, kind = words[-2], words[-1]
        hits = [o for o in objects if o.kind == kind and o.color == color]
        return ("yes", hits) if hits else ("no", [])
    raise ValueError(f"unrecognised question {' '.join(words)!r}")


def _make_question(rng: np.random.Generator, template: str, objects: list[ShapeRecord]):
    if template == "color":
        kinds = [o.kind for o in objects]
        unique = [o for o in objects if kinds.count(o.kind) == 1]
        if not unique:
            return None
        target = unique[int(rng.integers(len(unique)))]
        return ["what", "color", "is", "the", target.kind]
    if template == "shape":
        colors = [o.color for o in objects]
        unique = [o for o in objects if colors.count(o.color) == 1]
        if not unique:
            return None
        target = unique[int(rng.integers(len(unique)))]
        return ["what", "shape", "is", target.color]
    present = {(o.color, o.kind) for o in objects}
    if rng.random() < 0.5:
        color, kind = sorted(present)[int(rng.integers(len(present)))]
    else:
        absent = sorted((c, k) for c in COLORS for k in SHAPES if (c, k) not in present)
        color, kind = absent[int(rng.integers(len(absent)))]
    return ["is", "there", "a", color, kind]


def generate_dataset(count: int, rng_seed: int) -> Dataset:
    """Generate ``count`` examples deterministically from ``rng_seed``.

    Templates are drawn uniformly. When the sampled scene cannot support an
    unambiguous question of the drawn template the scene is resampled.
    """
    if count <= 0:
        raise ValueError("count must be positive")
    rng = np.random.default_rng(rng_seed)
    w2i = {w: i for i, w in enumerate(VOCAB)}
    a2i = {a: i for i, a in enumerate(ANSWERS)}
    examples = []
    for n in range(count):
        template = TEMPLATES[int(rng.integers(len(TEMPLATES)))]
        while True:
            objects = _place_objects(rng, int(rng.integers(1, 4)))
            words = _make_question(rng, template, objects)
            if words is not None:
                break
        answer, targets = answer_question(words, objects)
        if targets:
            mask = np.logical_or.reduce([t.raster() for t in targets]).astype(np.float32)
        else:
            mask = np.ones((IMAGE_SIZE, IMAGE_SIZE), dtype=np.float32)
        examples.append(VqaExample(
            example_id=f"s{rng_seed}-{n:05d}",
            image=render(objects, rng),
            question=[w2i[w] for w in words],
            answer=a2i[answer],
            relevance_mask=mask,
            pos_tags=[POS[w] for w in words],
            objects=objects,
        ))
    return Dataset(examples)


def channel_mean(dataset: Dataset | list[VqaExample]) -> np.ndarray:
    """Per-channel mean pixel value over a set of examples."""
    total = np.zeros(3, dtype=np.float64)
    for ex in dataset:
        total += ex.image.astype(np.float64).mean(axis=(1, 2))
    return (total / len(dataset)).astype(np.float32)


# ---------------------------------------------------------------------------
# JSON-lines I/O


def _b64(a: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(a, dtype="<f4").tobytes()).decode("ascii")


def _unb64(s: str, shape: tuple[int, ...]) -> np.ndarray:
    raw = base64.b64decode(s.encode("ascii"), validate=True)
    expected = int(np.prod(shape)) * 4
    if len(raw) != expected:
        raise ValueError(f"raster has {len(raw)} bytes, expected {expected}")
    return np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)


def _dumps(obj) -> str:
    return json.dumps(obj, separators=(",", ":"), sort_keys=False)


def write_dataset(dataset: Dataset, path) -> None:
    header = {"vocab": list(dataset.vocab), "answers": list(dataset.answers),
              "pos": {w: t.value for w, t in dataset.pos.items()}}
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(_dumps(header) + "\n")
        for ex in dataset:
            rec = {
                "id": ex.example_id,
                "image": _b64(ex.image),
                "question": [int(i) for i in ex.question],
                "answer": int(ex.answer),
                "mask": _b64(ex.relevance_mask),
                "objects": [[o.kind, o.color, o.top, o.left, o.size] for o in ex.objects],
            }
            fh.write(_dumps(rec) + "\n")


def read_dataset(path) -> Dataset:
    raw = Path(path).read_bytes()
    if not raw:
        raise DatasetFormatError("dataset file is empty (missing header)", None, 0)
    lines = raw.split(b"\n")
    offsets = []
    pos = 0
    for line in lines:
        offsets.append(pos)
        pos += len(line) + 1
    truncated = not raw.endswith(b"\n")

    try:
        header = json.loads(lines[0])
        vocab = tuple(header["vocab"])
        answers = tuple(header["answers"])
        pos_map = {w: PosTag(t) for w, t in header["pos"].items()}
    except (ValueError, KeyError, TypeError) as exc:
        raise DatasetFormatError(f"malformed header at byte offset 0: {exc}", None, 0) from None

    examples = []
    body = lines[1:]
    if body and body[-1] == b"":
        body = body[:-1]
    for i, line in enumerate(body):
        off = offsets[i + 1]
        last = i == len(body) - 1
        if last and truncated:
            raise DatasetFormatError(
                f"truncated record {i} starting at byte offset {off} (file ends at {len(raw)})", i, off)
        try:
            rec = json.loads(line)
            question = [int(t) for t in rec["question"]]
            words = [vocab[t] for t in question]
            ex = VqaExample(
                example_id=str(rec["id"]),
                image=_unb64(rec["image"], (3, IMAGE_SIZE, IMAGE_SIZE)),
                question=question,
                answer=int(rec["answer"]),
                relevance_mask=_unb64(rec["mask"], (IMAGE_SIZE, IMAGE_SIZE)),
                pos_tags=[pos_map[w] for w in words],
                objects=[ShapeRecord(k, c, int(t), int(l), int(s))
                         for k, c, t, l, s in rec.get("objects", [])],
            )
            if not 0 <= ex.answer < len(answers):
                raise ValueError(f"answer index {ex.answer} out of range")
        except (ValueError, KeyError, TypeError, IndexError) as exc:
            raise DatasetFormatError(
                f"malformed record {i} at byte offset {off}: {exc}", i, off) from None
        examples.append(ex)
    return Dataset(examples, vocab, answers, pos_map)
