"""Aggregate analyses of importance maps.

* rank correlation of image maps against reference relevance maps
* per-POS-tag probability that a word is its question's most important
* how often single occlusions flip the answer, as a failure predictor
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, NamedTuple, Sequence

import numpy as np

from .attribution import (
    ImportanceMap,
    MapSource,
    OcclusionConfig,
    WordImportance,
    cell_aggregate,
    guided_bp_attribute,
    occlusion_image_probs,
    occlusion_word_probs,
    random_map,
)
from .data import PosTag, VqaExample
from .model import VqaModel

EVAL_DIMS = (14, 14)
OCCLUSION_DIMS = (16, 16)


class DegenerateMapWarning(UserWarning):
    pass


def _grid(m) -> np.ndarray:
    return np.asarray(m.grid if isinstance(m, ImportanceMap) else m, dtype=np.float64)


def _like(m, grid: np.ndarray):
    return ImportanceMap(grid, m.source) if isinstance(m, ImportanceMap) else grid


# ---------------------------------------------------------------------------
# map preprocessing


def _overlap_matrix(src: int, dst: int) -> np.ndarray:
    # exact in units of 1/(src*dst): target i spans [i*src, (i+1)*src), source j spans [j*dst, (j+1)*dst)
    m = np.zeros((dst, src))
    for i in range(dst):
        for j in range(src):
            lo = max(i * src, j * dst)
            hi = min((i + 1) * src, (j + 1) * dst)
            if hi > lo:
                m[i, j] = (hi - lo) / src
    return m


def resize_map(m, target: tuple[int, int] = EVAL_DIMS):
    """Area-weighted resampling onto a ``target`` grid covering the same extent."""
    g = _grid(m)
    rows, cols = g.shape
    if rows < 1 or cols < 1:
        raise ValueError(f"cannot resize an empty map of shape {g.shape}")
    out = _overlap_matrix(rows, target[0]) @ g @ _overlap_matrix(cols, target[1]).T
    return _like(m, out)


class Normalized(NamedTuple):
    map: object
    degenerate: bool


def spatial_normalize(m) -> Normalized:
    """Absolute values scaled to sum to one.

    An all-zero map has no spatial distribution; it becomes uniform and is
    flagged degenerate.
    """
    g = np.abs(_grid(m))
    total = g.sum()
    if total == 0 or not np.isfinite(total):
        warnings.warn("importance map is all zero; using a uniform map", DegenerateMapWarning, stacklevel=2)
        return Normalized(_like(m, np.full(g.shape, 1.0 / g.size)), True)
    return Normalized(_like(m, g / total), False)


# ---------------------------------------------------------------------------
# rank correlation


def average_ranks(values) -> np.ndarray:
    """1-based ranks with tied values sharing the mean of their positions."""
    x = np.asarray(values, dtype=np.float64).reshape(-1)
    order = np.argsort(x, kind="mergesort")
    sorted_x = x[order]
    ranks = np.empty(x.size)
    start = 0
    n = x.size
    while start < n:
        stop = start + 1
        while stop < n and sorted_x[stop] == sorted_x[start]:
            stop += 1
        ranks[order[start:stop]] = (start + stop + 1) / 2.0
        start = stop
    return ranks


class Correlation(NamedTuple):
    value: float
    degenerate: bool


def spearman(a, b) -> Correlation:
    """Pearson correlation of average ranks; 0 and flagged when either side is constant."""
    x, y = _grid(a).reshape(-1), _grid(b).reshape(-1)
    if _grid(a).shape != _grid(b).shape:
        raise ValueError(f"rank_correlation: map dims differ {_grid(a).shape} vs {_grid(b).shape}")
    rx, ry = average_ranks(x), average_ranks(y)
    dx, dy = rx - rx.mean(), ry - ry.mean()
    sxx, syy = (dx * dx).sum(), (dy * dy).sum()
    if sxx == 0 or syy == 0:
        return Correlation(0.0, True)
    r = (dx * dy).sum() / math.sqrt(sxx * syy)
    return Correlation(float(min(1.0, max(-1.0, r))), False)


def rank_correlation(a, b) -> float:
    return spearman(a, b).value


def compare_to_reference(importance, reference) -> Correlation:
    """Resize both maps to 14x14, normalise, and rank-correlate."""
    imp = spatial_normalize(resize_map(importance, EVAL_DIMS))
    ref = spatial_normalize(resize_map(reference, EVAL_DIMS))
    corr = spearman(imp.map, ref.map)
    return Correlation(corr.value, corr.degenerate or imp.degenerate or ref.degenerate)


@dataclass
class CorrelationSummary:
    method: str
    mean: float
    se: float
    n: int
    degenerate_count: int
    values: list[float] = field(default_factory=list, repr=False)

    @classmethod
    def from_correlations(cls, method: str, corrs: Iterable[Correlation]) -> "CorrelationSummary":
        corrs = list(corrs)
        vals = [c.value for c in corrs if not c.degenerate]
        n = len(vals)
        mean = float(np.mean(vals)) if n else float("nan")
        se = float(np.std(vals, ddof=1) / math.sqrt(n)) if n > 1 else 0.0
        return cls(method, mean, se, n, len(corrs) - n, vals)


# ---------------------------------------------------------------------------
# per-method image maps


def example_seed(base_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([base_seed, index]).generate_state(1)[0])


def image_map(method: str, model: VqaModel | None, example: VqaExample, index: int = 0, *,
              seed: int = 42, config: OcclusionConfig | None = None) -> ImportanceMap:
    """The named method's map for one example, at its native evaluation grid."""
    if method == "guided":
        pixels, _ = guided_bp_attribute(model, example.image, example.question)
        return cell_aggregate(pixels, OCCLUSION_DIMS)
    if method == "occlusion":
        from .attribution import occlusion_attribute_image
        return occlusion_attribute_image(model, example.image, example.question, config)
    if method == "random":
        return random_map(example_seed(seed, index), OCCLUSION_DIMS)
    if method == "reference":
        return ImportanceMap(np.asarray(example.relevance_mask, dtype=np.float64), MapSource.REFERENCE)
    raise ValueError(f"unknown method {method!r}")


def evaluate_image_maps(method: str | Callable, dataset, model: VqaModel | None = None, *,
                        seed: int = 42, config: OcclusionConfig | None = None) -> CorrelationSummary:
    """Mean rank correlation (and standard error) of a method's maps vs. relevance masks.

    ``method`` is a method name or a callable ``(example, index) -> map``.
    Degenerate examples are excluded from the mean and counted.
    """
    examples = list(dataset)
    if not examples:
        raise ValueError("dataset is empty")
    if callable(method):
        produce, name = method, getattr(method, "__name__", "custom")
    else:
        name = method
        produce = lambda ex, i: image_map(method, model, ex, i, seed=seed, config=config)  # noqa: E731
    corrs = [compare_to_reference(produce(ex, i), ex.relevance_mask) for i, ex in enumerate(examples)]
    return CorrelationSummary.from_correlations(name, corrs)


# ---------------------------------------------------------------------------
# POS histogram


@dataclass
class PosStat:
    probability: float
    count: int
    most_important: int


def most_important_position(scores: Sequence[float]) -> int:
    return int(np.argmax(np.asarray(scores)))  # first maximum wins ties


def pos_histogram(items: Iterable[tuple[Sequence[float], Sequence[PosTag]]]) -> dict[PosTag, PosStat]:
    """P(token is its question's most important | tag), for every tag that occurs.

    Tags are returned most frequent first.
    """
    occurrences: dict[PosTag, int] = {}
    top: dict[PosTag, int] = {}
    for scores, tags in items:
        scores = np.asarray(scores.scores if isinstance(scores, WordImportance) else scores)
        if len(scores) != len(tags) or len(tags) == 0:
            raise ValueError(f"question with {len(tags)} tags has {len(scores)} scores")
        for t in tags:
            occurrences[PosTag(t)] = occurrences.get(PosTag(t), 0) + 1
        winner = PosTag(tags[most_important_position(scores)])
        top[winner] = top.get(winner, 0) + 1
    order = list(PosTag)
    tags_sorted = sorted(occurrences, key=lambda t: (-occurrences[t], order.index(t)))
    return {t: PosStat(top.get(t, 0) / occurrences[t], occurrences[t], top.get(t, 0)) for t in tags_sorted}


# ---------------------------------------------------------------------------
# answer flips


@dataclass
class FlipSignal:
    flip_fraction: float
    correct: bool
    flips: int
    occlusions: int


def flips_from_probs(original: int, *prob_sets: np.ndarray) -> tuple[int, int]:
    flips = total = 0
    for probs in prob_sets:
        if probs is None or len(probs) == 0:
            continue
        preds = np.argmax(np.asarray(probs), axis=1)
        flips += int(np.sum(preds != original))
        total += len(preds)
    return flips, total


def flip_signal(model: VqaModel, example: VqaExample, config: OcclusionConfig | None = None, *,
                image_cells: bool = True, word_drops: bool = True) -> FlipSignal:
    """Share of single occlusions (image cells and word drops) that change the answer."""
    if not (image_cells or word_drops):
        raise ValueError("at least one occlusion family must be enabled")
    image_probs = word_probs = None
    orig = None
    if image_cells:
        orig, image_probs = occlusion_image_probs(model, example.image, example.question, config)
    if word_drops:
        orig, word_probs = occlusion_word_probs(model, example.image, example.question)
    flips, total = flips_from_probs(orig.predicted, image_probs, word_probs)
    return FlipSignal(flips / total, orig.predicted == example.answer, flips, total)


@dataclass
class FlipPrediction:
    threshold: float
    train_accuracy: float
    accuracy: float
    baseline_accuracy: float
    n_train: int
    n_eval: int
    single_class: bool = False


def _threshold_candidates(fractions: np.ndarray) -> list[float]:
    u = np.unique(fractions)
    return [-math.inf] + [float((a + b) / 2) for a, b in zip(u[:-1], u[1:])] + [math.inf]


def flip_predict(train: Sequence[tuple[float, bool]], evaluation: Sequence[tuple[float, bool]]) -> FlipPrediction:
    """Fit a failure threshold on ``train`` and score it on ``evaluation``.

    Items are ``(flip_fraction, correct)``. Failure is predicted when the
    fraction exceeds the threshold. Candidates are -inf, midpoints between
    consecutive distinct train fractions, and +inf; the lowest threshold of
    maximal train accuracy wins. The baseline is the evaluation split's
    majority-class rate.
    """
    if not train or not evaluation:
        raise ValueError("both splits must be nonempty")
    f_tr = np.array([f for f, _ in train], dtype=np.float64)
    fail_tr = np.array([not c for _, c in train])
    f_ev = np.array([f for f, _ in evaluation], dtype=np.float64)
    fail_ev = np.array([not c for _, c in evaluation])
    baseline = float(max(fail_ev.mean(), 1 - fail_ev.mean()))

    if fail_tr.all() or not fail_tr.any():
        # one class only: always predict it
        const = bool(fail_tr[0])
        return FlipPrediction(math.inf, 1.0, float(np.mean(fail_ev == const)), baseline,
                              len(train), len(evaluation), single_class=True)

    best_theta, best_acc = None, -1.0
    for theta in _threshold_candidates(f_tr):
        acc = float(np.mean((f_tr > theta) == fail_tr))
        if acc > best_acc:
            best_theta, best_acc = theta, acc
    acc_ev = float(np.mean((f_ev > best_theta) == fail_ev))
    return FlipPrediction(best_theta, best_acc, acc_ev, baseline, len(train), len(evaluation))


# ---------------------------------------------------------------------------
# one pass over a dataset


@dataclass
class ExampleAnalysis:
    example_id: str
    predicted: int
    correct: bool
    maps: dict[str, ImportanceMap]
    words: dict[str, WordImportance]
    correlations: dict[str, Correlation]
    flip: FlipSignal | None


def analyze_example(model: VqaModel, example: VqaExample, index: int, methods: Sequence[str], *,
                    seed: int = 42, config: OcclusionConfig | None = None,
                    word_norm: str = "l2", seed_target: str = "prob") -> ExampleAnalysis:
    """Maps, word scores, reference correlations and flip signal for one example.

    Occlusion forwards are shared between the occlusion maps and the flip
    signal.
    """
    config = config or OcclusionConfig()
    maps: dict[str, ImportanceMap] = {}
    words: dict[str, WordImportance] = {}

    orig, image_probs = occlusion_image_probs(model, example.image, example.question, config)
    _, word_probs = occlusion_word_probs(model, example.image, example.question)
    a = orig.predicted
    if "occlusion" in methods:
        scores = orig.predicted_prob - image_probs[:, a].astype(np.float64)
        maps["occlusion"] = ImportanceMap(scores.reshape(config.grid_rows, config.grid_cols), MapSource.OCCLUSION)
        words["occlusion"] = WordImportance(orig.predicted_prob - word_probs[:, a].astype(np.float64),
                                            MapSource.OCCLUSION, list(example.question))
    if "guided" in methods:
        pixels, w = guided_bp_attribute(model, example.image, example.question,
                                        word_norm=word_norm, seed_target=seed_target)
        maps["guided"] = cell_aggregate(pixels, OCCLUSION_DIMS)
        words["guided"] = w
    if "random" in methods:
        maps["random"] = random_map(example_seed(seed, index), OCCLUSION_DIMS)

    correlations = {m: compare_to_reference(mp, example.relevance_mask) for m, mp in maps.items()}
    flips, total = flips_from_probs(a, image_probs, word_probs)
    flip = FlipSignal(flips / total, a == example.answer, flips, total)
    return ExampleAnalysis(example.example_id, a, a == example.answer, maps, words, correlations, flip)


@dataclass
class EvalReport:
    n_examples: int
    correlations: dict[str, CorrelationSummary]
    pos_histogram: dict[PosTag, PosStat]
    pos_method: str
    flip_prediction: FlipPrediction | None
    model_accuracy: float

    def to_dict(self) -> dict:
        def clean(x):
            return None if isinstance(x, float) and not math.isfinite(x) else x

        flip = None
        if self.flip_prediction is not None:
            flip = {k: clean(v) for k, v in asdict(self.flip_prediction).items()}
            flip["threshold"] = _json_threshold(self.flip_prediction.threshold)
        return {
            "n_examples": self.n_examples,
            "model_accuracy": self.model_accuracy,
            "correlations": {m: {"mean": clean(s.mean), "se": s.se, "n": s.n,
                                 "degenerate_count": s.degenerate_count}
                             for m, s in self.correlations.items()},
            "pos_method": self.pos_method,
            "pos_histogram": {t.value: asdict(s) for t, s in self.pos_histogram.items()},
            "flip_predictor": flip,
        }


def _json_threshold(theta: float):
    if math.isinf(theta):
        return "inf" if theta > 0 else "-inf"
    return theta


def build_report(analyses: Sequence[ExampleAnalysis], examples: Sequence[VqaExample],
                 methods: Sequence[str], pos_method: str = "occlusion") -> EvalReport:
    """Reduce per-example analyses in dataset order.

    The flip threshold is fit on the first half of the examples and scored
    on the second half.
    """
    correlations = {m: CorrelationSummary.from_correlations(m, [a.correlations[m] for a in analyses])
                    for m in methods if m in analyses[0].correlations}
    hist = pos_histogram((a.words[pos_method].scores, ex.pos_tags)
                         for a, ex in zip(analyses, examples)) if pos_method in analyses[0].words else {}
    records = [(a.flip.flip_fraction, a.flip.correct) for a in analyses]
    half = len(records) // 2
    flip = flip_predict(records[:half], records[half:]) if half >= 1 else None
    acc = float(np.mean([a.correct for a in analyses]))
    return EvalReport(len(analyses), correlations, hist, pos_method, flip, acc)
