"""Attribution quality metrics: deletion AUC, seed invariance, cross-method
agreement, and similar subsequence accuracy (SSA).

Deletion curves replace the top-ranked tokens with UNK one at a time and
track macro-F1 over the whole test set. SSA asks whether the most salient
token window of each test instance recurs, position-aligned, among training
instances of the same class.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations
from typing import Callable, Sequence

import numpy as np

from .attribution import AttributionVector, random_attribution
from .classifier import ClassifierModel, predict_class
from .tokenizer import TokenSequence


@dataclass
class DeletionCurve:
    f1_scores: np.ndarray  # (T+1,); index k = macro-F1 after deleting top k
    ranking_source: str
    dataset_id: str = ""

    def __post_init__(self):
        self.f1_scores = np.asarray(self.f1_scores, dtype=np.float64)


@dataclass
class ClassSsa:
    ssa: float | None  # None when the class accumulated no neighbors
    matches: int
    neighborhoods: int


@dataclass
class SsaResult:
    method: str
    subsequence_length: int
    per_class: dict[int, ClassSsa]
    mean_ssa: float | None
    mean_neighbors: float
    n_undefined_classes: int


@dataclass
class AgreementMatrix:
    methods: list[str]
    matrix: np.ndarray  # mean pairwise cosine similarity, diagonal 1
    summary: float      # mean of the off-diagonal unordered pairs
    n_skipped: int      # undefined-similarity comparisons that were dropped


@dataclass
class InvarianceResult:
    mean: float
    std: float
    n_model_pairs: int   # unordered model pairs per instance
    n_comparisons: int
    n_skipped: int
    per_pair_mean: dict = field(default_factory=dict)


def macro_f1(y_true: np.ndarray, y_pred: np.ndarray, n_classes: int) -> float:
    """Unweighted mean of per-class F1; absent or never-predicted classes
    contribute 0."""
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    if y_true.shape != y_pred.shape:
        raise ValueError("label arrays must have equal shape")
    f1s = np.zeros(n_classes)
    for c in range(n_classes):
        tp = int(np.sum((y_pred == c) & (y_true == c)))
        fp = int(np.sum((y_pred == c) & (y_true != c)))
        fn = int(np.sum((y_pred != c) & (y_true == c)))
        denom = 2 * tp + fp + fn
        f1s[c] = 2 * tp / denom if denom else 0.0
    return float(f1s.mean())


def rank_tokens(scores: np.ndarray) -> np.ndarray:
    """Positions ordered by descending score; ties broken by lower index."""
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")


def align_attributions(attributions: Sequence[AttributionVector],
                       sequences: Sequence[TokenSequence]) -> list[AttributionVector]:
    """Reorder attributions to match the sequence order; error listing every
    sequence id that lacks one."""
    by_id = {a.instance_id: a for a in attributions}
    missing = [s.id for s in sequences if s.id not in by_id]
    if missing:
        raise ValueError(f"missing attribution for instances: {missing}")
    return [by_id[s.id] for s in sequences]


def rankings_from_attributions(attributions: Sequence[AttributionVector],
                               sequences: Sequence[TokenSequence]) -> np.ndarray:
    aligned = align_attributions(attributions, sequences)
    return np.stack([rank_tokens(a.scores) for a in aligned])


def random_rankings(n_instances: int, n_tokens: int,
                    rng: np.random.Generator) -> np.ndarray:
    scores = [random_attribution(n_tokens, rng) for _ in range(n_instances)]
    return np.stack([rank_tokens(a.scores) for a in scores])


def deletion_curve(model: ClassifierModel, sequences: Sequence[TokenSequence],
                   rankings: np.ndarray, source: str = "",
                   dataset_id: str = "") -> DeletionCurve:
    """Macro-F1 after replacing each instance's top-k ranked tokens with UNK,
    for k = 0..T."""
    if not sequences:
        raise ValueError("empty test set")
    tokens = np.stack([s.tokens for s in sequences])
    labels = np.array([s.label for s in sequences])
    if any(s.label is None for s in sequences):
        raise ValueError("deletion curve needs labeled sequences")
    rankings = np.asarray(rankings)
    if rankings.shape != tokens.shape:
        raise ValueError(
            f"rankings shape {rankings.shape} does not match token matrix "
            f"{tokens.shape}"
        )
    n, seq_len = tokens.shape
    work = tokens.copy()
    rows = np.arange(n)
    f1s = np.empty(seq_len + 1)
    f1s[0] = macro_f1(labels, predict_class(model, work), model.n_classes)
    for k in range(1, seq_len + 1):
        work[rows, rankings[:, k - 1]] = model.unk_id
        f1s[k] = macro_f1(labels, predict_class(model, work), model.n_classes)
    return DeletionCurve(f1_scores=f1s, ranking_source=source, dataset_id=dataset_id)


def auc(curve: DeletionCurve | np.ndarray) -> float:
    """Trapezoidal area under the curve normalized by the step count, so a
    constant-1 curve scores 1.0."""
    values = curve.f1_scores if isinstance(curve, DeletionCurve) else np.asarray(curve)
    if values.size < 2:
        raise ValueError("curve needs at least 2 points")
    steps = values.size - 1
    return float((0.5 * (values[0] + values[-1]) + values[1:-1].sum()) / steps)


def auc_gap(auc_rnd: float, auc_xai: float) -> float:
    """Random-minus-method deletion AUC; positive when the method finds
    genuinely influential tokens faster than chance."""
    return auc_rnd - auc_xai


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float | None:
    """Standard cosine, or None when either vector is all zeros (undefined,
    reported as skipped rather than 0). Bit-identical nonzero inputs return
    exactly 1.0."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("vectors must have equal length")
    norm_a = np.linalg.norm(a)
    norm_b = np.linalg.norm(b)
    if norm_a == 0.0 or norm_b == 0.0:
        return None
    if np.array_equal(a, b):
        return 1.0
    return float(np.dot(a, b) / (norm_a * norm_b))


def _minmax(scores: np.ndarray) -> np.ndarray:
    lo, hi = scores.min(), scores.max()
    if hi == lo:
        return np.zeros_like(scores)
    return (scores - lo) / (hi - lo)


def _prepared(vector: AttributionVector, normalize: str) -> np.ndarray:
    if normalize == "none":
        return vector.scores
    if normalize == "minmax":
        return _minmax(vector.scores)
    raise ValueError(f"unknown normalization {normalize!r}")


def invariance_from_attributions(
        per_model: Sequence[Sequence[AttributionVector]],
        normalize: str = "none") -> InvarianceResult:
    """Cosine similarity between every unordered model pair on every
    instance; undefined comparisons are skipped and counted."""
    if len(per_model) < 2:
        raise ValueError("need at least two models")
    n_instances = len(per_model[0])
    if any(len(attrs) != n_instances for attrs in per_model):
        raise ValueError("attribution sets must cover the same instances")
    values = []
    per_pair: dict[tuple[int, int], list[float]] = {}
    skipped = 0
    for i in range(n_instances):
        for m1, m2 in combinations(range(len(per_model)), 2):
            cs = cosine_similarity(_prepared(per_model[m1][i], normalize),
                                   _prepared(per_model[m2][i], normalize))
            if cs is None:
                skipped += 1
                continue
            values.append(cs)
            per_pair.setdefault((m1, m2), []).append(cs)
    if not values:
        raise ValueError("all similarity comparisons were undefined")
    arr = np.array(values)
    return InvarianceResult(
        mean=float(arr.mean()), std=float(arr.std()),
        n_model_pairs=len(list(combinations(range(len(per_model)), 2))),
        n_comparisons=len(values), n_skipped=skipped,
        per_pair_mean={f"{m1}-{m2}": float(np.mean(v))
                       for (m1, m2), v in sorted(per_pair.items())})


def implementation_invariance(
        models: Sequence[ClassifierModel],
        sequences: Sequence[TokenSequence],
        explain: Callable[[ClassifierModel, TokenSequence, int], AttributionVector],
        normalize: str = "none") -> InvarianceResult:
    """Attribution stability across retrainings that differ only in seed.

    explain(model, sequence, instance_index) must draw any randomness from a
    stream keyed by the instance, not the model, so masks and samples are
    shared across models and only model differences move the similarity.
    """
    archs = {m.architecture() for m in models}
    if len(archs) != 1:
        raise ValueError("architecture mismatch between models")
    per_model = [[explain(m, seq, i) for i, seq in enumerate(sequences)]
                 for m in models]
    return invariance_from_attributions(per_model, normalize=normalize)


def xai_agreement(attributions_by_method: dict[str, Sequence[AttributionVector]],
                  normalize: str = "none") -> AgreementMatrix:
    """Mean pairwise cosine similarity between methods across instances."""
    methods = list(attributions_by_method)
    if len(methods) < 2:
        raise ValueError("need at least two methods")
    n_instances = len(attributions_by_method[methods[0]])
    ids = [a.instance_id for a in attributions_by_method[methods[0]]]
    for name in methods[1:]:
        attrs = attributions_by_method[name]
        if [a.instance_id for a in attrs] != ids:
            raise ValueError(f"method {name!r} covers different instances")
    matrix = np.eye(len(methods))
    skipped = 0
    off_diagonal = []
    for i1, i2 in combinations(range(len(methods)), 2):
        values = []
        for i in range(n_instances):
            cs = cosine_similarity(
                _prepared(attributions_by_method[methods[i1]][i], normalize),
                _prepared(attributions_by_method[methods[i2]][i], normalize))
            if cs is None:
                skipped += 1
            else:
                values.append(cs)
        entry = float(np.mean(values)) if values else float("nan")
        matrix[i1, i2] = matrix[i2, i1] = entry
        off_diagonal.append(entry)
    return AgreementMatrix(methods=methods, matrix=matrix,
                           summary=float(np.mean(off_diagonal)),
                           n_skipped=skipped)


def _window_index(train: Sequence[TokenSequence], length: int,
                  n_classes: int) -> dict[tuple[int, bytes], np.ndarray]:
    """Label counts of every position-aligned token window in the training
    set, keyed by (start position, window bytes)."""
    index: dict[tuple[int, bytes], np.ndarray] = {}
    for seq in train:
        tokens = seq.tokens
        for start in range(len(seq) - length + 1):
            key = (start, tokens[start:start + length].tobytes())
            counts = index.get(key)
            if counts is None:
                counts = np.zeros(n_classes, dtype=np.int64)
                index[key] = counts
            counts[seq.label] += 1
    return index


def ssa(train: Sequence[TokenSequence], test: Sequence[TokenSequence],
        attributions: Sequence[AttributionVector], subsequence_length: int,
        n_classes: int, use_abs: bool = False) -> SsaResult:
    """Similar subsequence accuracy.

    For each test instance, take the argmax position of its attribution
    (ties to the lowest index, start clamped so the window fits), find every
    training instance whose tokens match the highlighted window at the same
    positions, and accumulate per class how many of those neighbors share
    the test label. SSA for a class is matches / neighbors; classes that
    never accumulate neighbors are undefined and excluded from the mean.
    """
    if not train or not test:
        raise ValueError("train and test sets must be non-empty")
    seq_len = len(test[0])
    if subsequence_length < 1 or subsequence_length > seq_len:
        raise ValueError(
            f"subsequence length {subsequence_length} out of range [1, {seq_len}]"
        )
    for seq in list(train) + list(test):
        if len(seq) != seq_len:
            raise ValueError(f"inconsistent sequence length at {seq.id!r}")
        if seq.label is None or not 0 <= seq.label < n_classes:
            raise ValueError(f"label out of range for sequence {seq.id!r}")
    aligned = align_attributions(attributions, test)

    index = _window_index(train, subsequence_length, n_classes)
    matches = np.zeros(n_classes, dtype=np.int64)
    neighborhoods = np.zeros(n_classes, dtype=np.int64)
    neighbor_sizes = []
    for seq, attr in zip(test, aligned):
        scores = np.abs(attr.scores) if use_abs else attr.scores
        start = int(np.argmax(scores))
        start = min(start, seq_len - subsequence_length)
        key = (start, seq.tokens[start:start + subsequence_length].tobytes())
        counts = index.get(key)
        if counts is None:
            neighbor_sizes.append(0)
            continue
        total = int(counts.sum())
        matches[seq.label] += int(counts[seq.label])
        neighborhoods[seq.label] += total
        neighbor_sizes.append(total)

    per_class = {}
    defined = []
    for c in range(n_classes):
        if neighborhoods[c] > 0:
            value = float(matches[c] / neighborhoods[c])
            defined.append(value)
        else:
            value = None
        per_class[c] = ClassSsa(ssa=value, matches=int(matches[c]),
                                neighborhoods=int(neighborhoods[c]))
    return SsaResult(
        method=aligned[0].method if aligned else "",
        subsequence_length=subsequence_length,
        per_class=per_class,
        mean_ssa=float(np.mean(defined)) if defined else None,
        mean_neighbors=float(np.mean(neighbor_sizes)),
        n_undefined_classes=n_classes - len(defined))


def ssa_sweep(train: Sequence[TokenSequence], test: Sequence[TokenSequence],
              attributions_by_method: dict[str, Sequence[AttributionVector]],
              lengths: Sequence[int], n_classes: int,
              rnd_rng: np.random.Generator | None = None,
              use_abs: bool = False) -> dict[str, dict[int, SsaResult]]:
    """Run ssa per method per window length; when rnd_rng is given, add a
    "random" baseline with one random attribution per test instance, reused
    across lengths."""
    results: dict[str, dict[int, SsaResult]] = {}
    sweeps = dict(attributions_by_method)
    if rnd_rng is not None:
        sweeps["random"] = [
            random_attribution(len(seq), rnd_rng, instance_id=seq.id)
            for seq in test
        ]
    for method, attrs in sweeps.items():
        results[method] = {
            length: ssa(train, test, attrs, length, n_classes, use_abs=use_abs)
            for length in lengths
        }
    return results
