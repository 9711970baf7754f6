"""Token-level attribution methods for the embedding MLP classifier.

All methods score the T token positions of one instance for one target
class. Gradient methods read the pre-softmax class logit; the perturbation
methods (RISE, LIME) read the softmax class probability, and perturb by
swapping tokens for the UNK placeholder, which the classifier was trained to
accept as a neutral stand-in.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .classifier import (
    ClassifierModel,
    forward_logits,
    grad_from_embeddings,
    grad_wrt_embeddings,
    softmax,
)
from .tokenizer import TokenSequence

# Forward passes over mask batches are chunked to bound peak memory.
_BATCH = 8192


@dataclass
class AttributionVector:
    scores: np.ndarray
    method: str
    target_class: int
    instance_id: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.ndim != 1:
            raise ValueError("scores must be 1-D")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError(f"non-finite attribution scores for {self.instance_id!r}")


@dataclass
class MaskSet:
    masks: np.ndarray  # (N, T) in {0, 1}; 0 means replace with UNK
    p_keep: float

    def __post_init__(self):
        self.masks = np.asarray(self.masks, dtype=np.int64)
        if self.masks.ndim != 2 or self.masks.shape[0] < 1:
            raise ValueError("masks must be a non-empty (N, T) matrix")
        if not np.isin(self.masks, (0, 1)).all():
            raise ValueError("mask entries must be 0 or 1")


def draw_masks(n_masks: int, n_tokens: int, p_keep: float,
               rng: np.random.Generator) -> MaskSet:
    """i.i.d. Bernoulli(p_keep) keep-masks."""
    if n_masks < 1:
        raise ValueError("n_masks must be >= 1")
    if not 0.0 < p_keep <= 1.0:
        raise ValueError("p_keep must lie in (0, 1]")
    masks = (rng.random((n_masks, n_tokens)) < p_keep).astype(np.int64)
    return MaskSet(masks=masks, p_keep=p_keep)


def apply_masks(tokens: np.ndarray, masks: np.ndarray, unk_id: int) -> np.ndarray:
    """Replace masked-out positions (mask 0) with the UNK id."""
    return np.where(masks == 1, tokens[None, :], unk_id)


def _proba_batched(model: ClassifierModel, token_matrix: np.ndarray,
                   target_class: int) -> np.ndarray:
    out = np.empty(token_matrix.shape[0])
    for start in range(0, token_matrix.shape[0], _BATCH):
        block = token_matrix[start:start + _BATCH]
        out[start:start + _BATCH] = softmax(forward_logits(model, block))[:, target_class]
    return out


def saliency(model: ClassifierModel, tokens: TokenSequence,
             target_class: int) -> AttributionVector:
    """Per-token sum of absolute logit gradients over the embedding
    coordinates; scores are non-negative by construction."""
    grads = grad_wrt_embeddings(model, tokens, target_class)
    scores = np.abs(grads).sum(axis=1)
    return AttributionVector(scores=scores, method="saliency",
                             target_class=target_class, instance_id=tokens.id)


def integrated_gradients(model: ClassifierModel, tokens: TokenSequence,
                         target_class: int, steps: int = 64,
                         use_abs: bool = False) -> AttributionVector:
    """Path-integrated gradients from the all-UNK baseline to the input.

    The baseline embeds every position as UNK. Gradients of the class logit
    are averaged over m interpolation steps alpha/m (alpha = 1..m), then
    multiplied elementwise by (e_i - e'); the token score sums that product
    over the embedding coordinates, so on a linear model the scores add up
    to the logit difference between input and baseline for any m.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    emb = model.embedding[tokens.tokens]                # (T, d)
    base = np.broadcast_to(model.embedding[model.unk_id], emb.shape).copy()
    delta = emb - base
    alphas = np.arange(1, steps + 1) / steps
    path = base[None] + alphas[:, None, None] * delta[None]  # (m, T, d)
    grads = grad_from_embeddings(model, path, target_class)
    avg_grad = grads.mean(axis=0)
    vec = delta * avg_grad
    scores = vec.sum(axis=1)
    if use_abs:
        scores = np.abs(scores)
    distances = np.linalg.norm(delta, axis=1)  # diagnostic only
    return AttributionVector(scores=scores, method="ig",
                             target_class=target_class, instance_id=tokens.id,
                             params={"steps": steps, "use_abs": use_abs,
                                     "baseline_distances": distances})


def rise(model: ClassifierModel, tokens: TokenSequence, target_class: int,
         n_masks: int = 4000, p_keep: float = 0.5,
         rng: np.random.Generator | None = None,
         normalize_by_pkeep: bool = False) -> AttributionVector:
    """Randomized-mask importance: average the class probability of masked
    inputs over the masks that keep each position.

    Scores are plain averages of probability-weighted keep indicators, so
    they lie in [0, 1]. The optional p_keep division rescales by the keep
    expectation; it is off by default.
    """
    rng = rng if rng is not None else np.random.default_rng()
    mask_set = draw_masks(n_masks, len(tokens), p_keep, rng)
    masked = apply_masks(tokens.tokens, mask_set.masks, model.unk_id)
    probs = _proba_batched(model, masked, target_class)
    scores = (probs[:, None] * mask_set.masks).mean(axis=0)
    if normalize_by_pkeep:
        scores = scores / p_keep
    return AttributionVector(scores=scores, method="rise",
                             target_class=target_class, instance_id=tokens.id,
                             params={"n_masks": n_masks, "p_keep": p_keep,
                                     "normalize_by_pkeep": normalize_by_pkeep})


def lime(model: ClassifierModel, tokens: TokenSequence, target_class: int,
         n_samples: int = 1000, kernel_width: float | None = None,
         ridge: float = 1e-3,
         rng: np.random.Generator | None = None) -> AttributionVector:
    """Local surrogate coefficients on token presence.

    Presence vectors are Bernoulli(0.5) per position; absent positions are
    replaced with UNK. A ridge regression of the class probability on the
    presence vectors, weighted by exp(-(hamming distance to all-ones)^2 /
    kernel_width^2), yields one coefficient per position.
    """
    rng = rng if rng is not None else np.random.default_rng()
    n_tokens = len(tokens)
    if kernel_width is None:
        kernel_width = 0.75 * np.sqrt(n_tokens)
    presence = (rng.random((n_samples, n_tokens)) < 0.5).astype(np.float64)
    perturbed = np.where(presence == 1.0, tokens.tokens[None, :], model.unk_id)
    y = _proba_batched(model, perturbed, target_class)
    distance = n_tokens - presence.sum(axis=1)
    weights = np.exp(-(distance ** 2) / kernel_width ** 2)

    design = np.concatenate([presence, np.ones((n_samples, 1))], axis=1)
    weighted = design * weights[:, None]
    normal = design.T @ weighted
    penalty = np.full(n_tokens + 1, ridge)
    penalty[-1] = 0.0  # intercept unpenalized
    normal[np.diag_indices_from(normal)] += penalty
    rhs = weighted.T @ y
    try:
        coef = np.linalg.solve(normal, rhs)
    except np.linalg.LinAlgError as exc:
        raise ValueError(
            "singular surrogate regression; use a positive ridge penalty"
        ) from exc
    return AttributionVector(scores=coef[:n_tokens], method="lime",
                             target_class=target_class, instance_id=tokens.id,
                             params={"n_samples": n_samples,
                                     "kernel_width": float(kernel_width),
                                     "ridge": ridge})


def random_attribution(n_tokens: int, rng: np.random.Generator,
                       instance_id: str = "",
                       target_class: int = -1) -> AttributionVector:
    """Uniform(0, 1) scores; the ranking it induces is a uniform random
    permutation. Baseline for deletion curves and SSA."""
    if n_tokens < 1:
        raise ValueError("n_tokens must be >= 1")
    return AttributionVector(scores=rng.random(n_tokens), method="random",
                             target_class=target_class, instance_id=instance_id)


METHODS = ("saliency", "ig", "rise", "lime", "random")


def compute_attribution(model: ClassifierModel, tokens: TokenSequence,
                        method: str, target_class: int, params: dict,
                        rng: np.random.Generator) -> AttributionVector:
    """Uniform dispatch used by the CLI and pipeline."""
    if method == "saliency":
        return saliency(model, tokens, target_class)
    if method == "ig":
        return integrated_gradients(model, tokens, target_class,
                                    steps=int(params.get("steps", 64)),
                                    use_abs=bool(params.get("use_abs", False)))
    if method == "rise":
        return rise(model, tokens, target_class,
                    n_masks=int(params.get("n_masks", 4000)),
                    p_keep=float(params.get("p_keep", 0.5)), rng=rng,
                    normalize_by_pkeep=bool(params.get("normalize_by_pkeep", False)))
    if method == "lime":
        kw = params.get("kernel_width")
        return lime(model, tokens, target_class,
                    n_samples=int(params.get("n_samples", 1000)),
                    kernel_width=None if kw is None else float(kw),
                    ridge=float(params.get("ridge", 1e-3)), rng=rng)
    if method == "random":
        return random_attribution(len(tokens), rng, instance_id=tokens.id,
                                  target_class=target_class)
    raise ValueError(f"unknown attribution method {method!r}")
