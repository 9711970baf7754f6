"""Synthetic planted-motif corpora with a known ground-truth explanation.

Each class plants a distinctive step pattern inside a fixed window of
channel 0: patch p of the window is raised or lowered by the motif amplitude
according to a class-specific sign code. Everything else is Gaussian noise,
so the class is decidable from the motif window alone and the token
positions that matter are known exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attribution import AttributionVector
from .tokenizer import TimeSeries, TokenizerConfig


@dataclass
class SyntheticSpec:
    n_instances: int = 2000
    length: int = 600
    channels: int = 1
    n_classes: int = 2
    motif_start: int = 200      # timestep where the motif window begins
    motif_patches: int = 4      # motif length in patches
    patch_length: int = 25      # must match the tokenizer patch length
    noise_std: float = 0.25
    motif_amplitude: float = 2.0
    class_balance: tuple[float, ...] | None = None  # None = uniform

    def __post_init__(self):
        if self.motif_start % self.patch_length != 0:
            raise ValueError("motif_start must be patch aligned")
        if self.motif_end > self.length:
            raise ValueError(
                f"motif window [{self.motif_start}, {self.motif_end}) exceeds "
                f"length {self.length}"
            )
        if self.n_classes < 2:
            raise ValueError("need at least 2 classes")
        if self.n_classes > 2 ** self.motif_patches:
            raise ValueError(
                f"{self.motif_patches} motif patches encode at most "
                f"{2 ** self.motif_patches} distinct classes"
            )
        if self.class_balance is not None:
            balance = tuple(float(p) for p in self.class_balance)
            if len(balance) != self.n_classes:
                raise ValueError("class_balance length must equal n_classes")
            if abs(sum(balance) - 1.0) > 1e-9 or min(balance) <= 0:
                raise ValueError("class_balance must be positive and sum to 1")
            self.class_balance = balance

    @property
    def motif_end(self) -> int:
        return self.motif_start + self.motif_patches * self.patch_length

    def to_dict(self) -> dict:
        return {
            "n_instances": self.n_instances, "length": self.length,
            "channels": self.channels, "n_classes": self.n_classes,
            "motif_start": self.motif_start, "motif_patches": self.motif_patches,
            "patch_length": self.patch_length, "noise_std": self.noise_std,
            "motif_amplitude": self.motif_amplitude,
            "class_balance": list(self.class_balance) if self.class_balance else None,
        }


def motif_signs(spec: SyntheticSpec, cls: int) -> np.ndarray:
    """+1/-1 per motif patch. The class bits are spread cyclically over the
    patches and xor-ed with an alternating mask, so for two classes the
    codes are complementary and every motif patch is discriminative."""
    bits_needed = max(1, (spec.n_classes - 1).bit_length())
    signs = np.empty(spec.motif_patches, dtype=np.int64)
    for p in range(spec.motif_patches):
        bit = (cls >> (p % bits_needed)) & 1
        signs[p] = 1 if bit ^ (p & 1) else -1
    return signs


def _class_counts(spec: SyntheticSpec) -> np.ndarray:
    """Exact per-class instance counts: floor the proportions, then hand the
    remainder to the largest fractional parts (deterministic)."""
    balance = spec.class_balance or tuple([1.0 / spec.n_classes] * spec.n_classes)
    raw = np.array(balance) * spec.n_instances
    counts = np.floor(raw).astype(np.int64)
    remainder = spec.n_instances - counts.sum()
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:remainder]] += 1
    return counts


def generate_synthetic(spec: SyntheticSpec, rng: np.random.Generator
                       ) -> tuple[list[TimeSeries], list[TimeSeries], list[TimeSeries]]:
    """Deterministic 70/15/15 train/val/test split of planted-motif series."""
    counts = _class_counts(spec)
    labels = np.repeat(np.arange(spec.n_classes), counts)
    labels = labels[rng.permutation(spec.n_instances)]
    signs = np.stack([motif_signs(spec, c) for c in range(spec.n_classes)])

    instances = []
    for i, label in enumerate(labels):
        values = rng.normal(0.0, spec.noise_std,
                            size=(spec.channels, spec.length))
        for p in range(spec.motif_patches):
            start = spec.motif_start + p * spec.patch_length
            values[0, start:start + spec.patch_length] += (
                signs[label, p] * spec.motif_amplitude)
        instances.append(TimeSeries(values=values, id=f"synth-{i:05d}",
                                    label=int(label)))

    n_train = int(0.7 * spec.n_instances)
    n_val = int(0.15 * spec.n_instances)
    return (instances[:n_train],
            instances[n_train:n_train + n_val],
            instances[n_train + n_val:])


def oracle_label(series: TimeSeries, spec: SyntheticSpec) -> int:
    """Rule-based classification from the motif window sign pattern: nearest
    class code in Hamming distance; exact on noiseless data."""
    window = series.values[0, spec.motif_start:spec.motif_end]
    means = window.reshape(spec.motif_patches, spec.patch_length).mean(axis=1)
    observed = np.where(means >= 0, 1, -1)
    best, best_dist = 0, spec.motif_patches + 1
    for c in range(spec.n_classes):
        dist = int(np.sum(observed != motif_signs(spec, c)))
        if dist < best_dist:
            best, best_dist = c, dist
    return best


def motif_token_positions(spec: SyntheticSpec, cfg: TokenizerConfig) -> list[int]:
    """Token positions covering the motif window (channel 0, patch-major)."""
    if cfg.patch_length != spec.patch_length:
        raise ValueError("tokenizer patch length differs from the corpus spec")
    if cfg.channels != spec.channels:
        raise ValueError("tokenizer channel count differs from the corpus spec")
    first_patch = spec.motif_start // spec.patch_length
    return [(first_patch + p) * cfg.channels
            for p in range(spec.motif_patches)]


def oracle_attribution(spec: SyntheticSpec, cfg: TokenizerConfig,
                       n_tokens: int, instance_id: str = "") -> AttributionVector:
    """Ground-truth ranking: motif token positions first, everything else
    tied at zero."""
    scores = np.zeros(n_tokens)
    for pos in motif_token_positions(spec, cfg):
        scores[pos] = 1.0
    return AttributionVector(scores=scores, method="oracle", target_class=-1,
                             instance_id=instance_id)
