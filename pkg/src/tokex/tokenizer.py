"""SAX tokenization of multichannel time series.

A series is z-normalized per channel, mean-pooled into fixed-length patches
(PAA), and each patch mean is mapped to a symbol through breakpoints that cut
the standard normal into equiprobable regions. Channel f uses the disjoint
token id range [f*a, (f+1)*a), and tokens are laid out patch-major: position
p = t * channels + f for patch t and channel f, so contiguous token windows
cover contiguous time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

DEGENERATE_STD = 1e-8


@dataclass
class TimeSeries:
    """One instance: a (channels x length) value matrix plus metadata."""

    values: np.ndarray
    id: str
    label: int | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError(
                f"series {self.id!r}: values must be 2-D (channels x length), "
                f"got shape {self.values.shape}"
            )

    @property
    def n_channels(self) -> int:
        return self.values.shape[0]

    @property
    def length(self) -> int:
        return self.values.shape[1]


@dataclass
class TokenizerConfig:
    patch_length: int = 25
    alphabet_size: int = 4
    channels: int = 1
    pad_policy: str = "repeat-last"  # or "zero-after-znorm"

    def __post_init__(self):
        if self.patch_length < 1:
            raise ValueError("patch_length must be positive")
        if self.alphabet_size < 2:
            raise ValueError("alphabet too small (need at least 2 symbols)")
        if self.channels < 1:
            raise ValueError("channels must be >= 1")
        if self.pad_policy not in ("repeat-last", "zero-after-znorm"):
            raise ValueError(f"unknown pad_policy {self.pad_policy!r}")

    @property
    def vocab_size(self) -> int:
        """Number of regular tokens K = channels * alphabet_size."""
        return self.channels * self.alphabet_size

    @property
    def unk_id(self) -> int:
        """Reserved placeholder id; never produced by tokenize."""
        return self.vocab_size

    def num_tokens(self, length: int) -> int:
        if length % self.patch_length != 0:
            raise ValueError(
                f"length {length} is not a multiple of patch_length "
                f"{self.patch_length}; pad first"
            )
        return self.channels * (length // self.patch_length)


@dataclass
class TokenSequence:
    tokens: np.ndarray
    id: str
    label: int | None = None

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        if self.tokens.ndim != 1:
            raise ValueError(f"sequence {self.id!r}: tokens must be 1-D")

    def __len__(self) -> int:
        return int(self.tokens.shape[0])


def znormalize(series: TimeSeries) -> TimeSeries:
    """Per-channel z-normalization to mean 0, population std 1.

    Channels with std below DEGENERATE_STD carry no shape information and are
    zeroed instead of divided.
    """
    values = series.values
    mean = values.mean(axis=1, keepdims=True)
    std = values.std(axis=1, keepdims=True)
    degenerate = std[:, 0] < DEGENERATE_STD
    safe_std = np.where(std < DEGENERATE_STD, 1.0, std)
    out = (values - mean) / safe_std
    out[degenerate, :] = 0.0
    return TimeSeries(values=out, id=series.id, label=series.label)


def paa(channel: np.ndarray, patch_length: int) -> np.ndarray:
    """Mean-pool one channel into patches of patch_length timesteps."""
    channel = np.asarray(channel, dtype=np.float64)
    if channel.ndim != 1:
        raise ValueError("paa expects a 1-D channel")
    if channel.size == 0:
        raise ValueError("empty series")
    if patch_length < 1:
        raise ValueError("patch_length must be positive")
    if channel.size % patch_length != 0:
        raise ValueError(
            f"length {channel.size} is not a multiple of patch_length "
            f"{patch_length}; pad first"
        )
    return channel.reshape(-1, patch_length).mean(axis=1)


# Rational approximation of the standard normal inverse CDF (relative error
# below 1.2e-9), refined with one Halley step so breakpoints are accurate to
# double precision without a special-function dependency.
_PPF_A = (-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
          1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00)
_PPF_B = (-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
          6.680131188771972e+01, -1.328068155288572e+01)
_PPF_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
          -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00)
_PPF_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
          3.754408661907416e+00)
_PPF_SPLIT = 0.02425


def inverse_normal_cdf(p: float) -> float:
    """Quantile of the standard normal distribution at probability p."""
    if not 0.0 < p < 1.0:
        raise ValueError(f"probability must lie in (0, 1), got {p}")
    a, b, c, d = _PPF_A, _PPF_B, _PPF_C, _PPF_D
    if p < _PPF_SPLIT:
        q = math.sqrt(-2.0 * math.log(p))
        x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) / \
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0)
    elif p <= 1.0 - _PPF_SPLIT:
        q = p - 0.5
        r = q * q
        x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q / \
            (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0)
    else:
        q = math.sqrt(-2.0 * math.log(1.0 - p))
        x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) / \
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0)
    # Halley refinement against the erfc-based CDF.
    err = 0.5 * math.erfc(-x / math.sqrt(2.0)) - p
    u = err * math.sqrt(2.0 * math.pi) * math.exp(x * x / 2.0)
    return x - u / (1.0 + x * u / 2.0)


def sax_breakpoints(alphabet_size: int) -> np.ndarray:
    """Breakpoints beta_1 < ... < beta_{a-1} cutting the standard normal into
    a equiprobable regions. The upper half mirrors the lower half so the
    result is exactly symmetric about 0.
    """
    a = alphabet_size
    if a < 2:
        raise ValueError("alphabet too small (need at least 2 symbols)")
    bps = np.empty(a - 1, dtype=np.float64)
    for j in range(1, a):
        if 2 * j < a:
            bps[j - 1] = inverse_normal_cdf(j / a)
        elif 2 * j == a:
            bps[j - 1] = 0.0
        else:
            bps[j - 1] = -bps[a - j - 1]
    return bps


def symbolize(paa_values: np.ndarray, breakpoints: np.ndarray) -> np.ndarray:
    """Map PAA values to symbols: s(v) = number of breakpoints <= v.

    Intervals are left-closed upward, so a value exactly on a breakpoint maps
    to the upper region.
    """
    return np.searchsorted(breakpoints, paa_values, side="right").astype(np.int64)


def tokenize(series: TimeSeries, cfg: TokenizerConfig) -> TokenSequence:
    """Convert a z-normalized series into its patch-major token sequence.

    Caller is responsible for z-normalization and padding (see preprocess).
    """
    if series.n_channels != cfg.channels:
        raise ValueError(
            f"series {series.id!r} has {series.n_channels} channels, "
            f"config expects {cfg.channels}"
        )
    num_patches = cfg.num_tokens(series.length) // cfg.channels
    bps = sax_breakpoints(cfg.alphabet_size)
    symbols = np.empty((cfg.channels, num_patches), dtype=np.int64)
    for f in range(cfg.channels):
        means = paa(series.values[f], cfg.patch_length)
        if not np.all(np.isfinite(means)):
            raise ValueError(f"invalid input: non-finite PAA value in series {series.id!r}")
        symbols[f] = symbolize(means, bps)
    offsets = np.arange(cfg.channels, dtype=np.int64) * cfg.alphabet_size
    tokens = (symbols + offsets[:, None]).T.ravel()  # position p = t*F + f
    return TokenSequence(tokens=tokens, id=series.id, label=series.label)


def token_span(position: int, cfg: TokenizerConfig,
               num_tokens: int | None = None) -> tuple[int, tuple[int, int]]:
    """Invert the patch-major layout: channel and half-open timestep range
    covered by one token position."""
    if position < 0 or (num_tokens is not None and position >= num_tokens):
        raise ValueError(f"token position {position} out of range")
    channel = position % cfg.channels
    patch = position // cfg.channels
    start = patch * cfg.patch_length
    return channel, (start, start + cfg.patch_length)


def pad_to_length(series: TimeSeries, target_length: int, mode: str) -> TimeSeries:
    """Right-pad every channel to target_length, repeating the last value or
    appending zeros."""
    if target_length < series.length:
        raise ValueError(
            f"series {series.id!r} is longer ({series.length}) than the "
            f"target length {target_length}"
        )
    if target_length == series.length:
        return series
    if series.length == 0:
        raise ValueError("empty series")
    pad = target_length - series.length
    if mode == "repeat-last":
        tail = np.repeat(series.values[:, -1:], pad, axis=1)
    elif mode == "zeros":
        tail = np.zeros((series.n_channels, pad))
    else:
        raise ValueError(f"unknown pad mode {mode!r}")
    return TimeSeries(values=np.concatenate([series.values, tail], axis=1),
                      id=series.id, label=series.label)


def preprocess(series: TimeSeries, cfg: TokenizerConfig,
               target_length: int | None = None) -> TimeSeries:
    """Pad to a patch multiple and z-normalize, in the order the pad policy
    requires: raw repeat-last padding happens before normalization, zero
    padding after it (zeros are only neutral on a normalized channel).
    """
    base = max(target_length or 0, series.length)
    padded = -(-base // cfg.patch_length) * cfg.patch_length
    if cfg.pad_policy == "repeat-last":
        return znormalize(pad_to_length(series, padded, "repeat-last"))
    normalized = znormalize(series)
    return pad_to_length(normalized, padded, "zeros")


def tokenize_dataset(dataset: list[TimeSeries], cfg: TokenizerConfig) -> list[TokenSequence]:
    """Preprocess and tokenize a dataset against its maximum length."""
    if not dataset:
        return []
    target = max(s.length for s in dataset)
    return [tokenize(preprocess(s, cfg, target), cfg) for s in dataset]
