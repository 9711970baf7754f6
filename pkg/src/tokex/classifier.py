"""Embedding + MLP token classifier with a trainable UNK placeholder.

Architecture: token lookup into a (K+1) x d embedding table (row K is the
UNK placeholder), flatten to T*d, then per hidden layer affine -> layer norm
-> exact GeLU, and an affine head producing one logit per class. Forward,
backward, and the optimizer are plain numpy so results are bit-reproducible
from the seed and gradients with respect to the input embeddings are exact.
"""

from __future__ import annotations

import json
import hashlib
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .tokenizer import TokenSequence
from .util import write_atomic

LN_EPS = 1e-5
_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x: np.ndarray) -> np.ndarray:
    """Exact GeLU, x * Phi(x) with the erf form of the normal CDF."""
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    phi = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return 0.5 * (1.0 + erf(x / _SQRT2)) + x * phi


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


@dataclass
class HiddenLayer:
    weight: np.ndarray    # (n_out, n_in)
    bias: np.ndarray      # (n_out,)
    ln_gain: np.ndarray   # (n_out,)
    ln_shift: np.ndarray  # (n_out,)


@dataclass
class ClassifierModel:
    embedding: np.ndarray  # (K+1, d); row K is the UNK embedding
    hidden: list[HiddenLayer]
    head_weight: np.ndarray  # (C, h_last)
    head_bias: np.ndarray    # (C,)
    vocab_size: int          # K; valid input tokens are 0..K (K = UNK)
    seq_len: int
    n_classes: int
    seed: int = 0
    config_hash: str = ""

    @property
    def unk_id(self) -> int:
        return self.vocab_size

    @property
    def embed_dim(self) -> int:
        return int(self.embedding.shape[1])

    def parameters(self) -> list[np.ndarray]:
        params = [self.embedding]
        for layer in self.hidden:
            params += [layer.weight, layer.bias, layer.ln_gain, layer.ln_shift]
        params += [self.head_weight, self.head_bias]
        return params

    def architecture(self) -> tuple:
        return (self.vocab_size, self.embed_dim, self.seq_len, self.n_classes,
                tuple(layer.weight.shape for layer in self.hidden))


@dataclass
class TrainConfig:
    p_unk: float = 0.1
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    embed_dim: int = 16
    hidden_sizes: tuple[int, ...] = (128, 64)
    seed: int = 0
    class_weighted: bool = False

    def __post_init__(self):
        if not 0.0 <= self.p_unk < 1.0:
            raise ValueError("p_unk must lie in [0, 1)")
        self.hidden_sizes = tuple(int(h) for h in self.hidden_sizes)


@dataclass
class TrainResult:
    model: ClassifierModel
    epoch_losses: list[float] = field(default_factory=list)


def _as_token_matrix(tokens) -> tuple[np.ndarray, bool]:
    """Normalize input to a (B, T) int array; flag whether it was a single
    sequence."""
    if isinstance(tokens, TokenSequence):
        return tokens.tokens[None, :], True
    arr = np.asarray(tokens, dtype=np.int64)
    if arr.ndim == 1:
        return arr[None, :], True
    if arr.ndim == 2:
        return arr, False
    raise ValueError("tokens must be 1-D or 2-D")


def _validate_tokens(model: ClassifierModel, tokens: np.ndarray) -> None:
    if tokens.size and int(tokens.max()) > model.vocab_size:
        raise ValueError(
            f"token out of vocabulary: max id {int(tokens.max())} exceeds "
            f"UNK id {model.vocab_size}"
        )
    if tokens.size and int(tokens.min()) < 0:
        raise ValueError("token out of vocabulary: negative token id")
    if tokens.shape[-1] != model.seq_len:
        raise ValueError(
            f"sequence length {tokens.shape[-1]} does not match model "
            f"seq_len {model.seq_len}"
        )


def embed(model: ClassifierModel, tokens) -> np.ndarray:
    """Look up token embeddings, returning (B, T, d)."""
    matrix, _ = _as_token_matrix(tokens)
    _validate_tokens(model, matrix)
    return model.embedding[matrix]


def _forward_flat(model: ClassifierModel, flat: np.ndarray, keep_cache: bool):
    """Forward pass from the flattened embedding input (B, T*d).

    The cache stores, per hidden layer, the tensors the backward pass needs:
    layer input x, normalized activation xhat, the per-sample std sigma, and
    the layer-norm output y that feeds GeLU.
    """
    h = flat
    cache = []
    for layer in model.hidden:
        a = h @ layer.weight.T + layer.bias
        mu = a.mean(axis=-1, keepdims=True)
        var = a.var(axis=-1, keepdims=True)
        sigma = np.sqrt(var + LN_EPS)
        xhat = (a - mu) / sigma
        y = layer.ln_gain * xhat + layer.ln_shift
        if keep_cache:
            cache.append((h, xhat, sigma, y))
        h = gelu(y)
    logits = h @ model.head_weight.T + model.head_bias
    if keep_cache:
        cache.append(h)  # head input
    return logits, cache


def _backward_flat(model: ClassifierModel, cache, dlogits: np.ndarray,
                   collect_params: bool):
    """Backpropagate dlogits to the flattened embedding input.

    Returns (d_flat, param_grads) where param_grads follows the layout of
    ClassifierModel.parameters() minus the embedding table (which the caller
    scatters itself), or None when collect_params is False.
    """
    head_in = cache[-1]
    grads = {}
    if collect_params:
        grads["head_weight"] = dlogits.T @ head_in
        grads["head_bias"] = dlogits.sum(axis=0)
    g = dlogits @ model.head_weight
    layer_grads = []
    for idx in range(len(model.hidden) - 1, -1, -1):
        layer = model.hidden[idx]
        x, xhat, sigma, y = cache[idx]
        dy = g * gelu_grad(y)
        u = dy * layer.ln_gain
        da = (u - u.mean(axis=-1, keepdims=True)
              - xhat * (u * xhat).mean(axis=-1, keepdims=True)) / sigma
        if collect_params:
            layer_grads.append({
                "weight": da.T @ x,
                "bias": da.sum(axis=0),
                "ln_gain": (dy * xhat).sum(axis=0),
                "ln_shift": dy.sum(axis=0),
            })
        g = da @ layer.weight
    if collect_params:
        layer_grads.reverse()
        grads["hidden"] = layer_grads
        return g, grads
    return g, None


def logits_from_embeddings(model: ClassifierModel, emb: np.ndarray) -> np.ndarray:
    """Class logits from explicit embedding input (..., T, d); used by path
    integration and gradient checks where the input is not a token lookup."""
    emb = np.asarray(emb, dtype=np.float64)
    single = emb.ndim == 2
    if single:
        emb = emb[None]
    flat = emb.reshape(emb.shape[0], -1)
    logits, _ = _forward_flat(model, flat, keep_cache=False)
    return logits[0] if single else logits


def forward_logits(model: ClassifierModel, tokens) -> np.ndarray:
    """Logits for one sequence (C,) or a batch (B, C)."""
    matrix, single = _as_token_matrix(tokens)
    _validate_tokens(model, matrix)
    flat = model.embedding[matrix].reshape(matrix.shape[0], -1)
    logits, _ = _forward_flat(model, flat, keep_cache=False)
    return logits[0] if single else logits


def predict_proba(model: ClassifierModel, tokens) -> np.ndarray:
    """Softmax class probabilities; same shape contract as forward_logits."""
    return softmax(forward_logits(model, tokens))


def predict_class(model: ClassifierModel, tokens):
    logits = forward_logits(model, tokens)
    return np.argmax(logits, axis=-1) if logits.ndim > 1 else int(np.argmax(logits))


def grad_from_embeddings(model: ClassifierModel, emb: np.ndarray,
                         target_class: int) -> np.ndarray:
    """Exact gradient of the target-class logit with respect to the embedding
    input, via backpropagation. Shape mirrors emb: (T, d) or (B, T, d)."""
    if not 0 <= target_class < model.n_classes:
        raise ValueError(f"class {target_class} out of range")
    emb = np.asarray(emb, dtype=np.float64)
    single = emb.ndim == 2
    if single:
        emb = emb[None]
    flat = emb.reshape(emb.shape[0], -1)
    _, cache = _forward_flat(model, flat, keep_cache=True)
    dlogits = np.zeros((flat.shape[0], model.n_classes))
    dlogits[:, target_class] = 1.0
    dflat, _ = _backward_flat(model, cache, dlogits, collect_params=False)
    grads = dflat.reshape(emb.shape)
    return grads[0] if single else grads


def grad_wrt_embeddings(model: ClassifierModel, tokens,
                        target_class: int) -> np.ndarray:
    """Gradient of the class logit with respect to each looked-up input
    embedding vector; no gradient flows into the table itself."""
    matrix, single = _as_token_matrix(tokens)
    _validate_tokens(model, matrix)
    grads = grad_from_embeddings(model, model.embedding[matrix], target_class)
    return grads[0] if single else grads


def _inject_unk_array(tokens: np.ndarray, unk_id: int, p_unk: float,
                      rng: np.random.Generator) -> np.ndarray:
    if not 0.0 <= p_unk < 1.0:
        raise ValueError("p_unk must lie in [0, 1)")
    if p_unk == 0.0:
        return tokens.copy()
    mask = rng.random(tokens.shape) < p_unk
    out = tokens.copy()
    out[mask] = unk_id
    return out


def inject_unk(tokens: TokenSequence, unk_id: int, p_unk: float,
               rng: np.random.Generator) -> TokenSequence:
    """Independently replace each token with UNK with probability p_unk;
    deterministic given the rng state."""
    replaced = _inject_unk_array(tokens.tokens, unk_id, p_unk, rng)
    return TokenSequence(tokens=replaced, id=tokens.id, label=tokens.label)


def initialize_model(vocab_size: int, seq_len: int, n_classes: int,
                     cfg: TrainConfig) -> ClassifierModel:
    """Seed-controlled init: N(0, 0.02) embeddings, U(+-1/sqrt(fan_in))
    affine parameters, identity layer norm."""
    rng = np.random.default_rng(cfg.seed)
    d = cfg.embed_dim
    embedding = rng.normal(0.0, 0.02, size=(vocab_size + 1, d))
    sizes = [seq_len * d, *cfg.hidden_sizes]
    hidden = []
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / np.sqrt(n_in)
        hidden.append(HiddenLayer(
            weight=rng.uniform(-bound, bound, size=(n_out, n_in)),
            bias=rng.uniform(-bound, bound, size=n_out),
            ln_gain=np.ones(n_out),
            ln_shift=np.zeros(n_out),
        ))
    bound = 1.0 / np.sqrt(sizes[-1])
    head_weight = rng.uniform(-bound, bound, size=(n_classes, sizes[-1]))
    head_bias = rng.uniform(-bound, bound, size=n_classes)
    return ClassifierModel(embedding=embedding, hidden=hidden,
                           head_weight=head_weight, head_bias=head_bias,
                           vocab_size=vocab_size, seq_len=seq_len,
                           n_classes=n_classes, seed=cfg.seed)


class _Adam:
    """Adaptive-moment optimizer over a flat list of parameter arrays."""

    def __init__(self, params: list[np.ndarray], lr: float, beta1: float,
                 beta2: float, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: list[np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            mhat = m / (1 - b1 ** self.t)
            vhat = v / (1 - b2 ** self.t)
            p -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def train(dataset: list[TokenSequence], vocab_size: int, n_classes: int,
          cfg: TrainConfig) -> TrainResult:
    """Minimize cross-entropy with mini-batch Adam and per-batch UNK
    injection. Fully reproducible from cfg.seed."""
    if not dataset:
        raise ValueError("empty training set")
    seq_len = len(dataset[0])
    for seq in dataset:
        if len(seq) != seq_len:
            raise ValueError(
                f"inconsistent sequence length: {seq.id!r} has {len(seq)} "
                f"tokens, expected {seq_len}"
            )
        if seq.label is None or not 0 <= seq.label < n_classes:
            raise ValueError(f"label out of range for sequence {seq.id!r}")
        if seq.tokens.size and int(seq.tokens.max()) >= vocab_size:
            raise ValueError(
                f"token out of vocabulary in sequence {seq.id!r} "
                f"(stored corpora must not contain the UNK id)"
            )

    model = initialize_model(vocab_size, seq_len, n_classes, cfg)
    tokens = np.stack([seq.tokens for seq in dataset])
    labels = np.array([seq.label for seq in dataset], dtype=np.int64)
    n = tokens.shape[0]
    d = cfg.embed_dim

    sample_weight = np.ones(n)
    if cfg.class_weighted:
        counts = np.bincount(labels, minlength=n_classes).astype(np.float64)
        counts[counts == 0] = 1.0
        per_class = n / (n_classes * counts)
        sample_weight = per_class[labels]

    params = model.parameters()
    optimizer = _Adam(params, cfg.learning_rate, cfg.beta1, cfg.beta2)
    rng = np.random.default_rng([cfg.seed, 0x7261696e])  # training stream

    losses = []
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        epoch_weight = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            batch = _inject_unk_array(tokens[idx], vocab_size, cfg.p_unk, rng)
            y = labels[idx]
            w = sample_weight[idx]

            emb = model.embedding[batch]
            flat = emb.reshape(len(idx), -1)
            logits, cache = _forward_flat(model, flat, keep_cache=True)
            proba = softmax(logits)
            ce = -np.log(np.clip(proba[np.arange(len(idx)), y], 1e-12, None))
            epoch_loss += float((w * ce).sum())
            epoch_weight += float(w.sum())

            dlogits = proba.copy()
            dlogits[np.arange(len(idx)), y] -= 1.0
            dlogits *= (w / w.sum())[:, None]
            dflat, grads = _backward_flat(model, cache, dlogits,
                                          collect_params=True)

            demb = np.zeros_like(model.embedding)
            np.add.at(demb, batch.ravel(),
                      dflat.reshape(len(idx) * seq_len, d))
            grad_list = [demb]
            for layer_grad in grads["hidden"]:
                grad_list += [layer_grad["weight"], layer_grad["bias"],
                              layer_grad["ln_gain"], layer_grad["ln_shift"]]
            grad_list += [grads["head_weight"], grads["head_bias"]]
            optimizer.step(grad_list)
        losses.append(epoch_loss / max(epoch_weight, 1e-12))
    return TrainResult(model=model, epoch_losses=losses)


def accuracy(model: ClassifierModel, dataset: list[TokenSequence]) -> float:
    if not dataset:
        raise ValueError("empty dataset")
    tokens = np.stack([seq.tokens for seq in dataset])
    labels = np.array([seq.label for seq in dataset])
    preds = predict_class(model, tokens)
    return float(np.mean(preds == labels))


def parameter_hash(model: ClassifierModel) -> str:
    """SHA-256 over all parameter bytes and shapes; bit-identical models and
    only those share a hash."""
    h = hashlib.sha256()
    for p in model.parameters():
        h.update(str(p.shape).encode())
        h.update(np.ascontiguousarray(p).tobytes())
    return h.hexdigest()


def save_model(model: ClassifierModel, path: str) -> None:
    """Single self-describing JSON file with metadata and all tensors."""
    doc = {
        "format": "tokex-classifier",
        "version": 1,
        "vocab_size": model.vocab_size,
        "embed_dim": model.embed_dim,
        "seq_len": model.seq_len,
        "n_classes": model.n_classes,
        "seed": model.seed,
        "config_hash": model.config_hash,
        "embedding": model.embedding.tolist(),
        "hidden": [
            {
                "weight": layer.weight.tolist(),
                "bias": layer.bias.tolist(),
                "ln_gain": layer.ln_gain.tolist(),
                "ln_shift": layer.ln_shift.tolist(),
            }
            for layer in model.hidden
        ],
        "head_weight": model.head_weight.tolist(),
        "head_bias": model.head_bias.tolist(),
    }
    write_atomic(path, json.dumps(doc, sort_keys=True))


def load_model(path: str) -> ClassifierModel:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != "tokex-classifier":
        raise ValueError(f"{path}: not a classifier model file")
    model = ClassifierModel(
        embedding=np.asarray(doc["embedding"], dtype=np.float64),
        hidden=[
            HiddenLayer(
                weight=np.asarray(layer["weight"], dtype=np.float64),
                bias=np.asarray(layer["bias"], dtype=np.float64),
                ln_gain=np.asarray(layer["ln_gain"], dtype=np.float64),
                ln_shift=np.asarray(layer["ln_shift"], dtype=np.float64),
            )
            for layer in doc["hidden"]
        ],
        head_weight=np.asarray(doc["head_weight"], dtype=np.float64),
        head_bias=np.asarray(doc["head_bias"], dtype=np.float64),
        vocab_size=int(doc["vocab_size"]),
        seq_len=int(doc["seq_len"]),
        n_classes=int(doc["n_classes"]),
        seed=int(doc["seed"]),
        config_hash=str(doc.get("config_hash", "")),
    )
    for p in model.parameters():
        if not np.all(np.isfinite(p)):
            raise ValueError(f"{path}: non-finite parameter values")
    return model
