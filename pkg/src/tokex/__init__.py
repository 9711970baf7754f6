"""tokex: token-level attribution workbench for discretized time series.

Turns time series into SAX token sequences, trains an embedding MLP
classifier with a trainable UNK placeholder, produces token attributions
(saliency, integrated gradients, RISE, LIME, random baseline), and scores
them with deletion AUC, seed invariance, method agreement, and similar
subsequence accuracy.
"""

from .attribution import (
    AttributionVector,
    MaskSet,
    compute_attribution,
    integrated_gradients,
    lime,
    random_attribution,
    rise,
    saliency,
)
from .classifier import (
    ClassifierModel,
    TrainConfig,
    TrainResult,
    accuracy,
    forward_logits,
    grad_wrt_embeddings,
    inject_unk,
    load_model,
    parameter_hash,
    predict_class,
    predict_proba,
    save_model,
    train,
)
from .evaluation import (
    AgreementMatrix,
    DeletionCurve,
    InvarianceResult,
    SsaResult,
    auc,
    auc_gap,
    cosine_similarity,
    deletion_curve,
    implementation_invariance,
    macro_f1,
    ssa,
    ssa_sweep,
    xai_agreement,
)
from .pipeline import PipelineConfig, explain_dataset, run_pipeline
from .synth import SyntheticSpec, generate_synthetic, oracle_attribution
from .tokenizer import (
    TimeSeries,
    TokenSequence,
    TokenizerConfig,
    paa,
    preprocess,
    sax_breakpoints,
    token_span,
    tokenize,
    tokenize_dataset,
    znormalize,
)

__version__ = "0.1.0"

__all__ = [
    "AttributionVector", "MaskSet", "compute_attribution",
    "integrated_gradients", "lime", "random_attribution", "rise", "saliency",
    "ClassifierModel", "TrainConfig", "TrainResult", "accuracy",
    "forward_logits", "grad_wrt_embeddings", "inject_unk", "load_model",
    "parameter_hash", "predict_class", "predict_proba", "save_model", "train",
    "AgreementMatrix", "DeletionCurve", "InvarianceResult", "SsaResult",
    "auc", "auc_gap", "cosine_similarity", "deletion_curve",
    "implementation_invariance", "macro_f1", "ssa", "ssa_sweep",
    "xai_agreement",
    "PipelineConfig", "explain_dataset", "run_pipeline",
    "SyntheticSpec", "generate_synthetic", "oracle_attribution",
    "TimeSeries", "TokenSequence", "TokenizerConfig", "paa", "preprocess",
    "sax_breakpoints", "token_span", "tokenize", "tokenize_dataset",
    "znormalize",
]
