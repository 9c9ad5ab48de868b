"""Backbone selection, nearest-centroid classification and task adaptation.

Selection scores every bank entry on the task's support set: pairwise
feature distances (1 - Pearson correlation between feature rows) are rank-
correlated against pairwise label disagreement (0/1), scaled to
[-100, 100]. The entry with the highest score wins; ties break to the
lexicographically smaller name.

Adaptation trains only the adapter parameters on the support set, using
cross-entropy over prototype logits (negative squared distance to the
class centroids, which are recomputed from the current features before
every step and treated as constants inside it). The backbone itself is
never touched.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from .bank import BackboneBank, as_plain_backbone
from .data import Episode
from .errors import (
    ConfigError,
    DataError,
    DegenerateFeaturesError,
    DegenerateLabelsError,
    GateStateError,
    SelectionError,
)
from .model import (
    AdapterSpec,
    Batch,
    Model,
    attach_adapters,
    backward_from_features,
    cross_entropy,
    forward_activations,
    param_vector,
    set_gates,
    trainable_mask,
    unflatten,
)
from .training import sgd_step


def extract_features(model: Model, inputs: np.ndarray) -> np.ndarray:
    """Penultimate-layer activations for task-agnostic scoring.

    Requires gates off: gated (task-specific) features would leak the
    adapter state into a score that is meant to compare backbones.
    """
    if model.gates_on:
        raise GateStateError("extract_features requires gates off")
    hiddens, _ = forward_activations(model, inputs)
    return hiddens[-1]


def parc_score(features: np.ndarray, labels: np.ndarray) -> float:
    """Transferability score in [-100, 100] of features against labels.

    Spearman rank correlation between the lower triangles of the pairwise
    feature-distance matrix (1 - Pearson between rows) and the pairwise
    label-distance matrix (0 if same class else 1), scaled by 100.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    n = features.shape[0]
    if n < 2:
        raise DataError("need at least two samples to score")
    if features.ndim != 2 or features.shape[1] < 2:
        raise DataError("features must be [n, d] with d >= 2")
    if labels.shape != (n,):
        raise DataError("labels must align with feature rows")
    if np.unique(labels).size < 2:
        raise DegenerateLabelsError("scoring needs at least two classes")
    if np.any(features.std(axis=1) == 0.0):
        raise DegenerateFeaturesError("constant feature rows make Pearson undefined")
    dist_f = 1.0 - np.corrcoef(features)
    dist_y = 1.0 - (labels[:, None] == labels[None, :]).astype(np.float64)
    rows, cols = np.tril_indices(n, k=-1)
    df, dy = dist_f[rows, cols], dist_y[rows, cols]
    if np.all(dy == dy[0]):
        raise DegenerateLabelsError(
            "all sample pairs share the same label relation; rank correlation undefined"
        )
    if np.all(df == df[0]):
        raise DegenerateFeaturesError("pairwise feature distances are constant")
    rho = stats.spearmanr(df, dy).statistic
    return float(100.0 * rho)


@dataclass(frozen=True)
class SelectionReport:
    """Per-backbone scores and the resulting choice."""

    scores: dict
    chosen: str
    tie_applied: bool

    def to_dict(self) -> dict:
        return {
            "scores": {k: self.scores[k] for k in sorted(self.scores)},
            "chosen": self.chosen,
            "tie_applied": self.tie_applied,
        }


def select_backbone(bank: BackboneBank, support: Batch) -> SelectionReport:
    """Score every bank entry on the support set and pick the argmax."""
    names = bank.list()
    if not names:
        raise SelectionError("bank is empty")
    scores: dict[str, float | None] = {}
    for name in names:
        model, _ = bank.get(name)
        plain = as_plain_backbone(model)
        try:
            scores[name] = parc_score(
                extract_features(plain, support.inputs), support.labels
            )
        except (DegenerateFeaturesError, DegenerateLabelsError):
            scores[name] = None
    valid = {k: v for k, v in scores.items() if v is not None}
    if not valid:
        raise SelectionError("every bank entry produced a degenerate score")
    best = max(valid.values())
    winners = sorted(k for k, v in valid.items() if v == best)
    return SelectionReport(scores=scores, chosen=winners[0], tie_applied=len(winners) > 1)


def class_centroids(
    features: np.ndarray, labels: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Per-class feature means; classes returned in ascending label order."""
    if features.shape[0] == 0:
        raise DataError("empty support set")
    classes = np.unique(labels)
    centroids = np.stack([features[labels == c].mean(axis=0) for c in classes])
    return centroids, classes


def prototype_logits(features: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Negative squared Euclidean distance to each centroid."""
    d2 = ((features[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    return -d2


def ncc_classify(
    support_feats: np.ndarray, support_labels: np.ndarray, query_feats: np.ndarray
) -> np.ndarray:
    """Nearest-centroid predictions (global class IDs).

    Ties in distance resolve to the smallest class ID; predictions are
    invariant under any positive uniform rescaling of the feature space.
    """
    centroids, classes = class_centroids(support_feats, support_labels)
    logits = prototype_logits(query_feats, centroids)
    return classes[np.argmax(logits, axis=1)]


@dataclass(frozen=True)
class AdaptConfig:
    """Task-adaptation hyperparameters."""

    steps: int = 20
    lr: float = 0.05
    momentum: float = 0.0
    kind: str = "low_rank"
    rank: int = 2
    init_scale: float = 0.01
    max_grad_norm: float = 10.0
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0:
            raise ConfigError("steps must be non-negative")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must be in [0, 1)")
        if self.kind not in ("low_rank", "full_residual"):
            raise ConfigError(f"unknown adapter kind {self.kind!r}")
        if self.kind == "low_rank" and self.rank < 1:
            raise ConfigError("rank must be >= 1")
        if self.max_grad_norm <= 0:
            raise ConfigError("max_grad_norm must be positive")

    def to_dict(self) -> dict:
        return {
            "steps": self.steps,
            "lr": self.lr,
            "momentum": self.momentum,
            "kind": self.kind,
            "rank": self.rank,
            "init_scale": self.init_scale,
            "max_grad_norm": self.max_grad_norm,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AdaptConfig":
        return cls(**d)


def prototype_adapt_loss_grad(
    model: Model, support: Batch, centroids: np.ndarray, classes: np.ndarray
) -> tuple[float, np.ndarray]:
    """Support cross-entropy over prototype logits and its flat gradient.

    ``centroids`` are treated as constants; only the feature path carries
    gradient. Exposed separately so the objective can be checked against
    finite differences.
    """
    hiddens, _ = forward_activations(model, support.inputs)
    feats = hiddens[-1]
    logits = prototype_logits(feats, centroids)
    local = np.searchsorted(classes, support.labels)
    loss, dlogits = cross_entropy(logits, local)
    # d(-||f - c_k||^2)/df = -2 (f - c_k), summed over classes with weights dlogits
    dfeats = -2.0 * (dlogits.sum(axis=1, keepdims=True) * feats - dlogits @ centroids)
    return loss, backward_from_features(model, hiddens, dfeats)


def adapt_task(
    backbone: Model, episode: Episode, cfg: AdaptConfig = AdaptConfig()
) -> tuple[Model, np.ndarray]:
    """Adapt task-specific parameters on the support set, classify the query.

    Fresh zero-effect adapters are attached when the backbone carries none
    (existing adapters are trained as the task parameters otherwise). The
    backbone slice of the parameter vector is bitwise untouched. Query
    predictions come from nearest-centroid classification on the adapted
    features.
    """
    model = backbone
    if not model.has_adapters:
        spec = (
            AdapterSpec(kind="low_rank", rank=cfg.rank)
            if cfg.kind == "low_rank"
            else AdapterSpec(kind="full_residual")
        )
        model = attach_adapters(
            model,
            spec,
            layers=range(max(model.n_layers - 1, 1)),
            seed=np.random.default_rng([cfg.seed, 3]),
            init_scale=cfg.init_scale,
        )
    model = set_gates(model, True)
    mask = trainable_mask(model, freeze_base=True, freeze_head=True)
    theta = param_vector(model)
    velocity = np.zeros_like(theta)
    current = model
    for _ in range(cfg.steps):
        hiddens, _ = forward_activations(current, episode.support.inputs)
        centroids, classes = class_centroids(hiddens[-1], episode.support.labels)
        _, grad = prototype_adapt_loss_grad(current, episode.support, centroids, classes)
        step_grad = grad * mask
        # unbounded squared-distance logits can blow up the update; cap the norm
        norm = float(np.linalg.norm(step_grad))
        if norm > cfg.max_grad_norm:
            step_grad = step_grad * (cfg.max_grad_norm / norm)
        theta, velocity = sgd_step(theta, step_grad, cfg.lr, velocity, cfg.momentum)
        current = unflatten(model, theta)

    sup_feats = forward_activations(current, episode.support.inputs)[0][-1]
    qry_feats = forward_activations(current, episode.query.inputs)[0][-1]
    preds = ncc_classify(sup_feats, episode.support.labels, qry_feats)
    return current, preds
