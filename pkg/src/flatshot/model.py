"""Differentiable MLP backbone with gated task-specific adapters.

The model is a plain fully-connected network in float64 with analytic
gradients written out by hand. Every layer can optionally carry a residual
adapter (low-rank ``B @ A`` or a full delta matrix) whose contribution is
switched by a single boolean gate: with the gate off the forward pass is
bit-identical to the adapter-free network and adapter parameters receive
exactly zero gradient.

Parameters are exposed as one flat vector with a fixed ordering (all base
layers first: weight row-major then bias, layer by layer; then adapters:
B then A, or the full delta, layer by layer), which the rest of the
library relies on for optimisation, freezing and checkpointing.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    AdapterSpecError,
    GateStateError,
    NumericError,
    ShapeMismatchError,
)

ACTIVATIONS = ("relu", "tanh")


@dataclass(frozen=True)
class Batch:
    """A labelled minibatch: inputs [n, d] and integer class labels [n]."""

    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        inputs = np.asarray(self.inputs, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if inputs.ndim != 2:
            raise ShapeMismatchError(f"inputs must be 2-D, got shape {inputs.shape}")
        if labels.ndim != 1 or labels.shape[0] != inputs.shape[0]:
            raise ShapeMismatchError(
                f"labels shape {labels.shape} does not match {inputs.shape[0]} inputs"
            )
        if inputs.shape[0] < 1:
            raise ShapeMismatchError("batch must contain at least one sample")
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "labels", labels)

    @property
    def n(self) -> int:
        return self.inputs.shape[0]


@dataclass(frozen=True)
class AdapterSpec:
    """Residual adapter for one layer.

    ``low_rank`` stores factors b [out, r] and a [r, in] with effective
    delta ``b @ a``; ``full_residual`` stores the delta [out, in] directly.
    Instances without matrices act as templates for :func:`attach_adapters`.
    """

    kind: str
    rank: int | None = None
    b: np.ndarray | None = None
    a: np.ndarray | None = None
    delta: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("low_rank", "full_residual"):
            raise AdapterSpecError(f"unknown adapter kind {self.kind!r}")
        if self.kind == "low_rank":
            if self.rank is None or self.rank < 1:
                raise AdapterSpecError("low_rank adapter requires rank >= 1")
        elif self.rank is not None:
            raise AdapterSpecError("full_residual adapter takes no rank")

    def effective_delta(self) -> np.ndarray:
        if self.kind == "low_rank":
            return self.b @ self.a
        return self.delta

    def param_count(self) -> int:
        if self.kind == "low_rank":
            return self.b.size + self.a.size
        return self.delta.size


@dataclass(frozen=True)
class Model:
    """Layered MLP with optional gated per-layer adapters.

    ``layer_dims`` is ``[d_in, h_1, ..., h_k, n_classes]``; weights[l] has
    shape [out, in]. The activation is applied after every layer except the
    last; penultimate activations serve as features downstream. Instances
    are treated as immutable: all mutating operations return a new Model.
    """

    layer_dims: tuple[int, ...]
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    activation: str = "relu"
    adapters: tuple[AdapterSpec | None, ...] | None = None
    gates_on: bool = False

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ShapeMismatchError(f"unknown activation {self.activation!r}")
        dims = tuple(int(d) for d in self.layer_dims)
        if len(dims) < 2 or any(d < 1 for d in dims):
            raise ShapeMismatchError(f"invalid layer_dims {dims}")
        if len(self.weights) != len(dims) - 1 or len(self.biases) != len(dims) - 1:
            raise ShapeMismatchError("one weight and bias per layer required")
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (dims[l + 1], dims[l]):
                raise ShapeMismatchError(
                    f"layer {l}: weight shape {w.shape} != {(dims[l + 1], dims[l])}"
                )
            if b.shape != (dims[l + 1],):
                raise ShapeMismatchError(f"layer {l}: bias shape {b.shape}")
        if self.adapters is not None:
            if len(self.adapters) != len(self.weights):
                raise ShapeMismatchError("one adapter slot per layer required")
            for l, spec in enumerate(self.adapters):
                if spec is None:
                    continue
                out_d, in_d = dims[l + 1], dims[l]
                if spec.kind == "low_rank":
                    if spec.b.shape != (out_d, spec.rank) or spec.a.shape != (spec.rank, in_d):
                        raise ShapeMismatchError(f"layer {l}: adapter factor shapes invalid")
                elif spec.delta.shape != (out_d, in_d):
                    raise ShapeMismatchError(f"layer {l}: adapter delta shape invalid")
        if self.gates_on and not self.has_adapters:
            raise GateStateError("gates_on requires adapters")
        object.__setattr__(self, "layer_dims", dims)

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def n_classes(self) -> int:
        return self.layer_dims[-1]

    @property
    def feature_dim(self) -> int:
        return self.layer_dims[-2]

    @property
    def has_adapters(self) -> bool:
        return self.adapters is not None and any(a is not None for a in self.adapters)


def init_model(
    layer_dims,
    activation: str = "relu",
    seed: int | np.random.Generator = 0,
) -> Model:
    """Create a model with uniform(+-sqrt(6/(in+out))) weights, zero biases."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    dims = [int(d) for d in layer_dims]
    weights, biases = [], []
    for in_d, out_d in zip(dims[:-1], dims[1:]):
        limit = np.sqrt(6.0 / (in_d + out_d))
        weights.append(rng.uniform(-limit, limit, size=(out_d, in_d)))
        biases.append(np.zeros(out_d))
    return Model(tuple(dims), tuple(weights), tuple(biases), activation)


def _activate(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _activate_grad(h: np.ndarray, kind: str) -> np.ndarray:
    # derivative expressed through the activation value h = act(z)
    if kind == "relu":
        return (h > 0.0).astype(np.float64)
    return 1.0 - h * h


def forward_activations(model: Model, inputs: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
    """Run the forward pass and return (hidden activations incl. input, logits).

    The returned list is ``[h_0, h_1, ..., h_{L-1}]`` where ``h_0`` is the
    input and ``h_{L-1}`` the penultimate activations; the second element
    is the final-layer logits. Raises on shape mismatch or non-finite
    intermediate values (naming the offending layer).
    """
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.layer_dims[0]:
        raise ShapeMismatchError(
            f"inputs shape {x.shape} incompatible with input dim {model.layer_dims[0]}"
        )
    hiddens = [x]
    h = x
    for l in range(model.n_layers):
        z = h @ model.weights[l].T + model.biases[l]
        if model.gates_on and model.adapters is not None and model.adapters[l] is not None:
            z = z + h @ model.adapters[l].effective_delta().T
        if not np.all(np.isfinite(z)):
            raise NumericError(f"non-finite pre-activation at layer {l}")
        if l < model.n_layers - 1:
            h = _activate(z, model.activation)
            hiddens.append(h)
        else:
            return hiddens, z
    raise AssertionError("unreachable")


def forward(model: Model, inputs: np.ndarray) -> np.ndarray:
    """Logits for a batch of inputs."""
    return forward_activations(model, inputs)[1]


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    n, c = logits.shape
    if labels.min() < 0 or labels.max() >= c:
        raise ShapeMismatchError(
            f"labels outside [0, {c}) for a {c}-way output layer"
        )
    logp = _log_softmax(logits)
    loss = -float(logp[np.arange(n), labels].mean())
    dlogits = np.exp(logp)
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    return loss, dlogits


def active_param_squares(model: Model) -> float:
    """Sum of squares over the parameters active in the forward pass.

    Base weights and biases always count; adapter parameters count only
    while the gates are on (gated-off adapters are a detached branch).
    """
    total = sum(float(np.dot(w.ravel(), w.ravel())) for w in model.weights)
    total += sum(float(np.dot(b, b)) for b in model.biases)
    if model.gates_on and model.adapters is not None:
        for spec in model.adapters:
            if spec is None:
                continue
            if spec.kind == "low_rank":
                total += float(np.dot(spec.b.ravel(), spec.b.ravel()))
                total += float(np.dot(spec.a.ravel(), spec.a.ravel()))
            else:
                total += float(np.dot(spec.delta.ravel(), spec.delta.ravel()))
    return total


def forward_backward(
    model: Model, batch: Batch, weight_decay: float = 0.0
) -> tuple[float, np.ndarray, np.ndarray]:
    """Loss, flat gradient and logits for one batch.

    loss = mean cross-entropy + (weight_decay / 2) * ||theta||^2 where
    theta ranges over the active parameters. The gradient vector matches
    :func:`param_vector` ordering; entries for gated-off adapters are
    exactly zero.
    """
    if weight_decay < 0:
        raise ShapeMismatchError("weight_decay must be non-negative")
    hiddens, logits = forward_activations(model, batch.inputs)
    ce, dlogits = cross_entropy(logits, batch.labels)

    grad_w = [None] * model.n_layers
    grad_b = [None] * model.n_layers
    grad_adapters: list[tuple[np.ndarray, ...] | None] = [None] * model.n_layers

    g = dlogits
    for l in range(model.n_layers - 1, -1, -1):
        h_in = hiddens[l]
        grad_w[l] = g.T @ h_in
        grad_b[l] = g.sum(axis=0)
        gated = (
            model.gates_on
            and model.adapters is not None
            and model.adapters[l] is not None
        )
        if gated:
            spec = model.adapters[l]
            if spec.kind == "low_rank":
                grad_adapters[l] = (g.T @ (h_in @ spec.a.T), spec.b.T @ (g.T @ h_in))
            else:
                grad_adapters[l] = (g.T @ h_in,)
        if l > 0:
            dh = g @ model.weights[l]
            if gated:
                dh = dh + g @ model.adapters[l].effective_delta()
            g = dh * _activate_grad(hiddens[l], model.activation)

    pieces = []
    for l in range(model.n_layers):
        gw = grad_w[l]
        gb = grad_b[l]
        if weight_decay > 0:
            gw = gw + weight_decay * model.weights[l]
            gb = gb + weight_decay * model.biases[l]
        pieces.append(gw.ravel())
        pieces.append(gb)
    if model.adapters is not None:
        for l, spec in enumerate(model.adapters):
            if spec is None:
                continue
            ga = grad_adapters[l]
            if spec.kind == "low_rank":
                gb_, ga_ = ga if ga is not None else (np.zeros_like(spec.b), np.zeros_like(spec.a))
                if ga is not None and weight_decay > 0:
                    gb_ = gb_ + weight_decay * spec.b
                    ga_ = ga_ + weight_decay * spec.a
                pieces.append(gb_.ravel())
                pieces.append(ga_.ravel())
            else:
                gd_ = ga[0] if ga is not None else np.zeros_like(spec.delta)
                if ga is not None and weight_decay > 0:
                    gd_ = gd_ + weight_decay * spec.delta
                pieces.append(gd_.ravel())
    grad = np.concatenate(pieces) if pieces else np.zeros(0)

    loss = ce
    if weight_decay > 0:
        loss = ce + 0.5 * weight_decay * active_param_squares(model)
    return loss, grad, logits


def backward_from_features(
    model: Model, hiddens: list[np.ndarray], dfeatures: np.ndarray
) -> np.ndarray:
    """Backpropagate a gradient w.r.t. the penultimate activations.

    ``hiddens`` must come from :func:`forward_activations` on this model.
    Returns a flat gradient in :func:`param_vector` order; the output
    layer never influences the features, so its entries are zero.
    """
    if dfeatures.shape != hiddens[-1].shape:
        raise ShapeMismatchError("dfeatures must match the penultimate activations")
    grad_w = [np.zeros_like(w) for w in model.weights]
    grad_b = [np.zeros_like(b) for b in model.biases]
    grad_adapters: list[tuple[np.ndarray, ...] | None] = [None] * model.n_layers

    dh = dfeatures
    for l in range(model.n_layers - 2, -1, -1):
        g = dh * _activate_grad(hiddens[l + 1], model.activation)
        h_in = hiddens[l]
        grad_w[l] = g.T @ h_in
        grad_b[l] = g.sum(axis=0)
        gated = (
            model.gates_on
            and model.adapters is not None
            and model.adapters[l] is not None
        )
        if gated:
            spec = model.adapters[l]
            if spec.kind == "low_rank":
                grad_adapters[l] = (g.T @ (h_in @ spec.a.T), spec.b.T @ (g.T @ h_in))
            else:
                grad_adapters[l] = (g.T @ h_in,)
        if l > 0:
            dh = g @ model.weights[l]
            if gated:
                dh = dh + g @ model.adapters[l].effective_delta()

    pieces = []
    for l in range(model.n_layers):
        pieces.append(grad_w[l].ravel())
        pieces.append(grad_b[l])
    if model.adapters is not None:
        for l, spec in enumerate(model.adapters):
            if spec is None:
                continue
            ga = grad_adapters[l]
            if spec.kind == "low_rank":
                if ga is None:
                    pieces.append(np.zeros(spec.b.size))
                    pieces.append(np.zeros(spec.a.size))
                else:
                    pieces.append(ga[0].ravel())
                    pieces.append(ga[1].ravel())
            else:
                pieces.append(np.zeros(spec.delta.size) if ga is None else ga[0].ravel())
    return np.concatenate(pieces)


def attach_adapters(
    model: Model,
    spec: AdapterSpec,
    layers=None,
    seed: int | np.random.Generator = 0,
    init_scale: float = 0.01,
) -> Model:
    """Attach fresh adapters (template ``spec``) to the given layers.

    Low-rank factors start at B = 0 (so the effective delta is zero) with
    small random A; full residual deltas start at zero. The returned model
    has gates off, so its forward outputs equal the input model's exactly.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if layers is None:
        layers = range(model.n_layers)
    layers = sorted(set(int(l) for l in layers))
    if any(l < 0 or l >= model.n_layers for l in layers):
        raise AdapterSpecError(f"adapter layer indices out of range: {layers}")
    slots: list[AdapterSpec | None] = list(model.adapters or [None] * model.n_layers)
    for l in layers:
        out_d, in_d = model.layer_dims[l + 1], model.layer_dims[l]
        if spec.kind == "low_rank":
            if spec.rank >= min(in_d, out_d):
                raise AdapterSpecError(
                    f"rank {spec.rank} must be < min(in, out) = {min(in_d, out_d)} at layer {l}"
                )
            slots[l] = AdapterSpec(
                kind="low_rank",
                rank=spec.rank,
                b=np.zeros((out_d, spec.rank)),
                a=rng.normal(0.0, init_scale, size=(spec.rank, in_d)),
            )
        else:
            slots[l] = AdapterSpec(kind="full_residual", delta=np.zeros((out_d, in_d)))
    return replace(model, adapters=tuple(slots), gates_on=False)


def strip_adapters(model: Model) -> Model:
    """Drop all adapters and turn gates off."""
    return replace(model, adapters=None, gates_on=False)


def set_gates(model: Model, on: bool) -> Model:
    """Toggle the adapter gates; parameter values are untouched."""
    if on and not model.has_adapters:
        raise GateStateError("cannot enable gates: model has no adapters")
    return replace(model, gates_on=bool(on))


def base_param_count(model: Model) -> int:
    """Number of backbone (weight + bias) parameters, excluding adapters."""
    return sum(w.size for w in model.weights) + sum(b.size for b in model.biases)


def param_count(model: Model) -> int:
    total = base_param_count(model)
    if model.adapters is not None:
        total += sum(a.param_count() for a in model.adapters if a is not None)
    return total


def param_vector(model: Model) -> np.ndarray:
    """Flatten all parameters into one float64 vector (documented order)."""
    pieces = []
    for w, b in zip(model.weights, model.biases):
        pieces.append(w.ravel())
        pieces.append(b)
    if model.adapters is not None:
        for spec in model.adapters:
            if spec is None:
                continue
            if spec.kind == "low_rank":
                pieces.append(spec.b.ravel())
                pieces.append(spec.a.ravel())
            else:
                pieces.append(spec.delta.ravel())
    return np.concatenate(pieces) if pieces else np.zeros(0)


def unflatten(model: Model, vector: np.ndarray) -> Model:
    """Rebuild a model with the same structure from a flat parameter vector."""
    vector = np.asarray(vector, dtype=np.float64)
    expected = param_count(model)
    if vector.ndim != 1 or vector.size != expected:
        raise ShapeMismatchError(
            f"parameter vector length {vector.size} != expected {expected}"
        )
    pos = 0

    def take(shape):
        nonlocal pos
        size = int(np.prod(shape))
        out = vector[pos : pos + size].reshape(shape).copy()
        pos += size
        return out

    weights, biases = [], []
    for l in range(model.n_layers):
        weights.append(take((model.layer_dims[l + 1], model.layer_dims[l])))
        biases.append(take((model.layer_dims[l + 1],)))
    adapters = None
    if model.adapters is not None:
        slots = []
        for spec in model.adapters:
            if spec is None:
                slots.append(None)
            elif spec.kind == "low_rank":
                b = take(spec.b.shape)
                a = take(spec.a.shape)
                slots.append(AdapterSpec(kind="low_rank", rank=spec.rank, b=b, a=a))
            else:
                slots.append(AdapterSpec(kind="full_residual", delta=take(spec.delta.shape)))
        adapters = tuple(slots)
    return replace(model, weights=tuple(weights), biases=tuple(biases), adapters=adapters)


def active_mask(model: Model) -> np.ndarray:
    """1/0 mask over the flat vector marking forward-active parameters.

    Base parameters are always active; adapter parameters only while the
    gates are on. Mirrors :func:`active_param_squares`.
    """
    mask = np.ones(param_count(model))
    if not model.gates_on:
        mask[base_param_count(model) :] = 0.0
    return mask


def trainable_mask(model: Model, freeze_base: bool = False, freeze_head: bool = False) -> np.ndarray:
    """1/0 mask over the flat vector selecting trainable coordinates.

    ``freeze_base`` freezes every backbone layer except the last (the
    head); adapters are always trainable when present.
    """
    mask = np.ones(param_count(model))
    if freeze_base:
        offset = 0
        for l in range(model.n_layers):
            size = model.weights[l].size + model.biases[l].size
            if l < model.n_layers - 1:
                mask[offset : offset + size] = 0.0
            offset += size
    if freeze_head:
        offset = sum(
            model.weights[l].size + model.biases[l].size for l in range(model.n_layers - 1)
        )
        size = model.weights[-1].size + model.biases[-1].size
        mask[offset : offset + size] = 0.0
    return mask


def base_slice(model: Model) -> slice:
    """Slice of the flat vector holding all backbone weights and biases."""
    return slice(0, base_param_count(model))


def replace_head(model: Model, n_classes: int, seed: int | np.random.Generator = 0) -> Model:
    """Swap the output layer for a freshly initialised one of a new width.

    Any adapters are dropped: the result is a plain backbone plus head.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    in_d = model.feature_dim
    limit = np.sqrt(6.0 / (in_d + n_classes))
    weights = list(model.weights[:-1]) + [rng.uniform(-limit, limit, size=(n_classes, in_d))]
    biases = list(model.biases[:-1]) + [np.zeros(n_classes)]
    dims = model.layer_dims[:-1] + (int(n_classes),)
    return Model(dims, tuple(weights), tuple(biases), model.activation)


def gradient_check(
    model: Model, batch: Batch, step: float, weight_decay: float = 0.0
) -> float:
    """Max relative disagreement between analytic and central-difference grads.

    Relative error per coordinate is |analytic - numeric| divided by
    (|analytic| + |numeric| + 1e-12).
    """
    if step <= 0:
        raise ShapeMismatchError("step must be positive")
    _, grad, _ = forward_backward(model, batch, weight_decay)
    theta = param_vector(model)
    worst = 0.0
    for i in range(theta.size):
        bumped = theta.copy()
        bumped[i] = theta[i] + step
        lp, _, _ = forward_backward(unflatten(model, bumped), batch, weight_decay)
        bumped[i] = theta[i] - step
        lm, _, _ = forward_backward(unflatten(model, bumped), batch, weight_decay)
        numeric = (lp - lm) / (2.0 * step)
        rel = abs(grad[i] - numeric) / (abs(grad[i]) + abs(numeric) + 1e-12)
        worst = max(worst, rel)
    return worst
