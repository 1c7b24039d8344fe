"""The neural classifiers as declarative layer lists, plus training loops.

A ``ModelSpec`` lists layers; ``Network`` allocates parameters for a spec and
runs it on top of ``tensor_engine``.  Dense and conv layers carry their
activation (and, for dense, a trailing dropout rate) so the initialiser can
match the non-linearity.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import tensor_engine as te
from .classical_ml import MetricsReport, compute_metrics, threshold_predictions
from .errors import BatchTooSmall, InputTooSmall, ShapeMismatch
from .tensor_engine.init import init_weight
from .tensor_engine.ops import conv3d_output_shape, pool_output_shape
from .volume_ops import ROTATION_ANGLES, rotate_axial_array

KERNEL = 3
POOL = 2


@dataclass(frozen=True)
class Layer:
    kind: str  # dense | conv3d | maxpool3d | batchnorm | flatten
    size: int = 0  # units, filters or pool window
    activation: str | None = None
    dropout: float = 0.0


@dataclass
class ModelSpec:
    kind: str  # vanilla | sae | latent_classifier | cnn3d
    input_shape: tuple[int, ...]
    layers: list[Layer]
    seed: int = 0
    latent_index: int | None = None
    l1_coefficient: float = 0.0

    def output_shapes(self) -> list[tuple[int, ...]]:
        """Per-sample output shape after every layer; raises on a broken chain."""
        shape = tuple(self.input_shape)
        shapes = []
        for i, layer in enumerate(self.layers):
            if layer.kind == "dense":
                if len(shape) != 1:
                    raise ShapeMismatch(f"layer {i}: dense needs a flat input, got {shape}")
                shape = (layer.size,)
            elif layer.kind == "conv3d":
                if len(shape) != 4:
                    raise ShapeMismatch(f"layer {i}: conv3d needs (C, D, H, W), got {shape}")
                spatial = conv3d_output_shape(shape[1:], KERNEL)
                if min(spatial) < 1:
                    raise InputTooSmall(f"layer {i}: {shape[1:]} too small for a {KERNEL}^3 kernel")
                shape = (layer.size, *spatial)
            elif layer.kind == "maxpool3d":
                spatial = pool_output_shape(shape[1:], layer.size)
                if len(shape) != 4 or min(spatial) < 1:
                    raise InputTooSmall(f"layer {i}: cannot pool {shape}")
                shape = (shape[0], *spatial)
            elif layer.kind == "batchnorm":
                if len(shape) not in (1, 4):
                    raise ShapeMismatch(f"layer {i}: batchnorm on {shape}")
            elif layer.kind == "flatten":
                shape = (math.prod(shape),)
            else:
                raise ValueError(f"unknown layer kind {layer.kind!r}")
            shapes.append(shape)
        return shapes

    def stage_shapes(self) -> list[tuple[int, ...]]:
        """Spatial extents after each conv and each pool."""
        return [s[1:] for s, l in zip(self.output_shapes(), self.layers) if l.kind in ("conv3d", "maxpool3d")]

    def flatten_size(self) -> int:
        for s, l in zip(self.output_shapes(), self.layers):
            if l.kind == "flatten":
                return s[0]
        raise ValueError("spec has no flatten layer")

    def widths(self) -> list[int]:
        """Input width followed by every dense layer's width."""
        out = [math.prod(self.input_shape)] if len(self.input_shape) == 1 else []
        return out + [l.size for l in self.layers if l.kind == "dense"]

    @property
    def has_batchnorm(self) -> bool:
        return any(l.kind == "batchnorm" for l in self.layers)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        d["input_shape"] = tuple(d["input_shape"])
        d["layers"] = [Layer(**l) for l in d["layers"]]
        return cls(**d)


def _dense_stack(widths: Sequence[int], activation: str, dropout: float) -> list[Layer]:
    return [Layer("dense", w, activation, dropout) for w in widths]


def build_vanilla(seed: int = 0, input_dim: int = 9216, hidden: Sequence[int] = (213, 106, 53, 28), dropout: float = 0.3) -> ModelSpec:
    layers = _dense_stack(hidden, "relu", dropout) + [Layer("dense", 1, "sigmoid")]
    return ModelSpec("vanilla", (input_dim,), layers, seed)


def sae_widths(input_dim: int) -> tuple[tuple[int, int], int]:
    """Encoder widths at the 9:4:2:1 ratio (4096, 2048, 1024 for 9216 inputs)."""
    return (max(1, round(input_dim * 4 / 9)), max(1, round(input_dim * 2 / 9))), max(1, round(input_dim / 9))


def build_sae(
    seed: int = 0,
    input_dim: int = 9216,
    hidden: Sequence[int] | None = None,
    latent: int | None = None,
    l1_coefficient: float = 0.001,
) -> ModelSpec:
    default_hidden, default_latent = sae_widths(input_dim)
    hidden = default_hidden if hidden is None else hidden
    latent = default_latent if latent is None else latent
    encoder = _dense_stack([*hidden, latent], "selu", 0.0)
    decoder = _dense_stack(list(reversed(hidden)), "selu", 0.0) + [Layer("dense", input_dim, None)]
    return ModelSpec("sae", (input_dim,), encoder + decoder, seed, latent_index=len(encoder), l1_coefficient=l1_coefficient)


def build_latent_classifier(
    seed: int = 0, latent_dim: int = 1024, hidden: Sequence[int] = (512, 128, 64, 32), dropout: float = 0.3
) -> ModelSpec:
    layers = _dense_stack(hidden, "relu", dropout) + [Layer("dense", 1, "sigmoid")]
    return ModelSpec("latent_classifier", (latent_dim,), layers, seed)


def build_cnn3d(
    seed: int = 0,
    input_shape: Sequence[int] = (61, 73, 61),
    filters: Sequence[int] = (64, 128, 256),
    dense_units: int = 512,
    dropout: float = 0.3,
) -> ModelSpec:
    layers: list[Layer] = []
    for f in filters:
        layers += [Layer("conv3d", f, "relu"), Layer("maxpool3d", POOL), Layer("batchnorm")]
    layers += [Layer("flatten"), Layer("dense", dense_units, "relu", dropout), Layer("dense", 1, "sigmoid")]
    spec = ModelSpec("cnn3d", (1, *input_shape), layers, seed)
    spec.output_shapes()
    return spec


class Network:
    """Parameters and forward pass for a ``ModelSpec``."""

    def __init__(self, spec: ModelSpec):
        self.spec = spec
        shapes = spec.output_shapes()
        rng = np.random.default_rng(spec.seed)
        self.params: dict[str, te.Tensor] = {}
        self.bn_states: dict[int, te.BatchNormState] = {}
        prev = tuple(spec.input_shape)
        for i, (layer, shape) in enumerate(zip(spec.layers, shapes)):
            if layer.kind == "dense":
                fan_in = prev[0]
                w = init_weight(rng, (fan_in, layer.size), fan_in, layer.size, layer.activation)
                self.params[f"{i}.weight"] = te.parameter(w)
                self.params[f"{i}.bias"] = te.parameter(np.zeros(layer.size))
            elif layer.kind == "conv3d":
                fan_in = prev[0] * KERNEL**3
                kshape = (layer.size, prev[0], KERNEL, KERNEL, KERNEL)
                w = init_weight(rng, kshape, fan_in, layer.size * KERNEL**3, layer.activation)
                self.params[f"{i}.weight"] = te.parameter(w)
                self.params[f"{i}.bias"] = te.parameter(np.zeros(layer.size))
            elif layer.kind == "batchnorm":
                features = prev[0]
                self.params[f"{i}.gamma"] = te.parameter(np.ones(features))
                self.params[f"{i}.beta"] = te.parameter(np.zeros(features))
                self.bn_states[i] = te.BatchNormState.create(features)
            prev = shape

    def param_count(self, layer_index: int | None = None) -> int:
        prefix = None if layer_index is None else f"{layer_index}."
        return sum(t.values.size for n, t in self.params.items() if prefix is None or n.startswith(prefix))

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {n: t.values for n, t in self.params.items()}
        for i, st in self.bn_states.items():
            out[f"{i}.running_mean"] = st.running_mean
            out[f"{i}.running_var"] = st.running_var
        return out

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        for name, t in self.params.items():
            if name not in state:
                if strict:
                    raise ShapeMismatch(f"checkpoint lacks {name}")
                continue
            if state[name].shape != t.shape:
                raise ShapeMismatch(f"{name}: checkpoint {state[name].shape} vs model {t.shape}")
            t.values = np.array(state[name], dtype=np.float64)
        for i, st in self.bn_states.items():
            if f"{i}.running_mean" in state:
                st.running_mean = np.array(state[f"{i}.running_mean"], dtype=np.float64)
                st.running_var = np.array(state[f"{i}.running_var"], dtype=np.float64)

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def forward(
        self,
        x,
        mode: str = "eval",
        rng: np.random.Generator | None = None,
        stop: int | None = None,
        return_latent: bool = False,
    ):
        """Run layers ``[0, stop)`` on a batch.

        With ``return_latent`` the output of the encoder (``latent_index``
        layers) is returned alongside the final output.
        """
        h = te.Tensor(x) if not isinstance(x, te.Tensor) else x
        if tuple(h.shape[1:]) != tuple(self.spec.input_shape):
            raise ShapeMismatch(f"input {tuple(h.shape[1:])} does not match model input {tuple(self.spec.input_shape)}")
        latent = None
        layers = self.spec.layers if stop is None else self.spec.layers[:stop]
        for i, layer in enumerate(layers):
            if layer.kind == "dense":
                h = te.dense(h, self.params[f"{i}.weight"], self.params[f"{i}.bias"])
                if layer.activation:
                    h = te.activation(h, layer.activation)
                if layer.dropout:
                    h = te.dropout(h, layer.dropout, mode, rng)
            elif layer.kind == "conv3d":
                h = te.conv3d(h, self.params[f"{i}.weight"], self.params[f"{i}.bias"])
                if layer.activation:
                    h = te.activation(h, layer.activation)
            elif layer.kind == "maxpool3d":
                h = te.maxpool3d(h, layer.size)
            elif layer.kind == "batchnorm":
                h = te.batchnorm(h, self.params[f"{i}.gamma"], self.params[f"{i}.beta"], self.bn_states[i], mode)
            elif layer.kind == "flatten":
                h = te.flatten(h)
            if self.spec.latent_index is not None and i + 1 == self.spec.latent_index:
                latent = h
        return (h, latent) if return_latent else h

    def predict_batches(self, X: np.ndarray, batch_size: int = 32, stop: int | None = None) -> np.ndarray:
        outs = []
        with te.no_grad():
            for start in range(0, X.shape[0], batch_size):
                outs.append(self.forward(X[start : start + batch_size], "eval", stop=stop).values)
        return np.concatenate(outs, axis=0)

    def predict_proba(self, X: np.ndarray, batch_size: int = 32) -> np.ndarray:
        return self.predict_batches(np.asarray(X, dtype=np.float64), batch_size)[:, 0]

    def encode(self, X: np.ndarray, batch_size: int = 32) -> np.ndarray:
        if self.spec.latent_index is None:
            raise ValueError("model has no encoder")
        return self.predict_batches(np.asarray(X, dtype=np.float64), batch_size, stop=self.spec.latent_index)


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    optimizer: str = "adam"
    learning_rate: float = 0.001
    l1_coefficient: float | None = None  # None: take the spec's coefficient
    augment: bool = False
    augment_every_epoch: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def echo(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    network: Network
    history: list[float]
    val_history: list[float] = field(default_factory=list)

    @property
    def params(self) -> dict[str, np.ndarray]:
        return self.network.state_dict()


def _batches(perm: np.ndarray, batch_size: int, min_size: int) -> list[np.ndarray]:
    out = [perm[i : i + batch_size] for i in range(0, perm.size, batch_size)]
    # fold an undersized trailing batch into its predecessor
    if len(out) > 1 and out[-1].size < min_size:
        tail = out.pop()
        out[-1] = np.concatenate([out[-1], tail])
    return out


def _rotate_batch(xb: np.ndarray, angles: Sequence[float]) -> np.ndarray:
    out = np.empty_like(xb)
    for b, angle in enumerate(angles):
        # (C, X, Y, Z) -> rotate the X-Y plane of every channel
        out[b] = np.moveaxis(rotate_axial_array(np.moveaxis(xb[b], 0, -1), angle), -1, 0)
    return out


def _objective(net: Network, xb: np.ndarray, yb, mode: str, rng, l1: float) -> te.Tensor:
    if net.spec.kind == "sae":
        out, latent = net.forward(xb, mode, rng, return_latent=True)
        loss = te.mse_loss(out, xb)
        if l1:
            # per-sample sum of |latent|, averaged over the batch
            loss = loss + te.l1_penalty(latent, l1 / xb.shape[0])
        return loss
    return te.bce_loss(net.forward(xb, mode, rng), yb)


def train(
    spec: ModelSpec,
    features: np.ndarray,
    labels: np.ndarray | None,
    cfg: TrainConfig,
    init_state: dict[str, np.ndarray] | None = None,
    validation: tuple[np.ndarray, np.ndarray | None] | None = None,
) -> TrainResult:
    """Mini-batch training; every random draw derives from ``cfg.seed``.

    Classifiers minimise binary cross-entropy, the autoencoder minimises
    reconstruction MSE plus the L1 latent penalty.
    """
    X = np.asarray(features, dtype=np.float64)
    if X.shape[0] == 0:
        raise ShapeMismatch("no training samples")
    if tuple(X.shape[1:]) != tuple(spec.input_shape):
        raise ShapeMismatch(f"features {X.shape[1:]} do not match model input {spec.input_shape}")
    y = None if labels is None else np.asarray(labels, dtype=np.float64)
    if spec.kind != "sae" and (y is None or y.shape[0] != X.shape[0]):
        raise ShapeMismatch("classifier training needs one label per sample")
    min_batch = 2 if spec.has_batchnorm else 1
    if spec.has_batchnorm and (cfg.batch_size < 2 or X.shape[0] < 2):
        raise BatchTooSmall("batch norm needs batches of at least two samples")

    net = Network(spec)
    if init_state is not None:
        net.load_state_dict(init_state, strict=False)
    l1 = spec.l1_coefficient if cfg.l1_coefficient is None else cfg.l1_coefficient
    state = te.OptimizerState(cfg.optimizer, cfg.learning_rate)
    shuffle_seq, dropout_seq, aug_seq = np.random.SeedSequence(cfg.seed).spawn(3)
    shuffle_rng = np.random.default_rng(shuffle_seq)
    dropout_rng = np.random.default_rng(dropout_seq)
    aug_rng = np.random.default_rng(aug_seq)
    fixed_angles = None
    if cfg.augment and not cfg.augment_every_epoch:
        fixed_angles = aug_rng.choice(ROTATION_ANGLES, size=X.shape[0])

    history: list[float] = []
    val_history: list[float] = []
    for _ in range(cfg.epochs):
        perm = shuffle_rng.permutation(X.shape[0])
        total = 0.0
        for idx in _batches(perm, cfg.batch_size, min_batch):
            xb = X[idx]
            if cfg.augment:
                angles = fixed_angles[idx] if fixed_angles is not None else aug_rng.choice(ROTATION_ANGLES, size=idx.size)
                xb = _rotate_batch(xb, angles)
            yb = None if y is None else y[idx]
            net.zero_grad()
            loss = _objective(net, xb, yb, "train", dropout_rng, l1)
            loss.backward()
            values = {n: t.values for n, t in net.params.items()}
            grads = {n: t.grad for n, t in net.params.items()}
            te.optimizer_step(values, grads, state)
            total += loss.item() * idx.size
        history.append(total / X.shape[0])
        if validation is not None:
            val_history.append(eval_loss(net, validation[0], validation[1], l1))
    net.zero_grad()
    return TrainResult(net, history, val_history)


def eval_loss(net: Network, features: np.ndarray, labels, l1: float = 0.0) -> float:
    X = np.asarray(features, dtype=np.float64)
    with te.no_grad():
        return _objective(net, X, labels, "eval", None, l1).item()


def evaluate(net: Network, features: np.ndarray, labels: np.ndarray) -> MetricsReport:
    """Eval-mode forward, threshold 0.5 (ties positive), confusion metrics."""
    proba = net.predict_proba(features)
    return compute_metrics(threshold_predictions(proba), labels)


@dataclass
class SaeClassifier:
    """Autoencoder whose encoder feeds a separately trained classifier."""

    autoencoder: Network
    classifier: Network
    sae_history: list[float]
    clf_history: list[float]
    finetuned: bool = False

    def predict_proba(self, features: np.ndarray) -> np.ndarray:
        if self.finetuned:
            return self.classifier.predict_proba(features)
        return self.classifier.predict_proba(self.autoencoder.encode(features))


def fit_sae_classifier(
    features: np.ndarray,
    labels: np.ndarray,
    sae_spec: ModelSpec,
    clf_spec: ModelSpec,
    sae_cfg: TrainConfig,
    clf_cfg: TrainConfig,
    finetune_encoder: bool = False,
) -> SaeClassifier:
    """Stage 1 fits the autoencoder; stage 2 fits the classifier on its codes.

    By default the encoder is frozen in stage 2.  ``finetune_encoder`` trains
    encoder and classifier jointly, starting from the stage-1 encoder.
    """
    if clf_spec.input_shape != (sae_spec.layers[sae_spec.latent_index - 1].size,):
        raise ShapeMismatch("classifier input must equal the latent width")
    stage1 = train(sae_spec, features, None, sae_cfg)
    if not finetune_encoder:
        codes = stage1.network.encode(features)
        stage2 = train(clf_spec, codes, labels, clf_cfg)
        return SaeClassifier(stage1.network, stage2.network, stage1.history, stage2.history)

    k = sae_spec.latent_index
    joint = ModelSpec(
        "latent_classifier",
        sae_spec.input_shape,
        list(sae_spec.layers[:k]) + list(clf_spec.layers),
        clf_spec.seed,
    )
    head = Network(clf_spec).state_dict()
    init = {n: v for n, v in stage1.network.state_dict().items() if int(n.split(".")[0]) < k}
    for name, v in head.items():
        i, rest = name.split(".", 1)
        init[f"{int(i) + k}.{rest}"] = v
    stage2 = train(joint, features, labels, clf_cfg, init_state=init)
    return SaeClassifier(stage1.network, stage2.network, stage1.history, stage2.history, finetuned=True)


def spec_replace(spec: ModelSpec, **changes) -> ModelSpec:
    return replace(spec, **changes)
