"""
Residual multi-label classifier with spectral-normalized early layers.

    z_0 = P x + c                          (input projection, layer 1)
    h_l = h_{l-1} + relu(W_l h_{l-1} + b_l) (residual blocks, layers 2..B+1)
    f_i = heads_i . h_B                     (one logistic head per label)

The first `sn_layers` layers use W / sigma(W) in every forward pass during
training, sigma coming from a warm-started power iteration. `finalize()` bakes
the normalization into the stored weights before export.
"""

import json
import logging
import math
from collections import namedtuple
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import expit
from tqdm import tqdm

from backend.src.errors import (
    ConfigError,
    DegenerateMatrixError,
    DimensionError,
    ModelFormatError,
    TrainingDivergedError,
)
from backend.src.processing.spectral import (
    DEGENERATE_SIGMA,
    POLISH_STEPS,
    POLISH_TOL,
    PowerIterState,
    normalize_spectral,
    power_iteration,
)
from backend.src.seeding import make_rng

logger = logging.getLogger(__name__)

# === OPTIMIZER CONSTANTS ===
DEFAULT_LEARNING_RATE = 1e-4
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

# Model file format; bump on any incompatible layout change
FORMAT_VERSION = 1
MODEL_KIND = "snojoe.residual_classifier"

ForwardResult = namedtuple("ForwardResult", ["penultimate", "logits"])


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int
    num_labels: int
    hidden_dim: int = 64
    num_blocks: int = 3
    sn_layers: int = 0
    learning_rate: float = DEFAULT_LEARNING_RATE
    epochs: int = 20
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        for name in ("input_dim", "num_labels", "hidden_dim", "num_blocks", "epochs", "batch_size"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if int(self.sn_layers) != self.sn_layers or self.sn_layers < 0:
            raise ConfigError(f"sn_layers must be a nonnegative integer, got {self.sn_layers!r}")
        if self.sn_layers > self.num_blocks + 1:
            raise ConfigError(
                f"sn_layers={self.sn_layers} exceeds the {self.num_blocks + 1} normalizable layers "
                "(input projection + residual blocks)"
            )
        if not (math.isfinite(self.learning_rate) and self.learning_rate > 0):
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate!r}")
        if not (0 <= int(self.seed) < 2**64):
            raise ConfigError(f"seed must be an unsigned 64-bit integer, got {self.seed!r}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)


def layer_names(config):
    """Normalizable layers in order: input projection first, then the blocks."""
    return ["input_proj"] + [f"block{i}" for i in range(config.num_blocks)]


class ResidualClassifier:
    """
    Parameters live in `params` (name -> float64 array):
    `input_proj.weight` (hidden x input), `input_proj.bias`,
    `block{i}.weight` (hidden x hidden), `block{i}.bias`, `heads.weight` (K x hidden).
    """

    def __init__(self, config, params, sn_state=None, finalized=False):
        self.config = config
        self.params = params
        self.sn_state = dict(sn_state or {})
        self.finalized = bool(finalized)
        self._check_shapes()

    # --- CONSTRUCTION ---
    @classmethod
    def initialize(cls, config):
        rng = make_rng(config.seed, "init")
        d, h, k = config.input_dim, config.hidden_dim, config.num_labels
        params = {
            "input_proj.weight": rng.standard_normal((h, d)) * math.sqrt(2.0 / d),
            "input_proj.bias": np.zeros(h),
        }
        for i in range(config.num_blocks):
            params[f"block{i}.weight"] = rng.standard_normal((h, h)) / math.sqrt(h)
            params[f"block{i}.bias"] = np.zeros(h)
        params["heads.weight"] = rng.standard_normal((k, h)) / math.sqrt(h)

        sn_state = {}
        for layer in layer_names(config)[: config.sn_layers]:
            rows, cols = params[f"{layer}.weight"].shape
            sn_state[layer] = PowerIterState.initial(rows, cols, rng)
        return cls(config, params, sn_state)

    def _check_shapes(self):
        c = self.config
        expected = {
            "input_proj.weight": (c.hidden_dim, c.input_dim),
            "input_proj.bias": (c.hidden_dim,),
            "heads.weight": (c.num_labels, c.hidden_dim),
        }
        for i in range(c.num_blocks):
            expected[f"block{i}.weight"] = (c.hidden_dim, c.hidden_dim)
            expected[f"block{i}.bias"] = (c.hidden_dim,)
        if set(self.params) != set(expected):
            raise DimensionError(f"parameter set mismatch: {sorted(set(self.params) ^ set(expected))}")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise DimensionError(f"{name} has shape {self.params[name].shape}, expected {shape}")
        if set(self.sn_state) != set(self.normalized_layers):
            raise DimensionError("power iteration state does not match the normalized layers")

    @property
    def layers(self):
        return layer_names(self.config)

    @property
    def normalized_layers(self):
        return self.layers[: self.config.sn_layers]

    # --- SPECTRAL NORMALIZATION ---
    def _effective_weight(self, layer):
        """(weight used in the forward pass, sigma it was divided by or None)."""
        W = self.params[f"{layer}.weight"]
        if self.finalized or layer not in self.sn_state:
            return W, None
        state = self.sn_state[layer]
        sigma = float(state.u @ W @ state.v)
        if sigma < DEGENERATE_SIGMA:
            raise DegenerateMatrixError(f"degenerate weight matrix in {layer}: sigma={sigma:.3e}")
        return W / sigma, sigma

    def refine_spectral_state(self, steps=1, tol=POLISH_TOL):
        for layer in self.normalized_layers:
            W = self.params[f"{layer}.weight"]
            self.sn_state[layer] = power_iteration(W, self.sn_state[layer], steps=steps, tol=tol)

    def finalize(self, steps=POLISH_STEPS, tol=POLISH_TOL):
        """Polish sigma and store W / sigma for every normalized layer."""
        if self.finalized:
            return self
        self.refine_spectral_state(steps=steps, tol=tol)
        for layer in self.normalized_layers:
            key = f"{layer}.weight"
            self.params[key] = normalize_spectral(self.params[key], self.sn_state[layer].sigma_estimate)
        self.finalized = True
        return self

    # --- FORWARD ---
    def _as_batch(self, X):
        X = np.asarray(X, dtype=np.float64)
        single = X.ndim == 1
        if single:
            X = X[None, :]
        if X.ndim != 2 or X.shape[1] != self.config.input_dim:
            raise DimensionError(
                f"expected inputs with {self.config.input_dim} features, got shape {np.shape(X)}"
            )
        return X, single

    def _forward(self, X):
        weights = {layer: self._effective_weight(layer) for layer in self.layers}
        P, _ = weights["input_proj"]
        h = X @ P.T + self.params["input_proj.bias"]
        block_inputs, block_pre = [], []
        for i, layer in enumerate(self.layers[1:]):
            W, _ = weights[layer]
            z = h @ W.T + self.params[f"block{i}.bias"]
            block_inputs.append(h)
            block_pre.append(z)
            h = h + np.maximum(z, 0.0)
        logits = h @ self.params["heads.weight"].T
        return {
            "X": X,
            "weights": weights,
            "block_inputs": block_inputs,
            "block_pre": block_pre,
            "penultimate": h,
            "logits": logits,
        }

    def forward(self, X):
        X, single = self._as_batch(X)
        cache = self._forward(X)
        if single:
            return ForwardResult(cache["penultimate"][0], cache["logits"][0])
        return ForwardResult(cache["penultimate"], cache["logits"])

    def __call__(self, X):
        return self.forward(X).logits

    # --- BACKWARD ---
    def _backward(self, cache, dlogits):
        grads = {}
        h_final = cache["penultimate"]
        grads["heads.weight"] = dlogits.T @ h_final
        dh = dlogits @ self.params["heads.weight"]

        weight_grads = {}
        for i in reversed(range(self.config.num_blocks)):
            layer = f"block{i}"
            W_eff, _ = cache["weights"][layer]
            dz = dh * (cache["block_pre"][i] > 0)
            weight_grads[layer] = dz.T @ cache["block_inputs"][i]
            grads[f"{layer}.bias"] = dz.sum(axis=0)
            dh = dh + dz @ W_eff

        P_eff, _ = cache["weights"]["input_proj"]
        weight_grads["input_proj"] = dh.T @ cache["X"]
        grads["input_proj.bias"] = dh.sum(axis=0)
        dX = dh @ P_eff

        # d(W/sigma)/dW with sigma = u^T W v and (u, v) held fixed
        for layer, dW_eff in weight_grads.items():
            W_eff, sigma = cache["weights"][layer]
            if sigma is None:
                grads[f"{layer}.weight"] = dW_eff
            else:
                state = self.sn_state[layer]
                coupling = float(np.sum(dW_eff * W_eff))
                grads[f"{layer}.weight"] = (dW_eff - coupling * np.outer(state.u, state.v)) / sigma
        return grads, dX

    def loss(self, X, Y):
        """Mean over samples of the per-label binary cross-entropy summed over labels."""
        X, _ = self._as_batch(X)
        logits = self._forward(X)["logits"]
        return _bce_sum(logits, np.asarray(Y, dtype=np.float64))

    def loss_and_gradients(self, X, Y):
        X, _ = self._as_batch(X)
        Y = np.asarray(Y, dtype=np.float64)
        if Y.shape != (X.shape[0], self.config.num_labels):
            raise DimensionError(f"labels have shape {Y.shape}, expected {(X.shape[0], self.config.num_labels)}")
        cache = self._forward(X)
        logits = cache["logits"]
        loss = _bce_sum(logits, Y)
        dlogits = (expit(logits) - Y) / X.shape[0]
        grads, _ = self._backward(cache, dlogits)
        return loss, grads

    def input_gradient(self, X, dlogits):
        """Gradient of sum(dlogits * logits) with respect to the inputs."""
        X, single = self._as_batch(X)
        dlogits = np.atleast_2d(np.asarray(dlogits, dtype=np.float64))
        if dlogits.shape != (X.shape[0], self.config.num_labels):
            raise DimensionError(f"dlogits shape {dlogits.shape} does not match the batch")
        _, dX = self._backward(self._forward(X), dlogits)
        return dX[0] if single else dX


def _bce_sum(logits, Y):
    # softplus(f) - y f is BCE(sigmoid(f), y) without overflow
    per_sample = np.sum(np.logaddexp(0.0, logits) - Y * logits, axis=1)
    return float(np.mean(per_sample))


def predict_proba(logits):
    """Label-wise logistic probabilities e^f / (1 + e^f)."""
    return expit(np.asarray(logits, dtype=np.float64))


def measure_block_lipschitz(model, X, X_prime):
    """
    Per-block empirical Lipschitz ratio of g_l over the given input pairs.

    For block l the ratio is taken between the activations entering the block,
    so the product of (1 + ratio) bounds the growth of every sampled pair.
    """
    X, _ = model._as_batch(X)
    X_prime, _ = model._as_batch(X_prime)
    if X.shape != X_prime.shape:
        raise DimensionError("input pair arrays must have the same shape")
    a_cache, b_cache = model._forward(X), model._forward(X_prime)
    ratios = np.zeros(model.config.num_blocks)
    for i in range(model.config.num_blocks):
        a, b = a_cache["block_inputs"][i], b_cache["block_inputs"][i]
        g_a = np.maximum(a_cache["block_pre"][i], 0.0)
        g_b = np.maximum(b_cache["block_pre"][i], 0.0)
        dist_in = np.linalg.norm(a - b, axis=1)
        dist_out = np.linalg.norm(g_a - g_b, axis=1)
        keep = dist_in > 0
        if np.any(keep):
            ratios[i] = float(np.max(dist_out[keep] / dist_in[keep]))
    return ratios


# === TRAINING ===
class AdamOptimizer:
    """Plain Adam, no weight decay, no schedule."""

    def __init__(self, params, learning_rate):
        self.learning_rate = learning_rate
        self.t = 0
        self.m = {name: np.zeros_like(p) for name, p in params.items()}
        self.v = {name: np.zeros_like(p) for name, p in params.items()}

    def step(self, params, grads):
        self.t += 1
        correction1 = 1.0 - ADAM_BETA1**self.t
        correction2 = 1.0 - ADAM_BETA2**self.t
        for name, grad in grads.items():
            self.m[name] = ADAM_BETA1 * self.m[name] + (1.0 - ADAM_BETA1) * grad
            self.v[name] = ADAM_BETA2 * self.v[name] + (1.0 - ADAM_BETA2) * grad * grad
            m_hat = self.m[name] / correction1
            v_hat = self.v[name] / correction2
            params[name] -= self.learning_rate * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


class Trainer:
    """
    Mini-batch Adam on the summed per-label BCE.

    Before each update the normalized layers get one power-iteration step, so
    sigma tracks the weights as they move.
    """

    def __init__(self, config, progress=False):
        self.config = config
        self.progress = progress
        self.epoch_losses = []

    def fit(self, features, labels):
        X = np.asarray(features, dtype=np.float64)
        Y = np.asarray(labels, dtype=np.float64)
        if X.ndim != 2 or X.shape[0] == 0:
            raise ConfigError("cannot train on an empty dataset")
        if Y.shape != (X.shape[0], self.config.num_labels):
            raise DimensionError(f"labels have shape {Y.shape}, expected {(X.shape[0], self.config.num_labels)}")
        if not np.all((Y == 0) | (Y == 1)):
            raise ConfigError("labels must be multi-hot {0, 1} vectors")
        missing = np.flatnonzero(Y.sum(axis=0) == 0)
        if missing.size:
            logger.warning("[WARNING] labels %s never occur in the training set", missing.tolist())

        model = ResidualClassifier.initialize(self.config)
        optimizer = AdamOptimizer(model.params, self.config.learning_rate)
        rng = make_rng(self.config.seed, "shuffle")
        n, batch = X.shape[0], self.config.batch_size
        logger.info(
            "Training %d samples, %d blocks, sn_layers=%d, %d epochs",
            n, self.config.num_blocks, self.config.sn_layers, self.config.epochs,
        )

        self.epoch_losses = []
        epochs = tqdm(range(self.config.epochs), desc="training", unit="epoch", disable=not self.progress)
        for epoch in epochs:
            order = rng.permutation(n)
            total = 0.0
            for step, start in enumerate(range(0, n, batch)):
                idx = order[start:start + batch]
                model.refine_spectral_state(steps=1)
                loss, grads = model.loss_and_gradients(X[idx], Y[idx])
                if not math.isfinite(loss):
                    raise TrainingDivergedError(
                        f"loss became {loss} at epoch {epoch + 1}, step {step + 1} "
                        f"(learning_rate={self.config.learning_rate})"
                    )
                optimizer.step(model.params, grads)
                total += loss * len(idx)
            epoch_loss = total / n
            self.epoch_losses.append(epoch_loss)
            epochs.set_postfix(loss=f"{epoch_loss:.4f}")
            logger.debug("epoch %d loss %.6f", epoch + 1, epoch_loss)

        model.finalize()
        return model


def train(dataset, config, progress=False):
    """Train and finalize a classifier on `dataset.features` / `dataset.labels`."""
    return Trainer(config, progress=progress).fit(dataset.features, dataset.labels)


# === PERSISTENCE ===
def _hex_array(arr):
    arr = np.asarray(arr, dtype=np.float64)
    return {"shape": list(arr.shape), "data": [x.hex() for x in arr.ravel().tolist()]}


def _from_hex_array(doc):
    shape = tuple(int(s) for s in doc["shape"])
    data = np.array([float.fromhex(x) for x in doc["data"]], dtype=np.float64)
    return data.reshape(shape)


def model_to_text(model):
    doc = {
        "format_version": FORMAT_VERSION,
        "kind": MODEL_KIND,
        "config": model.config.to_dict(),
        "finalized": model.finalized,
        "params": {name: _hex_array(p) for name, p in model.params.items()},
        "sn_state": {
            layer: {
                "u": _hex_array(state.u),
                "v": _hex_array(state.v),
                "sigma_estimate": float(state.sigma_estimate).hex(),
            }
            for layer, state in model.sn_state.items()
        },
    }
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"


def model_from_text(text):
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ModelFormatError(f"corrupt model file: {e}") from e
    if not isinstance(doc, dict) or "format_version" not in doc:
        raise ModelFormatError("corrupt model file: missing format_version")
    version = doc["format_version"]
    if not isinstance(version, int):
        raise ModelFormatError(f"corrupt model file: format_version {version!r} is not an integer")
    if version > FORMAT_VERSION:
        raise ModelFormatError(
            f"model file format_version {version} is newer than the supported version {FORMAT_VERSION}"
        )
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported model file format_version {version}")
    if doc.get("kind") != MODEL_KIND:
        raise ModelFormatError(f"not a model file (kind={doc.get('kind')!r})")
    try:
        config = ModelConfig.from_dict(doc["config"])
        params = {name: _from_hex_array(arr) for name, arr in doc["params"].items()}
        sn_state = {
            layer: PowerIterState(
                u=_from_hex_array(s["u"]),
                v=_from_hex_array(s["v"]),
                sigma_estimate=float.fromhex(s["sigma_estimate"]),
            )
            for layer, s in doc["sn_state"].items()
        }
        return ResidualClassifier(config, params, sn_state, finalized=doc["finalized"])
    except (KeyError, TypeError, ValueError, AttributeError) as e:
        raise ModelFormatError(f"corrupt model file: {e}") from e


def save_model(model, path):
    text = model_to_text(model)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)
    logger.info("Saved model to %s", path)


def load_model(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except FileNotFoundError as e:
        raise ModelFormatError(f"model file not found: {path}") from e
    return model_from_text(text)
