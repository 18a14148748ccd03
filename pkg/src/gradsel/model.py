"""Small dense classifiers with per-sample margins, losses, and exact gradients.

Everything runs in float64 and is deterministic given (config, seed). Margins
follow the logistic-margin convention: a binary head emits a raw logit h, a
multi-class head reports h = log(p_y / (1 - p_y)) for the labeled class, and a
multi-position head averages per-position multi-class margins. Under that
convention the log-loss log(1 + exp(-y h)) coincides with cross-entropy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# A ParamVector is a flat 1-D float64 array of length Network.param_count.
ParamVector = np.ndarray

ACTIVATIONS = ("tanh", "relu")


class DimensionMismatchError(ValueError):
    """Raised when a parameter or feature vector has the wrong length."""


@dataclass(frozen=True)
class ModelConfig:
    """Architecture and initialization of a small MLP classifier.

    num_classes == 2 with a single output position means a scalar logit head;
    otherwise the head has num_positions blocks of num_classes logits each.
    """

    input_dim: int
    hidden_dims: tuple[int, ...] = ()
    activation: str = "tanh"
    num_classes: int = 2
    num_positions: int = 1
    init_scale: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.input_dim < 1:
            raise ValueError("input_dim must be positive")
        if any(h < 1 for h in self.hidden_dims):
            raise ValueError("hidden_dims must be positive")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.num_positions < 1:
            raise ValueError("num_positions must be >= 1")
        if self.init_scale < 0:
            raise ValueError("init_scale must be non-negative")
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))

    @property
    def is_binary(self) -> bool:
        return self.num_classes == 2 and self.num_positions == 1

    @property
    def output_units(self) -> int:
        if self.is_binary:
            return 1
        return self.num_positions * self.num_classes

    @property
    def param_count(self) -> int:
        dims = (self.input_dim, *self.hidden_dims, self.output_units)
        return sum((din + 1) * dout for din, dout in zip(dims[:-1], dims[1:]))


@dataclass(frozen=True, eq=False)
class Sample:
    """One labeled example. position_labels is set for multi-position samples."""

    features: np.ndarray
    label: int
    task_id: int
    position_labels: tuple[int, ...] | None = None

    def __post_init__(self):
        object.__setattr__(
            self, "features", np.ascontiguousarray(self.features, dtype=np.float64)
        )
        if self.position_labels is not None:
            object.__setattr__(
                self, "position_labels", tuple(int(v) for v in self.position_labels)
            )


def stack_samples(samples: list[Sample]) -> tuple[np.ndarray, np.ndarray]:
    """Pack a homogeneous sample list into (features (N,D), labels).

    Labels are (N,) class indices, or (N, L) position labels when the samples
    carry position_labels.
    """
    if not samples:
        raise ValueError("empty sample list")
    X = np.stack([s.features for s in samples])
    if samples[0].position_labels is not None:
        y = np.array([s.position_labels for s in samples], dtype=np.int64)
    else:
        y = np.array([s.label for s in samples], dtype=np.int64)
    return X, y


def _logsumexp(z: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(z, axis=axis, keepdims=True)
    return np.squeeze(m, axis=axis) + np.log(
        np.sum(np.exp(z - m), axis=axis)
    )


def _softmax(z: np.ndarray) -> np.ndarray:
    m = np.max(z, axis=-1, keepdims=True)
    e = np.exp(z - m)
    return e / np.sum(e, axis=-1, keepdims=True)


class Network:
    """A feed-forward classifier over a flat parameter vector.

    Parameters are laid out layer by layer: the (out, in) weight matrix in row
    major order, then the bias. Per-sample gradient calls use one sample at a
    time so cached gradients are exact, with no batching shortcut.
    """

    def __init__(self, config: ModelConfig):
        self.config = config
        dims = (config.input_dim, *config.hidden_dims, config.output_units)
        self._shapes = [(dout, din) for din, dout in zip(dims[:-1], dims[1:])]
        self._offsets = []
        off = 0
        for dout, din in self._shapes:
            self._offsets.append((off, off + din * dout, off + din * dout + dout))
            off += (din + 1) * dout
        self.param_count = off
        assert self.param_count == config.param_count

    # ---- parameters ----

    def init_params(self) -> ParamVector:
        """Seed-controlled init: weights ~ init_scale * N(0,1)/sqrt(fan_in), biases 0."""
        cfg = self.config
        rng = np.random.default_rng(cfg.seed)
        params = np.zeros(self.param_count)
        for (dout, din), (w0, w1, b1) in zip(self._shapes, self._offsets):
            params[w0:w1] = (
                cfg.init_scale * rng.standard_normal(dout * din) / np.sqrt(din)
            )
        return params

    def unpack(self, params: ParamVector) -> list[tuple[np.ndarray, np.ndarray]]:
        if params.shape != (self.param_count,):
            raise DimensionMismatchError(
                f"expected parameter vector of length {self.param_count}, "
                f"got shape {params.shape}"
            )
        layers = []
        for (dout, din), (w0, w1, b1) in zip(self._shapes, self._offsets):
            layers.append((params[w0:w1].reshape(dout, din), params[w1:b1]))
        return layers

    # ---- forward ----

    def _check_features(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.config.input_dim:
            raise DimensionMismatchError(
                f"expected features of dim {self.config.input_dim}, got {X.shape[1]}"
            )
        return X

    def _forward(self, params, X):
        """Return (activations per layer including input, output logits)."""
        layers = self.unpack(params)
        acts = [self._check_features(X)]
        a = acts[0]
        for i, (W, b) in enumerate(layers):
            z = a @ W.T + b
            if i < len(layers) - 1:
                a = np.tanh(z) if self.config.activation == "tanh" else np.maximum(z, 0.0)
                acts.append(a)
            else:
                return acts, z

    def logits(self, params: ParamVector, X: np.ndarray) -> np.ndarray:
        return self._forward(params, X)[1]

    def penultimate(self, params: ParamVector, X: np.ndarray) -> np.ndarray:
        """Activations feeding the output layer (the input itself if no hidden layer)."""
        return self._forward(params, X)[0][-1]

    # ---- margins and losses ----

    def margins(self, params: ParamVector, X: np.ndarray, labels: np.ndarray) -> np.ndarray:
        """Batch margins h(s, y). labels is (N,) or (N, L) for multi-position heads."""
        Z = self.logits(params, X)
        cfg = self.config
        if cfg.is_binary:
            return Z[:, 0]
        labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
        if cfg.num_positions == 1:
            return self._class_margins(Z, labels)
        Zp = Z.reshape(len(Z), cfg.num_positions, cfg.num_classes)
        per_pos = np.stack(
            [self._class_margins(Zp[:, i, :], labels[:, i]) for i in range(cfg.num_positions)],
            axis=1,
        )
        return per_pos.mean(axis=1)

    @staticmethod
    def _class_margins(Z: np.ndarray, y: np.ndarray) -> np.ndarray:
        """log(p_y / (1 - p_y)) = z_y - logsumexp over the other classes."""
        n = np.arange(len(Z))
        zy = Z[n, y]
        masked = Z.copy()
        masked[n, y] = -np.inf
        return zy - _logsumexp(masked, axis=1)

    def margin(self, params: ParamVector, sample: Sample) -> float:
        y = sample.position_labels if sample.position_labels is not None else sample.label
        return float(self.margins(params, sample.features[None, :], np.asarray([y]))[0])

    def losses(self, params: ParamVector, X: np.ndarray, labels: np.ndarray) -> np.ndarray:
        """Batch log-losses; equals cross-entropy for (multi-)class heads."""
        Z = self.logits(params, X)
        cfg = self.config
        labels = np.asarray(labels, dtype=np.int64)
        if cfg.is_binary:
            y = 2.0 * labels - 1.0
            return np.logaddexp(0.0, -y * Z[:, 0])
        if cfg.num_positions == 1:
            n = np.arange(len(Z))
            return _logsumexp(Z, axis=1) - Z[n, labels]
        Zp = Z.reshape(len(Z), cfg.num_positions, cfg.num_classes)
        n = np.arange(len(Z))
        ce = np.stack(
            [_logsumexp(Zp[:, i, :], axis=1) - Zp[n, i, labels[:, i]] for i in range(cfg.num_positions)],
            axis=1,
        )
        return ce.mean(axis=1)

    def sample_loss(self, params: ParamVector, sample: Sample) -> float:
        y = sample.position_labels if sample.position_labels is not None else sample.label
        return float(self.losses(params, sample.features[None, :], np.asarray([y]))[0])

    # ---- gradients ----

    def _backward(self, params, acts, delta):
        """Backpropagate output-layer deltas (N, out) to a flat mean gradient."""
        layers = self.unpack(params)
        grad = np.zeros(self.param_count)
        n = delta.shape[0]
        for i in range(len(layers) - 1, -1, -1):
            W, _ = layers[i]
            w0, w1, b1 = self._offsets[i]
            grad[w0:w1] = (delta.T @ acts[i]).ravel() / n
            grad[w1:b1] = delta.sum(axis=0) / n
            if i > 0:
                delta = delta @ W
                a = acts[i]
                if self.config.activation == "tanh":
                    delta = delta * (1.0 - a * a)
                else:
                    delta = delta * (a > 0.0)
        return grad

    def margin_gradient(self, params: ParamVector, sample: Sample) -> ParamVector:
        """Exact gradient of the margin for one sample, via reverse mode.

        Multi-position samples return the average of per-position margin
        gradients.
        """
        acts, Z = self._forward(params, sample.features[None, :])
        cfg = self.config
        if cfg.is_binary:
            delta = np.ones((1, 1))
        elif cfg.num_positions == 1:
            delta = self._class_margin_delta(Z, sample.label)
        else:
            if sample.position_labels is None:
                raise ValueError("multi-position model requires position_labels")
            Zp = Z.reshape(1, cfg.num_positions, cfg.num_classes)
            blocks = [
                self._class_margin_delta(Zp[:, i, :], sample.position_labels[i])
                / cfg.num_positions
                for i in range(cfg.num_positions)
            ]
            delta = np.concatenate(blocks, axis=1)
        return self._backward(params, acts, delta)

    @staticmethod
    def _class_margin_delta(Z: np.ndarray, y: int) -> np.ndarray:
        # d margin / d z_k: 1 at the labeled class, else minus the softmax
        # restricted to the other classes. Bounded, so stable at any confidence.
        masked = Z.copy()
        masked[:, y] = -np.inf
        delta = -_softmax(masked)
        delta[:, y] = 1.0
        return delta

    def loss_gradient(self, params: ParamVector, X: np.ndarray, labels: np.ndarray) -> ParamVector:
        """Mean log-loss gradient over a batch."""
        acts, Z = self._forward(params, X)
        cfg = self.config
        labels = np.asarray(labels, dtype=np.int64)
        if cfg.is_binary:
            y = 2.0 * labels - 1.0
            h = Z[:, 0]
            delta = (-y * _sigmoid(-y * h))[:, None]
        elif cfg.num_positions == 1:
            delta = _softmax(Z)
            delta[np.arange(len(Z)), labels] -= 1.0
        else:
            Zp = Z.reshape(len(Z), cfg.num_positions, cfg.num_classes)
            delta = _softmax(Zp)
            n = np.arange(len(Z))
            for i in range(cfg.num_positions):
                delta[n, i, labels[:, i]] -= 1.0
            delta = delta.reshape(len(Z), -1) / cfg.num_positions
        return self._backward(params, acts, delta)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def init_params(config: ModelConfig) -> ParamVector:
    """Deterministic initialization for a config; see Network.init_params."""
    return Network(config).init_params()


def finite_difference_margin_gradient(
    net: Network, params: ParamVector, sample: Sample, step: float = 1e-5
) -> ParamVector:
    """Central-difference margin gradient. Independent check for the exact path."""
    grad = np.zeros_like(params)
    work = params.copy()
    for i in range(len(params)):
        orig = work[i]
        work[i] = orig + step
        hi = net.margin(work, sample)
        work[i] = orig - step
        lo = net.margin(work, sample)
        work[i] = orig
        grad[i] = (hi - lo) / (2.0 * step)
    return grad
