"""Small softmax MLP with hand-written backprop, SGD, and checkpoint I/O."""

from __future__ import annotations

import base64
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

CHECKPOINT_FORMAT = "rwce-checkpoint"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    pass


class NumericalError(FloatingPointError):
    """Raised when a loss or gradient turns non-finite."""

    def __init__(self, message: str, index: int | None = None):
        super().__init__(message)
        self.index = index


class IntegrityError(RuntimeError):
    pass


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


class MLP:
    """Fully connected ReLU network ending in a temperature-scaled softmax.

    ``sizes`` is ``[input_dim, *hidden_widths, n_classes]``. Probabilities are
    ``softmax(logits / temperature)``; every loss in the package is written
    against these scaled logits so training and scoring see the same simplex.
    """

    def __init__(self, sizes: Sequence[int], temperature: float = 1.0, seed: int | None = 0):
        sizes = [int(s) for s in sizes]
        if len(sizes) < 2 or min(sizes) < 1:
            raise ShapeError(f"invalid architecture {sizes}")
        if not temperature > 0:
            raise ValueError("temperature must be positive")
        self.sizes = sizes
        self.temperature = float(temperature)
        rng = np.random.default_rng(seed)
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            a = np.sqrt(6.0 / (fan_in + fan_out))
            self.weights.append(rng.uniform(-a, a, size=(fan_in, fan_out)))
            self.biases.append(np.zeros(fan_out))

    @property
    def input_dim(self) -> int:
        return self.sizes[0]

    @property
    def n_classes(self) -> int:
        return self.sizes[-1]

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out

    def copy(self) -> MLP:
        other = MLP.__new__(MLP)
        other.sizes = list(self.sizes)
        other.temperature = self.temperature
        other.weights = [w.copy() for w in self.weights]
        other.biases = [b.copy() for b in self.biases]
        return other

    def _check_input(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[None, :]
        if X.ndim != 2 or X.shape[1] != self.input_dim:
            raise ShapeError(f"expected inputs with {self.input_dim} features, got shape {X.shape}")
        return X

    def scaled_logits(self, X: np.ndarray, return_cache: bool = False):
        """Return ``logits / T`` for a batch, optionally with activations for backprop."""
        h = self._check_input(X)
        acts = [h]
        n_layers = len(self.weights)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < n_layers - 1:
                h = np.maximum(h, 0.0)
                acts.append(h)
        u = h / self.temperature
        if return_cache:
            return u, acts
        return u

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return softmax(self.scaled_logits(X))

    def backward(self, acts: list[np.ndarray], d_scaled: np.ndarray) -> list[np.ndarray]:
        """Backpropagate a gradient w.r.t. the scaled logits.

        Returns gradients in the order of :meth:`params`.
        """
        delta = d_scaled / self.temperature
        grads: list[np.ndarray] = []
        for i in range(len(self.weights) - 1, -1, -1):
            a = acts[i]
            grads.append(delta.sum(axis=0))
            grads.append(a.T @ delta)
            if i > 0:
                delta = (delta @ self.weights[i].T) * (a > 0)
        grads.reverse()
        # reversed pairs come out as (w, b) per layer
        return grads

    def flat_params(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params()])

    def set_flat_params(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=float)
        pos = 0
        for p in self.params():
            n = p.size
            p[...] = flat[pos:pos + n].reshape(p.shape)
            pos += n
        if pos != flat.size:
            raise ShapeError(f"expected {pos} parameters, got {flat.size}")


def weighted_ce_gradient(
    model: MLP, X: np.ndarray, y: np.ndarray, weights: np.ndarray
) -> tuple[float, list[np.ndarray]]:
    """Value and parameter gradient of ``mean(w_i * CE_i)``.

    ``weights`` are constants; nothing flows through them.
    """
    y = np.asarray(y)
    weights = np.asarray(weights, dtype=float)
    if weights.shape != y.shape:
        raise ShapeError("weights must have one entry per example")
    u, acts = model.scaled_logits(X, return_cache=True)
    logp = log_softmax(u)
    ce = -logp[np.arange(len(y)), y]
    bad = np.flatnonzero(~np.isfinite(ce))
    if bad.size:
        raise NumericalError(f"non-finite cross-entropy at example {bad[0]}", int(bad[0]))
    s = len(y)
    d = np.exp(logp)
    d[np.arange(s), y] -= 1.0
    d *= (weights / s)[:, None]
    return float(np.mean(weights * ce)), model.backward(acts, d)


@dataclass
class SGD:
    """SGD with heavy-ball momentum, L2 weight decay and a multi-step schedule."""

    lr: float = 0.04
    momentum: float = 0.9
    weight_decay: float = 0.0
    milestones: list[int] = field(default_factory=list)
    gamma: float = 0.1
    velocity: list[np.ndarray] | None = None

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0 or not self.gamma > 0:
            raise ValueError("weight decay must be >= 0 and gamma > 0")

    def lr_at(self, epoch: int) -> float:
        passed = sum(1 for m in self.milestones if epoch >= m)
        return self.lr * self.gamma ** passed

    def step(self, params: list[np.ndarray], grads: list[np.ndarray], epoch: int) -> None:
        if self.velocity is None:
            self.velocity = [np.zeros_like(p) for p in params]
        if len(grads) != len(params) or any(g.shape != p.shape for g, p in zip(grads, params)):
            raise ShapeError("gradient structure does not match parameters")
        lr = self.lr_at(epoch)
        for p, g, v in zip(params, grads, self.velocity):
            v *= self.momentum
            v += g
            if self.weight_decay:
                v += self.weight_decay * p
            p -= lr * v
        for p in params:
            if not np.all(np.isfinite(p)):
                raise NumericalError("non-finite parameter after update")


def _encode(arr: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(arr, dtype="<f8").tobytes()).decode("ascii")


def _decode(text: str) -> np.ndarray:
    return np.frombuffer(base64.b64decode(text), dtype="<f8").copy()


def checkpoint_dict(model: MLP, optimizer: SGD | None = None, epoch: int | None = None) -> dict:
    payload = {
        "sizes": model.sizes,
        "temperature": model.temperature.hex(),
        "params": _encode(model.flat_params()),
    }
    if optimizer is not None and optimizer.velocity is not None:
        payload["velocity"] = _encode(np.concatenate([v.ravel() for v in optimizer.velocity]))
    if epoch is not None:
        payload["epoch"] = int(epoch)
    digest = hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()
    return {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "sha256": digest, "payload": payload}


def save_checkpoint(path: str | Path, model: MLP, optimizer: SGD | None = None, epoch: int | None = None) -> None:
    text = json.dumps(checkpoint_dict(model, optimizer, epoch), sort_keys=True, indent=1)
    Path(path).write_text(text + "\n")


def load_checkpoint(path: str | Path, optimizer: SGD | None = None) -> tuple[MLP, int | None]:
    """Load a model (and optionally restore momentum buffers into ``optimizer``)."""
    try:
        doc = json.loads(Path(path).read_text())
        payload = doc["payload"]
        if doc.get("format") != CHECKPOINT_FORMAT or doc.get("version") != CHECKPOINT_VERSION:
            raise IntegrityError(f"{path}: unsupported checkpoint format")
        digest = hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()
        if digest != doc["sha256"]:
            raise IntegrityError(f"{path}: checksum mismatch")
        model = MLP(payload["sizes"], float.fromhex(payload["temperature"]), seed=None)
        model.set_flat_params(_decode(payload["params"]))
        if optimizer is not None and "velocity" in payload:
            flat = _decode(payload["velocity"])
            vel, pos = [], 0
            for p in model.params():
                vel.append(flat[pos:pos + p.size].reshape(p.shape).copy())
                pos += p.size
            optimizer.velocity = vel
    except IntegrityError:
        raise
    except (KeyError, ValueError, TypeError) as exc:
        raise IntegrityError(f"{path}: corrupt checkpoint ({exc})") from exc
    return model, payload.get("epoch")
