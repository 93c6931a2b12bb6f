"""Single-bottleneck autoencoder over residual windows, trained by full-batch
gradient descent with step backtracking."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InsufficientDataError, ValidationError


@dataclass(frozen=True)
class AutoencoderArch:
    window: int = 28
    bottleneck: int = 4
    epochs: int = 500
    step_size: float = 0.5
    seed: int = 0
    quantile: float = 0.99


@dataclass(eq=False)
class AutoencoderModel:
    W1: np.ndarray  # [B, W] encoder
    b1: np.ndarray  # [B]
    W2: np.ndarray  # [W, B] decoder
    b2: np.ndarray  # [W]
    mean: np.ndarray
    std: np.ndarray
    theta_a: float = float("inf")
    loss_history: list = field(default_factory=list)

    @property
    def width(self) -> int:
        return self.W1.shape[1]

    def normalize(self, windows) -> np.ndarray:
        return (np.asarray(windows, dtype=float) - self.mean) / self.std

    def reconstruct(self, z: np.ndarray) -> np.ndarray:
        h = np.tanh(z @ self.W1.T + self.b1)
        return h @ self.W2.T + self.b2

    def errors(self, windows) -> np.ndarray:
        w = np.asarray(windows, dtype=float)
        if w.shape[-1] != self.width:
            raise ValidationError(f"window length {w.shape[-1]} != {self.width}")
        shape = w.shape[:-1]
        z = self.normalize(w.reshape(-1, self.width))
        d = z - self.reconstruct(z)
        return np.sum(d * d, axis=1).reshape(shape)

    def to_dict(self) -> dict:
        return {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in vars(self).items()}


def loss_and_grads(params, Z):
    """Mean squared reconstruction error and its gradients.

    ``params`` is ``(W1, b1, W2, b2)``; ``Z`` is ``[n, W]``.
    """
    W1, b1, W2, b2 = params
    n = Z.shape[0]
    a = Z @ W1.T + b1
    h = np.tanh(a)
    out = h @ W2.T + b2
    d = out - Z
    loss = float(np.sum(d * d) / n)
    g_out = 2.0 * d / n
    gW2 = g_out.T @ h
    gb2 = g_out.sum(axis=0)
    g_a = (g_out @ W2) * (1.0 - h * h)
    gW1 = g_a.T @ Z
    gb1 = g_a.sum(axis=0)
    return loss, (gW1, gb1, gW2, gb2)


def train_autoencoder(windows, arch: AutoencoderArch = AutoencoderArch()) -> AutoencoderModel:
    X = np.asarray(windows, dtype=float)
    if X.ndim != 2 or X.shape[1] != arch.window:
        raise ValidationError(f"expected [n, {arch.window}] windows, got {X.shape}")
    if not 0 < arch.bottleneck < arch.window:
        raise ValidationError("bottleneck must be smaller than the window")
    if X.shape[0] < 10 * arch.bottleneck:
        raise InsufficientDataError(f"need >= {10 * arch.bottleneck} windows, got {X.shape[0]}")

    mean = X.mean(axis=0)
    std = X.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    Z = (X - mean) / std

    rng = np.random.default_rng(arch.seed)
    W, B = arch.window, arch.bottleneck
    W1 = rng.normal(0.0, 1.0 / np.sqrt(W), size=(B, W))
    b1 = np.zeros(B)
    W2 = rng.normal(0.0, 1.0 / np.sqrt(B), size=(W, B))
    # decoder bias maps the all-zero (mean) window back onto itself
    b2 = -(W2 @ np.tanh(b1))
    params = [W1, b1, W2, b2]

    step = arch.step_size
    loss, grads = loss_and_grads(params, Z)
    history = [loss]
    for _ in range(arch.epochs):
        while True:
            trial = [p - step * g for p, g in zip(params, grads)]
            t_loss, t_grads = loss_and_grads(trial, Z)
            if t_loss <= loss:
                break
            step *= 0.5
            if step < 1e-12:
                trial, t_loss, t_grads = params, loss, grads
                break
        params, loss, grads = trial, t_loss, t_grads
        history.append(loss)

    model = AutoencoderModel(*params, mean=mean, std=std, loss_history=history)
    model.theta_a = float(np.quantile(model.errors(X), arch.quantile))
    return model
