"""L-infinity attacks (FGSM, PGD) and the uniform noise used by noisy replay."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass(frozen=True)
class AttackSpec:
    epsilon: float = 8 / 255
    step_size: float = 2 / 255
    steps: int = 10
    clamp: tuple[float, float] = (0.0, 1.0)
    random_start: bool = True

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")
        if self.steps > 0 and self.step_size <= 0:
            raise ValueError(f"step_size must be > 0 when steps > 0, got {self.step_size}")
        lo, hi = self.clamp
        if not lo < hi:
            raise ValueError(f"clamp range must satisfy lo < hi, got {self.clamp}")


LossFn = Callable[[object, Tensor, np.ndarray], Tensor]


def cross_entropy_objective(model, x_adv: Tensor, y: np.ndarray) -> Tensor:
    from .losses import cross_entropy
    return cross_entropy(model.forward_full(x_adv, track_params=False), y)


def input_gradient(model, x: np.ndarray, y: np.ndarray, loss: LossFn | None = None) -> np.ndarray:
    """Gradient of the attack objective with respect to the input batch."""
    loss = loss or cross_entropy_objective
    xt = Tensor(x, requires_grad=True)
    value = loss(model, xt, y)
    value.backward()
    if xt.grad is None:
        return np.zeros_like(x)
    return xt.grad


def project(delta: np.ndarray, x: np.ndarray, epsilon: float, clamp=(0.0, 1.0)) -> np.ndarray:
    """Project onto the epsilon ball intersected with the valid input box."""
    lo, hi = clamp
    delta = np.clip(delta, -epsilon, epsilon)
    return np.clip(x + delta, lo, hi) - x


def fgsm(model, x: np.ndarray, y: np.ndarray, spec: AttackSpec, loss: LossFn | None = None) -> np.ndarray:
    if spec.epsilon < 0:
        raise ValueError(f"epsilon must be >= 0, got {spec.epsilon}")
    x = np.asarray(x, dtype=np.float64)
    if spec.epsilon == 0:
        return np.zeros_like(x)
    g = input_gradient(model, x, y, loss)
    return project(spec.epsilon * np.sign(g), x, spec.epsilon, spec.clamp)


def pgd(model, x: np.ndarray, y: np.ndarray, spec: AttackSpec, rng: np.random.Generator | None = None,
        loss: LossFn | None = None, delta0: np.ndarray | None = None) -> np.ndarray:
    """Multi-step sign-gradient ascent with projection after every step.

    ``delta0`` overrides the starting point; otherwise a uniform random start
    is drawn from ``rng`` when ``spec.random_start`` is set.
    """
    if spec.steps < 1:
        raise ValueError("pgd needs steps >= 1")
    x = np.asarray(x, dtype=np.float64)
    eps = spec.epsilon
    if delta0 is not None:
        delta = project(np.asarray(delta0, dtype=np.float64), x, eps, spec.clamp)
    elif spec.random_start:
        if rng is None:
            raise ValueError("random_start needs an rng")
        delta = project(rng.uniform(-eps, eps, size=x.shape), x, eps, spec.clamp)
    else:
        delta = np.zeros_like(x)
    if eps == 0:
        return np.zeros_like(x)
    for _ in range(spec.steps):
        g = input_gradient(model, x + delta, y, loss)
        delta = project(delta + spec.step_size * np.sign(g), x, eps, spec.clamp)
    return delta


def uniform_noise(shape, epsilon: float, rng: np.random.Generator) -> np.ndarray:
    if epsilon < 0:
        raise ValueError(f"epsilon must be >= 0, got {epsilon}")
    if epsilon == 0:
        return np.zeros(shape)
    return rng.uniform(-epsilon, epsilon, size=shape)


def attack(kind: str, model, x, y, spec: AttackSpec, rng=None) -> np.ndarray:
    if kind == "fgsm":
        return fgsm(model, x, y, spec)
    if kind == "pgd":
        return pgd(model, x, y, spec, rng)
    if kind == "none":
        return np.zeros_like(np.asarray(x, dtype=np.float64))
    raise ValueError(f"unknown attack {kind!r}")


def robust_accuracy(model, x: np.ndarray, y: np.ndarray, kind: str, spec: AttackSpec,
                    seed: int = 0, batch_size: int = 256) -> float:
    """Accuracy (percent) on ``x + attack(x)``."""
    if len(x) == 0:
        raise ValueError("empty evaluation set")
    correct = 0
    for b, start in enumerate(range(0, len(x), batch_size)):
        xb, yb = x[start:start + batch_size], y[start:start + batch_size]
        rng = np.random.default_rng([seed, b])
        delta = attack(kind, model, xb, yb, spec, rng)
        correct += int((model.predict(xb + delta) == yb).sum())
    return 100.0 * correct / len(x)
