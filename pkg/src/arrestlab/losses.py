"""Training objectives: cross-entropy, representation distillation and variants.

All batch losses reduce by the arithmetic mean over examples.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

DISTANCE_KINDS = ("angular", "mse", "mae")
KD_VARIANTS = ("rgkd", "logit", "attention", "none")
DEFAULT_WEIGHTS = {"rgkd": 50.0, "logit": 1.0, "attention": 2.0, "none": 0.0}


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def cross_entropy(logits: Tensor, y) -> Tensor:
    logits = _t(logits)
    y = np.asarray(y)
    if logits.ndim != 2 or y.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {y.shape}")
    k = logits.shape[1]
    if y.size and (y.min() < 0 or y.max() >= k or not np.issubdtype(y.dtype, np.integer)):
        raise ValueError(f"labels must be integers in [0, {k})")
    onehot = np.zeros(logits.shape)
    onehot[np.arange(len(y)), y] = 1.0
    picked = ad.reduce_sum(ad.mul(ad.log_softmax(logits, axis=1), onehot), axis=1)
    return ad.mul(ad.reduce_mean(picked), -1.0)


# -- distances --------------------------------------------------------------
# Each accepts vectors (returning a scalar) or (n, d) batches (returning n rows).

def angular_distance(u, v) -> Tensor:
    """``1 - |u.v| / (|u| |v|)``, in [0, 1]."""
    u, v = _t(u), _t(v)
    if u.shape != v.shape:
        raise ShapeError(f"angular_distance: shapes {u.shape} and {v.shape} differ")
    nu, nv = ad.norm(u, axis=-1), ad.norm(v, axis=-1)
    if np.any(nu.data == 0) or np.any(nv.data == 0):
        raise ValueError("angular distance is undefined for a zero vector")
    cos = ad.div(ad.absolute(ad.dot(u, v, axis=-1)), ad.mul(nu, nv))
    return ad.sub(1.0, cos)


def mse_distance(u, v) -> Tensor:
    u, v = _t(u), _t(v)
    if u.shape != v.shape:
        raise ShapeError(f"mse_distance: shapes {u.shape} and {v.shape} differ")
    return ad.reduce_mean(ad.square(ad.sub(u, v)), axis=-1)


def mae_distance(u, v) -> Tensor:
    u, v = _t(u), _t(v)
    if u.shape != v.shape:
        raise ShapeError(f"mae_distance: shapes {u.shape} and {v.shape} differ")
    return ad.reduce_mean(ad.absolute(ad.sub(u, v)), axis=-1)


_DISTANCES = {"angular": angular_distance, "mse": mse_distance, "mae": mae_distance}


@dataclass(frozen=True)
class DistanceFn:
    kind: str = "angular"

    def __post_init__(self):
        if self.kind not in _DISTANCES:
            raise ValueError(f"unknown distance {self.kind!r}; choose from {DISTANCE_KINDS}")

    def __call__(self, u, v) -> Tensor:
        return _DISTANCES[self.kind](u, v)


def _distance(distance) -> DistanceFn:
    return distance if isinstance(distance, DistanceFn) else DistanceFn(distance)


@dataclass
class LossConfig:
    kd_variant: str = "rgkd"
    lam: float | None = None
    distance: DistanceFn = field(default_factory=DistanceFn)

    def __post_init__(self):
        if self.kd_variant not in KD_VARIANTS:
            raise ValueError(f"unknown kd variant {self.kd_variant!r}; choose from {KD_VARIANTS}")
        if self.lam is None:
            self.lam = DEFAULT_WEIGHTS[self.kd_variant]
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        self.distance = _distance(self.distance)


# -- distillation terms -------------------------------------------------------

def _require_frozen(teacher) -> None:
    if not teacher.frozen:
        raise ValueError("teacher model must be frozen")


def _rgkd_term(student_rep: Tensor, teacher, x, distance: DistanceFn) -> Tensor:
    target = teacher.represent(x, track_params=False).data
    return ad.reduce_mean(distance(student_rep, target))


def rgkd_loss(model, teacher, x, delta, distance="angular") -> Tensor:
    """Distance between the student's representation of ``x + delta`` and the
    frozen teacher's representation of clean ``x``, averaged over the batch."""
    _require_frozen(teacher)
    x = np.asarray(x, dtype=np.float64)
    rep = model.represent(x + delta)
    return _rgkd_term(rep, teacher, x, _distance(distance))


def logit_kd_loss(model, teacher, x, delta, distance="angular") -> Tensor:
    _require_frozen(teacher)
    x = np.asarray(x, dtype=np.float64)
    target = teacher.forward_full(x, track_params=False).data
    return ad.reduce_mean(_distance(distance)(model.forward_full(x + delta), target))


def attention_map(features: Tensor) -> Tensor:
    """Channel-summed absolute activations, L2-normalised: (n, C, H, W) -> (n, H*W)."""
    features = _t(features)
    if features.ndim != 4:
        raise ShapeError(f"attention map needs (n, C, H, W) features, got {features.shape}")
    summed = ad.flatten(ad.reduce_sum(ad.absolute(features), axis=1))
    length = ad.norm(summed, axis=-1)
    if np.any(length.data == 0):
        raise ValueError("attention map of an all-zero feature map is undefined")
    return ad.div(summed, ad.reshape(length, (-1, 1)))


def attention_kd_loss(model, teacher, x, delta, distance="angular") -> Tensor:
    _require_frozen(teacher)
    x = np.asarray(x, dtype=np.float64)
    target = attention_map(teacher.feature_map(x, track_params=False)).data
    student = attention_map(model.feature_map(x + delta))
    return ad.reduce_mean(_distance(distance)(student, target))


def combined_loss(model, teacher, x, delta, y, cfg: LossConfig | None = None) -> Tensor:
    """Cross-entropy on ``x + delta`` plus ``lam`` times the configured KD term."""
    cfg = cfg or LossConfig()
    x = np.asarray(x, dtype=np.float64)
    x_in = x + delta
    if cfg.kd_variant == "rgkd":
        _require_frozen(teacher)
        rep = model.represent(x_in)
        ce = cross_entropy(model.head(rep), y)
        kd = _rgkd_term(rep, teacher, x, cfg.distance)
    elif cfg.kd_variant == "logit":
        _require_frozen(teacher)
        logits = model.forward_full(x_in)
        ce = cross_entropy(logits, y)
        target = teacher.forward_full(x, track_params=False).data
        kd = ad.reduce_mean(cfg.distance(logits, target))
    elif cfg.kd_variant == "attention":
        ce = cross_entropy(model.forward_full(x_in), y)
        kd = attention_kd_loss(model, teacher, x, delta, cfg.distance)
    else:
        return cross_entropy(model.forward_full(x_in), y)
    return ad.add(ce, ad.mul(kd, float(cfg.lam)))


def rst_combined_ce(model, x, delta, y) -> Tensor:
    """Half adversarial, half clean cross-entropy."""
    x = np.asarray(x, dtype=np.float64)
    adv = cross_entropy(model.forward_full(x + delta), y)
    clean = cross_entropy(model.forward_full(x), y)
    return ad.add(ad.mul(adv, 0.5), ad.mul(clean, 0.5))
