"""Standard pretraining, adversarial training and representation-constrained
adversarial finetuning with noisy replay."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from typing import Callable

import numpy as np

from . import autodiff as ad
from .attacks import AttackSpec, pgd, robust_accuracy, uniform_noise
from .data import BatchPlan, Dataset, batch_order
from .losses import DistanceFn, LossConfig, combined_loss, cross_entropy
from .models import Model, clone_frozen

# rng stream tags; each (seed, epoch, step, tag) triple owns an independent stream
_PGD, _NOISE, _FLIP = 1, 2, 3


# -- learning-rate schedules ----------------------------------------------------

@dataclass(frozen=True)
class LRSchedule:
    initial: float
    transitions: tuple[tuple[int, float], ...] = ()  # (first epoch of new rate, rate)

    def __call__(self, epoch: int) -> float:
        rate = self.initial
        for start, r in self.transitions:
            if epoch >= start:
                rate = r
        return rate


# (base epochs, initial rate, transitions at base scale)
_STEP_SCHEDULES = {
    "pretrain-paper": (100, 0.1, ((75, 0.01), (90, 0.001))),
    "aft-paper": (20, 0.025, ((11, 0.02), (13, 0.01), (15, 0.005), (17, 0.0025), (19, 0.00125))),
}
SCHEDULE_KINDS = ("pretrain-paper", "aft-paper", "constant")


def make_lr_schedule(kind: str, base_epochs: int, base_lr: float | None = None) -> LRSchedule:
    """Epoch -> rate mapping (epochs are 1-indexed).

    Step schedules are stretched to ``base_epochs``: a transition that
    follows ``b`` completed epochs at full scale follows
    ``round(b * base_epochs / full)`` epochs here.  ``base_lr`` rescales all
    rates proportionally.
    """
    if base_epochs < 1:
        raise ValueError("base_epochs must be >= 1")
    if kind == "constant":
        if base_lr is None or base_lr <= 0:
            raise ValueError("constant schedule needs a positive base_lr")
        return LRSchedule(base_lr)
    if kind not in _STEP_SCHEDULES:
        raise ValueError(f"unknown schedule {kind!r}; choose from {SCHEDULE_KINDS}")
    full, initial, transitions = _STEP_SCHEDULES[kind]
    factor = 1.0 if base_lr is None else base_lr / initial
    if factor <= 0:
        raise ValueError("learning rate must be positive")
    scaled = []
    for start, rate in transitions:
        completed = math.floor((start - 1) * base_epochs / full + 0.5)
        scaled.append((max(1, completed + 1), rate * factor))
    return LRSchedule(initial * factor, tuple(scaled))


# -- configuration ------------------------------------------------------------------

@dataclass
class TrainSpec:
    epochs: int = 10
    batch_size: int = 64
    lr_schedule: str = "aft-paper"
    lr: float | None = None
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lam: float | None = None
    phi_degrees: float = 30.0
    tau_override: float | None = None
    nr_window: int | None = None
    attack: AttackSpec = field(default_factory=AttackSpec)
    seed: int = 0
    kd_variant: str = "rgkd"
    distance: str = "angular"
    flip: bool = False
    strict_nr: bool = False

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.nr_window is None:
            self.nr_window = math.ceil(self.epochs / 2)
        if not 0 <= self.nr_window <= self.epochs:
            raise ValueError(f"nr_window {self.nr_window} must lie in [0, epochs]")
        if self.tau_override is None and not 0 < self.phi_degrees < 90:
            raise ValueError(f"phi_degrees must lie in (0, 90), got {self.phi_degrees}")
        if self.momentum < 0 or self.weight_decay < 0:
            raise ValueError("momentum and weight_decay must be >= 0")
        self.loss_config()  # validates variant, lambda and distance
        self.schedule()

    @property
    def tau(self) -> float:
        if self.tau_override is not None:
            return float(self.tau_override)
        return 1.0 - math.cos(math.radians(self.phi_degrees))

    def schedule(self) -> LRSchedule:
        return make_lr_schedule(self.lr_schedule, self.epochs, self.lr)

    def loss_config(self) -> LossConfig:
        return LossConfig(self.kd_variant, self.lam, DistanceFn(self.distance))

    def batch_plan(self) -> BatchPlan:
        return BatchPlan(self.batch_size, self.seed)

    def replace(self, **changes) -> "TrainSpec":
        values = asdict(self)
        values["attack"] = self.attack
        values.update(changes)
        return TrainSpec(**values)


@dataclass
class EpochReport:
    epoch: int
    loss: float
    standard_acc: float | None = None
    robust_acc: float | None = None
    switch_rate: float | None = None
    mean_distance: float | None = None
    lr: float | None = None

    COLUMNS = ("epoch", "loss", "standard_acc", "robust_acc", "switch_rate", "mean_distance", "lr")

    def row(self) -> list[str]:
        def fmt(v):
            return "NA" if v is None else (str(v) if isinstance(v, int) else f"{v:.6f}")
        return [fmt(getattr(self, c)) for c in self.COLUMNS]


@dataclass
class NRStep:
    """One noisy-replay decision record for a mini-batch.  ``noise_delta`` is
    None once the NR window has closed."""
    epoch: int
    step: int
    active: bool
    tau: float
    distances: np.ndarray
    switched: np.ndarray
    pgd_delta: np.ndarray
    noise_delta: np.ndarray | None
    applied_delta: np.ndarray


# -- optimisation -------------------------------------------------------------------

class SGD:
    """Momentum SGD with L2 weight decay folded into the gradient."""

    def __init__(self, model: Model, momentum: float = 0.9, weight_decay: float = 5e-4):
        if model.frozen:
            raise ValueError("refusing to optimise a frozen model")
        self.model = model
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {k: np.zeros_like(p.data) for k, p in model.params.items()}

    def step(self, lr: float) -> None:
        if self.model.frozen:
            raise ValueError("refusing to update a frozen model")
        for name, p in self.model.params.items():
            g = np.zeros_like(p.data) if p.grad is None else p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v = self.velocity[name]
            v *= self.momentum
            v += g
            p.data -= lr * v


def _rng(seed: int, epoch: int, step: int, tag: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, step, tag])


def _maybe_flip(x: np.ndarray, spec: TrainSpec, epoch: int, step: int) -> np.ndarray:
    if not spec.flip:
        return x
    mask = _rng(spec.seed, epoch, step, _FLIP).random(len(x)) < 0.5
    out = x.copy()
    out[mask] = out[mask][..., ::-1]
    return out


def _pgd_start(x: np.ndarray, attack: AttackSpec, rng: np.random.Generator) -> np.ndarray:
    if attack.random_start:
        return rng.uniform(-attack.epsilon, attack.epsilon, size=x.shape)
    return np.zeros_like(x)


def evaluate(model: Model, dataset: Dataset, attack: AttackSpec, seed: int = 0,
             kind: str = "pgd") -> tuple[float, float]:
    """(standard accuracy, robust accuracy) in percent."""
    standard = 100.0 * float((model.predict(dataset.images) == dataset.labels).mean())
    robust = robust_accuracy(model, dataset.images, dataset.labels, kind, attack, seed=seed)
    return standard, robust


StepFn = Callable[[int, int, np.ndarray, np.ndarray], tuple[ad.Tensor, dict]]


def _run(model: Model, dataset: Dataset, spec: TrainSpec, step_fn: StepFn,
         eval_set: Dataset | None, reports: list | None,
         on_epoch: Callable[[EpochReport], None] | None) -> Model:
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    opt = SGD(model, spec.momentum, spec.weight_decay)
    schedule = spec.schedule()
    plan = spec.batch_plan()
    for epoch in range(1, spec.epochs + 1):
        lr = schedule(epoch)
        losses, switched, counted, dists = [], 0, 0, []
        for step, idx in enumerate(batch_order(len(dataset), plan, epoch)):
            x = _maybe_flip(dataset.images[idx], spec, epoch, step)
            y = dataset.labels[idx]
            loss, stats = step_fn(epoch, step, x, y)
            model.zero_grad()
            loss.backward()
            opt.step(lr)
            losses.append(loss.item() * len(idx))
            if "switched" in stats:
                switched += int(stats["switched"].sum())
                counted += len(idx)
            if "distances" in stats:
                dists.append(stats["distances"])
        report = EpochReport(epoch, float(sum(losses) / len(dataset)), lr=lr)
        if counted:
            report.switch_rate = switched / counted
        if dists:
            report.mean_distance = float(np.concatenate(dists).mean())
        if eval_set is not None:
            report.standard_acc, report.robust_acc = evaluate(model, eval_set, spec.attack, spec.seed)
        if reports is not None:
            reports.append(report)
        if on_epoch is not None:
            on_epoch(report)
    return model


def standard_pretrain(model: Model, dataset: Dataset, spec: TrainSpec, eval_set=None,
                      reports=None, on_epoch=None) -> Model:
    """Minimise clean cross-entropy; trains ``model`` in place and returns it."""
    if model.frozen:
        raise ValueError("cannot train a frozen model")

    def step(epoch, i, x, y):
        return cross_entropy(model.forward_full(x), y), {}
    return _run(model, dataset, spec, step, eval_set, reports, on_epoch)


def adversarial_train(model: Model, dataset: Dataset, spec: TrainSpec, eval_set=None,
                      reports=None, on_epoch=None) -> Model:
    """PGD adversarial training of ``model`` in place (from scratch or as
    plain finetuning when ``model`` is pretrained)."""
    if model.frozen:
        raise ValueError("cannot train a frozen model")
    attack = spec.attack

    def step(epoch, i, x, y):
        rng = _rng(spec.seed, epoch, i, _PGD)
        delta = pgd(model, x, y, attack, delta0=_pgd_start(x, attack, rng))
        return cross_entropy(model.forward_full(x + delta), y), {}
    return _run(model, dataset, spec, step, eval_set, reports, on_epoch)


def representation_distances(student: Model, teacher: Model, x: np.ndarray,
                             distance: DistanceFn) -> np.ndarray:
    """Per-example distance between clean-input representations (no gradients)."""
    u = student.represent(x, track_params=False).data
    v = teacher.represent(x, track_params=False).data
    return distance(u, v).data


def arrest_finetune(pretrained: Model, dataset: Dataset, spec: TrainSpec, eval_set=None,
                    reports=None, on_epoch=None, trace: list | None = None,
                    teacher: Model | None = None) -> Model:
    """Adversarial finetuning from ``pretrained`` with a representation
    constraint and noisy replay.  Returns the finetuned student; the
    pretrained model is left untouched.

    During the first ``spec.nr_window`` epochs, every example whose clean
    representation has drifted more than ``spec.tau`` from the teacher's is
    trained on uniform noise instead of its PGD perturbation.
    """
    teacher = clone_frozen(pretrained) if teacher is None else teacher
    if not teacher.frozen:
        raise ValueError("teacher model must be frozen")
    tau = spec.tau
    if tau <= 0:
        raise ValueError(f"tau must be > 0, got {tau}")
    cfg = spec.loss_config()
    if cfg.kd_variant == "attention" and pretrained.arch.spatial_tap is None:
        raise ValueError(f"attention distillation needs a spatial feature map; "
                         f"{pretrained.arch.name} has none")
    student = pretrained.clone(frozen=False)
    attack = spec.attack
    distance = cfg.distance

    def step(epoch, i, x, y):
        nr_active = epoch <= spec.nr_window
        start = _pgd_start(x, attack, _rng(spec.seed, epoch, i, _PGD))
        a = representation_distances(student, teacher, x, distance)
        stats = {"distances": a}
        if nr_active:
            switched = a > tau
            noise = uniform_noise(x.shape, attack.epsilon, _rng(spec.seed, epoch, i, _NOISE))
            noise = np.clip(x + noise, *attack.clamp) - x
            stats["switched"] = switched
        else:
            switched = np.zeros(len(x), dtype=bool)
            noise = None
        if spec.strict_nr and switched.any():
            keep = ~switched
            delta = np.zeros_like(x)
            if keep.any():
                delta[keep] = pgd(student, x[keep], y[keep], attack, delta0=start[keep])
        else:
            delta = pgd(student, x, y, attack, delta0=start)
        applied = np.where(switched[:, None, None, None], noise, delta) if nr_active else delta
        if trace is not None:
            trace.append(NRStep(epoch, i, nr_active, tau, a.copy(), switched.copy(), delta.copy(),
                                None if noise is None else noise.copy(), applied.copy()))
        return combined_loss(student, teacher, x, applied, y, cfg), stats

    _run(student, dataset, spec, step, eval_set, reports, on_epoch)
    return student
