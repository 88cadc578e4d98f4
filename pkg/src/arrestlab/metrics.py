"""Accuracy-robustness tradeoff metrics.

``ardist`` is the signed Euclidean distance from a (standard, robust) accuracy
point to a cubic tradeoff curve, measured along the curve normal that passes
through the point; it is positive above the curve.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .data import Dataset


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class TradeoffPoint:
    standard_acc: float
    robust_acc: float
    label: str = ""

    def __post_init__(self):
        for v in (self.standard_acc, self.robust_acc):
            if not 0.0 <= v <= 100.0:
                raise MetricError(f"{self.label or 'point'}: accuracy {v} outside [0, 100]")


@dataclass(frozen=True)
class TradeoffCurve:
    coefficients: tuple[float, float, float, float]  # a3, a2, a1, a0
    domain: tuple[float, float] | None = None

    def __post_init__(self):
        if len(self.coefficients) != 4 or not all(math.isfinite(c) for c in self.coefficients):
            raise MetricError(f"a cubic needs 4 finite coefficients, got {self.coefficients}")


def curve_eval(curve: TradeoffCurve, x: float) -> float:
    a3, a2, a1, a0 = curve.coefficients
    return ((a3 * x + a2) * x + a1) * x + a0


def curve_deriv(curve: TradeoffCurve, x: float) -> float:
    a3, a2, a1, _ = curve.coefficients
    return (3.0 * a3 * x + 2.0 * a2) * x + a1


def curve_deriv2(curve: TradeoffCurve, x: float) -> float:
    a3, a2, _, _ = curve.coefficients
    return 6.0 * a3 * x + 2.0 * a2


# Published curves fitted to CIFAR-10 / CIFAR-100 AutoAttack results.
CIFAR10_CURVE = TradeoffCurve((9.877e-05, -0.3922, 63.82, -2600.0))
CIFAR100_CURVE = TradeoffCurve((5.615e-04, -0.1582, 12.44, -271.8))


def parse_curve_fixtures(text: str) -> dict[str, TradeoffCurve]:
    curves: dict[str, TradeoffCurve] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise MetricError(f"curve fixture line {lineno}: expected name=a3,a2,a1,a0")
        try:
            coeffs = tuple(float(v) for v in value.split(","))
        except ValueError:
            raise MetricError(f"curve fixture line {lineno}: non-numeric coefficient") from None
        if len(coeffs) != 4:
            raise MetricError(f"curve fixture line {lineno}: expected 4 coefficients")
        curves[key.strip()] = TradeoffCurve(coeffs)
    return curves


def load_curve_fixtures(path=None) -> dict[str, TradeoffCurve]:
    if path is None:
        text = resources.files("arrestlab").joinpath("curves.txt").read_text()
    else:
        text = Path(path).read_text()
    return parse_curve_fixtures(text)


def fit_curve(points: Sequence[TradeoffPoint]) -> TradeoffCurve:
    """Least-squares cubic through the points (robust vs standard accuracy).

    The normal equations are formed on a centred, scaled abscissa and the
    solution is expanded back to raw-unit coefficients.
    """
    if len(points) < 4:
        raise MetricError(f"need at least 4 points to fit a cubic, got {len(points)}")
    x = np.array([p.standard_acc for p in points], dtype=np.float64)
    y = np.array([p.robust_acc for p in points], dtype=np.float64)
    if len(np.unique(x)) < 4:
        raise MetricError("need at least 4 distinct standard accuracies")
    center = x.mean()
    scale = x.std()
    t = (x - center) / scale
    V = np.vander(t, 4, increasing=True)  # 1, t, t^2, t^3
    A = V.T @ V
    if np.linalg.cond(A) > 1e12:
        raise MetricError("normal equations are rank deficient")
    b = np.linalg.solve(A, V.T @ y)
    # sum_k b_k ((x - c)/s)^k expanded in powers of x
    raw = np.zeros(4)
    for k in range(4):
        for j in range(k + 1):
            raw[j] += b[k] * math.comb(k, j) * (-center) ** (k - j) / scale ** k
    return TradeoffCurve((raw[3], raw[2], raw[1], raw[0]), (float(x.min()), float(x.max())))


def fit_residual(curve: TradeoffCurve, points: Iterable[TradeoffPoint]) -> float:
    return max(abs(p.robust_acc - curve_eval(curve, p.standard_acc)) for p in points)


def _normal_residual(curve, p, q, x):
    """Pole-free form of the normal condition, ``h(x) * f'(x)``."""
    return (q - curve_eval(curve, x)) * curve_deriv(curve, x) + (p - x)


def normal_foot(point: TradeoffPoint, curve: TradeoffCurve, guess: float | None = None,
                tol: float = 1e-10, max_iter: int = 200) -> float:
    """Abscissa of the curve point whose normal passes through ``point``.

    Solves ``q - f(x) + (p - x) / f'(x) = 0`` by Newton's method safeguarded
    with bisection on a sign-change bracket grown outwards from ``guess``.
    """
    p, q = point.standard_acc, point.robust_acc
    x0 = p if guess is None else float(guess)

    def g(x):
        return _normal_residual(curve, p, q, x)

    def dg(x):
        d1 = curve_deriv(curve, x)
        return -d1 * d1 + (q - curve_eval(curve, x)) * curve_deriv2(curve, x) - 1.0

    def h(x):
        d1 = curve_deriv(curve, x)
        if d1 == 0:
            raise MetricError(f"curve derivative vanishes at x = {x}; normal undefined")
        return g(x) / d1

    if g(x0) == 0:
        lo = hi = x0
    else:
        width = 1e-3 * max(1.0, abs(x0))
        for _ in range(80):
            lo, hi = x0 - width, x0 + width
            if g(lo) * g(hi) <= 0:
                break
            width *= 2.0
        else:
            raise MetricError(f"no sign change of the normal condition around x = {x0}")

    glo = g(lo)
    x = x0 if lo < x0 < hi else 0.5 * (lo + hi)
    for _ in range(max_iter):
        gx = g(x)
        if abs(h(x)) < tol:
            return x
        if (gx < 0) == (glo < 0):
            lo, glo = x, gx
        else:
            hi = x
        slope = dg(x)
        step_ok = slope != 0
        if step_ok:
            xn = x - gx / slope
            step_ok = lo < xn < hi
        x = xn if step_ok else 0.5 * (lo + hi)
        if hi - lo <= 4 * np.finfo(float).eps * max(1.0, abs(x)):
            break
    residual = abs(h(x))
    if residual < tol:
        return x
    raise MetricError(f"root finding did not converge: |h(x)| = {residual:.3e} at x = {x}")


def ardist(point: TradeoffPoint, curve: TradeoffCurve, guess: float | None = None) -> float:
    """Signed distance from ``point`` to ``curve`` along the curve normal."""
    p, q = point.standard_acc, point.robust_acc
    above = q - curve_eval(curve, p)
    if above == 0:
        return 0.0
    x = normal_foot(point, curve, guess)
    if curve_deriv(curve, x) == 0:
        raise MetricError(f"curve derivative vanishes at the foot x = {x}")
    return math.copysign(math.hypot(p - x, q - curve_eval(curve, x)), above)


def sum_metric(point: TradeoffPoint) -> float:
    return point.standard_acc + point.robust_acc


# -- representation similarity ---------------------------------------------------

def cosine_similarities(model_a, model_b, images: np.ndarray, batch_size: int = 256):
    """Per-example cosine similarity of clean-input representations.

    Returns ``(similarities, skipped)`` where zero-norm rows are dropped.
    """
    if model_a.representation_size != model_b.representation_size:
        raise MetricError("models have different representation sizes")
    sims, skipped = [], 0
    for i in range(0, len(images), batch_size):
        xb = images[i:i + batch_size]
        u = model_a.represent(xb, track_params=False).data
        v = model_b.represent(xb, track_params=False).data
        nu = np.linalg.norm(u, axis=1)
        nv = np.linalg.norm(v, axis=1)
        ok = (nu > 0) & (nv > 0)
        skipped += int((~ok).sum())
        sims.append((u[ok] * v[ok]).sum(axis=1) / (nu[ok] * nv[ok]))
    return np.concatenate(sims) if sims else np.zeros(0), skipped


def mean_cosine_similarity(model_a, model_b, dataset, batch_size: int = 256) -> float:
    images = dataset.images if isinstance(dataset, Dataset) else np.asarray(dataset)
    sims, skipped = cosine_similarities(model_a, model_b, images, batch_size)
    if skipped > 0.01 * len(images):
        raise MetricError(f"{skipped} of {len(images)} examples have zero-norm representations")
    if sims.size == 0:
        raise MetricError("no examples to compare")
    return float(sims.mean())


# -- CSV --------------------------------------------------------------------------

POINT_COLUMNS = ("label", "standard_acc", "robust_acc")


def read_points_csv(path) -> list[TradeoffPoint]:
    points = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row or all(not c.strip() for c in row) or row[0].lstrip().startswith("#"):
                continue
            if lineno == 1 and tuple(c.strip() for c in row[:3]) == POINT_COLUMNS:
                continue
            if len(row) < 3:
                raise MetricError(f"line {lineno}: expected label,standard_acc,robust_acc")
            try:
                points.append(TradeoffPoint(float(row[1]), float(row[2]), row[0].strip()))
            except ValueError as exc:
                raise MetricError(f"line {lineno}: {exc}") from None
    if not points:
        raise MetricError(f"{path}: no data rows")
    return points


def report_rows(points: Sequence[TradeoffPoint], curve: TradeoffCurve,
                guess: float | None = None) -> list[dict]:
    return [{"label": p.label, "standard_acc": p.standard_acc, "robust_acc": p.robust_acc,
             "sum": sum_metric(p), "ardist": ardist(p, curve, guess)} for p in points]
