"""
Margins, CLEVER-style certified radii and the orbit diagnostics.

Every routine here accepts either a built `Model` or any callable mapping an
(N, C, H, W) tensor to (N, k) logits, so analytic test functions can be
plugged in directly.
"""

from __future__ import annotations

import logging
import math
from typing import Callable, Sequence

import numpy as np
import scipy.optimize
import scipy.stats
from scipy import ndimage
from scipy.stats import weibull_min

from .attacks import attack, evaluation_mode
from .groups import GroupAction, P4Group, resize_array
from .schemas import (ArchitectureId, AttackConfig, CertifyConfig, CleverScore, DiagnosticsReport, Estimator,
                      LipschitzEstimate, MarginValue, MaxInvariantResult, OrbitRow, SuppressionResult)
from .tensor import NonFiniteError, Tensor, backward, get_default_dtype, no_grad

logger = logging.getLogger(__name__)

# shape initialisations tried by the reverse-Weibull fit
WEIBULL_SHAPE_INITS = (0.1, 1.0, 5.0, 10.0, 20.0, 50.0, 100.0)


class HypothesisError(ValueError):
    """The model does not satisfy the hypothesis of the requested check."""


class DegenerateTangentError(ValueError):
    """The rotation tangent of an input vanishes."""


class MisclassifiedSampleError(ValueError):
    """The clean input is already misclassified."""


# --- logits and gradients ------------------------------------------------

def logits_of(model, x: np.ndarray) -> np.ndarray:
    """Logits for a single input (C, H, W) or a batch (N, C, H, W)."""
    x = np.asarray(x, dtype=get_default_dtype())
    single = x.ndim == 3
    with no_grad(), evaluation_mode(model):
        out = model(Tensor(x[None] if single else x)).data
    return out[0] if single else out


def class_gradients(model, points: np.ndarray, classes: Sequence[int]) -> dict[int, np.ndarray]:
    """∇_x f_j at every point, for each requested class j.

    One backward pass per class of Σ_n f_j(x_n); samples are independent in
    eval mode, so row n is the gradient at point n.
    """
    points = np.asarray(points, dtype=get_default_dtype())
    grads: dict[int, np.ndarray] = {}
    with evaluation_mode(model):
        for j in classes:
            leaf = Tensor(points.copy(), requires_grad=True)
            out = model(leaf)[:, j].sum()
            backward(out)
            g = leaf.grad if leaf.grad is not None else np.zeros_like(points)
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient of logit {j}")
            grads[j] = g
    return grads


def dual_norm(vectors: np.ndarray, q: float) -> np.ndarray:
    """Row-wise ℓ_q norm of a (B, ...) array."""
    flat = np.asarray(vectors).reshape(len(vectors), -1)
    if math.isinf(q):
        return np.abs(flat).max(axis=1)
    return np.linalg.norm(flat, ord=q, axis=1)


# --- margins -------------------------------------------------------------

def margins_from_logits(logits: np.ndarray, sample_id: int = 0) -> MarginValue:
    logits = np.asarray(logits, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(logits)):
        raise NonFiniteError("margins of non-finite logits")
    c = int(np.argmax(logits))
    return MarginValue(sample_id=sample_id, predicted=c,
                       margins={j: float(logits[c] - logits[j]) for j in range(len(logits)) if j != c})


def margins(model, x: np.ndarray, sample_id: int = 0) -> MarginValue:
    return margins_from_logits(logits_of(model, x), sample_id)


# --- CLEVER --------------------------------------------------------------

def _fit_and_test(rescaled: np.ndarray, sample: np.ndarray, loc_shift: float, rescale: float,
                  c_init: float) -> tuple[float, float, float, float]:
    def quiet_fmin(func, x0, args=(), disp=0):
        return scipy.optimize.fmin(func, x0, args=args, disp=0)

    c, loc, scale = weibull_min.fit(-rescaled, c_init, optimizer=quiet_fmin)
    loc = -loc_shift + loc * rescale
    scale = scale * rescale
    _, p_value = scipy.stats.kstest(-sample, "weibull_min", args=(c, loc, scale))
    return float(c), float(loc), float(scale), float(p_value)


def reverse_weibull_location(maxima: np.ndarray) -> tuple[float, float, float]:
    """Fit a reverse Weibull to batch maxima; returns (location, shape, K-S p-value).

    The sample is shifted by its max and rescaled by its range before the
    MLE, and the best of several shape initialisations (by p-value) wins.
    """
    maxima = np.asarray(maxima, dtype=np.float64)
    loc_shift = float(maxima.max())
    spread = float(maxima.max() - maxima.min())
    if spread <= 0.0:
        raise ValueError("batch maxima are all equal; nothing to fit")
    rescaled = (maxima - loc_shift) / spread
    best = None
    for c_init in WEIBULL_SHAPE_INITS:
        try:
            c, loc, _, p_value = _fit_and_test(rescaled, maxima, loc_shift, spread, c_init)
        except (ValueError, RuntimeError, FloatingPointError):
            continue
        if not np.isfinite(p_value) or not np.isfinite(loc):
            continue
        if best is None or p_value > best[2]:
            best = (-loc, c, p_value)
    if best is None:
        raise ValueError("reverse Weibull fit did not converge")
    return best


def lipschitz_from_maxima(maxima: np.ndarray, estimator: str) -> tuple[float, float | None, float | None, bool]:
    """(L̂, shape, p-value, fell_back) from per-batch maxima; L̂ never drops below the observed max."""
    observed = float(np.max(maxima))
    if estimator == Estimator.MAX_SAMPLE.value or observed == 0.0:
        return observed, None, None, False
    try:
        location, shape, p_value = reverse_weibull_location(maxima)
    except ValueError as exc:
        logger.warning("Weibull fit fell back to the max sample: %s", exc)
        return observed, None, None, True
    if location < observed:
        logger.warning("Weibull location %.6g below observed max %.6g; using the max", location, observed)
        return observed, shape, p_value, True
    return location, shape, p_value, False


def sample_ball(x: np.ndarray, radius: float, count: int, rng: np.random.Generator, clip: bool) -> np.ndarray:
    points = x[None] + rng.uniform(-radius, radius, size=(count,) + x.shape)
    return np.clip(points, 0.0, 1.0) if clip else points


def clever_score(model, x: np.ndarray, config: CertifyConfig, sample_id: int = 0) -> CleverScore:
    """min_j g_{c,j}(x) / L̂_q^{(j)} with L̂ estimated from sampled margin-gradient norms."""
    x = np.asarray(x, dtype=get_default_dtype())
    margin = margins(model, x, sample_id)
    c = margin.predicted
    competitors = sorted(margin.margins)
    classes = [c] + competitors
    maxima = {j: np.zeros(config.n_batches) for j in competitors}
    for b in range(config.n_batches):
        rng = np.random.default_rng((config.seed, sample_id, b))
        points = sample_ball(x, config.radius, config.samples_per_batch, rng, config.clip_to_box)
        grads = class_gradients(model, points, classes)
        for j in competitors:
            maxima[j][b] = dual_norm(grads[c] - grads[j], config.q).max()

    estimates, per_class = [], {}
    for j in competitors:
        value, shape, p_value, fell_back = lipschitz_from_maxima(maxima[j], config.estimator)
        estimates.append(LipschitzEstimate(
            competitor=j, value=value, q=config.q, n_samples=config.n_batches * config.samples_per_batch,
            radius=config.radius, estimator=config.estimator, max_observed=float(maxima[j].max()),
            weibull_shape=shape, weibull_pvalue=p_value, fell_back=fell_back))
        g = margin.margins[j]
        if g <= 0.0:
            per_class[j] = 0.0
        elif value == 0.0:
            per_class[j] = math.inf
        else:
            per_class[j] = g / value
    score = min(per_class.values()) if per_class else math.inf
    return CleverScore(sample_id=sample_id, predicted=c, score=score, per_class=per_class, estimates=estimates,
                       unbounded=bool(estimates) and all(e.value == 0.0 for e in estimates))


# --- orbit diagnostics ---------------------------------------------------

def orbit_gradient_table(model, x: np.ndarray, q: float = 1.0, group: GroupAction | None = None,
                         sample_id: int = 0) -> DiagnosticsReport:
    """Margin-gradient norms over the orbit of x; the class c is fixed at the reference input."""
    group = group or P4Group()
    x = np.asarray(x, dtype=get_default_dtype())
    reference = margins(model, x, sample_id)
    c = reference.predicted
    competitors = sorted(reference.margins)
    orbit = np.stack(group.orbit(x))
    grads = class_gradients(model, orbit, [c] + competitors)
    predicted = np.argmax(logits_of(model, orbit), axis=1)

    norms = {j: dual_norm(grads[c] - grads[j], q) for j in competitors}
    rows = []
    for i, g in enumerate(group.elements):
        per_j = {j: float(norms[j][i]) for j in competitors}
        deviation = max((abs(norms[j][i] - norms[j][0]) for j in competitors), default=0.0)
        rows.append(OrbitRow(rotation=int(g), predicted=int(predicted[i]), gradient_norms=per_j,
                             deviation=float(deviation)))
    return DiagnosticsReport(sample_id=sample_id, architecture_id=_architecture(model), q=q, orbit_rows=rows,
                             max_deviation=max(r.deviation for r in rows))


def _architecture(model) -> str:
    return str(getattr(model, "architecture_id", "callable"))


def theorem1_check(model, x: np.ndarray, tolerance: float = 1e-8, q: float = 1.0,
                   sample_id: int = 0) -> DiagnosticsReport:
    """Orbit invariance of ‖∇g_{c,j}‖_q for rotation-invariant classifiers."""
    if _architecture(model) != ArchitectureId.FULLY_EQUIVARIANT.value:
        raise HypothesisError(
            f"orbit-invariance check needs a fully equivariant model with group pooling, "
            f"got {_architecture(model)!r}; use orbit_gradient_table for a report-only table")
    report = orbit_gradient_table(model, x, q, P4Group(), sample_id)
    report.theorem1_passed = report.max_deviation <= tolerance
    if not report.theorem1_passed:
        logger.warning("sample %d: orbit gradient deviation %.3g exceeds %.1g", sample_id,
                       report.max_deviation, tolerance)
    return report


def symmetrize_field(field: Callable[[np.ndarray], np.ndarray], x: np.ndarray,
                     group: GroupAction | None = None) -> np.ndarray:
    """(1/|G|) Σ_g T_g⁻¹ field(g·x): a vector field averaged over the orbit, in the frame of x."""
    group = group or P4Group()
    aligned = [group.align(g, field(group.act_input(g, x))) for g in group.elements]
    return np.mean(np.stack(aligned), axis=0)


def logit_gradient(model, x: np.ndarray, j: int) -> np.ndarray:
    return class_gradients(model, np.asarray(x)[None], [j])[j][0]


def orbit_averaged_gradient(model, x: np.ndarray, j: int, group: GroupAction | None = None) -> np.ndarray:
    return symmetrize_field(lambda z: logit_gradient(model, z, j), np.asarray(x, dtype=get_default_dtype()), group)


def rotation_tangent(x: np.ndarray, angle_deg: float = 2.0) -> np.ndarray:
    """Unit direction (rot_θ(x) − x)/‖·‖ using bilinear rotation of each plane."""
    x = np.asarray(x, dtype=np.float64)
    rotated = ndimage.rotate(x, angle_deg, axes=(x.ndim - 1, x.ndim - 2), reshape=False, order=1,
                             mode="constant", cval=0.0)
    diff = rotated - x
    norm = float(np.linalg.norm(diff))
    if norm < 1e-9:
        raise DegenerateTangentError(
            f"rotation by {angle_deg}° leaves the input unchanged (‖rot−x‖={norm:.2e}); "
            "the input is rotationally symmetric or constant")
    return diff / norm


def suppression_diagnostic(model, x: np.ndarray, angle_deg: float = 2.0, trials: int = 10, step: float = 1e-2,
                           seed: int = 0, sample_id: int = 0) -> SuppressionResult:
    """Gradient change off the orbit relative to the change along it.

    Returns mean ‖∇f_c(x+hδ⊥)−∇f_c(x)‖ / ‖∇f_c(x+hδ_G)−∇f_c(x)‖, where δ_G is
    the rotation tangent and δ⊥ are random unit directions orthogonal to it.
    """
    if trials < 10:
        raise ValueError(f"suppression diagnostic needs at least 10 trials, got {trials}")
    x = np.asarray(x, dtype=get_default_dtype())
    tangent = rotation_tangent(x, angle_deg)
    c = int(np.argmax(logits_of(model, x)))
    if step == 0.0:
        return SuppressionResult(sample_id=sample_id, predicted=c, on_orbit_change=0.0, off_orbit_change=0.0,
                                 ratio=1.0, angle_deg=angle_deg, step=step, trials=trials)

    rng = np.random.default_rng((seed, sample_id))
    t = tangent.reshape(-1)
    directions = []
    for _ in range(trials):
        v = rng.standard_normal(t.size)
        v -= (v @ t) * t
        directions.append((v / np.linalg.norm(v)).reshape(x.shape))
    points = np.stack([x, x + step * tangent] + [x + step * d for d in directions])
    grads = class_gradients(model, points, [c])[c]
    base = grads[0]
    on_orbit = float(np.linalg.norm(grads[1] - base))
    off_orbit = float(np.mean([np.linalg.norm(g - base) for g in grads[2:]]))
    if on_orbit == 0.0:
        ratio = 1.0 if off_orbit == 0.0 else math.inf
    else:
        ratio = off_orbit / on_orbit
    return SuppressionResult(sample_id=sample_id, predicted=c, on_orbit_change=on_orbit, off_orbit_change=off_orbit,
                             ratio=ratio, angle_deg=angle_deg, step=step, trials=trials)


def scale_gradient_statistics(model, x: np.ndarray, factors: Sequence[float], j: int | None = None) -> dict:
    """Spread of ‖∇f_j‖₂ across scale-space copies resize(resize(x, α), H×W) of one input.

    Exposed as a statistic only; no threshold is implied.
    """
    x = np.asarray(x, dtype=get_default_dtype())
    h, w = x.shape[-2:]
    j = int(np.argmax(logits_of(model, x))) if j is None else j
    copies = []
    for alpha in factors:
        size = (max(1, round(alpha * h)), max(1, round(alpha * w)))
        copies.append(resize_array(resize_array(x, size), (h, w)))
    norms = np.linalg.norm(class_gradients(model, np.stack(copies), [j])[j].reshape(len(copies), -1), axis=1)
    return {"class": j, "factors": [float(a) for a in factors], "norms": norms.tolist(),
            "mean": float(norms.mean()), "variance": float(norms.var())}


# --- maximum invariant perturbation --------------------------------------

def bisect_invariant_epsilon(preserved_at: Callable[[float], bool], eps_hi: float,
                             tol: float = 1.0 / 512.0) -> tuple[float, float, list[tuple[float, bool]]]:
    """Largest ε in [0, eps_hi] with preserved prediction, assuming monotone flips.

    Returns (lo, hi, evaluations): lo preserved, hi flipped (hi − lo ≤ tol), or
    lo = hi = eps_hi when nothing up to eps_hi flips.
    """
    evaluations: list[tuple[float, bool]] = []

    def probe(eps: float) -> bool:
        kept = bool(preserved_at(eps))
        evaluations.append((eps, kept))
        return kept

    if probe(eps_hi):
        return eps_hi, eps_hi, evaluations
    lo, hi = 0.0, eps_hi
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if probe(mid):
            lo = mid
        else:
            hi = mid
    return lo, hi, evaluations


def max_invariant_perturbation(model, x: np.ndarray, label: int, attack_config: AttackConfig,
                               eps_hi: float = 0.5, tol: float = 1.0 / 512.0, monotonicity_probes: int = 4,
                               sample_id: int = 0) -> MaxInvariantResult:
    """Largest attack budget under which the prediction on x does not change."""
    if not 0.0 < eps_hi <= 1.0:
        raise ValueError(f"eps_hi must lie in (0, 1], got {eps_hi}")
    x = np.asarray(x, dtype=get_default_dtype())
    if int(np.argmax(logits_of(model, x))) != int(label):
        raise MisclassifiedSampleError(f"sample {sample_id}: maximum invariant perturbation is undefined "
                                       "for a misclassified sample")
    labels = np.array([label])

    def preserved_at(eps: float) -> bool:
        x_adv = attack(model, x[None], labels, attack_config.with_epsilon(eps), sample_offset=sample_id)
        return int(np.argmax(logits_of(model, x_adv[0]))) == int(label)

    lo, hi, evaluations = bisect_invariant_epsilon(preserved_at, eps_hi, tol)
    non_monotone = False
    if hi < eps_hi and monotonicity_probes > 0:
        for eps in np.linspace(hi, eps_hi, monotonicity_probes + 2)[1:-1]:
            kept = preserved_at(float(eps))
            evaluations.append((float(eps), kept))
            if kept:
                non_monotone = True
        if non_monotone:
            logger.warning("sample %d: prediction preserved above the bisection flip point %.4f", sample_id, hi)
    return MaxInvariantResult(sample_id=sample_id, attack=str(attack_config.kind), epsilon=lo, epsilon_hi=eps_hi,
                              tolerance=tol, evaluations=evaluations, non_monotone=non_monotone)


def overshoot_rate(scores: Sequence[float], flip_epsilons: Sequence[float | None]) -> float:
    """Fraction of samples an attack flips at a budget below the certified radius.

    `flip_epsilons[i]` is None when no flip was found up to the search limit.
    """
    pairs = [(s, f) for s, f in zip(scores, flip_epsilons)]
    if not pairs:
        return 0.0
    return float(np.mean([f is not None and f < s for s, f in pairs]))


def bootstrap_ci(values: Sequence[float], statistic: Callable[[np.ndarray], float] = np.mean,
                 n_boot: int = 1000, level: float = 0.95, seed: int = 0) -> tuple[float, float, float]:
    """Percentile bootstrap: (estimate, lower, upper)."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ValueError("bootstrap of an empty sample")
    rng = np.random.default_rng(seed)
    draws = rng.integers(0, values.size, size=(n_boot, values.size))
    stats = np.array([statistic(values[idx]) for idx in draws])
    tail = (1.0 - level) / 2.0
    return float(statistic(values)), float(np.quantile(stats, tail)), float(np.quantile(stats, 1.0 - tail))
