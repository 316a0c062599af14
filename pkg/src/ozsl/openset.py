"""Open-set classification heads: plain softmax (never rejects) and an
extreme-value-calibrated head with an explicit rejection bin.

Calibration follows the meta-recognition recipe: per class, compute the
mean activation vector (MAV) of correctly classified training activations,
fit a Weibull model to the tail of the activation-to-MAV distances, and at
prediction time attenuate the top-ranked classes' softmax mass by the
Weibull CDF of the probe's distance, routing the attenuated mass into the
rejection bin.  Attenuation acts on softmax mass (exponentiated scores)
rather than raw activations: logits carry arbitrary sign, and mass-space
attenuation keeps the rejection probability exactly zero when no tail is
excited and monotone in the probe's distances.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, FlatTailError, ValidationError
from .matio import as_matrix, read_matrix, write_matrix

REJECT = "REJECT"

NEWTON_TOL = 1e-9
NEWTON_MAX_ITERS = 200


@dataclass(frozen=True)
class WeibullModel:
    """Two-parameter Weibull over tail distances shifted by `tau`."""

    shape: float
    scale: float
    tau: float
    tail_size: int

    def cdf(self, distance: float) -> float:
        if distance <= self.tau:
            return 0.0
        z = (distance - self.tau) / self.scale
        return 1.0 - math.exp(-(z ** self.shape))


@dataclass
class ClassCalibration:
    class_id: str
    mav: np.ndarray  # (1, A)
    weibull: WeibullModel


@dataclass
class OpenPrediction:
    """Probabilities over K classes plus one rejection bin (last entry)."""

    probs: np.ndarray  # (K + 1,), sums to 1
    decision: str  # class id or REJECT


# ---------------------------------------------------------------------------
# Weibull maximum likelihood


def _profile_equation(x: np.ndarray, log_x: np.ndarray, mean_log: float, k: float):
    """g(k) and g'(k) for the shape-parameter profile likelihood.

    g is strictly increasing (weighted variance plus 1/k^2), so the root is
    unique and bracketable.
    """
    w = x ** k
    sw = w.sum()
    a = (w * log_x).sum() / sw
    g = a - 1.0 / k - mean_log
    var = (w * log_x * log_x).sum() / sw - a * a
    return g, var + 1.0 / (k * k)


def _solve_shape(x: np.ndarray) -> float:
    """Newton iteration on the profile likelihood with bisection fallback."""
    log_x = np.log(x)
    mean_log = float(log_x.mean())
    k = 1.0
    for _ in range(NEWTON_MAX_ITERS):
        g, dg = _profile_equation(x, log_x, mean_log, k)
        step = g / dg
        new_k = k - step
        if not (math.isfinite(new_k) and new_k > 0.0):
            break
        if abs(new_k - k) < NEWTON_TOL:
            return new_k
        k = new_k
    else:
        return k

    # bracket the unique root of the increasing g, then bisect
    lo, hi = 1e-8, 1.0
    while _profile_equation(x, log_x, mean_log, hi)[0] < 0.0 and hi < 1e8:
        hi *= 2.0
    while _profile_equation(x, log_x, mean_log, lo)[0] > 0.0 and lo > 1e-12:
        lo /= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if _profile_equation(x, log_x, mean_log, mid)[0] > 0.0:
            hi = mid
        else:
            lo = mid
        if hi - lo < NEWTON_TOL * max(1.0, hi):
            break
    return 0.5 * (lo + hi)


def fit_weibull(distances, tail_size: int, shift: str = "tail-min") -> WeibullModel:
    """Maximum-likelihood Weibull fit on the `tail_size` largest distances.

    shift="tail-min" places tau just below the smallest tail value (an exact
    minimum shift makes the two-parameter likelihood degenerate); the CDF is
    zero at and below tau.  shift="none" fits the raw values, for use when
    the data is a full sample rather than a tail.
    """
    d = np.asarray(distances, dtype=np.float64).ravel()
    if tail_size < 2:
        raise ValidationError("tail_size must be >= 2")
    if d.size < tail_size:
        raise ValidationError(f"need at least {tail_size} distances, got {d.size}")
    if (d < 0.0).any():
        raise DomainError("distances must be non-negative")
    tail = np.sort(d)[-tail_size:]
    lo, hi = float(tail[0]), float(tail[-1])
    if hi - lo <= 0.0:
        raise FlatTailError("tail distances are all equal")

    if shift == "tail-min":
        margin = 1e-6 * lo if lo > 0.0 else 1e-9 * (hi - lo)
        tau = lo - margin
    elif shift == "none":
        tau = 0.0
        if (tail <= 0.0).any():
            raise DomainError("unshifted fit needs strictly positive distances")
    else:
        raise ValidationError(f"unknown shift policy {shift!r}")

    x = tail - tau
    # the profile equation is scale-invariant; normalize to dodge overflow
    c = float(x.max())
    k = _solve_shape(x / c)
    lam = c * float(np.mean((x / c) ** k) ** (1.0 / k))
    if not (math.isfinite(k) and k > 0.0 and math.isfinite(lam) and lam > 0.0):
        raise FlatTailError("Weibull fit did not converge to positive parameters")
    return WeibullModel(shape=k, scale=lam, tau=tau, tail_size=tail_size)


# ---------------------------------------------------------------------------
# per-class calibration


def compute_calibrations(activations_by_class: dict[str, np.ndarray], tail_size: int,
                         shift: str = "tail-min") -> list[ClassCalibration]:
    """MAV plus tail Weibull per class from correctly classified activations.

    Classes with fewer than `tail_size` samples trigger a warning and the fit
    falls back to a global tail size that every class can support.
    """
    if not activations_by_class:
        raise ValidationError("no activations given")
    counts = {c: as_matrix(a).shape[0] for c, a in activations_by_class.items()}
    smallest = min(counts.values())
    eta = tail_size
    if smallest < tail_size:
        eta = max(2, smallest)
        short = sorted(c for c, n in counts.items() if n < tail_size)
        warnings.warn(
            f"classes {short} have fewer than {tail_size} correct activations; "
            f"falling back to global tail size {eta}",
            stacklevel=2,
        )
    out = []
    for class_id in sorted(activations_by_class.keys()):
        acts = as_matrix(activations_by_class[class_id])
        mav = acts.mean(axis=0, keepdims=True)
        dists = np.linalg.norm(acts - mav, axis=1)
        out.append(ClassCalibration(
            class_id=class_id,
            mav=mav,
            weibull=fit_weibull(dists, eta, shift=shift),
        ))
    return out


# ---------------------------------------------------------------------------
# prediction heads


def softmax_predict(activation) -> int:
    """Plain argmax over K classes; ties break to the lowest index."""
    a = np.asarray(activation, dtype=np.float64).ravel()
    return int(np.argmax(a))


def openmax_predict(activation, calibrations: list[ClassCalibration],
                    alpha_top: int | None = None) -> OpenPrediction:
    """Recalibrated probabilities over K classes plus a rejection bin.

    The `alpha_top` highest-activation classes get their softmax mass
    attenuated by weight * Weibull CDF of the probe's MAV distance, with
    rank weights (alpha - rank + 1) / alpha; the removed mass lands in the
    rejection bin.  Ties in the final argmax break toward REJECT, then the
    lowest class index.
    """
    a = np.asarray(activation, dtype=np.float64).ravel()
    k = len(calibrations)
    if a.size != k:
        raise ValidationError(f"activation length {a.size} != {k} calibrated classes")
    if alpha_top is None:
        alpha_top = min(k, 10)
    if not 1 <= alpha_top <= k:
        raise ValidationError(f"alpha_top must lie in [1, {k}]")
    for cal in calibrations:
        if cal.mav.shape[1] != a.size:
            raise ValidationError("probe dimension does not match calibration MAVs")

    mass = np.exp(a - a.max())  # softmax numerators, shift-invariant
    ranked = np.argsort(-a, kind="stable")
    rejected_mass = 0.0
    for rank, idx in enumerate(ranked[:alpha_top], start=1):
        weight = (alpha_top - rank + 1) / alpha_top
        dist = float(np.linalg.norm(a - calibrations[idx].mav.ravel()))
        attenuation = weight * calibrations[idx].weibull.cdf(dist)
        rejected_mass += mass[idx] * attenuation
        mass[idx] *= 1.0 - attenuation

    total = mass.sum() + rejected_mass
    probs = np.concatenate([mass, [rejected_mass]]) / total
    class_best = int(np.argmax(probs[:k]))
    if probs[k] >= probs[class_best]:
        decision = REJECT
    else:
        decision = calibrations[class_best].class_id
    return OpenPrediction(probs=probs, decision=decision)


# ---------------------------------------------------------------------------
# tail-size sweep helper (the per-class precision/recall bars experiment)


def tail_size_range(lo: int = 2, hi: int = 10) -> list[int]:
    if lo < 2 or hi < lo:
        raise ValidationError("tail size range must satisfy 2 <= lo <= hi")
    return list(range(lo, hi + 1))


# ---------------------------------------------------------------------------
# calibration file

CALIBRATION_MAGIC = "OZSLCAL1"


def save_calibrations(path, calibrations: list[ClassCalibration]) -> None:
    header = {
        "magic": CALIBRATION_MAGIC,
        "version": 1,
        "classes": [c.class_id for c in calibrations],
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for cal in calibrations:
            record = {
                "class": cal.class_id,
                "k": cal.weibull.shape,
                "lambda": cal.weibull.scale,
                "tau": cal.weibull.tau,
                "eta": cal.weibull.tail_size,
            }
            fh.write(json.dumps(record, sort_keys=True).encode("utf-8") + b"\n")
            write_matrix(fh, cal.mav)


def load_calibrations(path) -> list[ClassCalibration]:
    with open(path, "rb") as fh:
        try:
            header = json.loads(fh.readline().decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ValidationError(f"{path}: bad calibration header") from exc
        if header.get("magic") != CALIBRATION_MAGIC or header.get("version") != 1:
            raise ValidationError(f"{path}: not a calibration file")
        out = []
        for expected in header["classes"]:
            record = json.loads(fh.readline().decode("utf-8"))
            if record["class"] != expected:
                raise ValidationError(f"{path}: class order mismatch")
            mav = read_matrix(fh)
            out.append(ClassCalibration(
                class_id=record["class"],
                mav=mav,
                weibull=WeibullModel(
                    shape=float(record["k"]),
                    scale=float(record["lambda"]),
                    tau=float(record["tau"]),
                    tail_size=int(record["eta"]),
                ),
            ))
    return out
