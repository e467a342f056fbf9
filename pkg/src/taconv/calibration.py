"""Severity standardization: tune each perturbation to one accuracy drop."""
from __future__ import annotations

import csv
import hashlib
import io
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .dataio import Dataset
from .errors import CalibrationError
from .layers import Network, canonical_json, model_hash
from .perturbations import DEFAULT_S_MAX, PerturbationSpec, mse_pair, perturb_batch
from .training import accuracy

logger = logging.getLogger(__name__)

REPORT_COLUMNS = ("kind", "severity", "drop", "mse")


@dataclass
class Bisection:
    severity: float
    drop: float
    probes: list        # (severity, drop) in probe order, coarse grid included
    bisection_probes: int


def bisect_severity(drop_at: Callable[[float], float], target_drop: float, tol: float, s_max: float,
                    resolution: float | None = None, grid_points: int = 4,
                    precision: float | None = None, kind: str = "") -> Bisection:
    """Find a severity in [0, s_max] whose drop is within ``tol`` of ``target_drop``.

    A coarse grid is probed first to check that the drop grows with severity
    (a dip larger than ``tol`` is an error) and to bracket the target.  The
    bracket is then halved until the drop is within ``precision`` (default
    tol / 4) of the target or the bracket is narrower than ``resolution``;
    the closest probe is returned.
    """
    if resolution is None:
        resolution = s_max / 2 ** 20
    precision = tol / 4 if precision is None else precision
    probes = []

    def probe(s):
        d = float(drop_at(s))
        probes.append((s, d))
        return d

    if abs(probe(0.0) - target_drop) <= precision:
        return Bisection(0.0, probes[0][1], probes, 0)

    grid = [s_max * (i + 1) / grid_points for i in range(grid_points)]
    drops = [probe(s) for s in grid]
    prev = probes[0][1]
    for s, d in zip(grid, drops):
        if d < prev - tol:
            raise CalibrationError(f"{kind or 'perturbation'}: accuracy drop is not monotone in severity "
                                   f"(drop {prev:.2f} then {d:.2f} at severity {s:.4g})")
        prev = max(prev, d)
    max_drop = max(drops)
    if max_drop < target_drop - tol:
        raise CalibrationError(f"{kind or 'perturbation'}: target drop {target_drop} unreachable within "
                               f"s_max={s_max}; max achievable drop {max_drop:.2f}")

    lo, hi = 0.0, grid[-1]
    for s, d in zip(grid, drops):
        if d < target_drop:
            lo = s
        else:
            hi = s
            break

    n_bisect = 0
    best = min(probes, key=lambda p: abs(p[1] - target_drop))
    while abs(best[1] - target_drop) > precision and hi - lo > resolution:
        mid = 0.5 * (lo + hi)
        d = probe(mid)
        n_bisect += 1
        if d < target_drop:
            lo = mid
        else:
            hi = mid
        if abs(d - target_drop) < abs(best[1] - target_drop):
            best = (mid, d)
    if abs(best[1] - target_drop) > tol:
        raise CalibrationError(f"{kind or 'perturbation'}: closest drop {best[1]:.2f} at severity "
                               f"{best[0]:.4g} misses target {target_drop} by more than {tol}")
    return Bisection(best[0], best[1], probes, n_bisect)


def max_bisection_probes(s_max: float, resolution: float) -> int:
    return math.ceil(math.log2(s_max / resolution))


@dataclass
class CalibrationResult:
    kind: str
    severity: float
    achieved_drop: float
    accuracy: float
    clean_accuracy: float
    mse: float
    probes: list = field(default_factory=list)


def perturbed_accuracy(model: Network, data: Dataset, kind: str, severity: float, seed: int,
                       extras: dict | None = None) -> tuple[float, np.ndarray]:
    spec = PerturbationSpec(kind, severity, seed=seed, extras=dict(extras or {}))
    imgs = perturb_batch(data.images, spec, model=model, labels=data.labels)
    return accuracy(model, imgs, data.labels), imgs


def calibrate_severity(model: Network, eval_set: Dataset, kind: str, target_drop: float = 10.0,
                       tol: float = 1.0, s_max: float | None = None, seed: int = 0,
                       extras: dict | None = None, clean_accuracy: float | None = None,
                       resolution: float | None = None) -> CalibrationResult:
    """Bisect the severity of ``kind`` so that accuracy drops by ``target_drop`` points."""
    s_max = DEFAULT_S_MAX[kind] if s_max is None else s_max
    a0 = accuracy(model, eval_set.images, eval_set.labels) if clean_accuracy is None else clean_accuracy
    if target_drop >= a0:
        raise CalibrationError(f"{kind}: target drop {target_drop} exceeds clean accuracy {a0:.2f}")
    cache = {}

    def drop_at(s):
        acc, imgs = perturbed_accuracy(model, eval_set, kind, s, seed, extras)
        cache[s] = imgs
        logger.debug("%s severity %.6g -> accuracy %.2f", kind, s, acc)
        return a0 - acc

    result = bisect_severity(drop_at, target_drop, tol, s_max, resolution=resolution, kind=kind)
    mse = mse_pair(eval_set.images, cache[result.severity])
    return CalibrationResult(kind, result.severity, result.drop, a0 - result.drop, a0, mse, result.probes)


@dataclass
class SeverityProfile:
    entries: dict            # kind -> {severity, drop, mse, accuracy}
    target_drop: float
    tol: float
    clean_accuracy: float
    model_id: str
    dataset_id: str
    eval_seed: int = 0
    extras: dict = field(default_factory=dict)

    @property
    def drop_std(self) -> float:
        drops = [e["drop"] for e in self.entries.values()]
        return float(np.std(drops)) if drops else 0.0

    def severity(self, kind: str) -> float:
        return self.entries[kind]["severity"]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["drop_std"] = self.drop_std
        return d

    def to_json(self) -> str:
        return canonical_json(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "SeverityProfile":
        d = dict(d)
        d.pop("drop_std", None)
        return cls(**d)


def dataset_id(data: Dataset) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(data.images).tobytes())
    h.update(np.ascontiguousarray(data.labels).tobytes())
    return h.hexdigest()[:16]


def build_profile(model: Network, eval_set: Dataset, kinds, target_drop: float = 10.0, tol: float = 1.0,
                  seed: int = 0, s_max: dict | None = None, extras: dict | None = None) -> SeverityProfile:
    """Calibrate every kind in ``kinds`` on one model and evaluation set."""
    a0 = accuracy(model, eval_set.images, eval_set.labels)
    s_max, extras = dict(s_max or {}), dict(extras or {})
    entries = {}
    for kind in kinds:
        try:
            r = calibrate_severity(model, eval_set, kind, target_drop, tol, s_max.get(kind), seed,
                                   extras.get(kind), clean_accuracy=a0)
        except CalibrationError as exc:
            raise CalibrationError(f"calibration failed for {kind}: {exc}") from exc
        logger.info("%s: severity %.5g drop %.2f mse %.3f", kind, r.severity, r.achieved_drop, r.mse)
        entries[kind] = {"severity": r.severity, "drop": r.achieved_drop, "mse": r.mse,
                         "accuracy": r.accuracy}
    return SeverityProfile(entries, target_drop, tol, a0, model_hash(model), dataset_id(eval_set),
                           seed, {k: v for k, v in extras.items() if k in entries})


def standardization_report(profile: SeverityProfile) -> tuple[str, str]:
    """CSV text and a fixed-width table with columns kind, severity, drop, mse."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_COLUMNS)
    lines = [f"{'kind':<18}{'severity':>14}{'drop':>10}{'mse':>12}"]
    for kind, e in profile.entries.items():
        writer.writerow([kind, repr(float(e["severity"])), repr(float(e["drop"])), repr(float(e["mse"]))])
        lines.append(f"{kind:<18}{e['severity']:>14.6g}{e['drop']:>10.2f}{e['mse']:>12.3f}")
    if profile.entries:
        lines.append(f"drop std: {profile.drop_std:.3f} (target {profile.target_drop}, tol {profile.tol})")
    return buf.getvalue(), "\n".join(lines) + "\n"


def parse_report_csv(text: str) -> dict:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(rows[0]) != REPORT_COLUMNS:
        raise ValueError("not a standardization report")
    return {r[0]: {"severity": float(r[1]), "drop": float(r[2]), "mse": float(r[3])} for r in rows[1:]}
