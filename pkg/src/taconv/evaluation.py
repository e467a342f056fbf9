"""Robustness matrix: accuracy of every model under every calibrated condition."""
from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .calibration import SeverityProfile
from .dataio import Dataset
from .errors import DataError, TAConvError
from .layers import Network, canonical_json, model_hash
from .perturbations import ADVERSARIAL, AttackSpec, PerturbationSpec, bim_attack, perturb_batch
from .training import accuracy

logger = logging.getLogger(__name__)

CLEAN = "clean"


class ProfileMismatch(DataError):
    pass


@dataclass
class RobustnessMatrix:
    rows: list            # test conditions
    cols: list            # model names
    cells: list           # accuracy %, cells[i][j] for rows[i], cols[j]
    seen: list            # bool, same layout as cells
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        a = np.asarray(self.cells, dtype=np.float64).reshape(len(self.rows), len(self.cols))
        if a.size and (a.min() < 0 or a.max() > 100):
            raise ValueError("accuracy outside [0, 100]")
        if np.asarray(self.seen).shape != a.shape:
            raise ValueError("seen flags do not match the cell layout")

    def cell(self, row: str, col: str) -> float:
        return self.cells[self.rows.index(row)][self.cols.index(col)]

    def as_array(self) -> np.ndarray:
        return np.asarray(self.cells, dtype=np.float64).reshape(len(self.rows), len(self.cols))

    def to_dict(self) -> dict:
        return {"rows": list(self.rows), "cols": list(self.cols),
                "cells": [[float(v) for v in r] for r in self.cells],
                "seen": [[bool(v) for v in r] for r in self.seen], "meta": self.meta}

    def to_json(self) -> str:
        return canonical_json(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "RobustnessMatrix":
        return cls(**json.loads(text))


def parameter_digest(models: dict) -> dict:
    return {name: model_hash(m) for name, m in models.items()}


def adversarial_accuracy(model: Network, data: Dataset, attack: AttackSpec) -> float:
    """White-box BIM accuracy: the attack is generated against ``model`` itself."""
    adv = bim_attack(data.images, data.labels, model, attack)
    return accuracy(model, adv, data.labels)


def evaluate_matrix(models: dict, dataset: Dataset, profile: SeverityProfile,
                    attack: AttackSpec | None = None, reference: str = "standard",
                    extra_attacks: dict | None = None) -> RobustnessMatrix:
    """Evaluate every model on clean data, every calibrated kind and BIM.

    Natural perturbations are generated once per row with the profile's
    evaluation seed and shared by all models.  The adversarial row uses the
    calibrated epsilon with the step count of ``attack``; ``extra_attacks``
    adds rows at fixed budgets.
    """
    if reference not in models:
        raise ProfileMismatch(f"reference model {reference!r} not among {sorted(models)}")
    before = parameter_digest(models)
    if before[reference] != profile.model_id:
        raise ProfileMismatch(f"profile was calibrated on model {profile.model_id}, "
                              f"not on {reference} ({before[reference]})")
    cols = list(models)
    steps = attack.steps if attack is not None else 10
    rows, cells, seen = [CLEAN], [[accuracy(m, dataset.images, dataset.labels) for m in models.values()]], []
    seen.append([False] * len(cols))
    for kind, entry in profile.entries.items():
        if kind == ADVERSARIAL:
            continue
        spec = PerturbationSpec(kind, entry["severity"], seed=profile.eval_seed,
                                extras=dict(profile.extras.get(kind, {})))
        imgs = perturb_batch(dataset.images, spec)
        rows.append(kind)
        cells.append([accuracy(m, imgs, dataset.labels) for m in models.values()])
        seen.append([m.variant == kind for m in models.values()])
        logger.info("%s: %s", kind, np.round(cells[-1], 2).tolist())
    attacks = {}
    if ADVERSARIAL in profile.entries:
        attacks[ADVERSARIAL] = AttackSpec(profile.entries[ADVERSARIAL]["severity"], steps)
    elif attack is not None:
        attacks[ADVERSARIAL] = attack
    attacks.update(extra_attacks or {})
    for name, spec in attacks.items():
        rows.append(name)
        cells.append([adversarial_accuracy(m, dataset, spec) for m in models.values()])
        seen.append([False] * len(cols))
        logger.info("%s: %s", name, np.round(cells[-1], 2).tolist())
    if parameter_digest(models) != before:
        raise TAConvError("model parameters changed during evaluation")
    meta = {"reference": reference, "profile_model_id": profile.model_id, "eval_seed": profile.eval_seed,
            "severities": {k: e["severity"] for k, e in profile.entries.items()},
            "attacks": {k: {"epsilon": a.epsilon, "steps": a.steps, "step_size": a.step_size}
                        for k, a in attacks.items()},
            "model_ids": before, "n_images": len(dataset)}
    return RobustnessMatrix(rows, cols, cells, seen, meta)


def matrix_csv(matrix: RobustnessMatrix) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["condition"] + list(matrix.cols))
    for r, row in zip(matrix.rows, matrix.cells):
        w.writerow([r] + [repr(float(v)) for v in row])
    return buf.getvalue()


def matrix_table(matrix: RobustnessMatrix) -> str:
    """Fixed-width table; seen cells carry a trailing '*'."""
    first = max([len("condition")] + [len(r) for r in matrix.rows]) + 2
    widths = [max(10, len(c) + 2) for c in matrix.cols]
    out = ["condition".ljust(first) + "".join(c.rjust(w) for c, w in zip(matrix.cols, widths))]
    for r, row, flags in zip(matrix.rows, matrix.cells, matrix.seen):
        cells = "".join((f"{v:.2f}" + ("*" if s else " ")).rjust(w) for v, s, w in zip(row, flags, widths))
        out.append(r.ljust(first) + cells)
    out.append("* seen: the model's transform matches the test perturbation")
    return "\n".join(out) + "\n"


def export_report(matrix: RobustnessMatrix, out_dir, stem: str = "matrix") -> dict:
    """Write ``<stem>.csv``, ``<stem>.json`` and ``<stem>.txt`` into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"csv": out / f"{stem}.csv", "json": out / f"{stem}.json", "txt": out / f"{stem}.txt"}
    paths["csv"].write_text(matrix_csv(matrix))
    paths["json"].write_text(matrix.to_json())
    paths["txt"].write_text(matrix_table(matrix))
    return paths
