"""End-to-end desk experiment: train, calibrate, evaluate, report."""
from __future__ import annotations

import copy
import logging
from pathlib import Path

from .calibration import build_profile, standardization_report
from .dataio import Dataset, load_idx, synth_dataset
from .evaluation import evaluate_matrix, export_report
from .layers import Network, assemble, canonical_json, desk_config, save_checkpoint
from .perturbations import ADVERSARIAL, NATURAL_KINDS, AttackSpec
from .training import TrainConfig, train
from .transforms import IDENTITY

logger = logging.getLogger(__name__)

STANDARD = "standard"

DEFAULT_CONFIG = {
    "seed": 0,
    "data": {"source": "synthetic", "n_per_class": 200, "test_n_per_class": 200, "size": 16,
             "classes": 6, "train_seed": 0, "test_seed": 1, "train": None, "test": None},
    "model": {"widths": [16, 32, 48, 64], "n_branches": 4, "strength": 1.0, "basis_sigma": 1.5},
    "variants": [STANDARD, "elastic", "rotation_scaling"],
    "train": {},
    "calibration": {"kinds": list(NATURAL_KINDS) + [ADVERSARIAL], "target_drop": 10.0, "tol": 1.0,
                    "n_images": 600, "eval_seed": 0},
    "attack": {"steps": 10, "extra_epsilons": [2 / 255]},
}


def merge_config(base: dict, override: dict | None) -> dict:
    """Recursive dict merge; keys of ``override`` win."""
    out = copy.deepcopy(base)
    for key, value in (override or {}).items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = merge_config(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def resolve_config(override: dict | None = None, seed: int | None = None) -> dict:
    config = merge_config(DEFAULT_CONFIG, override)
    if seed is not None:
        config["seed"] = int(seed)
    return config


def load_data(data_cfg: dict) -> tuple[Dataset, Dataset]:
    if data_cfg["source"] == "synthetic":
        kw = {"classes": data_cfg["classes"], "size": data_cfg["size"]}
        return (synth_dataset(data_cfg["n_per_class"], seed=data_cfg["train_seed"], **kw),
                synth_dataset(data_cfg["test_n_per_class"], seed=data_cfg["test_seed"], **kw))
    if data_cfg["source"] == "idx":
        train_set = load_idx(data_cfg["train"])
        test_set = load_idx(data_cfg["test"], n_classes=train_set.n_classes)
        return train_set, test_set
    raise ValueError(f"unknown data source {data_cfg['source']!r}")


def build_model(variant: str, config: dict, train_set: Dataset) -> Network:
    m = config["model"]
    transform = IDENTITY if variant == STANDARD else variant
    net_cfg = desk_config(transform, in_channels=train_set.images.shape[1], n_classes=train_set.n_classes,
                          widths=tuple(m["widths"]), seed=config["seed"], n_branches=m["n_branches"],
                          strength=m["strength"], basis_sigma=m["basis_sigma"], bank_seed=config["seed"])
    return assemble(net_cfg)


def train_variants(config: dict, train_set: Dataset) -> dict:
    """Every variant starts from the same seed and sees the same batches."""
    tcfg = TrainConfig(**{"seed": config["seed"], **config["train"]})
    models = {}
    for variant in config["variants"]:
        model = build_model(variant, config, train_set)
        history = train(model, train_set, tcfg)
        logger.info("trained %s: final loss %.4f", variant, history.loss[-1] if history.loss else float("nan"))
        models[variant] = model
    return models


def split_test(config: dict, test_set: Dataset) -> tuple[Dataset, Dataset]:
    """Calibration slice (first n images) and the disjoint reporting remainder."""
    n = config["calibration"]["n_images"]
    if not 0 < n < len(test_set):
        raise ValueError(f"calibration slice of {n} images does not fit a test set of {len(test_set)}")
    return test_set.head(n, split="calibration"), test_set.tail(n, split="report")


def run_pipeline(config: dict | None = None, out_dir=None) -> dict:
    """Run the full experiment and write every artifact into ``out_dir``."""
    config = resolve_config(config)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "run.json").write_text(canonical_json({"command": "pipeline", "config": config}))
    train_set, test_set = load_data(config["data"])
    models = train_variants(config, train_set)
    ckpt = out / "checkpoints"
    ckpt.mkdir(exist_ok=True)
    hashes = {name: save_checkpoint(m, ckpt / f"{name}.tacv") for name, m in models.items()}

    cal_set, report_set = split_test(config, test_set)
    cal = config["calibration"]
    profile = build_profile(models[STANDARD], cal_set, cal["kinds"], cal["target_drop"], cal["tol"],
                            seed=cal["eval_seed"])
    (out / "profile.json").write_text(profile.to_json())
    csv_text, table = standardization_report(profile)
    (out / "standardization.csv").write_text(csv_text)
    (out / "standardization.txt").write_text(table)

    att = config["attack"]
    extra = {f"bim_eps_{e:.6g}": AttackSpec(e, att["steps"]) for e in att.get("extra_epsilons", [])}
    attack = None
    if ADVERSARIAL in profile.entries:
        attack = AttackSpec(profile.severity(ADVERSARIAL), att["steps"])
    matrix = evaluate_matrix(models, report_set, profile, attack, reference=STANDARD, extra_attacks=extra)
    paths = export_report(matrix, out)
    return {"models": models, "profile": profile, "matrix": matrix, "checkpoints": hashes,
            "paths": {k: str(v) for k, v in paths.items()}}
