"""Command line interface.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .basis import BasisSpec, eval_basis, identity_bank
from .calibration import SeverityProfile, build_profile, standardization_report
from .dataio import Dataset, load_idx, load_image_dir, save_idx, synth_dataset, write_pnm
from .errors import DataError, NumericalError
from .evaluation import RobustnessMatrix, evaluate_matrix, export_report, matrix_csv, matrix_table
from .layers import canonical_json, load_checkpoint, model_hash, save_checkpoint
from .perturbations import (ADVERSARIAL, ALL_KINDS, NATURAL_KINDS, AttackSpec, PerturbationSpec,
                            bim_attack, mse_pair, perturb_batch)
from .pipeline import STANDARD, build_model, merge_config
from .render import export_filter_grid
from .training import TrainConfig, train
from .transforms import IDENTITY, KINDS, make_bank

logger = logging.getLogger("taconv")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# data helpers
# ---------------------------------------------------------------------------

def load_data(spec: str, n_classes: int | None = None):
    """``synthetic[:n_per_class[:seed]]``, an IDX images file or a PGM/PPM directory.

    Returns (dataset or None, images, names); image directories carry no labels.
    """
    if spec.startswith("synthetic"):
        parts = spec.split(":")
        n = int(parts[1]) if len(parts) > 1 and parts[1] else 200
        seed = int(parts[2]) if len(parts) > 2 else 1
        ds = synth_dataset(n, seed=seed)
        return ds, ds.images, None
    path = Path(spec)
    if not path.exists():
        raise DataError(f"data path {spec} does not exist")
    if path.is_dir():
        images, names = load_image_dir(path)
        return None, images, names
    ds = load_idx(path, n_classes=n_classes)
    return ds, ds.images, None


def write_images(images: np.ndarray, out: Path, names, labels=None) -> list[str]:
    """PNM copies for directory input, an exact IDX pair otherwise."""
    out.mkdir(parents=True, exist_ok=True)
    if names is not None:
        for img, name in zip(images, names):
            write_pnm(out / name, img)
        return [str(out / n) for n in names]
    paths = [out / "images.idx", out / "labels.idx"]
    n_classes = int(labels.max()) + 1
    save_idx(Dataset(images, labels, n_classes), paths[0], paths[1])
    return [str(p) for p in paths]


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_basis_export(args, config):
    out = Path(args.out)
    if args.model:
        info = export_filter_grid(load_checkpoint(args.model), out / "filters.pgm", zoom=args.zoom)
        return {"files": [info["image"], info["sidecar"]]}
    spec = BasisSpec.with_size(args.k, args.sigma, n_basis=args.n_basis)
    if args.transform == IDENTITY:
        bank = identity_bank(spec)
    else:
        bank = make_bank(args.transform, spec, n_branches=args.n_branches, seed=args.seed,
                         strength=args.strength)
    info = export_filter_grid(bank, out / f"basis_{args.transform}.pgm", zoom=args.zoom)
    np.save(out / f"basis_{args.transform}.npy", bank.branches)
    return {"files": [info["image"], info["sidecar"]], "n_branches": bank.n_branches,
            "n_basis": bank.n_basis, "basis_shape": list(eval_basis(spec).shape)}


def cmd_train(args, config):
    ds, _, _ = load_data(args.data)
    if ds is None:
        raise DataError("training needs labelled data (IDX or synthetic)")
    model_cfg = merge_config({"seed": args.seed, "model": {"widths": [16, 32, 48, 64], "n_branches": 4,
                                                           "strength": 1.0, "basis_sigma": 1.5}},
                             {k: config[k] for k in ("model",) if k in config})
    model = build_model(args.variant, model_cfg, ds)
    tcfg = TrainConfig(**{"seed": args.seed, **config.get("train", {}),
                          **{k: v for k, v in (("epochs", args.epochs), ("lr", args.lr),
                                               ("batch_size", args.batch_size)) if v is not None},
                          **({"flip": True} if args.flip else {})})
    history = train(model, ds, tcfg)
    out = Path(args.out)
    digest = save_checkpoint(model, out / "model.tacv")
    (out / "history.json").write_text(canonical_json(history.to_dict()))
    return {"checkpoint": str(out / "model.tacv"), "sha256": digest, "train": tcfg.to_dict(),
            "variant": model.variant, "n_parameters": model.n_parameters()}


def cmd_calibrate(args, config):
    model = load_checkpoint(args.model)
    ds, _, _ = load_data(args.data, model.config.n_classes)
    if ds is None:
        raise DataError("calibration needs labelled data")
    if args.n_images:
        ds = ds.head(args.n_images, split="calibration")
    profile = build_profile(model, ds, args.kinds, args.target_drop, args.tol, seed=args.seed)
    out = Path(args.out)
    target = out if out.suffix == ".json" else out / "profile.json"
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_text(profile.to_json())
    csv_text, table = standardization_report(profile)
    (target.parent / "standardization.csv").write_text(csv_text)
    (target.parent / "standardization.txt").write_text(table)
    print(table, end="")
    return {"profile": str(target), "drop_std": profile.drop_std}


def cmd_perturb(args, config):
    ds, images, names = load_data(args.data)
    spec = PerturbationSpec(args.kind, args.severity, seed=args.seed)
    model = load_checkpoint(args.model) if args.model else None
    labels = ds.labels if ds is not None else None
    out_images = perturb_batch(images, spec, model=model, labels=labels)
    return _write_perturbed(args, images, out_images, names, labels,
                            {"kind": args.kind, "severity": args.severity, "seed": args.seed})


def cmd_attack(args, config):
    model = load_checkpoint(args.model)
    ds, images, names = load_data(args.data, model.config.n_classes)
    labels = ds.labels if ds is not None else model.predict(images)
    spec = AttackSpec(args.epsilon, args.steps, args.step_size)
    adv = bim_attack(images, labels, model, spec)
    return _write_perturbed(args, images, adv, names, labels,
                            {"kind": ADVERSARIAL, "severity": args.epsilon, "seed": args.seed,
                             "steps": spec.steps, "step_size": spec.step_size, "model_id": model_hash(model)})


def _write_perturbed(args, clean, perturbed, names, labels, manifest):
    out = Path(args.out)
    files = write_images(perturbed, out / "images", names, labels)
    manifest = {**manifest, "mse": mse_pair(clean, perturbed), "count": len(perturbed), "files": files}
    (out / "manifest.json").write_text(canonical_json(manifest))
    return {"manifest": str(out / "manifest.json")}


def cmd_eval(args, config):
    models = {}
    for item in args.models:
        name, _, path = item.partition("=")
        if not path:
            raise UsageError(f"--models expects name=checkpoint, got {item!r}")
        models[name] = load_checkpoint(path)
    first = next(iter(models.values()))
    ds, _, _ = load_data(args.data, first.config.n_classes)
    if ds is None:
        raise DataError("evaluation needs labelled data")
    if args.skip:
        ds = ds.tail(args.skip, split="report")
    profile = SeverityProfile.from_dict(json.loads(Path(args.profile).read_text()))
    extra = {f"bim_eps_{e:.6g}": AttackSpec(e, args.steps) for e in args.extra_epsilon}
    attack = AttackSpec(profile.severity(ADVERSARIAL), args.steps) if ADVERSARIAL in profile.entries else None
    matrix = evaluate_matrix(models, ds, profile, attack, reference=args.reference, extra_attacks=extra)
    paths = export_report(matrix, args.out)
    print(matrix_table(matrix), end="")
    return {k: str(v) for k, v in paths.items()}


def cmd_report(args, config):
    src = Path(args.input)
    data = json.loads(src.read_text())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if "cells" in data:
        matrix = RobustnessMatrix.from_json(src.read_text())
        (out / "matrix.csv").write_text(matrix_csv(matrix))
        (out / "matrix.txt").write_text(matrix_table(matrix))
        print(matrix_table(matrix), end="")
        return {"files": [str(out / "matrix.csv"), str(out / "matrix.txt")]}
    if "entries" in data:
        csv_text, table = standardization_report(SeverityProfile.from_dict(data))
        (out / "standardization.csv").write_text(csv_text)
        (out / "standardization.txt").write_text(table)
        print(table, end="")
        return {"files": [str(out / "standardization.csv"), str(out / "standardization.txt")]}
    raise DataError(f"{src} is neither a robustness matrix nor a severity profile")


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    # SUPPRESS lets the flags appear before or after the subcommand
    hide = argparse.SUPPRESS
    common.add_argument("--config", default=hide, help="JSON file merged into the run configuration")
    common.add_argument("--seed", type=int, default=hide, help="master seed (default 0)")
    common.add_argument("--out", default=hide, help="output directory (default .)")
    common.add_argument("--threads", type=int, default=hide, help="BLAS thread limit")
    common.add_argument("-v", "--verbose", action="store_true", default=hide)

    p = _Parser(prog="taconv", description="Transform-augmented convolutions: desk experiments.",
                parents=[common])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", parser_class=_Parser, required=True)

    basis = sub.add_parser("basis", help="basis utilities", parents=[common])
    bsub = basis.add_subparsers(dest="action", parser_class=_Parser, required=True)
    ex = bsub.add_parser("export", help="render a basis bank or trained filters", parents=[common])
    ex.add_argument("--transform", default=IDENTITY, choices=(IDENTITY,) + KINDS)
    ex.add_argument("--k", type=int, default=5)
    ex.add_argument("--sigma", type=float, default=1.5)
    ex.add_argument("--n-basis", type=int, default=None)
    ex.add_argument("--n-branches", type=int, default=4)
    ex.add_argument("--strength", type=float, default=1.0)
    ex.add_argument("--zoom", type=int, default=8)
    ex.add_argument("--model", help="render the synthesized filters of a checkpoint instead")
    ex.set_defaults(func=cmd_basis_export)

    tr = sub.add_parser("train", help="train one model variant", parents=[common])
    tr.add_argument("--data", default="synthetic:200:0")
    tr.add_argument("--variant", default=STANDARD, choices=(STANDARD,) + KINDS)
    tr.add_argument("--epochs", type=int)
    tr.add_argument("--lr", type=float)
    tr.add_argument("--batch-size", type=int)
    tr.add_argument("--flip", action="store_true", help="random horizontal flips")
    tr.set_defaults(func=cmd_train)

    ca = sub.add_parser("calibrate", help="standardize severities on a reference model", parents=[common])
    ca.add_argument("--model", required=True)
    ca.add_argument("--data", default="synthetic:200:1")
    ca.add_argument("--target-drop", type=float, default=10.0)
    ca.add_argument("--tol", type=float, default=1.0)
    ca.add_argument("--kinds", nargs="+", default=list(NATURAL_KINDS) + [ADVERSARIAL],
                    choices=ALL_KINDS)
    ca.add_argument("--n-images", type=int, default=600, help="calibrate on the first N images")
    ca.set_defaults(func=cmd_calibrate)

    pe = sub.add_parser("perturb", help="write perturbed copies of a dataset", parents=[common])
    pe.add_argument("--data", required=True)
    pe.add_argument("--kind", required=True, choices=ALL_KINDS)
    pe.add_argument("--severity", type=float, required=True)
    pe.add_argument("--model", help="checkpoint, needed for the adversarial kind")
    pe.set_defaults(func=cmd_perturb)

    at = sub.add_parser("attack", help="BIM adversarial examples", parents=[common])
    at.add_argument("--model", required=True)
    at.add_argument("--data", required=True)
    at.add_argument("--epsilon", type=float, required=True, help="l-inf budget on the [0, 1] scale")
    at.add_argument("--steps", type=int, default=10)
    at.add_argument("--step-size", type=float, default=None)
    at.set_defaults(func=cmd_attack)

    ev = sub.add_parser("eval", help="robustness matrix", parents=[common])
    ev.add_argument("--models", nargs="+", required=True, metavar="NAME=CKPT")
    ev.add_argument("--data", default="synthetic:200:1")
    ev.add_argument("--profile", required=True)
    ev.add_argument("--reference", default=STANDARD)
    ev.add_argument("--skip", type=int, default=600, help="drop the first N images (calibration slice)")
    ev.add_argument("--steps", type=int, default=10)
    ev.add_argument("--extra-epsilon", type=float, nargs="*", default=[2 / 255])
    ev.set_defaults(func=cmd_eval)

    re = sub.add_parser("report", help="re-render a matrix or profile JSON", parents=[common])
    re.add_argument("input")
    re.set_defaults(func=cmd_report)
    return p


def _resolve(args) -> dict:
    for name, default in (("config", None), ("seed", None), ("out", None), ("threads", None),
                          ("verbose", False)):
        if not hasattr(args, name):
            setattr(args, name, default)
    config = {}
    if args.config:
        try:
            config = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(config, dict):
            raise DataError("config file must hold a JSON object")
    if args.seed is None:
        args.seed = int(config.get("seed", 0))
    if args.out is None:
        args.out = config.get("out", ".")
    return config


def _run(args, config) -> dict:
    if args.threads:
        from threadpoolctl import threadpool_limits
        with threadpool_limits(limits=args.threads):
            return args.func(args, config)
    return args.func(args, config)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        config = _resolve(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out)
    record = {"command": args.command, "argv": list(sys.argv[1:] if argv is None else argv),
              "config": config, "seed": args.seed, "version": __version__,
              "args": {k: v for k, v in sorted(vars(args).items()) if k != "func"}}
    try:
        out.mkdir(parents=True, exist_ok=True) if out.suffix != ".json" else out.parent.mkdir(
            parents=True, exist_ok=True)
        run_dir = out if out.suffix != ".json" else out.parent
        result = _run(args, config)
        record["result"] = result
        (run_dir / "run.json").write_text(canonical_json(record))
        return EXIT_OK
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
