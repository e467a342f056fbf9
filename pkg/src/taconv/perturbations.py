"""Image-space perturbations and the basic iterative method (BIM) attack.

Every perturbation takes an image in [0, 1], returns an image in [0, 1]
(clipping is always the last step) and is the identity at severity 0.
Random choices come from a generator seeded from ``PerturbationSpec.seed``, so a fixed seed
gives a fixed output; within one seed the random draws do not depend on the
severity, which keeps accuracy a (nearly) monotone function of severity.
"""
from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, NumericalError
from .tensor import Tensor, backward, softmax_cross_entropy
from .transforms import (centered_grid, circle_mask, displace_elastic, displace_rotation_scaling,
                         gaussian_blur, line_mask, resample_bilinear, sample_lines)

NATURAL_KINDS = ("rotation_scaling", "elastic", "gaussian_blur", "gaussian_noise",
                 "object_occlusion", "snow")
EXTRA_KINDS = ("wave", "saturation")
ADVERSARIAL = "adversarial"
ALL_KINDS = NATURAL_KINDS + EXTRA_KINDS + (ADVERSARIAL,)

# search ceilings used by calibration
DEFAULT_S_MAX = {
    "rotation_scaling": 1.0,
    "elastic": 8.0,
    "gaussian_blur": 4.0,
    "gaussian_noise": 1.0,
    "object_occlusion": 1.0,
    "snow": 40.0,
    "wave": 4.0,
    "saturation": 20.0,
    "adversarial": 0.25,
}

DEFAULT_EXTRAS = {
    "rotation_scaling": {"theta": math.pi / 2},
    "elastic": {"sigma_frac": 0.25},
    "snow": {"slope_low": -3, "slope_high": 4, "length_frac": 0.5},
    "wave": {"wavelength_frac": 0.5},
    "object_occlusion": {"fill": 0.5},
}


@dataclass(frozen=True)
class AttackSpec:
    epsilon: float
    steps: int = 10
    step_size: float | None = None

    def __post_init__(self):
        if self.epsilon < 0 or self.steps < 1:
            raise ValueError(f"invalid attack spec {self}")
        if self.step_size is None:
            object.__setattr__(self, "step_size", 2.5 * self.epsilon / self.steps)
        if self.step_size * self.steps < self.epsilon * (1 - 1e-12):
            raise ValueError("step_size * steps must reach epsilon")


@dataclass
class PerturbationSpec:
    kind: str
    severity: float
    seed: int = 0
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ALL_KINDS:
            raise ValueError(f"unknown perturbation kind {self.kind!r}")
        if self.severity < 0:
            raise ValueError(f"severity must be >= 0, got {self.severity}")

    def extra(self, key):
        if key in self.extras:
            return self.extras[key]
        return DEFAULT_EXTRAS.get(self.kind, {})[key]


def _check_image(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise DataError(f"expected an image [C, H, W], got shape {image.shape}")
    if image.size and (image.min() < 0 or image.max() > 1):
        raise DataError("image values outside [0, 1]")
    return image


def _snow_count(severity: float, u: float) -> int:
    # stochastic rounding with a fixed uniform draw keeps the count monotone in severity
    base = math.floor(severity)
    return base + (1 if u < severity - base else 0)


def apply_perturbation(image: np.ndarray, spec: PerturbationSpec, model=None, label=None) -> np.ndarray:
    """Perturb one image [C, H, W] according to ``spec``."""
    image = _check_image(image)
    s = spec.severity
    kind = spec.kind
    if kind == ADVERSARIAL:
        if model is None:
            raise ValueError("adversarial perturbation needs a model")
        if label is None:
            label = int(model.predict(image[None])[0])
        return bim_attack(image[None], np.array([label]), model, AttackSpec(s, **spec.extras))[0]
    if s == 0:
        return image.copy()
    rng = np.random.default_rng(spec.seed)
    _, h, w = image.shape
    grid = centered_grid(h, w)
    if kind == "rotation_scaling":
        out = resample_bilinear(image, displace_rotation_scaling(grid, s, spec.extra("theta")))
    elif kind == "elastic":
        sigma = spec.extra("sigma_frac") * min(h, w)
        out = resample_bilinear(image, displace_elastic(grid, s, sigma, rng))
    elif kind == "gaussian_blur":
        out = gaussian_blur(image, s)
    elif kind == "gaussian_noise":
        out = image + s * rng.standard_normal(image.shape)
    elif kind == "object_occlusion":
        x, y = grid
        centre = (rng.uniform(x.min(), x.max()), rng.uniform(y.min(), y.max()))
        mask = circle_mask(grid, centre, s * min(h, w))
        out = np.where(mask, spec.extra("fill"), image)
    elif kind == "snow":
        n = _snow_count(s, rng.random())
        length = max(1, round(spec.extra("length_frac") * min(h, w)))
        slopes = (spec.extra("slope_low"), spec.extra("slope_high"))
        lines = sample_lines(rng, (h, w), n, slopes, length)
        out = np.where(line_mask((h, w), lines), 1.0, image)
    elif kind == "wave":
        x, y = grid
        lam = spec.extra("wavelength_frac") * h
        out = resample_bilinear(image, (x + s * np.sin(2 * math.pi * y / lam), y))
    elif kind == "saturation":
        out = image ** (1.0 / (1.0 + s))
    else:
        raise ValueError(f"unknown perturbation kind {kind!r}")
    return np.clip(out, 0.0, 1.0)


def perturb_batch(images: np.ndarray, spec: PerturbationSpec, model=None, labels=None) -> np.ndarray:
    """Perturb a batch [N, C, H, W]; image i uses the seed stream (spec.seed, i)."""
    images = np.asarray(images, dtype=np.float64)
    if spec.kind == ADVERSARIAL:
        if model is None:
            raise ValueError("adversarial perturbation needs a model")
        if labels is None:
            labels = model.predict(images)
        return bim_attack(images, labels, model, AttackSpec(spec.severity, **spec.extras))
    out = np.empty_like(images)
    for i, img in enumerate(images):
        sub = PerturbationSpec(spec.kind, spec.severity, seed=_derive_seed(spec.seed, i), extras=spec.extras)
        out[i] = apply_perturbation(img, sub)
    return out


def _derive_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# adversarial attack
# ---------------------------------------------------------------------------

@contextmanager
def frozen(model):
    """Temporarily exclude the model parameters from the tape."""
    params = model.parameters()
    flags = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield model
    finally:
        for p, f in zip(params, flags):
            p.requires_grad = f


def input_gradient(model, images: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Gradient of the summed cross-entropy with respect to the input pixels."""
    x = Tensor(images, requires_grad=True)
    with frozen(model):
        loss = softmax_cross_entropy(model(x), labels)
        backward(loss)
    grad = x.grad * len(images)
    if not np.all(np.isfinite(grad)):
        raise NumericalError("non-finite input gradient in attack")
    return grad


def project_linf(x: np.ndarray, x0: np.ndarray, eps: float) -> np.ndarray:
    """Clip to the eps-ball around x0 so that |x - x0| <= eps holds in floating point."""
    x = np.clip(x, x0 - eps, x0 + eps)
    for _ in range(4):
        over = np.abs(x - x0) > eps
        if not over.any():
            break
        x = np.where(over, np.nextafter(x, x0), x)
    return x


def bim_attack(images: np.ndarray, labels, model, spec: AttackSpec, batch_size: int = 256) -> np.ndarray:
    """x <- clip_{x0, eps}(clip_[0,1](x + step * sign(grad_x loss))), ``spec.steps`` times."""
    x0 = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if x0.size and (x0.min() < 0 or x0.max() > 1):
        raise DataError("attack input outside [0, 1]")
    if spec.epsilon == 0:
        return x0.copy()
    out = np.empty_like(x0)
    for start in range(0, len(x0), batch_size):
        sl = slice(start, start + batch_size)
        base, x = x0[sl], x0[sl].copy()
        for _ in range(spec.steps):
            g = input_gradient(model, x, labels[sl])
            x = np.clip(x + spec.step_size * np.sign(g), 0.0, 1.0)
            x = project_linf(x, base, spec.epsilon)
        out[sl] = x
    return out


def mse_pair(clean: np.ndarray, perturbed: np.ndarray, scale: float = 255.0) -> float:
    """Mean squared pixel difference, pixels expressed on ``scale`` (255 or 1)."""
    clean, perturbed = np.asarray(clean, dtype=np.float64), np.asarray(perturbed, dtype=np.float64)
    if clean.shape != perturbed.shape:
        raise DataError(f"count/shape mismatch: {clean.shape} vs {perturbed.shape}")
    return float(np.mean((scale * (clean - perturbed)) ** 2))
