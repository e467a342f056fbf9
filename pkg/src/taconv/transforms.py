"""Perturbation transforms of filter bases.

Each transform is realized once per branch (one displacement field, one mask,
one bump) and then applied to every basis function of that branch, so the
transformed kernel of a weight vector equals the same weights applied to the
transformed basis.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .basis import BasisBank, BasisSpec, eval_basis, make_grid
from .errors import NumericalError, ShapeError

KINDS = ("rotation_scaling", "elastic", "gaussian_blur", "gaussian_noise",
         "object_occlusion", "snow")
IDENTITY = "identity"


@dataclass(frozen=True)
class TransformSpec:
    kind: str = IDENTITY
    alpha: float = 0.0
    theta: float = 0.0
    sigma: float = 1.0
    radius: float = 0.0
    n_lines: int = 0
    slope_range: tuple = (-2, 3)
    length: int | None = None
    seed: int = 0
    random_noise: bool = False
    recenter: bool = False

    def __post_init__(self):
        if self.kind not in KINDS + (IDENTITY,):
            raise ValueError(f"unknown transform kind {self.kind!r}")
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if self.kind in ("elastic", "gaussian_noise") and self.sigma <= 0:
            raise ValueError(f"sigma must be > 0 for {self.kind}, got {self.sigma}")
        if self.kind == "gaussian_blur" and self.sigma < 0:
            raise ValueError(f"blur sigma must be >= 0, got {self.sigma}")
        if self.radius < 0 or self.n_lines < 0:
            raise ValueError("radius and n_lines must be non-negative")
        lo, hi = self.slope_range
        if not lo < hi:
            raise ValueError(f"slope range must satisfy low < high, got {self.slope_range}")
        object.__setattr__(self, "slope_range", (int(lo), int(hi)))

    @property
    def is_identity(self) -> bool:
        if self.kind == IDENTITY:
            return True
        if self.kind == "gaussian_blur":
            return self.sigma < 1e-6
        if self.kind == "object_occlusion":
            return self.radius == 0
        if self.kind == "snow":
            return self.n_lines == 0
        return self.alpha == 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["slope_range"] = list(self.slope_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TransformSpec":
        d = dict(d)
        d["slope_range"] = tuple(d.get("slope_range", (-2, 3)))
        return cls(**d)


# ---------------------------------------------------------------------------
# displacement fields
# ---------------------------------------------------------------------------

def displace_rotation_scaling(grid, alpha: float, theta: float):
    """x' = x + a(x cos t + y sin t),  y' = y + a(-x sin t + y cos t)."""
    x, y = grid
    c, s = math.cos(theta), math.sin(theta)
    xd = (1.0 + alpha * c) * x + (alpha * s) * y
    yd = (-alpha * s) * x + (1.0 + alpha * c) * y
    return xd, yd


def gaussian_density_1d(v, sigma: float):
    return np.exp(-np.asarray(v) ** 2 / (2 * sigma ** 2)) / math.sqrt(2 * math.pi * sigma ** 2)


def _fit_affine_displacement(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Coefficients M (3x2) with [x, y, 1] @ M = dst - src on the three anchors."""
    hom = np.column_stack([src, np.ones(3)])
    return np.linalg.solve(hom, dst - src)


def displace_elastic(grid, alpha: float, sigma: float, rng: np.random.Generator,
                     anchors=None, recenter: bool = False, max_retries: int = 10):
    """Three-step elastic field.

    (i) an affine map fitted to three anchors moved by U(-alpha, alpha);
    (ii) a Gaussian-bump displacement x + alpha*g(x), y + alpha*g(y) on the grid;
    (iii) the affine targets are carried through (ii) by bilinear
    interpolation of the bump displacement.
    """
    x, y = grid
    if anchors is None:
        x0, x1, y0, y1 = x.min(), x.max(), y.min(), y.max()
        anchors = np.array([[x0, y0], [x1, y0], [x0, y1]], dtype=np.float64)
    anchors = np.asarray(anchors, dtype=np.float64)
    for _ in range(max_retries):
        shift = rng.uniform(-alpha, alpha, size=(3, 2))
        dst = anchors + shift
        det = np.linalg.det(np.column_stack([dst, np.ones(3)]))
        if abs(det) > 1e-9 * max(1.0, float(np.abs(anchors).max()) ** 2):
            break
    else:
        raise NumericalError("elastic transform: anchor triple stayed collinear after retries")
    coef = _fit_affine_displacement(anchors, dst)

    qx, qy = np.append(x.ravel(), 0.0), np.append(y.ravel(), 0.0)
    tx = qx + (qx * coef[0, 0] + qy * coef[1, 0] + coef[2, 0])
    ty = qy + (qx * coef[0, 1] + qy * coef[1, 1] + coef[2, 1])

    bump_x = alpha * gaussian_density_1d(x, sigma)
    bump_y = alpha * gaussian_density_1d(y, sigma)
    cx, cy = _centre(x.shape)
    fx = tx + _bilinear(bump_x, ty + cy, tx + cx, mode="edge")
    fy = ty + _bilinear(bump_y, ty + cy, tx + cx, mode="edge")
    if recenter:
        fx, fy = fx - fx[-1], fy - fy[-1]
    return fx[:-1].reshape(x.shape), fy[:-1].reshape(x.shape)


def identity_field(grid):
    x, y = grid
    return x.copy(), y.copy()


def centered_grid(h: int, w: int):
    """Pixel-centre coordinates of an h x w image, origin at the image centre."""
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    rows, cols = np.meshgrid(np.arange(h, dtype=np.float64) - cy,
                             np.arange(w, dtype=np.float64) - cx, indexing="ij")
    return cols, rows


def _centre(shape):
    return (shape[1] - 1) / 2.0, (shape[0] - 1) / 2.0


def _bilinear(values: np.ndarray, rows, cols, mode: str = "zero") -> np.ndarray:
    """Sample ``values`` [..., H, W] at fractional (row, col) index positions."""
    h, w = values.shape[-2:]
    rows, cols = np.asarray(rows, dtype=np.float64), np.asarray(cols, dtype=np.float64)
    if mode == "edge":
        rows, cols = np.clip(rows, 0, h - 1), np.clip(cols, 0, w - 1)
    r0, c0 = np.floor(rows), np.floor(cols)
    fr, fc = rows - r0, cols - c0
    r0, c0 = r0.astype(np.int64), c0.astype(np.int64)
    out = np.zeros(values.shape[:-2] + rows.shape)
    for dr, wr in ((0, 1.0 - fr), (1, fr)):
        for dc, wc in ((0, 1.0 - fc), (1, fc)):
            rr, cc = r0 + dr, c0 + dc
            inside = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
            weight = np.where(inside, wr * wc, 0.0)
            sample = values[..., np.clip(rr, 0, h - 1), np.clip(cc, 0, w - 1)]
            out += weight * sample
    return out


def resample_bilinear(func: np.ndarray, field) -> np.ndarray:
    """Read ``func`` [..., H, W] at the displaced centred coordinates ``field``.

    Samples outside the grid read as zero.  An identity field is an exact copy.
    """
    fx, fy = field
    func = np.asarray(func, dtype=np.float64)
    if not (np.all(np.isfinite(fx)) and np.all(np.isfinite(fy))):
        raise NumericalError("displacement field has non-finite entries")
    if fx.shape != func.shape[-2:]:
        raise ShapeError(f"field shape {fx.shape} does not match function shape {func.shape[-2:]}")
    cx, cy = _centre(fx.shape)
    return _bilinear(func, fy + cy, fx + cx, mode="zero")


# ---------------------------------------------------------------------------
# blur, additive bump, occlusion masks
# ---------------------------------------------------------------------------

def gaussian_kernel_1d(sigma: float) -> np.ndarray:
    """Unit-sum discrete Gaussian with support ceil(6 sigma) rounded up to odd."""
    size = max(1, math.ceil(6 * sigma))
    if size % 2 == 0:
        size += 1
    r = size // 2
    t = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-t ** 2 / (2 * sigma ** 2))
    return g / g.sum()


def _correlate_axis(a: np.ndarray, taps: np.ndarray, axis: int) -> np.ndarray:
    r = len(taps) // 2
    n = a.shape[axis]
    pad = [(0, 0)] * a.ndim
    pad[axis] = (r, r)
    ap = np.pad(a, pad)
    out = np.zeros_like(a)
    for i, t in enumerate(taps):
        out += t * np.take(ap, np.arange(i, i + n), axis=axis)
    return out


def gaussian_blur(func: np.ndarray, sigma: float) -> np.ndarray:
    """Zero-padded Gaussian smoothing of the last two axes, same-size output."""
    func = np.asarray(func, dtype=np.float64)
    if sigma < 1e-6:
        return func.copy()
    taps = gaussian_kernel_1d(sigma)
    return _correlate_axis(_correlate_axis(func, taps, -1), taps, -2)


def blur_basis(func: np.ndarray, sigma_b: float) -> np.ndarray:
    return gaussian_blur(func, sigma_b)


def gaussian_density_2d(grid, sigma: float) -> np.ndarray:
    x, y = grid
    return np.exp(-(x ** 2 + y ** 2) / (2 * sigma ** 2)) / (2 * math.pi * sigma ** 2)


def noise_basis(func: np.ndarray, alpha: float, sigma: float, grid=None) -> np.ndarray:
    """Add the centred Gaussian bump alpha * G_sigma(x, y)."""
    func = np.asarray(func, dtype=np.float64)
    if grid is None:
        grid = make_grid(func.shape[-1])
    return func + alpha * gaussian_density_2d(grid, sigma)


def circle_mask(grid, centre, radius: float) -> np.ndarray:
    """Pixels strictly closer than ``radius`` to ``centre``; radius 0 masks nothing."""
    x, y = grid
    return (x - centre[0]) ** 2 + (y - centre[1]) ** 2 < radius ** 2


def sample_grid_point(grid, rng: np.random.Generator) -> tuple[float, float]:
    x, y = grid
    i = int(rng.integers(0, x.shape[0]))
    j = int(rng.integers(0, x.shape[1]))
    return float(x[i, j]), float(y[i, j])


def occlude_basis(func: np.ndarray, radius: float, rng: np.random.Generator,
                  centre=None) -> np.ndarray:
    func = np.asarray(func, dtype=np.float64)
    grid = make_grid(func.shape[-1])
    if centre is None:
        centre = sample_grid_point(grid, rng)
    return np.where(circle_mask(grid, centre, radius), 0.0, func)


def _round_half_up(v):
    return np.floor(np.asarray(v) + 0.5).astype(np.int64)


def sample_lines(rng: np.random.Generator, shape, n_lines: int, slope_range, length: int):
    """Draw ``n_lines`` segments as (row0, col0, slope, length) tuples."""
    h, w = shape
    lines = []
    for _ in range(n_lines):
        r0 = int(rng.integers(0, h))
        c0 = int(rng.integers(0, w))
        slope = int(rng.integers(slope_range[0], slope_range[1]))
        lines.append((r0, c0, slope, int(length)))
    return lines


def line_mask(shape, lines) -> np.ndarray:
    """Rasterize 1-pixel-wide segments by integer stepping along the major axis."""
    h, w = shape
    mask = np.zeros(shape, dtype=bool)
    for r0, c0, slope, length in lines:
        t = np.arange(length)
        if abs(slope) <= 1:
            rows, cols = r0 + _round_half_up(slope * t), c0 + t
        else:
            rows, cols = r0 + t, c0 + _round_half_up(t / slope)
        ok = (rows >= 0) & (rows < h) & (cols >= 0) & (cols < w)
        mask[rows[ok], cols[ok]] = True
    return mask


def snow_basis(func: np.ndarray, n_lines: int, slope_range, rng: np.random.Generator,
               length: int | None = None) -> np.ndarray:
    func = np.asarray(func, dtype=np.float64)
    shape = func.shape[-2:]
    lines = sample_lines(rng, shape, n_lines, slope_range, length or shape[-1])
    return np.where(line_mask(shape, lines), 0.0, func)


# ---------------------------------------------------------------------------
# transform application and banks
# ---------------------------------------------------------------------------

def apply_transform(funcs: np.ndarray, spec: TransformSpec) -> np.ndarray:
    """Apply one realized transform to every function in ``funcs`` [..., k, k]."""
    funcs = np.asarray(funcs, dtype=np.float64)
    k = funcs.shape[-1]
    grid = make_grid(k)
    rng = np.random.default_rng(spec.seed)
    kind = spec.kind
    if kind == IDENTITY:
        return funcs.copy()
    if kind == "rotation_scaling":
        return resample_bilinear(funcs, displace_rotation_scaling(grid, spec.alpha, spec.theta))
    if kind == "elastic":
        field = displace_elastic(grid, spec.alpha, spec.sigma, rng, recenter=spec.recenter)
        return resample_bilinear(funcs, field)
    if kind == "gaussian_blur":
        return blur_basis(funcs, spec.sigma)
    if kind == "gaussian_noise":
        if spec.random_noise:
            return funcs + spec.alpha * rng.standard_normal((k, k))
        return noise_basis(funcs, spec.alpha, spec.sigma, grid)
    if kind == "object_occlusion":
        centre = sample_grid_point(grid, rng)
        return np.where(circle_mask(grid, centre, spec.radius), 0.0, funcs)
    if kind == "snow":
        lines = sample_lines(rng, (k, k), spec.n_lines, spec.slope_range, spec.length or k)
        return np.where(line_mask((k, k), lines), 0.0, funcs)
    raise ValueError(f"unknown transform kind {kind!r}")


def build_transform_bank(base: np.ndarray, branch_specs, basis_spec: BasisSpec | None = None) -> BasisBank:
    """Stack the untransformed basis with one transformed copy per spec."""
    base = np.asarray(base, dtype=np.float64)
    branch_specs = list(branch_specs)
    kinds = {s.kind for s in branch_specs}
    if len(kinds) > 1:
        raise ValueError(f"all branches of a bank must share one kind, got {sorted(kinds)}")
    if basis_spec is None:
        basis_spec = BasisSpec.with_size(base.shape[-1], n_basis=base.shape[0])
    branches = [base] + [apply_transform(base, s) for s in branch_specs]
    return BasisBank(np.stack(branches), basis_spec, branch_specs)


def default_branch_specs(kind: str, n_branches: int = 4, seed: int = 0, strength: float = 1.0,
                         ratio: float = 1.5) -> list[TransformSpec]:
    """Four (by default) versions of one transform with a geometric intensity ramp."""
    if kind == IDENTITY or n_branches == 0:
        return []
    if kind not in KINDS:
        raise ValueError(f"unknown transform kind {kind!r}")
    specs = []
    for i in range(n_branches):
        ramp = strength * ratio ** i
        if kind == "rotation_scaling":
            s = TransformSpec(kind, alpha=0.1 * ramp, theta=i * math.pi / 2)
        elif kind == "elastic":
            s = TransformSpec(kind, alpha=0.3 * ramp, sigma=1.0, seed=seed + i)
        elif kind == "gaussian_blur":
            s = TransformSpec(kind, sigma=0.4 * ramp)
        elif kind == "gaussian_noise":
            s = TransformSpec(kind, alpha=0.5 * ramp, sigma=1.0, seed=seed + i)
        elif kind == "object_occlusion":
            s = TransformSpec(kind, radius=1.0 * ramp, seed=seed + i)
        else:
            s = TransformSpec(kind, n_lines=max(1, round(ramp)), seed=seed + i)
        specs.append(s)
    return specs


def make_bank(kind: str, basis_spec: BasisSpec, n_branches: int = 4, seed: int = 0,
              strength: float = 1.0, specs=None) -> BasisBank:
    base = eval_basis(basis_spec)
    if specs is None:
        specs = default_branch_specs(kind, n_branches, seed=seed, strength=strength)
    return build_transform_bank(base, specs, basis_spec)


def bank_from_dict(d: dict) -> BasisBank:
    spec = BasisSpec.from_dict(d["basis"])
    return build_transform_bank(eval_basis(spec), [TransformSpec.from_dict(s) for s in d["branches"]], spec)
