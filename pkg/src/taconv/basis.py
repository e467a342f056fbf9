"""Gaussian-Hermite filter basis and kernel synthesis."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError
from .tensor import Tensor, as_tensor, matmul, reshape


def hermite(n: int, x):
    """Physicists' Hermite polynomial H_n evaluated at ``x`` (scalar or array)."""
    if n < 0:
        raise ValueError(f"Hermite order must be non-negative, got {n}")
    x = np.asarray(x, dtype=np.float64)
    h_prev = np.ones_like(x)
    if n == 0:
        return h_prev
    h = 2.0 * x
    for i in range(1, n):
        h_prev, h = h, 2.0 * x * h - 2.0 * i * h_prev
    return h


def make_grid(k: int) -> tuple[np.ndarray, np.ndarray]:
    """Integer coordinates of a k x k filter centred at (0, 0).

    Returns ``(x, y)`` with ``x`` varying along columns and ``y`` along rows.
    """
    if k < 1 or k % 2 == 0:
        raise ValueError(f"filter size must be odd and positive, got {k}")
    c = (k - 1) // 2
    r = np.arange(k, dtype=np.float64) - c
    y, x = np.meshgrid(r, r, indexing="ij")
    return x, y


def default_orders(k: int, count: int | None = None) -> list[tuple[int, int]]:
    """(n, m) pairs with n, m < k, sorted by total order then by n.

    Orders of k or more are excluded: on k sample points they are linear
    combinations of lower orders and would make the basis rank deficient.
    """
    pairs = sorted(((n, m) for n in range(k) for m in range(k)), key=lambda p: (p[0] + p[1], p[0]))
    if count is None:
        count = k * k
    if not 0 < count <= k * k:
        raise ValueError(f"basis size must be in [1, {k * k}], got {count}")
    return pairs[:count]


@dataclass(frozen=True)
class BasisSpec:
    k: int = 5
    sigma: float = 1.5
    orders: tuple = ()
    normalize: bool = True

    def __post_init__(self):
        if self.k < 3 or self.k % 2 == 0:
            raise ValueError(f"basis size k must be odd and >= 3, got {self.k}")
        if self.sigma <= 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if not self.orders:
            object.__setattr__(self, "orders", tuple(default_orders(self.k)))
        else:
            object.__setattr__(self, "orders", tuple((int(n), int(m)) for n, m in self.orders))
        if any(n < 0 or m < 0 for n, m in self.orders):
            raise ValueError("Hermite orders must be non-negative")

    @classmethod
    def with_size(cls, k: int = 5, sigma: float = 1.5, n_basis: int | None = None,
                  normalize: bool = True) -> "BasisSpec":
        return cls(k=k, sigma=sigma, orders=tuple(default_orders(k, n_basis)), normalize=normalize)

    @property
    def n_basis(self) -> int:
        return len(self.orders)

    def to_dict(self) -> dict:
        return {"k": self.k, "sigma": self.sigma, "orders": [list(p) for p in self.orders],
                "normalize": self.normalize}

    @classmethod
    def from_dict(cls, d: dict) -> "BasisSpec":
        return cls(k=d["k"], sigma=d["sigma"], orders=tuple(tuple(p) for p in d["orders"]),
                   normalize=d.get("normalize", True))


def eval_basis(spec: BasisSpec, grid=None) -> np.ndarray:
    """Discretize every (n, m) function of ``spec`` on ``grid``; returns [n_basis, k, k]."""
    x, y = make_grid(spec.k) if grid is None else grid
    s = spec.sigma
    envelope = np.exp(-(x ** 2 + y ** 2) / (2 * s ** 2)) / s ** 2
    funcs = np.stack([hermite(n, x / s) * hermite(m, y / s) * envelope for n, m in spec.orders])
    if spec.normalize:
        norms = np.sqrt((funcs ** 2).sum(axis=(1, 2)))
        funcs = funcs / norms[:, None, None]
    return funcs


def gram_matrix(basis: np.ndarray) -> np.ndarray:
    flat = basis.reshape(basis.shape[0], -1)
    return flat @ flat.T


def synthesize_kernel(w, basis: np.ndarray):
    """Linear combination sum_i w_i * basis_i.

    ``w`` may be a plain vector (returns an ndarray) or a Tensor of shape
    [..., n_basis] (returns a taped Tensor of shape [..., k, k]).
    """
    basis = np.asarray(basis, dtype=np.float64)
    n, k = basis.shape[0], basis.shape[-1]
    if isinstance(w, Tensor):
        if w.shape[-1] != n:
            raise ShapeError(f"{w.shape[-1]} weights for {n} basis functions")
        lead = w.shape[:-1]
        flat = matmul(reshape(w, (-1, n)), Tensor(basis.reshape(n, -1)))
        return reshape(flat, lead + (k, k))
    w = np.asarray(w, dtype=np.float64)
    if w.shape[-1] != n:
        raise ShapeError(f"{w.shape[-1]} weights for {n} basis functions")
    return np.tensordot(w, basis, axes=([-1], [0]))


def project_kernel(kernel: np.ndarray, basis: np.ndarray) -> tuple[np.ndarray, float]:
    """Least-squares weights reproducing ``kernel`` ([..., k, k]) from ``basis``.

    Returns ``(w, rel_residual)`` with ``rel_residual`` the worst relative L2
    reconstruction error over the leading kernel axes.
    """
    kernel = np.asarray(kernel, dtype=np.float64)
    n = basis.shape[0]
    a = basis.reshape(n, -1).T
    lead = kernel.shape[:-2]
    targets = kernel.reshape(-1, a.shape[0]).T
    w, *_ = np.linalg.lstsq(a, targets, rcond=None)
    recon = a @ w
    norms = np.linalg.norm(targets, axis=0)
    err = np.linalg.norm(recon - targets, axis=0)
    rel = np.where(norms > 0, err / np.where(norms > 0, norms, 1.0), err)
    return w.T.reshape(lead + (n,)), float(rel.max()) if rel.size else 0.0


@dataclass
class BasisBank:
    """Per-branch stacks of discretized basis functions; branch 0 is untransformed."""

    branches: np.ndarray
    basis_spec: BasisSpec
    branch_specs: list = field(default_factory=list)

    def __post_init__(self):
        b = np.array(self.branches, dtype=np.float64)
        if b.ndim != 4 or b.shape[2] != b.shape[3]:
            raise ShapeError(f"bank must be [branches, n_basis, k, k], got {b.shape}")
        b.setflags(write=False)
        self.branches = b

    @property
    def n_branches(self) -> int:
        return self.branches.shape[0]

    @property
    def n_basis(self) -> int:
        return self.branches.shape[1]

    @property
    def k(self) -> int:
        return self.branches.shape[2]

    @property
    def kind(self) -> str:
        kinds = {s.kind for s in self.branch_specs}
        return kinds.pop() if len(kinds) == 1 else "identity"

    def to_dict(self) -> dict:
        return {"basis": self.basis_spec.to_dict(),
                "branches": [s.to_dict() for s in self.branch_specs]}


def identity_bank(spec: BasisSpec) -> BasisBank:
    return BasisBank(eval_basis(spec)[None], spec, [])
