"""B-spline bases, tensor products and ridge penalty blocks.

Bases are evaluated with the Cox--de Boor recursion on an explicit knot
vector whose boundary knots are repeated ``degree + 1`` times.  Evaluation
is defined on the closed interval between the boundary knots; at the right
boundary the left-limit value is returned so rows never vanish.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, ValidationError

__all__ = [
    "SplineBasis",
    "PenaltyBlock",
    "eval_basis",
    "tensor_basis",
    "ridge_penalty",
    "uniform_basis",
    "quantile_basis",
]


@dataclass(frozen=True)
class SplineBasis:
    """A B-spline basis of a given degree on a clamped knot vector."""

    degree: int
    knots: tuple[float, ...]

    def __post_init__(self):
        knots = np.asarray(self.knots, dtype=float)
        if self.degree < 0:
            raise ValidationError("degree must be non-negative")
        if knots.ndim != 1 or knots.size < 2 * (self.degree + 1):
            raise ValidationError(
                f"need at least {2 * (self.degree + 1)} knots for degree {self.degree}"
            )
        if np.any(np.diff(knots) < 0):
            raise ValidationError("knots must be non-decreasing")
        if knots[self.degree] >= knots[-self.degree - 1]:
            raise ValidationError("basis domain is empty")
        object.__setattr__(self, "knots", tuple(float(k) for k in knots))

    @property
    def num_bases(self) -> int:
        return len(self.knots) - self.degree - 1

    @property
    def domain(self) -> tuple[float, float]:
        return self.knots[self.degree], self.knots[-self.degree - 1]

    @property
    def interior_knots(self) -> tuple[float, ...]:
        return self.knots[self.degree + 1 : -self.degree - 1]

    def __call__(self, x) -> np.ndarray:
        return eval_basis(self, x)


def uniform_basis(lo: float, hi: float, num_bases: int, degree: int = 3) -> SplineBasis:
    """Clamped basis on ``[lo, hi]`` with equally spaced interior knots."""
    n_interior = num_bases - degree - 1
    if n_interior < 0:
        raise ValidationError(f"num_bases must be at least degree + 1 = {degree + 1}")
    interior = np.linspace(lo, hi, n_interior + 2)[1:-1]
    return _clamped(interior, lo, hi, degree)


def quantile_basis(x, num_bases: int, degree: int = 3) -> SplineBasis:
    """Clamped basis with interior knots at equally spaced quantiles of ``x``.

    Boundary knots sit at the observed min and max.  When the quantiles of a
    heavily tied covariate collide with each other or with a boundary, the
    interior knots fall back to equal spacing over the observed range.
    """
    x = np.asarray(x, dtype=float)
    x = x[np.isfinite(x)]
    if x.size == 0:
        raise ValidationError("cannot place knots on an empty sample")
    lo, hi = float(x.min()), float(x.max())
    if lo == hi:
        raise ValidationError("cannot place knots on a constant covariate")
    n_interior = num_bases - degree - 1
    if n_interior < 0:
        raise ValidationError(f"num_bases must be at least degree + 1 = {degree + 1}")
    probs = np.linspace(0.0, 1.0, n_interior + 2)[1:-1]
    interior = np.quantile(x, probs)
    grid = np.r_[lo, interior, hi]
    if np.any(np.diff(grid) <= 0):
        interior = np.linspace(lo, hi, n_interior + 2)[1:-1]
    return _clamped(interior, lo, hi, degree)


def _clamped(interior, lo, hi, degree):
    knots = np.r_[[lo] * (degree + 1), np.asarray(interior, dtype=float), [hi] * (degree + 1)]
    return SplineBasis(degree=degree, knots=tuple(knots))


def eval_basis(basis: SplineBasis, x) -> np.ndarray:
    """Design matrix of shape ``(len(x), num_bases)``.

    Raises
    ------
    DomainError
        If any ``x`` lies outside the basis domain.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    t = np.asarray(basis.knots)
    p = basis.degree
    lo, hi = basis.domain
    bad = ~((x >= lo) & (x <= hi))
    if np.any(bad):
        first = x[bad][0]
        raise DomainError(f"value {first!r} outside basis domain [{lo}, {hi}]")

    n_spans = t.size - 1
    # degree-0 indicators on half-open spans [t_i, t_{i+1})
    B = ((x[:, None] >= t[None, :-1]) & (x[:, None] < t[None, 1:])).astype(float)
    # closed right boundary: assign to the last non-empty span
    last = np.nonzero(t[:-1] < t[1:])[0][-1]
    at_right = x == hi
    if np.any(at_right):
        B[at_right] = 0.0
        B[at_right, last] = 1.0

    for k in range(1, p + 1):
        m = n_spans - k
        left_den = t[k : k + m] - t[:m]
        right_den = t[k + 1 : k + 1 + m] - t[1 : 1 + m]
        with np.errstate(divide="ignore", invalid="ignore"):
            left = np.where(left_den > 0, (x[:, None] - t[None, :m]) / left_den, 0.0)
            right = np.where(
                right_den > 0, (t[None, k + 1 : k + 1 + m] - x[:, None]) / right_den, 0.0
            )
        B = left * B[:, :m] + right * B[:, 1 : m + 1]
    return B


def tensor_basis(bu: SplineBasis, bv: SplineBasis, u, v) -> np.ndarray:
    """Row-wise tensor product of two bases.

    Column ``a * bv.num_bases + b`` holds ``B_a(u) * B_b(v)`` (row-major in
    ``(a, b)``).
    """
    u = np.atleast_1d(np.asarray(u, dtype=float))
    v = np.atleast_1d(np.asarray(v, dtype=float))
    if u.shape != v.shape:
        raise ValidationError(f"dimension mismatch: |u|={u.size}, |v|={v.size}")
    Bu = eval_basis(bu, u)
    Bv = eval_basis(bv, v)
    return (Bu[:, :, None] * Bv[:, None, :]).reshape(u.size, -1)


@dataclass(frozen=True)
class PenaltyBlock:
    block_sizes: tuple[int, ...]
    penalized: tuple[bool, ...]
    matrix: np.ndarray = field(repr=False)

    @property
    def size(self) -> int:
        return int(sum(self.block_sizes))


def ridge_penalty(block_sizes, penalized) -> PenaltyBlock:
    """Block-diagonal ridge matrix: identity on penalized blocks, zero elsewhere."""
    block_sizes = tuple(int(b) for b in block_sizes)
    penalized = tuple(bool(p) for p in penalized)
    if len(block_sizes) != len(penalized):
        raise ValidationError("block_sizes and penalized must have equal length")
    diag = np.concatenate(
        [np.full(b, 1.0 if p else 0.0) for b, p in zip(block_sizes, penalized)]
        or [np.zeros(0)]
    )
    return PenaltyBlock(block_sizes, penalized, np.diag(diag))
