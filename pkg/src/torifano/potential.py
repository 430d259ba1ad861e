"""Symplectic potentials u = u_c + v and their Legendre transform.

The canonical part u_c = (1/2) sum_j L_j log L_j is always evaluated
analytically; only the smooth part v is ever represented numerically.  Grid
representations store v on a uniform interior grid and differentiate with
4th-order central stencils, degrading to 2nd-order one-sided stencils where
the mask leaves no room.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import BoundaryContact, ConvexityLoss, NoConvergence
from .polytope import DelzantPolytope

SmoothFn = Callable[[np.ndarray], tuple[np.ndarray, np.ndarray, np.ndarray]]

# Cubic Lagrange basis on nodes t = 0, 1, 2, 3 and its t-derivatives.
_LAG = np.array([
    [-1 / 6, 1, -11 / 6, 1],
    [1 / 2, -5 / 2, 3, 0],
    [-1 / 2, 2, -3 / 2, 0],
    [1 / 6, -1 / 2, 1 / 3, 0],
])
_LAG_D = np.array([np.polyder(c) for c in _LAG])
_LAG_DD = np.array([np.polyder(c, 2) for c in _LAG])


def _polyvals(coeffs: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Evaluate a stack of polynomials at t: (4, deg+1) x (N,) -> (N, 4)."""
    out = np.zeros(t.shape + (4,))
    for j in range(4):
        out[..., j] = np.polyval(coeffs[j], t)
    return out


# ---------------------------------------------------------------------------
# Canonical (Guillemin) potential
# ---------------------------------------------------------------------------

def _canonical_batch(P: DelzantPolytope, X: np.ndarray):
    """(value, grad, hess) of u_c at strictly interior points, vectorized."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    L = P.label_values(X)
    if np.any(L <= 0):
        bad = X[np.any(L <= 0, axis=1)][0]
        raise BoundaryContact(f"point {tuple(bad)} touches the boundary")
    logL = np.log(L)
    V = P.normals
    val = 0.5 * np.sum(L * logL, axis=1)
    grad = 0.5 * (logL + 1.0) @ V
    hess = 0.5 * np.einsum("nd,di,dj->nij", 1.0 / L, V, V)
    return val, grad, hess


def canonical_potential(P: DelzantPolytope, x):
    """Exact value, gradient and Hessian of u_c at one interior point."""
    val, grad, hess = _canonical_batch(P, np.asarray(x, dtype=float)[None, :])
    return float(val[0]), grad[0], hess[0]


def canonical_value_extended(P: DelzantPolytope, X: np.ndarray) -> np.ndarray:
    """u_c values allowing boundary points, where L log L extends by 0."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    L = P.label_values(X)
    if np.any(L < -1e-9):
        raise BoundaryContact("point lies outside the closed polytope")
    Lc = np.clip(L, 0.0, None)
    term = np.where(Lc > 0, Lc * np.log(np.where(Lc > 0, Lc, 1.0)), 0.0)
    return 0.5 * np.sum(term, axis=1)


# ---------------------------------------------------------------------------
# Smooth-part closures (analytic representation)
# ---------------------------------------------------------------------------

def zero_smooth(m: int) -> SmoothFn:
    def fn(X):
        X = np.atleast_2d(X)
        n = len(X)
        return np.zeros(n), np.zeros((n, m)), np.zeros((n, m, m))
    return fn


def polynomial_smooth(coeffs: dict[tuple[int, ...], float], m: int) -> SmoothFn:
    """v(x) = sum_e c_e * x^e with analytic derivatives."""
    terms = [(np.array(e, dtype=int), float(c)) for e, c in coeffs.items()]

    def fn(X):
        X = np.atleast_2d(X)
        n = len(X)
        val = np.zeros(n)
        grad = np.zeros((n, m))
        hess = np.zeros((n, m, m))
        for e, c in terms:
            mono = np.prod(X ** e, axis=1)
            val += c * mono
            for i in range(m):
                if e[i] == 0:
                    continue
                ei = e.copy()
                ei[i] -= 1
                grad[:, i] += c * e[i] * np.prod(X ** ei, axis=1)
                for j in range(m):
                    if ei[j] == 0:
                        continue
                    eij = ei.copy()
                    eij[j] -= 1
                    hess[:, i, j] += c * e[i] * ei[j] * np.prod(X ** eij, axis=1)
        return val, grad, hess
    return fn


def bump_smooth(center, amplitude: float, width: float, m: int) -> SmoothFn:
    """Gaussian bump A exp(-|x-c|^2 / (2 w^2))."""
    c = np.asarray(center, dtype=float)

    def fn(X):
        X = np.atleast_2d(X)
        diff = X - c
        r2 = np.sum(diff ** 2, axis=1)
        val = amplitude * np.exp(-r2 / (2 * width ** 2))
        grad = -(val / width ** 2)[:, None] * diff
        outer = np.einsum("ni,nj->nij", diff, diff)
        hess = (val / width ** 4)[:, None, None] * outer
        hess -= (val / width ** 2)[:, None, None] * np.eye(m)
        return val, grad, hess
    return fn


def sum_smooth(parts: list[SmoothFn], m: int) -> SmoothFn:
    def fn(X):
        X = np.atleast_2d(X)
        n = len(X)
        val = np.zeros(n)
        grad = np.zeros((n, m))
        hess = np.zeros((n, m, m))
        for p in parts:
            v, g, h = p(X)
            val += v
            grad += g
            hess += h
        return val, grad, hess
    return fn


# ---------------------------------------------------------------------------
# Interior grid
# ---------------------------------------------------------------------------

class InteriorGrid:
    """Uniform grid over the bounding box with an interior mask.

    Unmasked nodes keep a Euclidean distance to every facet plane larger
    than margin*h, so Hess(u_c) stays representable at every stored node.
    """

    def __init__(self, polytope: DelzantPolytope, resolution: int, margin: float = 1.5):
        if resolution < 8:
            raise ValueError("resolution must be at least 8")
        self.polytope = polytope
        self.resolution = int(resolution)
        self.margin = float(margin)
        lo, hi = polytope.bounding_box
        extent = hi - lo
        self.h = float(np.max(extent)) / (resolution - 1)
        counts = [int(round(extent[a] / self.h)) + 1 for a in range(polytope.dim)]
        self.axes = [lo[a] + self.h * np.arange(counts[a]) for a in range(polytope.dim)]
        self.shape = tuple(counts)
        mesh = np.meshgrid(*self.axes, indexing="ij")
        pts = np.stack([g.ravel() for g in mesh], axis=1)
        dist = polytope.boundary_distance(pts).reshape(self.shape)
        self.mask = dist > self.margin * self.h
        if not np.any(self.mask):
            raise ValueError("grid too coarse: no interior nodes survive the margin")
        self.node_points = pts.reshape(self.shape + (polytope.dim,))
        self._stencil_cache: dict = {}
        self._axis_bounds = []
        box = True
        for a in range(polytope.dim):
            proj = np.any(self.mask, axis=tuple(i for i in range(polytope.dim) if i != a))
            idx = np.where(proj)[0]
            self._axis_bounds.append((int(idx[0]), int(idx[-1])))
        if polytope.dim == 1:
            lo0, hi0 = self._axis_bounds[0]
            box = bool(np.all(self.mask[lo0:hi0 + 1]))
        else:
            boxmask = np.zeros(self.shape, dtype=bool)
            sl = tuple(slice(b[0], b[1] + 1) for b in self._axis_bounds)
            boxmask[sl] = True
            box = bool(np.array_equal(self.mask, boxmask))
        self.is_box = box
        # lazily filled polytope-dependent node data
        self._node_cache: dict = {}

    @property
    def dim(self) -> int:
        return self.polytope.dim

    @property
    def unmasked_points(self) -> np.ndarray:
        key = "pts"
        if key not in self._node_cache:
            self._node_cache[key] = self.node_points[self.mask]
        return self._node_cache[key]

    def zeros_field(self) -> np.ndarray:
        return np.zeros(self.shape)

    # -- stencil machinery ---------------------------------------------------
    #
    # Derivatives are sparse operators acting on the vector of unmasked node
    # values: 4th-order central stencils wherever the mask allows, 2nd-order
    # central then one-sided ones at the mask edge.

    def _shift(self, arr: np.ndarray, k: int, axis: int) -> np.ndarray:
        """Gather arr at index+k along axis; zero where out of bounds."""
        if k == 0:
            return arr
        out = np.zeros_like(arr)
        src = [slice(None)] * arr.ndim
        dst = [slice(None)] * arr.ndim
        if k > 0:
            src[axis] = slice(k, None)
            dst[axis] = slice(None, -k)
        else:
            src[axis] = slice(None, k)
            dst[axis] = slice(-k, None)
        out[tuple(dst)] = arr[tuple(src)]
        return out

    def _avail(self, axis: int, k: int) -> np.ndarray:
        key = ("avail", axis, k)
        if key not in self._stencil_cache:
            self._stencil_cache[key] = self._shift(self.mask.astype(bool), k, axis) & self.mask
        return self._stencil_cache[key]

    def _classes(self, axis: int, second: bool):
        """Boolean selectors for each stencil class, first match wins."""
        key = ("cls", axis, second)
        if key in self._stencil_cache:
            return self._stencil_cache[key]
        A = lambda k: self._avail(axis, k)
        c4 = A(-2) & A(-1) & A(1) & A(2)
        c2 = ~c4 & A(-1) & A(1)
        fx = 3 if second else 2
        used = c4 | c2
        fwd = ~used & np.logical_and.reduce([A(k) for k in range(1, fx + 1)])
        used = used | fwd
        bwd = ~used & np.logical_and.reduce([A(-k) for k in range(1, fx + 1)])
        used = used | bwd
        f1 = ~used & (A(1) if not second else (A(1) & A(2)))
        used = used | f1
        b1 = ~used & (A(-1) if not second else (A(-1) & A(-2)))
        sel = (c4, c2, fwd, bwd, f1, b1)
        self._stencil_cache[key] = sel
        return sel

    _D1_COEFS = (
        ((-2, 1 / 12), (-1, -8 / 12), (1, 8 / 12), (2, -1 / 12)),
        ((-1, -0.5), (1, 0.5)),
        ((0, -1.5), (1, 2.0), (2, -0.5)),
        ((0, 1.5), (-1, -2.0), (-2, 0.5)),
        ((0, -1.0), (1, 1.0)),
        ((0, 1.0), (-1, -1.0)),
    )
    _D2_COEFS = (
        ((-2, -1 / 12), (-1, 16 / 12), (0, -30 / 12), (1, 16 / 12), (2, -1 / 12)),
        ((-1, 1.0), (0, -2.0), (1, 1.0)),
        ((0, 2.0), (1, -5.0), (2, 4.0), (3, -1.0)),
        ((0, 2.0), (-1, -5.0), (-2, 4.0), (-3, -1.0)),
        ((0, 1.0), (1, -2.0), (2, 1.0)),
        ((0, 1.0), (-1, -2.0), (-2, 1.0)),
    )

    @property
    def _kindex(self) -> np.ndarray:
        """Flat-grid index -> position among unmasked nodes (-1 off-mask)."""
        if "kindex" not in self._stencil_cache:
            idx = np.full(int(np.prod(self.shape)), -1, dtype=np.int64)
            idx[self.mask.ravel()] = np.arange(int(np.sum(self.mask)))
            self._stencil_cache["kindex"] = idx
        return self._stencil_cache["kindex"]

    def _operator(self, axis: int, order: int):
        """Sparse (K, K) derivative operator on unmasked-node vectors."""
        key = ("op", axis, order)
        if key in self._stencil_cache:
            return self._stencil_cache[key]
        from scipy.sparse import csr_matrix
        second = order == 2
        classes = self._classes(axis, second)
        tables = self._D2_COEFS if second else self._D1_COEFS
        stride = int(np.prod(self.shape[axis + 1:], dtype=np.int64)) if axis + 1 <= len(self.shape) else 1
        kidx = self._kindex
        scale = self.h ** order
        rows, cols, data = [], [], []
        for cls_mask, table in zip(classes, tables):
            flat = np.flatnonzero(cls_mask.ravel())
            if len(flat) == 0:
                continue
            for k, coef in table:
                rows.append(kidx[flat])
                cols.append(kidx[flat + k * stride])
                data.append(np.full(len(flat), coef / scale))
        K = int(np.sum(self.mask))
        op = csr_matrix((np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
                        shape=(K, K))
        self._stencil_cache[key] = op
        return op

    def _operator_mixed(self, a: int, b: int):
        """Symmetrized mixed second derivative (D1a D1b + D1b D1a) / 2."""
        key = ("opm", min(a, b), max(a, b))
        if key not in self._stencil_cache:
            Da, Db = self._operator(a, 1), self._operator(b, 1)
            self._stencil_cache[key] = ((Da @ Db + Db @ Da) * 0.5).tocsr()
        return self._stencil_cache[key]

    def dk1(self, vec: np.ndarray, axis: int) -> np.ndarray:
        return self._operator(axis, 1) @ vec

    def dk2(self, vec: np.ndarray, axis: int) -> np.ndarray:
        return self._operator(axis, 2) @ vec

    def dk_mixed(self, vec: np.ndarray, a: int, b: int) -> np.ndarray:
        return self._operator_mixed(a, b) @ vec

    def scatter(self, vec: np.ndarray, fill: float = 0.0) -> np.ndarray:
        """Place a K-vector of node values back into a full-shape field."""
        out = np.full(self.shape, fill)
        out[self.mask] = vec
        return out

    def d1(self, field: np.ndarray, axis: int) -> np.ndarray:
        """First derivative field along axis at unmasked nodes (0 elsewhere)."""
        return self.scatter(self.dk1(field[self.mask], axis))

    def d2(self, field: np.ndarray, axis: int) -> np.ndarray:
        """Second derivative field along axis at unmasked nodes."""
        return self.scatter(self.dk2(field[self.mask], axis))

    def gradient_k(self, vec: np.ndarray) -> np.ndarray:
        """(K, m) gradient of a node vector."""
        return np.stack([self.dk1(vec, a) for a in range(self.dim)], axis=-1)

    def hessian_k(self, vec: np.ndarray) -> np.ndarray:
        """(K, m, m) symmetric Hessian of a node vector."""
        m = self.dim
        K = len(vec)
        H = np.empty((K, m, m))
        for a in range(m):
            H[:, a, a] = self.dk2(vec, a)
        for a in range(m):
            for b in range(a + 1, m):
                mixed = self.dk_mixed(vec, a, b)
                H[:, a, b] = mixed
                H[:, b, a] = mixed
        return H

    @property
    def core_mask(self) -> np.ndarray:
        """Nodes whose whole Hessian uses 4th-order central stencils."""
        key = "core"
        if key not in self._stencil_cache:
            core = self.mask.copy()
            for a in range(self.dim):
                core &= self._classes(a, second=True)[0]
                core &= self._classes(a, second=False)[0]
            # mixed derivatives consume one extra ring of neighbours
            for a in range(self.dim):
                core &= self._avail(a, 2) & self._avail(a, -2)
            self._stencil_cache[key] = core
        return self._stencil_cache[key]

    # -- interpolation --------------------------------------------------------

    def _block_starts(self, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(N, m) block starts for 4-node stencils and local coordinates."""
        lo = np.array([ax[0] for ax in self.axes])
        rel = (X - lo) / self.h
        starts = np.zeros(X.shape, dtype=int)
        for a in range(self.dim):
            i0 = np.floor(rel[:, a]).astype(int) - 1
            amin, amax = self._axis_bounds[a]
            hi_cap = max(amin, amax - 3)
            starts[:, a] = np.clip(i0, amin, hi_cap)
        t = rel - starts
        return starts, t

    def build_interpolant(self, field: np.ndarray):
        """Globally smooth spline interpolant of a full-shape field.

        On box masks this is a not-a-knot cubic spline over the unmasked
        subgrid (C^2, so Newton solves converge); staircase masks fall back
        to local cubic blocks with a Taylor rescue.
        """
        if self.is_box:
            return _BoxSplineInterpolant(self, field)
        return _FallbackInterpolant(self, field)

    def interpolate(self, fields: list[np.ndarray], X: np.ndarray,
                    derivatives: bool = False):
        """Interpolate full-shape fields at points.

        Returns a list with one entry per field: values (N,), or with
        derivatives=True a tuple (value, grad (N,m), hess (N,m,m)).
        """
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return [self.build_interpolant(f)(X, derivatives) for f in fields]

    def _interpolate_fallback(self, fields, X, starts, t, derivatives):
        """Per-point path for staircase masks: shift blocks, else Taylor."""
        offs = np.arange(4)
        results = [np.zeros(len(X)) if not derivatives else
                   [np.zeros(len(X)), np.zeros((len(X), self.dim)),
                    np.zeros((len(X), self.dim, self.dim))] for _ in fields]
        nearest = None
        for n in range(len(X)):
            blk_start = self._fit_block(starts[n], X[n])
            if blk_start is not None:
                tt = (X[n] - np.array([self.axes[a][blk_start[a]]
                                       for a in range(self.dim)])) / self.h
                W = [_polyvals(_LAG, np.array([tt[a]]))[0] for a in range(self.dim)]
                D = [_polyvals(_LAG_D, np.array([tt[a]]))[0] / self.h for a in range(self.dim)]
                DD = [_polyvals(_LAG_DD, np.array([tt[a]]))[0] / self.h ** 2
                      for a in range(self.dim)]
                sel = tuple(slice(blk_start[a], blk_start[a] + 4) for a in range(self.dim))
                for fi, f in enumerate(fields):
                    blk = f[sel]
                    if self.dim == 1:
                        val = blk @ W[0]
                        g = np.array([blk @ D[0]])
                        hh = np.array([[blk @ DD[0]]])
                    else:
                        val = W[0] @ blk @ W[1]
                        g = np.array([D[0] @ blk @ W[1], W[0] @ blk @ D[1]])
                        hh = np.array([[DD[0] @ blk @ W[1], D[0] @ blk @ D[1]],
                                       [D[0] @ blk @ D[1], W[0] @ blk @ DD[1]]])
                    if derivatives:
                        results[fi][0][n] = val
                        results[fi][1][n] = g
                        results[fi][2][n] = hh
                    else:
                        results[fi][n] = val
                continue
            if nearest is None:
                nearest = self.unmasked_points
            k = int(np.argmin(np.sum((nearest - X[n]) ** 2, axis=1)))
            idx = tuple(np.argwhere(self.mask)[k])
            for fi, f in enumerate(fields):
                if derivatives:
                    results[fi][0][n] = f[idx]
                    # gradient/hessian left 0 in the rare fully-degenerate case
                else:
                    results[fi][n] = f[idx]
        if derivatives:
            return [(r[0], r[1], r[2]) for r in results]
        return results

    def _fit_block(self, start: np.ndarray, x: np.ndarray):
        """Shift a 4^m block around `start` until all nodes are unmasked."""
        for shift in _block_shift_order(self.dim):
            cand = start + shift
            ok = True
            for a in range(self.dim):
                if cand[a] < 0 or cand[a] + 3 >= self.shape[a]:
                    ok = False
                    break
            if not ok:
                continue
            sel = tuple(slice(cand[a], cand[a] + 4) for a in range(self.dim))
            if np.all(self.mask[sel]):
                return cand
        return None


def _block_shift_order(dim: int):
    """Search order for block shifts: stay put first, then move inward."""
    shifts = [0, -1, 1, -2, 2, -3, 3]
    if dim == 1:
        return [np.array([s]) for s in shifts]
    return [np.array([a, b]) for a in shifts for b in shifts]


class _BoxSplineInterpolant:
    """Cubic spline over the rectangular unmasked subgrid.

    1-D splines extrapolate polynomially; the 2-D spline clamps queries to
    the subgrid box and Taylor-extends with its own derivatives, which only
    matters inside the thin margin band next to the boundary.
    """

    def __init__(self, grid: InteriorGrid, field: np.ndarray):
        from scipy.interpolate import RectBivariateSpline, make_interp_spline
        self.grid = grid
        b = grid._axis_bounds
        if grid.dim == 1:
            lo, hi = b[0]
            self.x = grid.axes[0][lo:hi + 1]
            self.spline = make_interp_spline(self.x, field[lo:hi + 1], k=3)
        else:
            (x0, x1), (y0, y1) = b
            self.x = grid.axes[0][x0:x1 + 1]
            self.y = grid.axes[1][y0:y1 + 1]
            self.spline = RectBivariateSpline(self.x, self.y,
                                              field[x0:x1 + 1, y0:y1 + 1],
                                              kx=3, ky=3, s=0)

    def __call__(self, X: np.ndarray, derivatives: bool = False):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if self.grid.dim == 1:
            q = X[:, 0]
            val = self.spline(q)
            if not derivatives:
                return val
            return val, self.spline(q, nu=1)[:, None], self.spline(q, nu=2)[:, None, None]
        # clamp into the spline box, then second-order Taylor outward
        eps = 1e-12
        cx = np.clip(X[:, 0], self.x[0] + eps, self.x[-1] - eps)
        cy = np.clip(X[:, 1], self.y[0] + eps, self.y[-1] - eps)
        dx_off = X[:, 0] - cx
        dy_off = X[:, 1] - cy
        ev = self.spline.ev
        f = ev(cx, cy)
        fx = ev(cx, cy, dx=1)
        fy = ev(cx, cy, dy=1)
        fxx = ev(cx, cy, dx=2)
        fxy = ev(cx, cy, dx=1, dy=1)
        fyy = ev(cx, cy, dy=2)
        val = (f + fx * dx_off + fy * dy_off
               + 0.5 * (fxx * dx_off ** 2 + 2 * fxy * dx_off * dy_off + fyy * dy_off ** 2))
        if not derivatives:
            return val
        gx = fx + fxx * dx_off + fxy * dy_off
        gy = fy + fxy * dx_off + fyy * dy_off
        grad = np.stack([gx, gy], axis=1)
        hess = np.stack([np.stack([fxx, fxy], axis=1),
                         np.stack([fxy, fyy], axis=1)], axis=1)
        return val, grad, hess


class _FallbackInterpolant:
    """Local cubic blocks for staircase masks (per-point, with Taylor rescue)."""

    def __init__(self, grid: InteriorGrid, field: np.ndarray):
        self.grid = grid
        self.field = field

    def __call__(self, X: np.ndarray, derivatives: bool = False):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        starts, t = self.grid._block_starts(X)
        out = self.grid._interpolate_fallback([self.field], X, starts, t, derivatives)
        return out[0]


# ---------------------------------------------------------------------------
# Symplectic potential
# ---------------------------------------------------------------------------

class SymplecticPotential:
    """u = u_c + v over a labelled polytope; immutable once constructed.

    The smooth part is either an analytic closure (value, gradient, Hessian)
    or a grid field with finite-difference stencils.  Convexity failures are
    reported lazily at evaluation, per the flow's needs.
    """

    def __init__(self, polytope: DelzantPolytope, representation: str,
                 smooth_fn: SmoothFn | None = None,
                 grid: InteriorGrid | None = None,
                 values: np.ndarray | None = None):
        self.polytope = polytope
        self.representation = representation
        if representation == "analytic":
            self.smooth_fn = smooth_fn or zero_smooth(polytope.dim)
            self.grid = grid  # optional sampling grid for field operations
        elif representation == "grid":
            if grid is None or values is None:
                raise ValueError("grid representation needs a grid and values")
            if values.shape != grid.shape:
                raise ValueError("values shape does not match the grid")
            self.grid = grid
            self.values = np.array(values, dtype=float)
            self.values[~grid.mask] = 0.0
            self.values.setflags(write=False)
            self._fields: dict = {}
        else:
            raise ValueError(f"unknown representation {representation!r}")

    # -- constructors ---------------------------------------------------------

    @classmethod
    def analytic(cls, polytope, smooth_fn=None, grid=None):
        return cls(polytope, "analytic", smooth_fn=smooth_fn, grid=grid)

    @classmethod
    def on_grid(cls, polytope, grid, values):
        return cls(polytope, "grid", grid=grid, values=values)

    @classmethod
    def from_smooth(cls, polytope, grid, smooth_fn):
        """Sample an analytic smooth part onto a grid."""
        pts = grid.node_points.reshape(-1, polytope.dim)
        vals = smooth_fn(pts)[0].reshape(grid.shape)
        vals = np.where(grid.mask, vals, 0.0)
        return cls.on_grid(polytope, grid, vals)

    def with_values(self, values: np.ndarray) -> "SymplecticPotential":
        return SymplecticPotential.on_grid(self.polytope, self.grid, values)

    def perturbed(self, direction: SmoothFn, eps: float) -> "SymplecticPotential":
        """New potential with smooth part v + eps * direction."""
        if self.representation == "analytic":
            base = self.smooth_fn

            def fn(X):
                v0, g0, h0 = base(X)
                v1, g1, h1 = direction(X)
                return v0 + eps * v1, g0 + eps * g1, h0 + eps * h1
            return SymplecticPotential.analytic(self.polytope, fn, grid=self.grid)
        pts = self.grid.node_points.reshape(-1, self.polytope.dim)
        dv = direction(pts)[0].reshape(self.grid.shape)
        return self.with_values(self.values + eps * np.where(self.grid.mask, dv, 0.0))

    # -- smooth part ----------------------------------------------------------

    def node_smooth_fields(self):
        """(v (K,), grad (K,m), hess (K,m,m)) at the unmasked nodes (grid only)."""
        if self.representation != "grid":
            raise ValueError("node fields are defined for grid potentials")
        if "vgh" not in self._fields:
            g = self.grid
            vec = self.values[g.mask]
            self._fields["vgh"] = (vec, g.gradient_k(vec), g.hessian_k(vec))
        return self._fields["vgh"]

    def _interpolant(self):
        if "interp" not in self._fields:
            self._fields["interp"] = self.grid.build_interpolant(self.values)
        return self._fields["interp"]

    def smooth_eval(self, X: np.ndarray):
        """(v, grad, hess) of the smooth part at arbitrary interior points."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if self.representation == "analytic":
            return self.smooth_fn(X)
        return self._interpolant()(X, derivatives=True)

    def smooth_value_extended(self, X: np.ndarray) -> np.ndarray:
        """v on the closed polytope; near/on the boundary use a short Taylor
        pull-back toward the interior point (v is smooth up to dP)."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if self.representation == "analytic":
            return self.smooth_fn(X)[0]
        g = self.grid
        safe_dist = (g.margin + 2.5) * g.h
        dist = self.polytope.boundary_distance(X)
        out = np.empty(len(X))
        inner = dist > safe_dist
        if np.any(inner):
            out[inner] = self.grid.interpolate([self.values], X[inner])[0]
        if np.any(~inner):
            centre = self.polytope.interior_point
            Xb = X[~inner]
            db = dist[~inner]
            # pull each point radially until it clears the safe band
            span = self.polytope.boundary_distance(centre[None, :])[0]
            s = np.clip((safe_dist - db) / np.maximum(span - db, 1e-12), 0.0, 1.0)
            Xin = Xb + s[:, None] * (centre - Xb)
            v, gr, hh = self.smooth_eval(Xin)
            delta = Xb - Xin
            out[~inner] = (v + np.einsum("ni,ni->n", gr, delta)
                           + 0.5 * np.einsum("ni,nij,nj->n", delta, hh, delta))
        return out

    # -- full potential -------------------------------------------------------

    def evaluate(self, X: np.ndarray):
        """(u, grad u, Hess u) at strictly interior points."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        val_c, grad_c, hess_c = _canonical_batch(self.polytope, X)
        val_s, grad_s, hess_s = self.smooth_eval(X)
        return val_c + val_s, grad_c + grad_s, hess_c + hess_s

    def value_extended(self, X: np.ndarray) -> np.ndarray:
        """u on the closed polytope (value only), boundary-safe."""
        return canonical_value_extended(self.polytope, X) + self.smooth_value_extended(X)

    def check_convexity(self) -> None:
        """Raise ConvexityLoss unless Hess u > 0 at every unmasked node."""
        if self.representation != "grid":
            raise ValueError("check_convexity applies to grid potentials")
        G = self.hessian_nodes()
        ok = _pd_mask(G)
        if not np.all(ok):
            bad = self.grid.unmasked_points[~ok][0]
            raise ConvexityLoss(f"Hess(u) not positive definite at {tuple(bad)}")

    def hessian_nodes(self) -> np.ndarray:
        """Hess u at unmasked nodes, (K, m, m)."""
        if self.representation != "grid":
            raise ValueError("node fields are defined for grid potentials")
        return self.grid_canonical()[2] + self.node_smooth_fields()[2]

    def grid_canonical(self):
        """Cached (value, grad, hess) of u_c at unmasked nodes."""
        cache = self.grid._node_cache
        if "uc" not in cache:
            cache["uc"] = _canonical_batch(self.polytope, self.grid.unmasked_points)
        return cache["uc"]


def _pd_mask(G: np.ndarray) -> np.ndarray:
    """Positive-definiteness of a stack of 1x1 or 2x2 symmetric matrices."""
    if G.shape[-1] == 1:
        return G[..., 0, 0] > 0
    if G.shape[-1] == 2:
        det = G[..., 0, 0] * G[..., 1, 1] - G[..., 0, 1] * G[..., 1, 0]
        return (G[..., 0, 0] > 0) & (det > 0)
    return np.array([np.all(np.linalg.eigvalsh(g) > 0) for g in G.reshape(-1, *G.shape[-2:])
                     ]).reshape(G.shape[:-2])


def eval_u(S: SymplecticPotential, x):
    """(value, gradient, hessian) of u at one interior point.

    Raises BoundaryContact off the open polytope and ConvexityLoss when the
    assembled Hessian is not positive definite.
    """
    val, grad, hess = S.evaluate(np.asarray(x, dtype=float)[None, :])
    if not _pd_mask(hess)[0]:
        raise ConvexityLoss(f"Hess(u) indefinite at {tuple(np.asarray(x, dtype=float))}")
    return float(val[0]), grad[0], hess[0]


# ---------------------------------------------------------------------------
# Legendre transform
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LegendrePoint:
    """Solved Legendre data at a dual point y: grad u(x) = y."""

    y: np.ndarray
    x: np.ndarray
    phi: float
    hess_phi: np.ndarray


def legendre_solve(S: SymplecticPotential, y, tol: float = 1e-10,
                   max_iter: int = 100) -> LegendrePoint:
    """Damped Newton solve of grad u(x) = y from the polytope barycenter."""
    y = np.asarray(y, dtype=float)
    P = S.polytope
    x = P.interior_point.copy()
    floor = 1e-12
    if S.representation == "grid":
        floor = max(floor, 0.2 * S.grid.margin * S.grid.h * float(np.min(P.normal_lengths)))

    def admissible(z):
        return np.all(P.label_values(z[None, :])[0] > floor)

    for _ in range(max_iter):
        val, grad, hess = S.evaluate(x[None, :])
        r = grad[0] - y
        if float(np.max(np.abs(r))) < tol:
            u_val = float(val[0])
            hphi = np.linalg.inv(hess[0])
            return LegendrePoint(y=y.copy(), x=x.copy(),
                                 phi=float(np.dot(y, x) - u_val), hess_phi=hphi)
        try:
            step = np.linalg.solve(hess[0], -r)
        except np.linalg.LinAlgError as exc:
            raise NoConvergence(f"singular Hessian during Newton at x={tuple(x)}") from exc
        alpha = 1.0
        while not admissible(x + alpha * step):
            alpha *= 0.5
            if alpha < 1e-16:
                raise NoConvergence(f"step damping underflow at x={tuple(x)}; |y|={np.linalg.norm(y):.3g}")
        x = x + alpha * step
    raise NoConvergence(f"Newton did not reach |grad u - y| < {tol} in {max_iter} iterations")


def legendre_involution_check(S: SymplecticPotential, sample_x) -> float:
    """Round-trip error of x -> y = grad u(x) -> (x, u) recovered from phi."""
    worst = 0.0
    for x in np.atleast_2d(np.asarray(sample_x, dtype=float)):
        val, grad, _ = S.evaluate(x[None, :])
        lp = legendre_solve(S, grad[0])
        u_rec = float(np.dot(lp.y, lp.x)) - lp.phi
        err = float(np.linalg.norm(lp.x - x)) + abs(u_rec - float(val[0]))
        worst = max(worst, err)
    return worst


def variation_sign_convention(S: SymplecticPotential, udot: SmoothFn,
                              eps: float = 1e-5, sample_y=None) -> float:
    """Residual max |phi_dot(y) + u_dot(x(y))| for the Legendre differential.

    phi_dot is obtained by symmetric differencing of the Legendre transforms
    of u + eps*udot and u - eps*udot at fixed y.
    """
    if sample_y is None:
        sample_y = [np.zeros(S.polytope.dim)]
    plus = S.perturbed(udot, eps)
    minus = S.perturbed(udot, -eps)
    worst = 0.0
    for y in np.atleast_2d(np.asarray(sample_y, dtype=float)):
        lp0 = legendre_solve(S, y)
        phi_dot = (legendre_solve(plus, y).phi - legendre_solve(minus, y).phi) / (2 * eps)
        udot_val = float(udot(lp0.x[None, :])[0][0])
        worst = max(worst, abs(phi_dot + udot_val))
    return worst
