"""Labelled Delzant polytopes, their measures, and the Futaki functional.

A polytope is always given by its labels L_j(x) = <v_j, x> + lambda_j with
primitive integer normals v_j; vertices are computed, never supplied.  The
interior quadrature is a midpoint rule on a uniform grid whose cells are
clipped exactly to P, with dyadic refinement near the boundary so that
integrable log singularities converge; the boundary rule uses the lattice
measure induced on each facet by its primitive normal.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import Empty, EvaluationFailure, NotBarycentred, NotDelzant, Unbounded

_VERTEX_TOL = 1e-9


@dataclass(frozen=True)
class Label:
    """One defining half-plane L_j(x) = <normal, x> + offset >= 0."""

    normal: tuple[int, ...]
    offset: float

    def __post_init__(self):
        normal = tuple(int(c) for c in self.normal)
        if any(c != float(orig) for c, orig in zip(normal, self.normal)):
            raise ValueError(f"label normal {self.normal!r} has non-integer entries")
        if math.gcd(*(abs(c) for c in normal)) != 1:
            raise ValueError(f"label normal {normal!r} is not primitive")
        object.__setattr__(self, "normal", normal)
        object.__setattr__(self, "offset", float(self.offset))

    def value(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return float(np.dot(self.normal, x) + self.offset)


@dataclass(frozen=True)
class DelzantPolytope:
    """Validated labelled polytope (P, L) with its vertex list."""

    dim: int
    labels: tuple[Label, ...]
    vertices: tuple[tuple[float, ...], ...]
    barycentred: bool

    @property
    def normals(self) -> np.ndarray:
        return np.array([lab.normal for lab in self.labels], dtype=float)

    @property
    def offsets(self) -> np.ndarray:
        return np.array([lab.offset for lab in self.labels], dtype=float)

    @property
    def normal_lengths(self) -> np.ndarray:
        return np.linalg.norm(self.normals, axis=1)

    def label_values(self, x: np.ndarray) -> np.ndarray:
        """L_j at points: (N, m) -> (N, d)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return x @ self.normals.T + self.offsets

    def boundary_distance(self, x: np.ndarray) -> np.ndarray:
        """Euclidean distance of each point to the nearest facet plane."""
        return np.min(self.label_values(x) / self.normal_lengths, axis=1)

    def contains(self, x, tol: float = 0.0) -> np.ndarray:
        return np.all(self.label_values(x) >= -tol, axis=1)

    @property
    def interior_point(self) -> np.ndarray:
        return np.mean(np.asarray(self.vertices, dtype=float), axis=0)

    @property
    def bounding_box(self) -> tuple[np.ndarray, np.ndarray]:
        verts = np.asarray(self.vertices, dtype=float)
        return verts.min(axis=0), verts.max(axis=0)

    def facet_vertices(self, j: int) -> np.ndarray:
        """Vertices lying on facet j (1 point for m=1, 2 endpoints for m=2)."""
        verts = np.asarray(self.vertices, dtype=float)
        on = np.abs(verts @ self.normals[j] + self.offsets[j]) <= _VERTEX_TOL * 10
        return verts[on]

    def facet_measure(self, j: int) -> float:
        """dsigma_L measure of facet j (lattice length; 1 for a point)."""
        if self.dim == 1:
            return 1.0
        ends = self.facet_vertices(j)
        if len(ends) != 2:
            raise NotDelzant(f"facet {j} is not a segment")
        return float(np.linalg.norm(ends[1] - ends[0]) / self.normal_lengths[j])


def build_polytope(labels, fano_mode: bool = False) -> DelzantPolytope:
    """Validate labels and enumerate vertices of the Delzant polytope.

    Raises NotDelzant, Unbounded, Empty, or (in fano mode) NotBarycentred.
    """
    labels = tuple(lab if isinstance(lab, Label) else Label(*lab) for lab in labels)
    if not labels:
        raise Empty("no labels given")
    m = len(labels[0].normal)
    if any(len(lab.normal) != m for lab in labels):
        raise NotDelzant("labels have inconsistent dimension")
    d = len(labels)
    if d < m + 1:
        raise Empty(f"need at least {m + 1} labels in dimension {m}, got {d}")

    normals_i = np.array([lab.normal for lab in labels], dtype=np.int64)
    _check_bounded(normals_i, m)

    normals = normals_i.astype(float)
    offsets = np.array([lab.offset for lab in labels])
    scale = max(1.0, float(np.max(np.abs(offsets))))

    vertices: list[np.ndarray] = []
    for subset in itertools.combinations(range(d), m):
        A = normals[list(subset)]
        if abs(np.linalg.det(A)) < 1e-12:
            continue
        x = np.linalg.solve(A, -offsets[list(subset)])
        if np.all(normals @ x + offsets >= -_VERTEX_TOL * scale):
            if not any(np.allclose(x, v, atol=_VERTEX_TOL * scale) for v in vertices):
                vertices.append(x)
    if not vertices:
        raise Empty("labels cut out an empty region")

    centre = np.mean(vertices, axis=0)
    if np.any(normals @ centre + offsets <= _VERTEX_TOL * scale):
        raise Empty("labels cut out a region with empty interior")

    for x in vertices:
        active = np.where(np.abs(normals @ x + offsets) <= _VERTEX_TOL * 10 * scale)[0]
        if len(active) != m:
            raise NotDelzant(
                f"vertex {tuple(round(c, 9) for c in x)} lies on {len(active)} facets, expected {m}"
            )
        det = int(round(np.linalg.det(normals_i[active].astype(float))))
        if abs(det) != 1:
            raise NotDelzant(
                f"normals at vertex {tuple(round(c, 9) for c in x)} are not a Z-basis (det={det})"
            )

    # Every label must support a facet, else the hyperplane set is not minimal.
    verts_arr = np.array(vertices)
    need = 1 if m == 1 else m
    for j in range(d):
        on = np.abs(verts_arr @ normals[j] + offsets[j]) <= _VERTEX_TOL * 10 * scale
        if int(np.sum(on)) < need:
            raise NotDelzant(f"label {j} does not define a facet")

    barycentred = bool(np.all(offsets == 1.0))
    if fano_mode and not barycentred:
        bad = int(np.argmax(offsets != 1.0))
        raise NotBarycentred(f"label {bad} has offset {offsets[bad]!r}, expected 1")

    return DelzantPolytope(
        dim=m,
        labels=labels,
        vertices=tuple(tuple(float(c) for c in v) for v in sorted(vertices, key=tuple)),
        barycentred=barycentred,
    )


def _check_bounded(normals: np.ndarray, m: int) -> None:
    """Reject labels whose recession cone {d: <v_j,d> >= 0 for all j} != {0}."""
    if m == 1:
        vals = normals[:, 0]
        if np.all(vals > 0) or np.all(vals < 0):
            raise Unbounded("all normals point the same way")
        return
    if m == 2:
        candidates = []
        for v in normals:
            candidates.append((-v[1], v[0]))
            candidates.append((v[1], -v[0]))
        for dvec in candidates:
            if np.all(normals @ np.array(dvec) >= 0):
                raise Unbounded(f"recession direction {dvec}")
        return
    # Generic fallback: sample the recession cone LP-style on random directions.
    rng = np.random.default_rng(0)
    for _ in range(2048):
        dvec = rng.normal(size=m)
        if np.all(normals @ dvec >= 0):
            raise Unbounded("recession direction found")


PRESETS: dict[str, tuple[tuple[tuple[int, ...], float], ...]] = {
    "cp1": (((1,), 1.0), ((-1,), 1.0)),
    "cp1xcp1": (
        ((1, 0), 1.0),
        ((-1, 0), 1.0),
        ((0, 1), 1.0),
        ((0, -1), 1.0),
    ),
    "cp2": (((1, 0), 1.0), ((0, 1), 1.0), ((-1, -1), 1.0)),
}


def preset_polytope(name: str) -> DelzantPolytope:
    """Build one of the named Fano presets."""
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return build_polytope([Label(n, off) for n, off in PRESETS[name]], fano_mode=True)


@dataclass(frozen=True)
class PolytopeQuadrature:
    """Interior and per-facet boundary rules for (P, dx) and (dP, dsigma_L)."""

    polytope: DelzantPolytope
    interior_nodes: np.ndarray
    interior_weights: np.ndarray
    boundary_nodes: np.ndarray
    boundary_weights: np.ndarray
    boundary_facets: np.ndarray
    order: int
    grading: float
    levels: int
    tolerance: float = field(default=1e-10)

    @property
    def volume(self) -> float:
        return float(np.sum(self.interior_weights))

    @property
    def boundary_measure(self) -> float:
        return float(np.sum(self.boundary_weights))

    def facet_total(self, j: int) -> float:
        return float(np.sum(self.boundary_weights[self.boundary_facets == j]))

    @property
    def normalization_constant(self) -> float:
        """a = 2 Vol(dP, dsigma_L) / Vol(P, dx)."""
        return 2.0 * self.boundary_measure / self.volume


def _graded_intervals(a: float, b: float, n: int, grading: float, levels: int,
                      refine_a: bool, refine_b: bool) -> list[tuple[float, float]]:
    """Uniform cells on [a, b], dyadically split near the marked endpoints."""
    h = (b - a) / n
    cells = [(a + i * h, a + (i + 1) * h) for i in range(n - 1)]
    cells.append((a + (n - 1) * h, b))
    for _ in range(levels):
        new: list[tuple[float, float]] = []
        for lo, hi in cells:
            c = 0.5 * (lo + hi)
            w = hi - lo
            close = (refine_a and c - a < grading * w) or (refine_b and b - c < grading * w)
            if close:
                new.append((lo, c))
                new.append((c, hi))
            else:
                new.append((lo, hi))
        cells = new
    return cells


def _clip_polygon(poly: list[np.ndarray], normal: np.ndarray, offset: float) -> list[np.ndarray]:
    """Sutherland-Hodgman clip of a convex polygon against <n,x>+c >= 0."""
    out: list[np.ndarray] = []
    k = len(poly)
    for i in range(k):
        p, q = poly[i], poly[(i + 1) % k]
        fp = np.dot(normal, p) + offset
        fq = np.dot(normal, q) + offset
        if fp >= 0:
            out.append(p)
            if fq < 0:
                out.append(p + (q - p) * (fp / (fp - fq)))
        elif fq >= 0:
            out.append(p + (q - p) * (fp / (fp - fq)))
    return out


def _polygon_area_centroid(poly: list[np.ndarray]) -> tuple[float, np.ndarray]:
    pts = np.array(poly)
    x, y = pts[:, 0], pts[:, 1]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    cross = x * yn - xn * y
    area = 0.5 * np.sum(cross)
    if abs(area) < 1e-300:
        return 0.0, pts.mean(axis=0)
    cx = np.sum((x + xn) * cross) / (6.0 * area)
    cy = np.sum((y + yn) * cross) / (6.0 * area)
    return abs(area), np.array([cx, cy])


def build_quadrature(P: DelzantPolytope, resolution: int, grading: float = 5.0,
                     levels: int = 3) -> PolytopeQuadrature:
    """Interior + boundary rule at the given base resolution.

    `resolution` counts base cells along the longest bounding-box side;
    `grading` is the refinement band width in cells near the boundary.
    """
    if resolution < 8:
        raise ValueError("resolution must be at least 8")
    if P.dim not in (1, 2):
        raise NotImplementedError("quadrature rules are implemented for m <= 2")
    lo, hi = P.bounding_box

    if P.dim == 1:
        cells = _graded_intervals(lo[0], hi[0], resolution, grading, levels, True, True)
        nodes = np.array([[0.5 * (a + b)] for a, b in cells])
        weights = np.array([b - a for a, b in cells])
        bnodes, bweights, bfacets = [], [], []
        for j in range(len(P.labels)):
            vtx = P.facet_vertices(j)
            bnodes.append(vtx[0])
            bweights.append(P.facet_measure(j))
            bfacets.append(j)
        return PolytopeQuadrature(P, nodes, weights, np.array(bnodes),
                                  np.array(bweights), np.array(bfacets, dtype=int),
                                  order=2, grading=grading, levels=levels)

    extent = hi - lo
    h = float(np.max(extent)) / resolution
    ncells = [max(1, int(math.ceil(extent[a] / h - 1e-12))) for a in range(2)]
    normals, offsets = P.normals, P.offsets
    nlen = P.normal_lengths

    nodes_list: list[np.ndarray] = []
    weights_list: list[float] = []

    def corner_values(x0, y0, x1, y1):
        corners = np.array([[x0, y0], [x1, y0], [x0, y1], [x1, y1]])
        return corners @ normals.T + offsets

    def emit(x0, y0, x1, y1, lv):
        vals = corner_values(x0, y0, x1, y1)
        if np.any(np.max(vals, axis=0) < 0):
            return  # a facet separates the whole cell from P
        inside = bool(np.all(vals >= 0))
        width = x1 - x0
        centre = np.array([0.5 * (x0 + x1), 0.5 * (y0 + y1)])
        near = np.min((centre @ normals.T + offsets) / nlen) < grading * width
        if lv < levels and (not inside or near):
            xm, ym = 0.5 * (x0 + x1), 0.5 * (y0 + y1)
            emit(x0, y0, xm, ym, lv + 1)
            emit(xm, y0, x1, ym, lv + 1)
            emit(x0, ym, xm, y1, lv + 1)
            emit(xm, ym, x1, y1, lv + 1)
            return
        if inside:
            nodes_list.append(centre)
            weights_list.append(width * (y1 - y0))
            return
        poly = [np.array([x0, y0]), np.array([x1, y0]),
                np.array([x1, y1]), np.array([x0, y1])]
        for j in range(len(normals)):
            poly = _clip_polygon(poly, normals[j], offsets[j])
            if len(poly) < 3:
                return
        area, cen = _polygon_area_centroid(poly)
        if area > 1e-14 * width * width:
            nodes_list.append(cen)
            weights_list.append(area)

    for i in range(ncells[0]):
        x0 = lo[0] + i * h
        x1 = min(x0 + h, hi[0])
        for j in range(ncells[1]):
            y0 = lo[1] + j * h
            y1 = min(y0 + h, hi[1])
            emit(x0, y0, x1, y1, 0)

    bnodes_list, bweights_list, bfacet_list = [], [], []
    for j in range(len(P.labels)):
        ends = P.facet_vertices(j)
        if len(ends) != 2:
            raise NotDelzant(f"facet {j} is not a segment")
        length = P.facet_measure(j)
        nseg = max(8, int(round(resolution * length / float(np.max(extent)))))
        for a, b in _graded_intervals(0.0, length, nseg, grading, levels, True, True):
            s = 0.5 * (a + b) / length
            bnodes_list.append(ends[0] + s * (ends[1] - ends[0]))
            bweights_list.append(b - a)
            bfacet_list.append(j)

    return PolytopeQuadrature(
        P,
        np.array(nodes_list),
        np.array(weights_list),
        np.array(bnodes_list),
        np.array(bweights_list),
        np.array(bfacet_list, dtype=int),
        order=2,
        grading=grading,
        levels=levels,
    )


def _eval_field(f, points: np.ndarray) -> np.ndarray:
    """Evaluate a scalar field on (N, m) points, accepting scalar callables."""
    try:
        vals = np.asarray(f(points), dtype=float)
        if vals.shape == (len(points),):
            return vals
    except Exception:
        pass
    return np.array([float(f(p)) for p in points])


def futaki(P: DelzantPolytope, Q: PolytopeQuadrature, f) -> float:
    """F(f) = -a * int_P f dx + 2 * int_dP f dsigma_L."""
    fi = _eval_field(f, Q.interior_nodes)
    fb = _eval_field(f, Q.boundary_nodes)
    if not (np.all(np.isfinite(fi)) and np.all(np.isfinite(fb))):
        bad = (Q.interior_nodes[~np.isfinite(fi)] if not np.all(np.isfinite(fi))
               else Q.boundary_nodes[~np.isfinite(fb)])
        raise EvaluationFailure(f"field is singular at node {bad[0]}")
    a = Q.normalization_constant
    return float(-a * np.dot(Q.interior_weights, fi) + 2.0 * np.dot(Q.boundary_weights, fb))


def normalization_constant(P: DelzantPolytope, Q: PolytopeQuadrature) -> float:
    """a = 2 Vol(dP)/Vol(P); equals 2m on a barycentred polytope."""
    if not P.barycentred:
        raise NotBarycentred("normalization constant is defined for barycentred polytopes")
    return Q.normalization_constant
