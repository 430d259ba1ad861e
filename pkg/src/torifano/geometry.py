"""Pointwise toric generalized Kahler geometry.

Everything here is a pure function of (u, A, B) data at points: the metric
and complex-structure blocks in the momentum/angular frame, the taming test
for Hess(u) + iB, the |b|^2 trace formula, the generalized scalar curvature
kappa, the regularized Ricci potential, and the Chern Laplacian acting on
torus-invariant functions of the dual variable.

Hermitian determinants of G + iB are computed through the real 2m x 2m
block embedding so no complex factorizations are needed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConvexityLoss, NotBarycentred, SingularMatrix, TamingFailure
from .parallel import chunk_indices, parallel_map, worker_count
from .polytope import DelzantPolytope
from .potential import InteriorGrid, SymplecticPotential, _pd_mask


@dataclass(frozen=True)
class DeformationPair:
    """Constant skew matrices (A, B) for type-A/B deformations."""

    A: np.ndarray
    B: np.ndarray

    def __post_init__(self):
        A = np.array(self.A, dtype=float)
        B = np.array(self.B, dtype=float)
        for name, M in (("A", A), ("B", B)):
            if M.ndim != 2 or M.shape[0] != M.shape[1]:
                raise ValueError(f"{name} must be a square matrix")
            if not np.array_equal(M, -M.T):
                raise ValueError(f"{name} must be exactly skew-symmetric")
        if A.shape != B.shape:
            raise ValueError("A and B must share a dimension")
        A.setflags(write=False)
        B.setflags(write=False)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)

    @property
    def dim(self) -> int:
        return self.A.shape[0]

    @classmethod
    def zero(cls, m: int) -> "DeformationPair":
        return cls(np.zeros((m, m)), np.zeros((m, m)))

    @classmethod
    def standard(cls, m: int, alpha: float = 0.0, beta: float = 0.0) -> "DeformationPair":
        """alpha/beta multiples of the standard 2-form [[0,1],[-1,0]] (m=2)."""
        if m == 1:
            if alpha or beta:
                raise ValueError("skew matrices vanish identically for m=1")
            return cls.zero(1)
        J = np.zeros((m, m))
        J[0, 1], J[1, 0] = 1.0, -1.0
        return cls(alpha * J, beta * J)


def _sym(M: np.ndarray) -> np.ndarray:
    return 0.5 * (M + M.swapaxes(-1, -2))


def _skew(M: np.ndarray) -> np.ndarray:
    return 0.5 * (M - M.swapaxes(-1, -2))


def taming_check(G: np.ndarray, B: np.ndarray) -> tuple[bool, float]:
    """Positivity of Hess(u) + iB via the real symmetric block matrix.

    Returns (is_tamed, smallest eigenvalue of [[G, B], [-B, G]]).
    """
    G = np.asarray(G, dtype=float)
    B = np.asarray(B, dtype=float)
    block = np.block([[G, B], [-B, G]])
    eigs = np.linalg.eigvalsh(block)
    return bool(eigs[0] > 0), float(eigs[0])


def hermitian_logdet(G: np.ndarray, B: np.ndarray) -> float:
    """log det(G + iB) (real, positive branch) for a single point."""
    block = np.block([[G, -B], [B, G]])
    sign, logdet = np.linalg.slogdet(block)
    if sign <= 0:
        raise TamingFailure("G + iB is not positive definite", min_eigenvalue=None)
    return 0.5 * float(logdet)


def hermitian_logdet_batch(G: np.ndarray, B: np.ndarray) -> np.ndarray:
    """log det(G + iB) over a stack of symmetric matrices (K, m, m)."""
    m = G.shape[-1]
    if m == 1:
        g = G[..., 0, 0]
        if np.any(g <= 0):
            raise TamingFailure("Hess(u) not positive at some node")
        return np.log(g)
    if m == 2:
        det = G[..., 0, 0] * G[..., 1, 1] - G[..., 0, 1] * G[..., 1, 0]
        val = det - B[0, 1] ** 2
        if np.any(val <= 0) or np.any(G[..., 0, 0] + G[..., 1, 1] <= 0):
            raise TamingFailure("G + iB not positive definite at some node")
        return np.log(val)
    return np.array([hermitian_logdet(g, B) for g in G])


def x_matrix(G: np.ndarray, B: np.ndarray) -> np.ndarray:
    """X = Re(G + iB)^{-1} = (G + B G^{-1} B)^{-1} for one point."""
    Ginv = np.linalg.inv(G)
    return np.linalg.inv(G + B @ Ginv @ B)


def x_matrix_batch(G: np.ndarray, B: np.ndarray) -> np.ndarray:
    """X over a stack (K, m, m); closed forms for m <= 2."""
    m = G.shape[-1]
    if m == 1:
        return 1.0 / G
    if m == 2:
        det = G[..., 0, 0] * G[..., 1, 1] - G[..., 0, 1] * G[..., 1, 0]
        b = B[0, 1]
        denom = det - b * b
        if np.any(denom <= 0):
            raise TamingFailure("G + iB not positive definite at some node")
        # B G^{-1} B = -b^2 G / det G, so X = det G / (det G - b^2) * G^{-1}
        inv = np.empty_like(G)
        inv[..., 0, 0] = G[..., 1, 1]
        inv[..., 1, 1] = G[..., 0, 0]
        inv[..., 0, 1] = -G[..., 0, 1]
        inv[..., 1, 0] = -G[..., 1, 0]
        return inv / denom[..., None, None]
    return np.stack([x_matrix(g, B) for g in G])


@dataclass(frozen=True)
class MetricBlocks:
    """All frame matrices of a toric GK structure at one point."""

    point: np.ndarray
    G: np.ndarray
    Psi: np.ndarray
    X: np.ndarray
    Y: np.ndarray
    metric: np.ndarray
    I_block: np.ndarray
    J_block: np.ndarray
    omega_J: np.ndarray
    F_block: np.ndarray
    b_sq: float


def metric_blocks(S: SymplecticPotential, D: DeformationPair, x) -> MetricBlocks:
    """Assemble g, I, J, omega_J and F blocks from (u, A, B) at a point."""
    x = np.asarray(x, dtype=float)
    _, _, hess = S.evaluate(x[None, :])
    G = hess[0]
    if not _pd_mask(G[None, ...])[0]:
        raise ConvexityLoss(f"Hess(u) indefinite at {tuple(x)}")
    ok, eig = taming_check(G, D.B)
    if not ok:
        raise TamingFailure(f"taming fails at {tuple(x)}", point=x, min_eigenvalue=eig)
    A, B = D.A, D.B
    m = D.dim
    Psi = G + A
    Pinv = np.linalg.inv(Psi)
    PinvT = np.linalg.inv(Psi.T)
    X = x_matrix(G, B)
    Y = -np.linalg.inv(G) @ B @ X
    metric = np.block([[_sym(Pinv), Pinv @ B], [-B @ PinvT, _sym(Psi)]])
    I_block = np.block([[2 * B @ Pinv, Psi + 4 * B @ Pinv @ B], [-Pinv, -2 * Pinv @ B]])
    J_block = np.block([[np.zeros((m, m)), Psi.T], [-PinvT, np.zeros((m, m))]])
    omega_J = np.block([[Pinv @ B @ PinvT, -Pinv @ _sym(Psi)], [_sym(Psi) @ PinvT, B]])
    F_block = np.block([[np.zeros((m, m)), -np.eye(m)], [np.eye(m), 2 * B]])
    b2 = b_norm_sq(np.linalg.inv(G), B)
    return MetricBlocks(point=x, G=G, Psi=Psi, X=X, Y=Y, metric=metric,
                        I_block=I_block, J_block=J_block, omega_J=omega_J,
                        F_block=F_block, b_sq=b2)


def matrix_identity_suite(Psi: np.ndarray) -> float:
    """Max Frobenius residual of the four polar-part identities of Psi."""
    Psi = np.asarray(Psi, dtype=float)
    try:
        Pinv = np.linalg.inv(Psi)
    except np.linalg.LinAlgError as exc:
        raise SingularMatrix("Psi is singular") from exc
    if np.linalg.cond(Psi) > 1e12:
        raise SingularMatrix("Psi is numerically singular")
    s, a = _sym(Psi), _skew(Psi)
    si, ai = _sym(Pinv), _skew(Pinv)
    eye = np.eye(Psi.shape[0])
    residuals = [
        Psi @ si @ Psi.T - s,
        Psi @ ai @ Psi.T + a,
        s @ ai + a @ si,
        s @ si + a @ ai - eye,
    ]
    return float(max(np.linalg.norm(r) for r in residuals))


def b_norm_sq(H_phi: np.ndarray, B: np.ndarray) -> float:
    """|b|^2 = tr[(Id + B H B H)^{-1}] - m, via singular values of L^T B L.

    Computed from the Cholesky factor of H so the result is nonnegative by
    construction and vanishes exactly when B = 0.
    """
    H = np.asarray(H_phi, dtype=float)
    B = np.asarray(B, dtype=float)
    try:
        Lc = np.linalg.cholesky(H)
    except np.linalg.LinAlgError as exc:
        raise TamingFailure("H is not positive definite") from exc
    K = Lc.T @ B @ Lc
    s = np.linalg.svd(K, compute_uv=False)
    if np.any(s >= 1.0):
        raise TamingFailure("trace argument Id + BHBH is singular",
                            min_eigenvalue=float(1.0 - np.max(s) ** 2))
    return float(np.sum(s ** 2 / (1.0 - s ** 2)))


def b_norm_sq_batch(H: np.ndarray, B: np.ndarray) -> np.ndarray:
    """|b|^2 over a stack of H matrices; closed form for m <= 2."""
    m = H.shape[-1]
    if m == 1 or not np.any(B):
        return np.zeros(H.shape[0])
    if m == 2:
        b = B[0, 1]
        detH = H[..., 0, 0] * H[..., 1, 1] - H[..., 0, 1] * H[..., 1, 0]
        s2 = b * b * detH  # singular value of L^T B L is |b| sqrt(det H)
        if np.any(s2 >= 1.0):
            raise TamingFailure("taming lost: |b| sqrt(det H) >= 1 at some node")
        return 2.0 * s2 / (1.0 - s2)
    return np.array([b_norm_sq(h, B) for h in H])


def gen_scalar_curvature(S: SymplecticPotential, B: np.ndarray,
                         grid: InteriorGrid | None = None) -> np.ndarray:
    """kappa = -sum_{ij} d_i d_j X_ij on the grid (full-shape, NaN off-mask).

    X = Re(Hess u + iB)^{-1}; second derivatives reuse the same stencil
    family as the potential, so only core nodes carry 4th-order accuracy.
    """
    grid = grid or S.grid
    if grid is None:
        raise ValueError("a grid is required to differentiate the X field")
    m = grid.dim
    B = np.asarray(B, dtype=float)
    if S.representation == "grid" and S.grid is grid:
        G = S.hessian_nodes()
    else:
        G = S.evaluate(grid.unmasked_points)[2]
    if not np.all(_pd_mask(G)):
        raise ConvexityLoss("Hess(u) indefinite at a grid node")
    X = x_matrix_batch(G, B)
    kap = np.zeros(len(G))
    for i in range(m):
        kap -= grid.dk2(X[:, i, i], i)
        for j in range(i + 1, m):
            kap -= 2.0 * grid.dk_mixed(X[:, i, j], i, j)
    return grid.scatter(kap, fill=np.nan)


def kappa_at_points(S: SymplecticPotential, B: np.ndarray, points: np.ndarray,
                    delta: float = 1e-3) -> np.ndarray:
    """Mesh-free kappa at arbitrary interior points by local differencing.

    Each entry of X is differenced with centred steps `delta`, shrunk near
    the boundary so every stencil point stays strictly inside P.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    B = np.asarray(B, dtype=float)
    P = S.polytope
    m = P.dim

    def x_field(Z):
        G = S.evaluate(Z)[2]
        return x_matrix_batch(G, B)

    def work(idx_range):
        pts = points[idx_range]
        dist = P.boundary_distance(pts)
        step = np.minimum(delta, 0.2 * dist)
        out = np.zeros(len(pts))
        for i in range(m):
            ei = np.zeros(m)
            ei[i] = 1.0
            plus = x_field(pts + step[:, None] * ei)
            minus = x_field(pts - step[:, None] * ei)
            centre = x_field(pts)
            out -= (plus[:, i, i] - 2 * centre[:, i, i] + minus[:, i, i]) / step ** 2
            for j in range(i + 1, m):
                ej = np.zeros(m)
                ej[j] = 1.0
                pp = x_field(pts + step[:, None] * (ei + ej))
                pm = x_field(pts + step[:, None] * (ei - ej))
                mp = x_field(pts - step[:, None] * (ei - ej))
                mm = x_field(pts - step[:, None] * (ei + ej))
                mixed = (pp[:, i, j] - pm[:, i, j] - mp[:, i, j] + mm[:, i, j]) / (4 * step ** 2)
                out -= 2.0 * mixed
        return out

    chunks = chunk_indices(len(points), 4 * worker_count())
    results = parallel_map(work, chunks)
    return np.concatenate(results) if results else np.zeros(0)


def ricci_potential(S: SymplecticPotential, B: np.ndarray, x) -> float:
    """Regularized Bismut-Ricci potential h_{u,B} at one interior point.

    Uses the barycentred cancellation
      h = (1/2)[sum_k log L_k + log det(G + iB)] - (1/2) sum_k (L_k - 1)
          + v - <x, grad v>,
    every term of which stays finite up to the boundary.
    """
    P = S.polytope
    if not P.barycentred:
        raise NotBarycentred("the Ricci potential needs a barycentred polytope")
    x = np.asarray(x, dtype=float)
    vals = ricci_potential_batch(S, np.asarray(B, dtype=float), x[None, :])
    return float(vals[0])


def ricci_potential_batch(S: SymplecticPotential, B: np.ndarray,
                          X: np.ndarray) -> np.ndarray:
    """h_{u,B} at a batch of interior points."""
    P = S.polytope
    L = P.label_values(X)
    if np.any(L <= 0):
        from .errors import BoundaryContact
        raise BoundaryContact("Ricci potential evaluation off the open polytope")
    v, gv, hv = S.smooth_eval(X)
    G = S.evaluate(X)[2] if S.representation == "analytic" else None
    if G is None:
        from .potential import _canonical_batch
        G = _canonical_batch(P, X)[2] + hv
    logdet = hermitian_logdet_batch(G, B)
    sum_log_l = np.sum(np.log(L), axis=1)
    sum_lm1 = X @ np.sum(P.normals, axis=0)
    return 0.5 * (sum_log_l + logdet) - 0.5 * sum_lm1 + v - np.einsum("ni,ni->n", X, gv)


def chern_laplacian(H_phi: np.ndarray, B: np.ndarray, hess_f: np.ndarray) -> np.ndarray:
    """Chern Laplacian of an invariant function in dual coordinates.

    Delta^C f = tr[(H + H B H B H)^{-1} Hess_y f] with H = Hess(phi); for
    B = 0 this is the usual tr[H^{-1} Hess f], and it is the directional
    derivative of phi -> log det((Hess phi)^{-1} + iB)^{-1}.
    """
    H = np.atleast_3d(np.asarray(H_phi, dtype=float))
    if H.ndim == 2:
        H = H[None, ...]
    hess_f = np.asarray(hess_f, dtype=float)
    if hess_f.ndim == 2:
        hess_f = hess_f[None, ...]
    B = np.asarray(B, dtype=float)
    out = np.empty(len(H))
    for k in range(len(H)):
        M = H[k] + H[k] @ B @ H[k] @ B @ H[k]
        try:
            out[k] = float(np.trace(np.linalg.solve(M, hess_f[k])))
        except np.linalg.LinAlgError as exc:
            raise TamingFailure("H + HBHBH is singular") from exc
    return out


def poisson_coefficients(D: DeformationPair, t: float = 0.0) -> np.ndarray:
    """Coefficient matrix 2(A + iB) of the holomorphic Poisson structure.

    Along the flow the pair scales by e^{-2t}, so the coefficients at time t
    are e^{-2t} * 2(A_0 + i B_0).
    """
    return np.exp(-2.0 * t) * 2.0 * (D.A + 1j * D.B)
