"""Extended Mabuchi energy on symplectic potentials and its variations.

The entropy integrals are evaluated with the singular split
log det(G + iB) = -sum_k log L_k + log(prod_k L_k * det(G + iB));
the divergent -sum int log L_k pieces are identical for the potential and
the reference, so both reported entropy terms carry only the finite part
and their difference is exact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConvexityLoss, TamingFailure
from .geometry import hermitian_logdet_batch, kappa_at_points
from .polytope import PolytopeQuadrature, futaki
from .potential import SymplecticPotential, _pd_mask


@dataclass(frozen=True)
class FunctionalReport:
    """Assembled Mabuchi energy M = F(u) - entropy + reference entropy."""

    mabuchi: float
    futaki_of_u: float
    entropy_term: float
    reference_entropy: float
    a: float


def _regularized_entropy_integrand(S: SymplecticPotential, B: np.ndarray,
                                   X: np.ndarray, L: np.ndarray) -> np.ndarray:
    """log(prod_k L_k * det(Hess u + iB)) at interior quadrature nodes."""
    G = S.evaluate(X)[2]
    if not np.all(_pd_mask(G)):
        raise ConvexityLoss("Hess(u) indefinite at a quadrature node")
    return np.sum(np.log(L), axis=1) + hermitian_logdet_batch(G, B)


def mabuchi_energy(S: SymplecticPotential, B: np.ndarray,
                   reference: SymplecticPotential,
                   Q: PolytopeQuadrature) -> FunctionalReport:
    """Extended Mabuchi energy of (u, B) against a reference potential."""
    B = np.asarray(B, dtype=float)
    zero = np.zeros_like(B)
    X = Q.interior_nodes
    L = Q.polytope.label_values(X)
    w = Q.interior_weights
    entropy = float(np.dot(w, _regularized_entropy_integrand(S, B, X, L)))
    ref_entropy = float(np.dot(w, _regularized_entropy_integrand(reference, zero, X, L)))
    fut = futaki(Q.polytope, Q, S.value_extended)
    return FunctionalReport(
        mabuchi=fut - entropy + ref_entropy,
        futaki_of_u=fut,
        entropy_term=entropy,
        reference_entropy=ref_entropy,
        a=Q.normalization_constant,
    )


def mabuchi_first_variation(S: SymplecticPotential, B: np.ndarray, udot,
                            Q: PolytopeQuadrature,
                            kappa_field: np.ndarray | None = None) -> float:
    """(delta M)(udot) = int_P udot (kappa - a) dx.

    `udot` is an analytic direction closure; kappa is evaluated mesh-free at
    the quadrature nodes unless a precomputed node field is supplied.
    """
    X = Q.interior_nodes
    if kappa_field is None:
        kappa_field = kappa_at_points(S, B, X)
    vals = udot(X)[0]
    a = Q.normalization_constant
    return float(np.dot(Q.interior_weights, vals * (kappa_field - a)))


def second_variation_integrand(S: SymplecticPotential, B: np.ndarray, udot,
                               X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Pointwise tr[((G + iB)^{-1} Hess udot)^2]: (real part, imaginary part).

    The imaginary part vanishes identically (B skew, Hess udot symmetric)
    and is returned so tests can assert it stays at rounding level.
    """
    B = np.asarray(B, dtype=float)
    G = S.evaluate(X)[2]
    if not np.all(_pd_mask(G)):
        raise ConvexityLoss("Hess(u) indefinite at a quadrature node")
    hd = udot(X)[2]
    M = G + 1j * B[None, :, :]
    try:
        Minv = np.linalg.inv(M)
    except np.linalg.LinAlgError as exc:
        raise TamingFailure("G + iB singular at a quadrature node") from exc
    K = Minv @ hd
    tr = np.einsum("nij,nji->n", K, K)
    return tr.real, tr.imag


def mabuchi_second_variation(S: SymplecticPotential, B: np.ndarray, udot,
                             Q: PolytopeQuadrature) -> float:
    """(delta^2 M)(udot, udot) = int_P tr[((G + iB)^{-1} Hess udot)^2] dx >= 0."""
    real, _ = second_variation_integrand(S, B, udot, Q.interior_nodes)
    return float(np.dot(Q.interior_weights, real))
