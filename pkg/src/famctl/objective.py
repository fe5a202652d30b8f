"""Gate infidelity and the time-penalised cost.

Complex-matrix cotangents use the real-pair convention: for a real loss ``L``
of a complex matrix ``U`` the cotangent is ``dL/dRe(U) + 1j * dL/dIm(U)``, so
that ``dL = Re Tr(G^dagger dU)``.
"""

import numpy as np


def _check(u, u_tgt):
    u = np.asarray(u, dtype=complex)
    u_tgt = np.asarray(u_tgt, dtype=complex)
    if u.shape[-2:] != u_tgt.shape[-2:] or u.shape[-1] != u.shape[-2]:
        raise ValueError(f"dimension mismatch: {u.shape} vs {u_tgt.shape}")
    return u, u_tgt


def _overlap(u, u_tgt):
    # Tr(U^dagger U_tgt) = sum_ij conj(U_ij) U_tgt_ij
    return np.sum(np.conj(u) * u_tgt, axis=(-2, -1))


def infidelity(u, u_tgt):
    """``1 - |Tr(U^dagger U_tgt)|^2 / d^2`` with ``d = 2**n``.

    Invariant under a global phase on either argument; batched over
    leading axes.
    """
    u, u_tgt = _check(u, u_tgt)
    d = u.shape[-1]
    return 1.0 - np.abs(_overlap(u, u_tgt)) ** 2 / d**2


def infidelity_cotangent(u, u_tgt):
    """Real-pair cotangent of :func:`infidelity` with respect to ``U``."""
    u, u_tgt = _check(u, u_tgt)
    d = u.shape[-1]
    z = _overlap(u, u_tgt)
    return -(2.0 / d**2) * np.conj(z)[..., None, None] * u_tgt


def total_cost(infid, duration, mu):
    if mu < 0:
        raise ValueError("mu must be >= 0")
    return infid + mu * duration
