"""Small dense complex linear algebra.

Pauli products on a few qubits, the unitary exponential ``exp(-i s H)`` of a
Hermitian generator and its Frechet derivative. Everything works on stacked
arrays of shape ``(..., d, d)`` so that whole batches of time steps can be
handled by one call.

Qubits are labelled from 1 and qubit 1 is the leftmost Kronecker factor.
"""

import numpy as np

PAULI = {
    "i": np.eye(2, dtype=complex),
    "x": np.array([[0, 1], [1, 0]], dtype=complex),
    "y": np.array([[0, -1j], [1j, 0]], dtype=complex),
    "z": np.array([[1, 0], [0, -1]], dtype=complex),
}

HERMITIAN_ATOL = 1e-12
DEGENERACY_TOL = 1e-9


def pauli_product(n, factors):
    """Kronecker product of Pauli operators, identity on unlisted qubits.

    Parameters
    ----------
    n : int
        Number of qubits.
    factors : sequence of (int, str)
        ``(qubit, axis)`` pairs with ``qubit`` in ``[1, n]`` and axis one of
        ``'x'``, ``'y'``, ``'z'``.

    Returns
    -------
    np.ndarray, shape (2**n, 2**n)
    """
    ops = ["i"] * n
    seen = set()
    for qubit, axis in factors:
        if not 1 <= qubit <= n:
            raise ValueError(f"qubit index {qubit} out of range [1, {n}]")
        if qubit in seen:
            raise ValueError(f"duplicate qubit index {qubit}")
        if axis not in ("x", "y", "z"):
            raise ValueError(f"unknown Pauli axis {axis!r}")
        seen.add(qubit)
        ops[qubit - 1] = axis
    out = np.ones((1, 1), dtype=complex)
    for op in ops:
        out = np.kron(out, PAULI[op])
    return out


def dagger(a):
    return np.conj(np.swapaxes(a, -1, -2))


def check_hermitian(h, atol=HERMITIAN_ATOL):
    h = np.asarray(h)
    if h.shape[-1] != h.shape[-2]:
        raise ValueError(f"expected square matrices, got shape {h.shape}")
    err = np.max(np.abs(h - dagger(h))) if h.size else 0.0
    if not err <= atol:
        raise ValueError(f"matrix is not Hermitian (max deviation {err:.3e})")


def eigh(h):
    """Hermitian eigendecomposition ``h = V diag(w) V^dagger`` (batched)."""
    # LinAlgError on non-convergence is deliberately not caught.
    return np.linalg.eigh(h)


def phases(evals, s):
    """``exp(-i s w)`` for eigenvalues ``w``; ``s`` broadcasts over batch axes."""
    s = np.asarray(s, dtype=float)
    return np.exp(-1j * s[..., None] * evals)


def unitary_from_eig(evals, evecs, s):
    """Rebuild ``exp(-i s H)`` from a Hermitian eigendecomposition."""
    ph = phases(evals, s)
    return (evecs * ph[..., None, :]) @ dagger(evecs)


def divided_differences(evals, s):
    """First divided differences of ``x -> exp(-i s x)`` on the spectrum.

    Returns ``G`` with ``G[..., j, k] = (e_j - e_k) / (w_j - w_k)`` where
    ``e = exp(-i s w)``; entries with ``|w_j - w_k| < DEGENERACY_TOL`` use
    the confluent limit ``-i s e_j``.
    """
    s = np.asarray(s, dtype=float)
    ph = phases(evals, s)
    dw = evals[..., :, None] - evals[..., None, :]
    dph = ph[..., :, None] - ph[..., None, :]
    close = np.abs(dw) < DEGENERACY_TOL
    safe = np.where(close, 1.0, dw)
    confluent = -1j * s[..., None, None] * np.broadcast_to(ph[..., :, None], dph.shape)
    return np.where(close, confluent, dph / safe)


def expm_hermitian(h, s):
    """``exp(-i s H)`` for Hermitian ``H``.

    Parameters
    ----------
    h : array_like, shape (..., d, d)
    s : float or array_like broadcasting against the batch shape of ``h``

    Returns
    -------
    np.ndarray, shape (..., d, d)
    """
    h = np.asarray(h, dtype=complex)
    check_hermitian(h)
    evals, evecs = eigh(h)
    return unitary_from_eig(evals, evecs, s)


def expm_derivative(h, s, d):
    """Directional derivative of ``A -> exp(-i s A)`` at ``H`` along ``D``.

    Uses the Daleckii-Krein formula in the eigenbasis of ``H``: the direction
    is rotated into the eigenbasis, multiplied entrywise by the divided
    differences of the exponential and rotated back.
    """
    h = np.asarray(h, dtype=complex)
    d = np.asarray(d, dtype=complex)
    check_hermitian(h)
    evals, evecs = eigh(h)
    gamma = divided_differences(evals, s)
    d_eig = dagger(evecs) @ d @ evecs
    return evecs @ (gamma * d_eig) @ dagger(evecs)


def is_unitary(u, atol=1e-10):
    u = np.asarray(u)
    eye = np.eye(u.shape[-1])
    return bool(np.max(np.abs(dagger(u) @ u - eye)) <= atol)


def phase_aligned_distance(a, b):
    """Max entrywise distance between ``a`` and ``e^{i phi} b`` at the best phase.

    The phase is ``arg Tr(b^dagger a)``, which maximises ``Re Tr`` overlap.
    """
    overlap = np.trace(dagger(b) @ a, axis1=-2, axis2=-1)
    ph = np.exp(1j * np.angle(overlap))
    return float(np.max(np.abs(a - ph[..., None, None] * b)))
