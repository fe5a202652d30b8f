"""Families of target gates indexed by a parameter vector ``alpha``.

Built-in families (roman numerals are accepted as aliases)::

    u1            exp(-i a1/2 Z) exp(-i a2/2 Y) exp(-i a3/2 Z)       [0, pi]^3
    ctrl-phase    |0><0| x I + |1><1| x exp(-i a1 Z)        (i)      [0, pi]
    zz            exp(-i a1 Z1 Z2)                          (ii)     [0, pi/2]
    ctrl-u1       |0><0| x I + |1><1| x u1(a)               (iii)    [0, pi]^3
    xx-yy-zz      exp(-i sum_j a_j P_j P_j)                 (iv)     [0, pi/2]^3
    zzz           exp(-i a1 Z1 Z2 Z3)                       (v)      [0, pi/2]
    xxx-yyy-zzz   exp(-i sum_j a_j P_j P_j P_j)             (vi)     [0, pi/2]^3
    ctrl-ctrl-u1  (I - |11><11|) x I + |11><11| x u1(a)     (vii)    [0, pi]^3

Custom families are described by a list of factors multiplied left to right,
each factor being ``exp(-i sum_k c_k(alpha) P_k)`` with ``P_k`` a Pauli string
such as ``"x:1 x:2"`` and ``c_k`` affine in ``alpha``::

    {"name": "custom", "n": 2, "domain": [[0, 3.14159]],
     "factors": [[{"pauli": "z:1 z:2", "coef": [0.0, 1.0]}]]}

``coef`` is ``[offset, c_1, ..., c_d]``.
"""

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from famctl.linalg import expm_hermitian, pauli_product

DOMAIN_ATOL = 1e-12

ALIASES = {
    "i": "ctrl-phase",
    "ii": "zz",
    "iii": "ctrl-u1",
    "iv": "xx-yy-zz",
    "v": "zzz",
    "vi": "xxx-yyy-zzz",
    "vii": "ctrl-ctrl-u1",
}


@dataclass
class TargetFamily:
    name: str
    n: int
    domain: np.ndarray
    evaluator: Callable[[np.ndarray], np.ndarray]
    domain_inflation: float = 0.0
    spec: Optional[dict] = None  # only for custom families

    def __post_init__(self):
        self.domain = np.asarray(self.domain, dtype=float).reshape(-1, 2)
        if np.any(self.domain[:, 1] < self.domain[:, 0]):
            raise ValueError("domain bounds must satisfy lo <= hi")
        if self.domain_inflation < 0:
            raise ValueError("domain_inflation must be >= 0")

    @property
    def d(self):
        return self.domain.shape[0]

    def box(self, inflated=True):
        """``(lo, hi)`` arrays of the sampling box."""
        lo, hi = self.domain[:, 0], self.domain[:, 1]
        if not inflated or self.domain_inflation == 0:
            return lo.copy(), hi.copy()
        mid = 0.5 * (lo + hi)
        half = 0.5 * (hi - lo) * (1.0 + self.domain_inflation)
        return mid - half, mid + half

    def with_inflation(self, inflation):
        return TargetFamily(self.name, self.n, self.domain, self.evaluator, inflation, self.spec)


def _rz(a):
    return np.diag([np.exp(-0.5j * a), np.exp(0.5j * a)])


def _ry(a):
    c, s = np.cos(0.5 * a), np.sin(0.5 * a)
    return np.array([[c, -s], [s, c]], dtype=complex)


def u1(alpha):
    a1, a2, a3 = alpha
    return _rz(a1) @ _ry(a2) @ _rz(a3)


def _controlled(n_ctrl, block):
    """Apply ``block`` on the last qubit iff all ``n_ctrl`` leading qubits are 1."""
    dim = 2 ** (n_ctrl + 1)
    out = np.eye(dim, dtype=complex)
    out[-2:, -2:] = block
    return out


def _pauli_string_sum(n, axes_coeffs):
    h = np.zeros((2**n, 2**n), dtype=complex)
    for axis, c in axes_coeffs:
        h += c * pauli_product(n, [(q, axis) for q in range(1, n + 1)])
    return h


def _diag_exp_all_z(n, a):
    zs = np.diag(pauli_product(n, [(q, "z") for q in range(1, n + 1)])).real
    return np.diag(np.exp(-1j * a * zs))


_HALF_PI = [[0.0, np.pi / 2]]
_PI = [[0.0, np.pi]]

_BUILTIN = {
    "u1": (1, _PI * 3, u1),
    "ctrl-phase": (2, _PI, lambda a: _controlled(1, _rz(2 * a[0]))),
    "zz": (2, _HALF_PI, lambda a: _diag_exp_all_z(2, a[0])),
    "ctrl-u1": (2, _PI * 3, lambda a: _controlled(1, u1(a))),
    "xx-yy-zz": (
        2,
        _HALF_PI * 3,
        lambda a: expm_hermitian(_pauli_string_sum(2, zip("xyz", a)), 1.0),
    ),
    "zzz": (3, _HALF_PI, lambda a: _diag_exp_all_z(3, a[0])),
    "xxx-yyy-zzz": (
        3,
        _HALF_PI * 3,
        lambda a: expm_hermitian(_pauli_string_sum(3, zip("xyz", a)), 1.0),
    ),
    "ctrl-ctrl-u1": (3, _PI * 3, lambda a: _controlled(2, u1(a))),
}

BUILTIN_NAMES = tuple(_BUILTIN)


def canonical_name(name: str) -> str:
    return ALIASES.get(name, name)


def get_family(name, inflation=0.0) -> TargetFamily:
    """Look up a built-in family by name or roman-numeral alias."""
    key = canonical_name(name)
    if key not in _BUILTIN:
        raise ValueError(f"unknown target family {name!r}")
    n, domain, fn = _BUILTIN[key]
    return TargetFamily(key, n, domain, fn, inflation)


def _parse_pauli_string(s, n):
    factors = []
    for tok in s.split():
        axis, q = tok.split(":")
        factors.append((int(q), axis))
    return pauli_product(n, factors)


def custom_family(spec: dict, inflation=0.0) -> TargetFamily:
    """Family built from a product of Pauli-string exponentials (see module doc)."""
    allowed = {"name", "n", "domain", "factors"}
    unknown = set(spec) - allowed
    if unknown:
        raise ValueError(f"unknown custom-family keys: {sorted(unknown)}")
    n = int(spec["n"])
    domain = np.asarray(spec["domain"], dtype=float).reshape(-1, 2)
    d = domain.shape[0]
    factors = []
    for factor in spec["factors"]:
        terms = []
        for term in factor:
            coef = np.asarray(term["coef"], dtype=float)
            if coef.shape != (d + 1,):
                raise ValueError(f"coef must have length d + 1 = {d + 1}")
            terms.append((_parse_pauli_string(term["pauli"], n), coef))
        factors.append(terms)

    def evaluate(alpha):
        out = np.eye(2**n, dtype=complex)
        for terms in factors:
            h = sum((c[0] + c[1:] @ alpha) * p for p, c in terms)
            out = out @ expm_hermitian(h, 1.0)
        return out

    return TargetFamily(spec.get("name", "custom"), n, domain, evaluate, inflation, dict(spec))


def family_from_config(family, inflation=0.0) -> TargetFamily:
    if isinstance(family, dict):
        return custom_family(family, inflation)
    return get_family(family, inflation)


def in_domain(family: TargetFamily, alpha, inflated=True):
    lo, hi = family.box(inflated)
    alpha = np.asarray(alpha, dtype=float)
    return bool(np.all(alpha >= lo - DOMAIN_ATOL) and np.all(alpha <= hi + DOMAIN_ATOL))


def evaluate_target(family: TargetFamily, alpha):
    """Target unitary at ``alpha``; raises if ``alpha`` leaves the inflated box."""
    alpha = np.asarray(alpha, dtype=float).reshape(-1)
    if alpha.shape != (family.d,):
        raise ValueError(f"{family.name} expects {family.d} parameters, got {alpha.shape[0]}")
    if not in_domain(family, alpha):
        raise ValueError(f"alpha={alpha.tolist()} outside the domain of {family.name}")
    return np.asarray(family.evaluator(alpha), dtype=complex)


def evaluate_targets(family: TargetFamily, alphas):
    return np.stack([evaluate_target(family, a) for a in np.atleast_2d(alphas)])


def sample_params(family: TargetFamily, count: int, seed=None, rng=None, inflated=True):
    """Uniform i.i.d. draws over the (optionally inflated) domain box.

    Either ``seed`` or an existing ``rng`` (``numpy.random.Generator``) is
    used; passing ``rng`` lets a caller keep one stream per purpose.

    Returns
    -------
    np.ndarray, shape (count, d)
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    if rng is None:
        rng = np.random.default_rng(seed)
    lo, hi = family.box(inflated)
    return lo + (hi - lo) * rng.random((count, family.d))
