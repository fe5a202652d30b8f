"""Gate-decomposition timing baseline.

Circuits are built from rotations ``R_s(theta) = exp(-i theta/2 s)`` with
``s`` one of ``y:i``, ``z:i`` or ``xx:i,j``. With control amplitudes bounded
by one, a rotation by ``theta`` needs a time ``|theta|/2`` and a circuit needs
the sum of those times.

Single-qubit gates use the U3 convention::

    U3(theta, phi, lam) = [[cos(theta/2),          -e^{i lam} sin(theta/2)],
                           [e^{i phi} sin(theta/2), e^{i(phi+lam)} cos(theta/2)]]
                        ~ Rz(phi) Ry(theta) Rz(lam)

i.e. ``Rz(lam)`` acts first. Circuit gate lists are in time order: the
circuit unitary is ``G_L ... G_2 G_1``.

Circuit files hold one gate per line, ``<kind>:<qubits> <angle>``, where the
angle is a decimal number or an arithmetic expression in ``pi`` and the
target parameters ``a1, a2, ...``. ``#`` starts a comment::

    y:1 pi/2
    xx:1,2 -2*a1
"""

import ast
import math
import operator
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Tuple

import numpy as np

from famctl.hamiltonian import Channel, parse_channel
from famctl.linalg import is_unitary, phase_aligned_distance
from famctl.targets import TargetFamily, evaluate_target, get_family, sample_params

DEGENERATE_TOL = 1e-9
TEMPLATE_ATOL = 1e-9
ZERO_ANGLE = 1e-13


@dataclass(frozen=True)
class Gate:
    kind: str
    qubits: Tuple[int, ...]
    angle: float

    def matrix(self, n):
        op = Channel(self.kind, self.qubits).operator(n)
        # op is an involution: exp(-i a op) = cos(a) I - i sin(a) op
        a = 0.5 * self.angle
        return math.cos(a) * np.eye(2**n) - 1j * math.sin(a) * op

    @property
    def time(self):
        return 0.5 * abs(self.angle)


@dataclass
class Circuit:
    n: int
    gates: List[Gate] = field(default_factory=list)

    def __post_init__(self):
        for g in self.gates:
            if g.kind not in ("y", "z", "xx"):
                raise ValueError(f"gate kind {g.kind!r} not in the gate set")
            if any(not 1 <= q <= self.n for q in g.qubits):
                raise ValueError(f"gate {g} acts outside qubits 1..{self.n}")
            if g.kind == "xx" and (len(g.qubits) != 2 or g.qubits[0] == g.qubits[1]):
                raise ValueError(f"xx gate needs two distinct qubits: {g}")

    def add(self, kind, qubits, angle):
        if isinstance(qubits, int):
            qubits = (qubits,)
        self.gates.append(Gate(kind, tuple(qubits), float(angle)))
        self.__post_init__()
        return self


def circuit_time(c: Circuit) -> float:
    return float(sum(g.time for g in c.gates))


def circuit_unitary(c: Circuit) -> np.ndarray:
    u = np.eye(2**c.n, dtype=complex)
    for g in c.gates:
        u = g.matrix(c.n) @ u
    return u


def _wrap(a):
    """Wrap an angle into (-pi, pi]."""
    w = math.remainder(a, 2 * math.pi)
    return math.pi if w == -math.pi else w


def u3(theta, phi, lam):
    c, s = math.cos(theta / 2), math.sin(theta / 2)
    return np.array(
        [[c, -np.exp(1j * lam) * s], [np.exp(1j * phi) * s, np.exp(1j * (phi + lam)) * c]]
    )


@dataclass(frozen=True)
class EulerZYZ:
    theta: float
    phi: float
    lam: float

    @property
    def time(self):
        return 0.5 * (abs(self.theta) + abs(self.phi) + abs(self.lam))

    def matrix(self):
        return u3(self.theta, self.phi, self.lam)

    def gates(self, qubit):
        """Time-ordered rotations ``Rz(lam), Ry(theta), Rz(phi)``, zero angles dropped."""
        seq = [("z", self.lam), ("y", self.theta), ("z", self.phi)]
        return [Gate(k, (qubit,), a) for k, a in seq if abs(a) > ZERO_ANGLE]


def principal_zyz(u) -> EulerZYZ:
    """Textbook U3 angles with ``theta`` in ``[0, pi]``, ``phi``/``lam`` in ``(-pi, pi]``."""
    u = np.asarray(u, dtype=complex)
    if u.shape != (2, 2) or not is_unitary(u, 1e-8):
        raise ValueError("euler_zyz expects a 2x2 unitary")
    cos_half, sin_half = abs(u[0, 0]), abs(u[1, 0])
    theta = 2 * math.atan2(sin_half, cos_half)
    if sin_half <= DEGENERATE_TOL:
        # diagonal: only phi + lam is defined
        return EulerZYZ(theta, _wrap(np.angle(u[1, 1]) - np.angle(u[0, 0])), 0.0)
    if cos_half <= DEGENERATE_TOL:
        # anti-diagonal: only phi - lam is defined
        return EulerZYZ(theta, _wrap(np.angle(u[1, 0]) - np.angle(-u[0, 1])), 0.0)
    ref = np.angle(u[0, 0])
    return EulerZYZ(theta, _wrap(np.angle(u[1, 0]) - ref), _wrap(np.angle(-u[0, 1]) - ref))


def equivalent_angles(e: EulerZYZ) -> List[EulerZYZ]:
    """Angle triples giving the same U3 up to global phase.

    Covers angle wrapping, the alternate branch ``(-theta, phi + pi, lam + pi)``
    and, for ``theta`` at 0 or pi, collapsing the free z-angles into one.
    """
    out = [
        EulerZYZ(_wrap(e.theta), _wrap(e.phi), _wrap(e.lam)),
        EulerZYZ(_wrap(-e.theta), _wrap(e.phi + math.pi), _wrap(e.lam + math.pi)),
    ]
    theta = abs(_wrap(e.theta))
    if theta < DEGENERATE_TOL:
        out.append(EulerZYZ(0.0, _wrap(e.phi + e.lam), 0.0))
    elif abs(theta - math.pi) < DEGENERATE_TOL:
        out.append(EulerZYZ(math.pi, _wrap(e.phi - e.lam), 0.0))
    return out


def euler_zyz(u) -> EulerZYZ:
    """Fastest U3 angles reproducing ``u`` up to a global phase."""
    candidates = equivalent_angles(principal_zyz(u))
    return min(candidates, key=lambda e: e.time)


def _is_identity_angle(a):
    return abs(math.remainder(a, 4 * math.pi)) < ZERO_ANGLE


def _fuse_runs(gates, n):
    pending: Dict[int, list] = {}
    out: List[Gate] = []

    def flush(q):
        run = pending.pop(q, None)
        if run is None:
            return
        m = np.eye(2, dtype=complex)
        for g in run:
            m = Gate(g.kind, (1,), g.angle).matrix(1) @ m
        fused = euler_zyz(m).gates(q)
        # a y-z-y style run can beat the best z-y-z triple: keep the cheaper one
        cheaper = sum(g.time for g in fused) < sum(g.time for g in run)
        out.extend(fused if cheaper else run)

    for g in gates:
        if _is_identity_angle(g.angle):
            continue
        if g.kind == "xx":
            for q in g.qubits:
                flush(q)
            out.append(g)
        else:
            pending.setdefault(g.qubits[0], []).append(g)
    for q in sorted(pending):
        flush(q)
    return out


def _merge_xx(gates):
    """Merge an xx gate with the next gate on its qubits if that is the same xx."""
    gates = list(gates)
    for i, g in enumerate(gates):
        if g.kind != "xx":
            continue
        for j in range(i + 1, len(gates)):
            h = gates[j]
            if set(h.qubits) & set(g.qubits):
                if h.kind == "xx" and h.qubits == g.qubits:
                    gates[i] = Gate("xx", g.qubits, g.angle + h.angle)
                    del gates[j]
                    return gates, True
                break
    return gates, False


def fuse_single_qubit_gates(c: Circuit) -> Circuit:
    """Peephole simplification that never lengthens a circuit.

    Zero rotations are dropped, each run of single-qubit gates on one qubit
    (no xx gate touching it in between) is re-expressed with
    :func:`euler_zyz`, and back-to-back xx gates on the same pair are merged.
    Repeats until nothing changes.
    """
    gates = _fuse_runs(c.gates, c.n)
    changed = True
    while changed:
        gates, changed = _merge_xx(gates)
        if changed:
            gates = _fuse_runs(gates, c.n)
    return Circuit(c.n, gates)


# --- templates ------------------------------------------------------------

HALF_PI = math.pi / 2


def _conjugated(n, pre, core, simplify=True):
    """``pre``, then ``core``, then the inverse of ``pre``."""
    post = [Gate(g.kind, g.qubits, -g.angle) for g in reversed(pre)]
    c = Circuit(n, list(pre) + list(core) + post)
    return fuse_single_qubit_gates(c) if simplify else c


def _template_zz(alpha):
    # exp(-i a ZZ): Ry(pi/2) on both qubits maps X1X2 onto Z1Z2
    pre = [Gate("y", (1,), -HALF_PI), Gate("y", (2,), -HALF_PI)]
    return _conjugated(2, pre, [Gate("xx", (1, 2), 2 * alpha[0])])


def _template_ctrl_phase(alpha):
    # |1><1| x exp(-i a Z) = exp(-i a/2 Z2) exp(+i a/2 Z1 Z2)
    a = alpha[0]
    c = _template_zz([-a / 2])
    c.gates.append(Gate("z", (2,), a))
    return fuse_single_qubit_gates(c)


def _template_zzz(alpha):
    # Clifford frame change taking X1X2 onto Z1Z2Z3
    pre = [
        Gate("y", (3,), HALF_PI),
        Gate("xx", (2, 3), HALF_PI),
        Gate("y", (1,), HALF_PI),
        Gate("z", (2,), HALF_PI),
    ]
    return _conjugated(3, pre, [Gate("xx", (1, 2), 2 * alpha[0])])


BUILTIN_TEMPLATES: Dict[str, Callable] = {
    "ctrl-phase": _template_ctrl_phase,
    "zz": _template_zz,
    "zzz": _template_zzz,
}


class UnsupportedFamily(ValueError):
    pass


_ALLOWED_BINOPS = {ast.Add: operator.add, ast.Sub: operator.sub, ast.Mult: operator.mul, ast.Div: operator.truediv}
_ALLOWED_UNARY = {ast.USub: operator.neg, ast.UAdd: operator.pos}


def _compile_angle(expr: str, d: int):
    """Angle expression in ``pi`` and ``a1..ad`` -> function of alpha."""
    tree = ast.parse(expr.strip(), mode="eval")

    def ev(node, alpha):
        if isinstance(node, ast.Expression):
            return ev(node.body, alpha)
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
            return float(node.value)
        if isinstance(node, ast.Name):
            if node.id == "pi":
                return math.pi
            if node.id.startswith("a") and node.id[1:].isdigit():
                j = int(node.id[1:])
                if not 1 <= j <= d:
                    raise ValueError(f"parameter {node.id} out of range 1..{d}")
                return float(alpha[j - 1])
        if isinstance(node, ast.BinOp) and type(node.op) in _ALLOWED_BINOPS:
            return _ALLOWED_BINOPS[type(node.op)](ev(node.left, alpha), ev(node.right, alpha))
        if isinstance(node, ast.UnaryOp) and type(node.op) in _ALLOWED_UNARY:
            return _ALLOWED_UNARY[type(node.op)](ev(node.operand, alpha))
        raise ValueError(f"unsupported angle expression {expr!r}")

    ev(tree, np.zeros(d))  # validate eagerly
    return lambda alpha: ev(tree, alpha)


def parse_circuit_text(text: str, n: int, d: int = 0):
    """Parse a circuit file into a function ``alpha -> Circuit``."""
    entries = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            gate, angle = line.split(None, 1)
            ch = parse_channel(gate)
            fn = _compile_angle(angle, d)
        except (ValueError, SyntaxError) as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
        entries.append((ch, fn))

    def build(alpha=()):
        c = Circuit(n)
        for ch, fn in entries:
            c.add(ch.kind, ch.qubits, fn(alpha))
        return c

    build(np.zeros(d))
    return build


def load_circuit_file(path, n, d=0):
    with open(path) as fh:
        return parse_circuit_text(fh.read(), n, d)


def format_circuit(c: Circuit) -> str:
    return "".join(f"{Channel(g.kind, g.qubits).name} {float(g.angle)!r}\n" for g in c.gates)


def _family(family) -> TargetFamily:
    return family if isinstance(family, TargetFamily) else get_family(family)


def template_circuit(family, alpha, template=None) -> Circuit:
    """Circuit realising the family member at ``alpha`` (up to global phase).

    ``template`` is a user-supplied ``alpha -> Circuit`` function (see
    :func:`load_circuit_file`); it is checked against the target.
    """
    fam = _family(family)
    alpha = np.asarray(alpha, dtype=float).reshape(-1)
    if template is None:
        if fam.name not in BUILTIN_TEMPLATES:
            raise UnsupportedFamily(
                f"no built-in template for family {fam.name!r}; supply a circuit file"
            )
        return BUILTIN_TEMPLATES[fam.name](alpha)
    c = template(alpha)
    if c.n != fam.n:
        raise ValueError(f"template acts on {c.n} qubits, family on {fam.n}")
    err = phase_aligned_distance(circuit_unitary(c), evaluate_target(fam, alpha))
    if err > TEMPLATE_ATOL:
        raise ValueError(f"template does not reproduce {fam.name} at alpha={alpha.tolist()} (error {err:.2e})")
    return c


def average_decomposition_time(family, count=100, seed=0, template=None):
    """Mean template time over ``count`` uniform draws from the uninflated domain."""
    fam = _family(family)
    alphas = sample_params(fam, count, seed=seed, inflated=False)
    times = [circuit_time(template_circuit(fam, a, template)) for a in alphas]
    return float(np.mean(times))


def ratio_R(family, framework_time, seed=0, count=100, template=None):
    if not framework_time > 0:
        raise ValueError("framework_time must be positive")
    return average_decomposition_time(family, count, seed, template) / framework_time
