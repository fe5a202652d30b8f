"""Control Hamiltonian with pairwise xx couplings and single-qubit y/z drives.

Channels are ordered canonically: every xx pair ``(i, j)`` with ``i < j`` in
lexicographic order, then ``y`` on qubits ``1..n``, then ``z`` on qubits
``1..n``. This ordering is part of the checkpoint format and must not change.

Channel names follow the config syntax ``"xx:1,2"``, ``"y:1"``, ``"z:3"``.
"""

from dataclasses import dataclass, field
from functools import cached_property
from itertools import combinations
from typing import List, Tuple

import numpy as np

from famctl.linalg import pauli_product

AMPLITUDE_BOUND = 1.0


@dataclass(frozen=True)
class Channel:
    kind: str
    qubits: Tuple[int, ...]

    @property
    def name(self) -> str:
        return f"{self.kind}:{','.join(str(q) for q in self.qubits)}"

    def operator(self, n):
        axis = "x" if self.kind == "xx" else self.kind
        return pauli_product(n, [(q, axis) for q in self.qubits])


def parse_channel(name: str) -> Channel:
    try:
        kind, qubits = name.strip().split(":")
        qs = tuple(int(q) for q in qubits.split(","))
    except ValueError:
        raise ValueError(f"malformed channel name {name!r}") from None
    if kind == "xx":
        if len(qs) != 2 or qs[0] == qs[1]:
            raise ValueError(f"xx channel needs two distinct qubits: {name!r}")
        qs = tuple(sorted(qs))
    elif kind in ("y", "z"):
        if len(qs) != 1:
            raise ValueError(f"{kind} channel acts on one qubit: {name!r}")
    else:
        raise ValueError(f"unknown channel kind in {name!r}")
    return Channel(kind, qs)


class ControlLayout:
    """Canonical list of the ``n(n-1)/2 + 2n`` control channels on ``n`` qubits."""

    def __init__(self, n: int):
        if n < 1:
            raise ValueError("need at least one qubit")
        self.n = n
        self.dim = 2**n
        chans = [Channel("xx", pair) for pair in combinations(range(1, n + 1), 2)]
        chans += [Channel("y", (i,)) for i in range(1, n + 1)]
        chans += [Channel("z", (i,)) for i in range(1, n + 1)]
        self.channels: List[Channel] = chans

    def __len__(self):
        return len(self.channels)

    def __eq__(self, other):
        return isinstance(other, ControlLayout) and other.n == self.n

    def __repr__(self):
        return f"ControlLayout(n={self.n})"

    @property
    def names(self):
        return [c.name for c in self.channels]

    def index(self, name: str) -> int:
        ch = parse_channel(name)
        try:
            return self.channels.index(ch)
        except ValueError:
            raise ValueError(f"channel {name!r} not present for n={self.n}") from None

    @cached_property
    def operators(self) -> np.ndarray:
        """Stacked channel operators, shape ``(C, 2**n, 2**n)``.

        These are also the partial derivatives of the Hamiltonian with
        respect to each channel amplitude.
        """
        return np.stack([c.operator(self.n) for c in self.channels])


def build_hamiltonian(layout: ControlLayout, f, check_bounds=True):
    """Hamiltonian for control amplitudes ``f`` of shape ``(..., C)``."""
    f = np.asarray(f, dtype=float)
    if f.shape[-1] != len(layout):
        raise ValueError(f"expected {len(layout)} control values, got {f.shape[-1]}")
    if check_bounds and np.any(np.abs(f) > AMPLITUDE_BOUND):
        bad = np.max(np.abs(f))
        raise ValueError(f"control amplitude {bad:.6g} outside [-1, 1]")
    return np.tensordot(f, layout.operators, axes=([-1], [0]))


@dataclass
class ChannelMask:
    """Which channels are driven independently.

    ``groups`` lists, for each independent control, the channel indices that
    share its value. Channels in no group are held at zero.
    """

    n_channels: int
    groups: List[List[int]] = field(default_factory=list)

    def __post_init__(self):
        seen = set()
        for g in self.groups:
            if not g:
                raise ValueError("empty tie group")
            for c in g:
                if not 0 <= c < self.n_channels:
                    raise ValueError(f"channel index {c} out of range")
                if c in seen:
                    raise ValueError(f"channel {c} appears in more than one group")
                seen.add(c)

    @classmethod
    def all_active(cls, layout: ControlLayout):
        return cls(len(layout), [[c] for c in range(len(layout))])

    @classmethod
    def from_spec(cls, layout: ControlLayout, spec=None):
        """Build from ``{"zero": [names], "tie": [[names], ...]}``.

        Channels not mentioned stay independent. Groups are ordered by their
        first channel in canonical order.
        """
        if not spec:
            return cls.all_active(layout)
        unknown = set(spec) - {"zero", "tie"}
        if unknown:
            raise ValueError(f"unknown mask keys: {sorted(unknown)}")
        zero = {layout.index(nm) for nm in spec.get("zero", [])}
        ties = [sorted(layout.index(nm) for nm in group) for group in spec.get("tie", [])]
        tied = set()
        for g in ties:
            if set(g) & zero:
                raise ValueError("a channel cannot be both zeroed and tied")
            if set(g) & tied:
                raise ValueError("a channel appears in more than one tie group")
            tied.update(g)
        groups = list(ties)
        for c in range(len(layout)):
            if c not in zero and c not in tied:
                groups.append([c])
        groups.sort(key=min)
        return cls(len(layout), groups)

    def to_spec(self, layout: ControlLayout):
        used = {c for g in self.groups for c in g}
        return {
            "zero": [layout.names[c] for c in range(len(layout)) if c not in used],
            "tie": [[layout.names[c] for c in g] for g in self.groups if len(g) > 1],
        }

    @property
    def n_independent(self):
        return len(self.groups)

    @cached_property
    def expansion(self) -> np.ndarray:
        """Matrix ``M`` of shape ``(C, G)`` with ``f = M @ raw``."""
        m = np.zeros((self.n_channels, len(self.groups)))
        for g, chans in enumerate(self.groups):
            m[chans, g] = 1.0
        return m


def apply_mask(mask: ChannelMask, raw):
    """Expand independent control values ``(..., G)`` to all channels ``(..., C)``."""
    raw = np.asarray(raw, dtype=float)
    if raw.shape[-1] != mask.n_independent:
        raise ValueError(
            f"expected {mask.n_independent} independent values, got {raw.shape[-1]}"
        )
    return raw @ mask.expansion.T


def masked_cotangent(mask: ChannelMask, cot):
    """Pull a per-channel cotangent back to the independent controls."""
    return np.asarray(cot) @ mask.expansion


def family_mask(layout: ControlLayout, name: str) -> ChannelMask:
    """Reduced-control masks used for the three-qubit families."""
    specs = {
        "xxx-yyy-zzz": {"zero": ["xx:1,3", "z:1", "z:3"]},
        "ctrl-ctrl-u1": {
            "zero": ["z:1", "z:2"],
            "tie": [["y:1", "y:2"], ["xx:1,3", "xx:2,3"]],
        },
    }
    return ChannelMask.from_spec(layout, specs[name])
