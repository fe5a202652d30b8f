"""Fully connected networks with hand-written backpropagation.

Hidden layers use ReLU. Two output heads exist:

``control``
    ``2 * sigmoid(z) - 1``, amplitudes strictly inside (-1, 1).
``duration``
    ``t_min + (t_max - t_min) * sigmoid(z)``, a gate time in (t_min, t_max).

Weights are stored as ``(fan_out, fan_in)`` matrices and a layer computes
``x @ W.T + b`` on row-stacked inputs.
"""

from dataclasses import dataclass, field
from typing import List

import numpy as np
from scipy.special import expit

DEFAULT_T_MIN = 0.1
DEFAULT_T_MAX = 2 * np.pi


@dataclass
class HyperParams:
    n_layers: int = 6
    n_units: int = 150
    lr: float = 1e-3
    beta: float = 2.0

    RANGES = {
        "n_layers": (4, 10),
        "n_units": (150, 300),
        "lr": (1e-4, 1e-2),
        "beta": (1.8, 2.2),
    }

    def in_ranges(self):
        return all(lo <= getattr(self, k) <= hi for k, (lo, hi) in self.RANGES.items())

    def to_dict(self):
        return {"n_layers": self.n_layers, "n_units": self.n_units, "lr": self.lr, "beta": self.beta}

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {"n_layers", "n_units", "lr", "beta"}
        if unknown:
            raise ValueError(f"unknown hyperparameter keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class MlpParams:
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    head: str = "control"
    t_min: float = DEFAULT_T_MIN
    t_max: float = DEFAULT_T_MAX
    version: int = field(default=0, compare=False)

    def __post_init__(self):
        if self.head not in ("control", "duration"):
            raise ValueError(f"unknown head {self.head!r}")
        if len(self.weights) != len(self.biases):
            raise ValueError("weights and biases must have equal length")

    @property
    def sizes(self):
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def d_in(self):
        return self.weights[0].shape[1]

    @property
    def d_out(self):
        return self.weights[-1].shape[0]

    def arrays(self):
        """Trainable arrays in a fixed order: W1, b1, W2, b2, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def bump(self):
        """Mark the parameters as modified; outstanding tapes become stale."""
        self.version += 1

    def copy(self):
        return MlpParams(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.head,
            self.t_min,
            self.t_max,
        )

    def to_dict(self):
        return {
            "sizes": self.sizes,
            "hidden_activation": "relu",
            "head": self.head,
            "output_activation": "sigmoid",
            "t_min": self.t_min,
            "t_max": self.t_max,
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("hidden_activation", "relu") != "relu" or d.get("output_activation", "sigmoid") != "sigmoid":
            raise ValueError("only relu hidden layers with a sigmoid head are supported")
        weights = [np.asarray(w, dtype=float) for w in d["weights"]]
        biases = [np.asarray(b, dtype=float) for b in d["biases"]]
        p = cls(weights, biases, d["head"], float(d["t_min"]), float(d["t_max"]))
        if p.sizes != list(d["sizes"]):
            raise ValueError("layer sizes do not match stored arrays")
        return p


def init(h: HyperParams, d_in, d_out, seed, head="control", t_min=DEFAULT_T_MIN, t_max=DEFAULT_T_MAX):
    """Uniform fan-in initialisation scaled by ``h.beta``.

    Every weight and bias of a layer with fan-in ``k`` is drawn from
    ``U(-1/sqrt(k), 1/sqrt(k))`` and then multiplied by ``beta``.
    """
    if min(d_in, d_out, h.n_layers, h.n_units) < 1:
        raise ValueError("layer sizes must be positive")
    rng = np.random.default_rng(seed)
    sizes = [d_in] + [h.n_units] * h.n_layers + [d_out]
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(h.beta * rng.uniform(-bound, bound, (fan_out, fan_in)))
        biases.append(h.beta * rng.uniform(-bound, bound, fan_out))
    return MlpParams(weights, biases, head, t_min, t_max)


@dataclass
class Tape:
    activations: list  # input to each layer
    pre: list  # pre-activation of each layer
    sig: np.ndarray
    version: int
    owner: int


def _head_scale(p: MlpParams):
    return 2.0 if p.head == "control" else p.t_max - p.t_min


def forward(p: MlpParams, x):
    """Evaluate the network on row-stacked inputs ``x`` of shape ``(B, d_in)``."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[-1] != p.d_in:
        raise ValueError(f"network expects {p.d_in} inputs, got {x.shape[-1]}")
    acts, pres = [], []
    h = x
    last = len(p.weights) - 1
    for i, (w, b) in enumerate(zip(p.weights, p.biases)):
        acts.append(h)
        z = h @ w.T + b
        pres.append(z)
        h = np.maximum(z, 0.0) if i < last else z
    sig = expit(h)
    if p.head == "control":
        out = 2.0 * sig - 1.0
    else:
        out = p.t_min + (p.t_max - p.t_min) * sig
    return out, Tape(acts, pres, sig, p.version, id(p))


def backward(p: MlpParams, tape: Tape, cot):
    """Reverse pass for the scalar ``sum(output * cot)``.

    Returns
    -------
    grads : list of np.ndarray
        Gradients in the order of :meth:`MlpParams.arrays`, summed over rows.
    input_cot : np.ndarray, shape (B, d_in)
    """
    if tape.owner != id(p) or tape.version != p.version:
        raise ValueError("stale tape: parameters changed since the forward pass")
    g = np.asarray(cot, dtype=float) * (_head_scale(p) * tape.sig * (1.0 - tape.sig))
    n = len(p.weights)
    gw, gb = [None] * n, [None] * n
    for i in range(n - 1, -1, -1):
        gw[i] = g.T @ tape.activations[i]
        gb[i] = g.sum(axis=0)
        g = g @ p.weights[i]
        if i > 0:
            g = g * (tape.pre[i - 1] > 0)
    grads = []
    for w, b in zip(gw, gb):
        grads += [w, b]
    return grads, g


@dataclass
class InputScaler:
    """Maps physical network inputs to roughly unit range.

    ``alpha`` is mapped affinely from the (inflated) training box to
    ``[0, 1]``, time enters as the fraction ``t / T`` and, when
    ``duration_input`` is set, the gate time enters as ``T / t_max``.
    """

    alpha_lo: np.ndarray
    alpha_hi: np.ndarray
    duration_input: bool = False
    t_max: float = DEFAULT_T_MAX

    def __post_init__(self):
        self.alpha_lo = np.asarray(self.alpha_lo, dtype=float)
        self.alpha_hi = np.asarray(self.alpha_hi, dtype=float)

    @property
    def d_alpha(self):
        return self.alpha_lo.shape[0]

    @property
    def d_in(self):
        return self.d_alpha + 1 + int(self.duration_input)

    def alpha(self, alpha):
        span = np.where(self.alpha_hi > self.alpha_lo, self.alpha_hi - self.alpha_lo, 1.0)
        return (np.asarray(alpha, dtype=float) - self.alpha_lo) / span

    def control_inputs(self, alpha, t_frac, duration=None):
        """Network inputs for every (sample, time) pair.

        Parameters
        ----------
        alpha : array, shape (B, d)
        t_frac : array, shape (N,)
            Times as fractions of the gate duration.
        duration : array, shape (B,), optional
            Required when ``duration_input`` is set.

        Returns
        -------
        np.ndarray, shape (B * N, d_in), sample-major.
        """
        a = self.alpha(np.atleast_2d(alpha))
        b, n_t = a.shape[0], len(t_frac)
        cols = [np.repeat(a, n_t, axis=0), np.tile(np.asarray(t_frac, float), b)[:, None]]
        if self.duration_input:
            if duration is None:
                raise ValueError("duration required as network input")
            cols.append(np.repeat(np.asarray(duration, float) / self.t_max, n_t)[:, None])
        return np.concatenate(cols, axis=1)

    def duration_inputs(self, alpha):
        return self.alpha(np.atleast_2d(alpha))

    def to_dict(self):
        return {
            "alpha_lo": self.alpha_lo.tolist(),
            "alpha_hi": self.alpha_hi.tolist(),
            "duration_input": self.duration_input,
            "t_max": self.t_max,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["alpha_lo"], d["alpha_hi"], bool(d["duration_input"]), float(d["t_max"]))


def spectral_norms(p: MlpParams):
    return [float(np.linalg.norm(w, 2)) for w in p.weights]


def lipschitz_bound(p: MlpParams):
    """Upper bound on the Lipschitz constant of the network output."""
    # sigmoid' <= 1/4; ReLU is 1-Lipschitz
    return 0.25 * _head_scale(p) * float(np.prod(spectral_norms(p)))
