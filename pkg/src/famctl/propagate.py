"""Piecewise-constant propagation and its exact discrete adjoint.

The gate duration ``T`` is split into ``N`` equal steps and the Hamiltonian
is sampled at the step midpoints ``t_k = (k - 1/2) T / N``. The propagator is

    U = U_N ... U_1,    U_k = exp(-i H(f(t_k)) T / N).

The reverse pass differentiates this product exactly: the cotangent of each
step is contracted with the Frechet derivative of its exponential, reusing
the eigendecompositions stored on the forward tape.
"""

from dataclasses import dataclass

import numpy as np

from famctl import nn
from famctl.hamiltonian import ChannelMask, ControlLayout, apply_mask, build_hamiltonian, masked_cotangent
from famctl.linalg import dagger, divided_differences, eigh, phases

DEFAULT_STEPS = 128


@dataclass
class TimeGrid:
    n_steps: int
    duration: object  # float or array of shape (B,)

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError("need at least one time step")
        if np.any(np.asarray(self.duration) <= 0):
            raise ValueError("duration must be positive")

    @property
    def fractions(self):
        """Midpoints as fractions of the duration, ``(k - 1/2) / N``."""
        return (np.arange(self.n_steps) + 0.5) / self.n_steps

    @property
    def dt(self):
        return np.asarray(self.duration, dtype=float) / self.n_steps

    @property
    def times(self):
        return np.multiply.outer(np.asarray(self.duration, dtype=float), self.fractions)


@dataclass
class EvolutionTape:
    layout: ControlLayout
    dt: np.ndarray  # (B,)
    hamiltonians: np.ndarray  # (B, N, D, D)
    evals: np.ndarray  # (B, N, D)
    evecs: np.ndarray  # (B, N, D, D)
    steps: np.ndarray  # (B, N, D, D)
    prefix: np.ndarray  # (B, N, D, D), U_{k-1} ... U_1
    final: np.ndarray  # (B, D, D)


def evolve(layout: ControlLayout, controls, dt):
    """Propagate piecewise-constant controls.

    Parameters
    ----------
    controls : array, shape (B, N, C)
    dt : float or array, shape (B,)

    Returns
    -------
    U : np.ndarray, shape (B, D, D)
    tape : EvolutionTape
    """
    controls = np.asarray(controls, dtype=float)
    if controls.ndim != 3:
        raise ValueError("controls must have shape (B, N, C)")
    b, n_steps, _ = controls.shape
    dt = np.broadcast_to(np.asarray(dt, dtype=float), (b,)).copy()
    ham = build_hamiltonian(layout, controls)
    evals, evecs = eigh(ham)
    ph = phases(evals, dt[:, None])
    steps = (evecs * ph[..., None, :]) @ dagger(evecs)

    dim = layout.dim
    prefix = np.empty_like(steps)
    acc = np.broadcast_to(np.eye(dim, dtype=complex), (b, dim, dim)).copy()
    for k in range(n_steps):
        prefix[:, k] = acc
        acc = steps[:, k] @ acc
    return acc, EvolutionTape(layout, dt, ham, evals, evecs, steps, prefix, acc)


def evolve_adjoint(tape: EvolutionTape, cot):
    """Reverse pass of :func:`evolve`.

    Parameters
    ----------
    cot : array, shape (B, D, D)
        Real-pair cotangent ``dL/dRe(U) + 1j dL/dIm(U)`` of the final
        propagator.

    Returns
    -------
    control_cot : np.ndarray, shape (B, N, C)
        ``dL/df_c(t_k)``.
    dt_cot : np.ndarray, shape (B,)
        ``dL/d(dt)`` with all step lengths tied together.
    """
    cot = np.asarray(cot, dtype=complex)
    if cot.shape != tape.final.shape:
        raise ValueError(f"cotangent shape {cot.shape} does not match tape {tape.final.shape}")
    b, n_steps = tape.steps.shape[:2]

    # suffix[k] = (U_N ... U_{k+1})^dagger @ cot
    suffix = np.empty_like(tape.steps)
    acc = cot
    for k in range(n_steps - 1, -1, -1):
        suffix[:, k] = acc
        acc = dagger(tape.steps[:, k]) @ acc
    step_cot = suffix @ dagger(tape.prefix)

    v = tape.evecs
    g_eig = dagger(v) @ step_cot @ v
    gamma = divided_differences(tape.evals, tape.dt[:, None])
    a = v @ (np.conj(gamma) * g_eig) @ dagger(v)
    control_cot = np.einsum("bkij,cij->bkc", np.conj(a), tape.layout.operators).real

    # d/d(dt) of exp(-i dt H) is -i H exp(-i dt H), diagonal in the eigenbasis
    ph = phases(tape.evals, tape.dt[:, None])
    diag = np.diagonal(g_eig, axis1=-2, axis2=-1)
    dt_cot = np.sum(np.conj(diag) * (-1j * tape.evals * ph), axis=-1).real.sum(axis=1)
    return control_cot, dt_cot


@dataclass
class ControlModel:
    """Control network together with the channel layout it drives."""

    layout: ControlLayout
    mask: ChannelMask
    net: nn.MlpParams
    scaler: nn.InputScaler

    def __post_init__(self):
        if self.net.d_out != self.mask.n_independent:
            raise ValueError(
                f"network emits {self.net.d_out} values but the mask has "
                f"{self.mask.n_independent} independent controls"
            )
        if self.net.d_in != self.scaler.d_in:
            raise ValueError("network input size does not match the input scaler")

    def controls(self, alpha, t_frac, duration=None):
        """Channel amplitudes, shape ``(B, len(t_frac), C)``, plus the net tape."""
        alpha = np.atleast_2d(alpha)
        x = self.scaler.control_inputs(alpha, t_frac, duration)
        raw, net_tape = nn.forward(self.net, x)
        f = apply_mask(self.mask, raw).reshape(alpha.shape[0], len(t_frac), -1)
        return f, net_tape


@dataclass
class PropagationTape:
    evolution: EvolutionTape
    net_tape: nn.Tape
    n_steps: int
    duration: np.ndarray  # (B,)


def propagate(model: ControlModel, alpha, grid: TimeGrid):
    """Final propagators for parameter rows ``alpha`` of shape ``(B, d)``."""
    alpha = np.atleast_2d(np.asarray(alpha, dtype=float))
    b = alpha.shape[0]
    duration = np.broadcast_to(np.asarray(grid.duration, dtype=float), (b,)).copy()
    f, net_tape = model.controls(alpha, grid.fractions, duration)
    u, evo = evolve(model.layout, f, duration / grid.n_steps)
    return u, PropagationTape(evo, net_tape, grid.n_steps, duration)


def adjoint_gradient(model: ControlModel, tape: PropagationTape, cot):
    """Gradients of a loss with propagator cotangent ``cot``.

    Returns
    -------
    control_cot : np.ndarray, shape (B, N, C)
        ``dL/df_c(t_k)`` per sample, step and channel.
    net_grads : list of np.ndarray
        Gradient with respect to the control network, summed over samples.
    duration_cot : np.ndarray, shape (B,)
        ``dL/dT`` per sample: the explicit step-length dependence plus the
        path through the network's duration input. The time input ``t/T``
        is fixed on the midpoint grid and contributes nothing.
    """
    control_cot, dt_cot = evolve_adjoint(tape.evolution, cot)
    b, n_steps = control_cot.shape[:2]
    raw_cot = masked_cotangent(model.mask, control_cot).reshape(b * n_steps, -1)
    net_grads, input_cot = nn.backward(model.net, tape.net_tape, raw_cot)
    duration_cot = dt_cot / n_steps
    if model.scaler.duration_input:
        duration_cot = duration_cot + input_cot[:, -1].reshape(b, n_steps).sum(axis=1) / model.scaler.t_max
    return control_cot, net_grads, duration_cot
