"""Monte-Carlo training of the control network with Adam.

Three duration modes are supported:

``fixed-T``
    every gate takes ``config.duration``; the control net sees ``(alpha, t/T)``.
``shared-T``
    one trainable duration shared by all targets; the control net also sees ``T``.
``per-target-T``
    a second network maps ``alpha`` to ``T_alpha``; the control net also sees it.

The cost per target is ``infidelity + mu * T``. Each iteration draws a fresh
batch of parameters from the (inflated) domain. Work is split into fixed-size
chunks of the batch and reduced in chunk order, so results do not depend on
how many worker threads evaluate the chunks.
"""

import csv
import json
import logging
import math
import os
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from famctl import nn
from famctl.hamiltonian import ChannelMask, ControlLayout
from famctl.objective import infidelity, infidelity_cotangent
from famctl.propagate import DEFAULT_STEPS, ControlModel, TimeGrid, adjoint_gradient, propagate
from famctl.targets import TargetFamily, evaluate_targets, family_from_config, sample_params

log = logging.getLogger(__name__)

MODES = ("fixed-T", "shared-T", "per-target-T")
CHECKPOINT_SCHEMA = "famctl.checkpoint"
CHECKPOINT_VERSION = 1


class NumericalError(RuntimeError):
    """Non-finite loss or gradient during training."""


@dataclass
class TrainingConfig:
    family: object = "u1"
    domain_inflation: float = 0.0
    mode: str = "fixed-T"
    duration: float = math.pi
    mu: float = 0.0
    iterations: int = 400
    batch_size: int = 128
    eval_count: int = 250
    n_steps: int = DEFAULT_STEPS
    hyper: nn.HyperParams = field(default_factory=nn.HyperParams)
    duration_hyper: nn.HyperParams = field(default_factory=lambda: nn.HyperParams(4, 64, 1e-3, 1.0))
    # Adam step for the shared-T scalar; Adam moves it by about t_lr per
    # iteration, so this lets T cross [t_min, t_max] within the default budget
    t_lr: float = 1e-2
    mask: Optional[dict] = None
    init_seed: int = 0
    train_seed: int = 1
    eval_seed: int = 2
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    t_min: float = nn.DEFAULT_T_MIN
    t_max: float = nn.DEFAULT_T_MAX
    chunk_size: int = 16

    def __post_init__(self):
        if isinstance(self.hyper, dict):
            self.hyper = nn.HyperParams.from_dict(self.hyper)
        if isinstance(self.duration_hyper, dict):
            self.duration_hyper = nn.HyperParams.from_dict(self.duration_hyper)
        self.validate()

    def validate(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.batch_size < 1 or self.eval_count < 1 or self.chunk_size < 1:
            raise ValueError("batch_size, eval_count and chunk_size must be >= 1")
        if self.eval_seed == self.train_seed:
            raise ValueError("eval_seed must differ from train_seed")
        if self.mu < 0:
            raise ValueError("mu must be >= 0")
        if not self.t_lr > 0:
            raise ValueError("t_lr must be positive")
        if not 0 < self.t_min < self.t_max:
            raise ValueError("need 0 < t_min < t_max")
        if self.mode != "fixed-T" and not self.t_min <= self.duration <= self.t_max:
            raise ValueError("initial duration must lie in [t_min, t_max]")
        if self.duration <= 0:
            raise ValueError("duration must be positive")

    def to_dict(self):
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["hyper"] = self.hyper.to_dict()
        d["duration_hyper"] = self.duration_hyper.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)


class Adam:
    """Adam over a list of arrays, each with its own step size."""

    def __init__(self, lrs, beta1=0.9, beta2=0.999, eps=1e-8, shapes=None):
        self.lrs = list(lrs)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros(s) for s in shapes] if shapes is not None else None
        self.v = [np.zeros(s) for s in shapes] if shapes is not None else None

    def step(self, params, grads):
        """In-place update of ``params``."""
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v, lr in zip(params, grads, self.m, self.v, self.lrs):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self):
        return {"t": self.t, "m": [m.tolist() for m in self.m or []], "v": [v.tolist() for v in self.v or []]}

    def load_state_dict(self, d):
        self.t = int(d["t"])
        self.m = [np.asarray(m, dtype=float) for m in d["m"]] or None
        self.v = [np.asarray(v, dtype=float) for v in d["v"]] or None


@dataclass
class EvalReport:
    alphas: np.ndarray
    infidelities: np.ndarray
    durations: np.ndarray

    @property
    def mean_infidelity(self):
        return float(np.mean(self.infidelities))

    @property
    def std_infidelity(self):
        return float(np.std(self.infidelities))

    @property
    def mean_duration(self):
        return float(np.mean(self.durations))

    def to_dict(self):
        return {
            "count": int(len(self.infidelities)),
            "mean_infidelity": self.mean_infidelity,
            "std_infidelity": self.std_infidelity,
            "mean_duration": self.mean_duration,
            "samples": [
                {"alpha": a.tolist(), "infidelity": float(i), "duration": float(t)}
                for a, i, t in zip(self.alphas, self.infidelities, self.durations)
            ],
        }

    def write_csv(self, path):
        def write(fh):
            w = csv.writer(fh)
            d = self.alphas.shape[1]
            w.writerow([f"alpha{j + 1}" for j in range(d)] + ["infidelity", "duration"])
            for a, i, t in zip(self.alphas, self.infidelities, self.durations):
                w.writerow([repr(float(x)) for x in a] + [repr(float(i)), repr(float(t))])

        atomic_write(path, write)


class TrainState:
    """Everything needed to continue or evaluate a training run."""

    def __init__(self, config: TrainingConfig, family: TargetFamily = None):
        self.config = config
        self.family = family or family_from_config(config.family, config.domain_inflation)
        layout = ControlLayout(self.family.n)
        mask = ChannelMask.from_spec(layout, config.mask)
        lo, hi = self.family.box(inflated=True)
        scaler = nn.InputScaler(lo, hi, duration_input=config.mode != "fixed-T", t_max=config.t_max)
        net = nn.init(config.hyper, scaler.d_in, mask.n_independent, config.init_seed)
        self.model = ControlModel(layout, mask, net, scaler)

        self.shared_duration = None
        self.duration_net = None
        if config.mode == "shared-T":
            self.shared_duration = np.array([float(config.duration)])
        elif config.mode == "per-target-T":
            dnet = nn.init(
                config.duration_hyper, self.family.d, 1, config.init_seed + 1,
                head="duration", t_min=config.t_min, t_max=config.t_max,
            )
            # centre the initial durations on config.duration
            frac = (config.duration - config.t_min) / (config.t_max - config.t_min)
            frac = min(max(frac, 1e-6), 1 - 1e-6)
            dnet.biases[-1] += math.log(frac / (1 - frac))
            self.duration_net = dnet

        self.adam = Adam(
            self._learning_rates(), config.adam_beta1, config.adam_beta2, config.adam_eps,
            shapes=[p.shape for p in self.trainable()],
        )
        self.iteration = 0
        self.history: List[list] = []
        self.train_rng = np.random.default_rng(config.train_seed)

    def trainable(self):
        params = self.model.net.arrays()
        if self.shared_duration is not None:
            params.append(self.shared_duration)
        if self.duration_net is not None:
            params += self.duration_net.arrays()
        return params

    def _learning_rates(self):
        n_ctrl = len(self.model.net.arrays())
        lrs = [self.config.hyper.lr] * n_ctrl
        if self.shared_duration is not None:
            lrs.append(self.config.t_lr)
        if self.duration_net is not None:
            lrs += [self.config.duration_hyper.lr] * len(self.duration_net.arrays())
        return lrs

    def durations(self, alphas):
        """Gate durations for parameter rows, plus the duration-net tape if any."""
        b = len(alphas)
        if self.config.mode == "fixed-T":
            return np.full(b, float(self.config.duration)), None
        if self.config.mode == "shared-T":
            return np.full(b, float(self.shared_duration[0])), None
        out, tape = nn.forward(self.duration_net, self.model.scaler.duration_inputs(alphas))
        return out[:, 0], tape

    def to_dict(self):
        layout = self.model.layout
        return {
            "schema": CHECKPOINT_SCHEMA,
            "version": CHECKPOINT_VERSION,
            "config": self.config.to_dict(),
            "channel_order": layout.names,
            "mask": self.model.mask.to_spec(layout),
            "normalization": self.model.scaler.to_dict(),
            "control_net": self.model.net.to_dict(),
            "duration_net": self.duration_net.to_dict() if self.duration_net is not None else None,
            "shared_duration": float(self.shared_duration[0]) if self.shared_duration is not None else None,
            "adam": self.adam.state_dict(),
            "iteration": self.iteration,
            "history": self.history,
            "train_rng_state": self.train_rng.bit_generator.state,
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("schema") != CHECKPOINT_SCHEMA or d.get("version") != CHECKPOINT_VERSION:
            raise ValueError("not a famctl checkpoint (schema/version mismatch)")
        config = TrainingConfig.from_dict(d["config"])
        state = cls(config)
        if state.model.layout.names != d["channel_order"]:
            raise ValueError("checkpoint channel order does not match this version")
        net = nn.MlpParams.from_dict(d["control_net"])
        scaler = nn.InputScaler.from_dict(d["normalization"])
        state.model = ControlModel(state.model.layout, state.model.mask, net, scaler)
        if d["duration_net"] is not None:
            state.duration_net = nn.MlpParams.from_dict(d["duration_net"])
        if d["shared_duration"] is not None:
            state.shared_duration = np.array([float(d["shared_duration"])])
        state.adam.load_state_dict(d["adam"])
        state.iteration = int(d["iteration"])
        state.history = [list(h) for h in d["history"]]
        state.train_rng.bit_generator.state = d["train_rng_state"]
        return state


def atomic_write(path, writer, mode="w"):
    """Write through a temporary file in the same directory, then rename."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, mode, newline="" if "b" not in mode else None) as fh:
            writer(fh)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(state: TrainState, path):
    atomic_write(path, lambda fh: json.dump(state.to_dict(), fh))


def load_checkpoint(path) -> TrainState:
    with open(path) as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValueError(f"corrupt checkpoint {path}: {exc}") from None
    try:
        return TrainState.from_dict(d)
    except (KeyError, TypeError) as exc:
        raise ValueError(f"corrupt checkpoint {path}: missing or malformed {exc}") from None


def _chunks(n, size):
    return [slice(i, min(i + size, n)) for i in range(0, n, size)]


def _map(fn, items, workers):
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _sum_in_order(lists):
    total = [g.copy() for g in lists[0]]
    for gs in lists[1:]:
        for t, g in zip(total, gs):
            t += g
    return total


def _check_finite(state, iteration, alphas, infid, control_cot):
    bad = ~np.isfinite(infid)
    if np.any(bad):
        i = int(np.argmax(bad))
        raise NumericalError(f"non-finite infidelity at iteration {iteration}, alpha={alphas[i].tolist()}")
    bad = ~np.isfinite(control_cot)
    if np.any(bad):
        i, k, c = np.argwhere(bad)[0]
        raise NumericalError(
            f"non-finite gradient at iteration {iteration}, alpha={alphas[i].tolist()}, "
            f"step {k}, channel {state.model.layout.names[c]}"
        )


def batch_gradient(state: TrainState, alphas, workers=1):
    """Batch-mean cost and its gradient with respect to ``state.trainable()``.

    Returns
    -------
    cost, mean_infidelity, mean_duration : float
    grads : list of np.ndarray
    """
    cfg = state.config
    alphas = np.atleast_2d(alphas)
    b = len(alphas)
    targets = evaluate_targets(state.family, alphas)
    durations, dur_tape = state.durations(alphas)
    model = state.model

    def work(sl):
        try:
            u, tape = propagate(model, alphas[sl], TimeGrid(cfg.n_steps, durations[sl]))
        except np.linalg.LinAlgError as exc:
            raise NumericalError(
                f"propagation failed at iteration {state.iteration} for alpha rows {sl.start}..{sl.stop - 1}: {exc}"
            ) from None
        infid = infidelity(u, targets[sl])
        control_cot, net_grads, dur_cot = adjoint_gradient(model, tape, infidelity_cotangent(u, targets[sl]))
        _check_finite(state, state.iteration, alphas[sl], infid, control_cot)
        return infid, net_grads, dur_cot

    results = _map(work, _chunks(b, cfg.chunk_size), workers)
    infid = np.concatenate([r[0] for r in results])
    dur_cot = np.concatenate([r[2] for r in results])
    grads = [g / b for g in _sum_in_order([r[1] for r in results])]

    cost = float(np.mean(infid + cfg.mu * durations))
    if cfg.mode == "shared-T":
        grads.append(np.array([dur_cot.sum() / b + cfg.mu]))
    elif cfg.mode == "per-target-T":
        out_cot = ((dur_cot + cfg.mu) / b)[:, None]
        dgrads, _ = nn.backward(state.duration_net, dur_tape, out_cot)
        grads += dgrads
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite parameter gradient at iteration {state.iteration}")
    return cost, float(np.mean(infid)), float(np.mean(durations)), grads


def train_step(state: TrainState, alphas, workers=1):
    """One Adam update on the batch; returns the batch-mean cost."""
    cost, infid, dur, grads = batch_gradient(state, alphas, workers)
    state.adam.step(state.trainable(), grads)
    state.model.net.bump()
    if state.duration_net is not None:
        state.duration_net.bump()
    if state.shared_duration is not None:
        np.clip(state.shared_duration, state.config.t_min, state.config.t_max, out=state.shared_duration)
    state.iteration += 1
    state.history.append([state.iteration, cost, infid, dur])
    return cost


def evaluate(state: TrainState, count=None, seed=None, workers=1) -> EvalReport:
    """Held-out infidelities over the uninflated domain."""
    cfg = state.config
    count = cfg.eval_count if count is None else count
    seed = cfg.eval_seed if seed is None else seed
    alphas = sample_params(state.family, count, seed=seed, inflated=False)
    durations, _ = state.durations(alphas)
    targets = evaluate_targets(state.family, alphas)

    def work(sl):
        u, _ = propagate(state.model, alphas[sl], TimeGrid(cfg.n_steps, durations[sl]))
        return infidelity(u, targets[sl])

    infid = np.concatenate(_map(work, _chunks(count, cfg.chunk_size), workers))
    return EvalReport(alphas, infid, durations)


LOG_FIELDS = ["iteration", "batch_mean_cost", "batch_mean_infidelity", "mean_duration", "wall_time"]


def train(config: TrainingConfig, out_dir=None, workers=1, checkpoint_every=50, state=None, progress=None):
    """Run (or resume) training and evaluate on the held-out set.

    Parameters
    ----------
    out_dir : path, optional
        Receives ``checkpoint.json``, ``train_log.csv`` and ``eval_report.json``.
    state : TrainState, optional
        Resume from this state instead of a fresh initialisation.
    progress : callable, optional
        Called as ``progress(iteration, cost)`` after every step.

    Returns
    -------
    (TrainState, EvalReport)
    """
    state = state or TrainState(config)
    cfg = state.config
    t_start = time.perf_counter()
    log_file = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        log_path = os.path.join(out_dir, "train_log.csv")
        fresh = state.iteration == 0 or not os.path.exists(log_path)
        log_file = open(log_path, "w" if fresh else "a", newline="")
        writer = csv.writer(log_file)
        if fresh:
            writer.writerow(LOG_FIELDS)
    try:
        while state.iteration < cfg.iterations:
            alphas = sample_params(state.family, cfg.batch_size, rng=state.train_rng)
            cost = train_step(state, alphas, workers)
            it, _, infid, dur = state.history[-1]
            if log_file is not None:
                writer.writerow([it, repr(cost), repr(infid), repr(dur), f"{time.perf_counter() - t_start:.3f}"])
                log_file.flush()
            if progress is not None:
                progress(it, cost)
            if it % 10 == 0:
                log.info("iteration %d cost %.3e infidelity %.3e T %.4f", it, cost, infid, dur)
            if out_dir is not None and checkpoint_every and it % checkpoint_every == 0:
                save_checkpoint(state, os.path.join(out_dir, "checkpoint.json"))
    finally:
        if log_file is not None:
            log_file.close()

    report = evaluate(state, workers=workers)
    if out_dir is not None:
        save_checkpoint(state, os.path.join(out_dir, "checkpoint.json"))
        atomic_write(os.path.join(out_dir, "eval_report.json"), lambda fh: json.dump(report.to_dict(), fh, indent=1))
        report.write_csv(os.path.join(out_dir, "eval_samples.csv"))
    return state, report
