"""Random hyperparameter search with short screening runs.

Each trial trains the base configuration with one sampled set of
hyperparameters for a handful of iterations and is scored by the mean
held-out infidelity on a small evaluation set. Trials share every seed of the
base configuration, so a trial's score depends only on its hyperparameters.
"""

import dataclasses
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from famctl.nn import HyperParams
from famctl.training import NumericalError, TrainingConfig, train

log = logging.getLogger(__name__)


@dataclass
class SearchSpec:
    base: TrainingConfig = field(default_factory=TrainingConfig)
    trials: int = 16
    screening_iterations: int = 10
    screening_eval_count: int = 64
    n_layers: tuple = (4, 10)
    n_units: tuple = (150, 300)
    lr: tuple = (1e-4, 1e-2)
    beta: tuple = (1.8, 2.2)
    master_seed: int = 0

    def __post_init__(self):
        if isinstance(self.base, dict):
            self.base = TrainingConfig.from_dict(self.base)
        for name in ("n_layers", "n_units", "lr", "beta"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"empty range for {name}: [{lo}, {hi}]")
            setattr(self, name, (lo, hi))
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if self.screening_iterations < 1:
            raise ValueError("screening_iterations must be >= 1")

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown search spec keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrialResult:
    index: int
    hyper: HyperParams
    score: float
    error: Optional[str] = None


def sample_configs(spec: SearchSpec) -> List[HyperParams]:
    """Integers uniform, learning rate log-uniform, beta uniform."""
    rng = np.random.default_rng(spec.master_seed)
    out = []
    log_lo, log_hi = math.log10(spec.lr[0]), math.log10(spec.lr[1])
    for _ in range(spec.trials):
        out.append(
            HyperParams(
                n_layers=int(rng.integers(spec.n_layers[0], spec.n_layers[1] + 1)),
                n_units=int(rng.integers(spec.n_units[0], spec.n_units[1] + 1)),
                lr=float(10 ** rng.uniform(log_lo, log_hi)),
                beta=float(rng.uniform(*spec.beta)),
            )
        )
    return out


def trial_config(spec: SearchSpec, hyper: HyperParams, iterations=None) -> TrainingConfig:
    return dataclasses.replace(
        spec.base,
        hyper=hyper,
        iterations=spec.screening_iterations if iterations is None else iterations,
        eval_count=spec.screening_eval_count,
    )


def run_trial(spec: SearchSpec, index: int, hyper: HyperParams, iterations=None) -> TrialResult:
    cfg = trial_config(spec, hyper, iterations)
    try:
        _, report = train(cfg)
    except NumericalError as exc:
        log.warning("trial %d aborted: %s", index, exc)
        return TrialResult(index, hyper, math.inf, str(exc))
    return TrialResult(index, hyper, report.mean_infidelity)


def rank(results: List[TrialResult]) -> List[TrialResult]:
    """Ascending by score; ties and aborted trials ordered by trial index."""
    return sorted(results, key=lambda r: (r.score, r.index))


def screen(spec: SearchSpec, workers=1) -> List[TrialResult]:
    """Partially train every sampled configuration and rank by score."""
    configs = sample_configs(spec)

    def job(i):
        return run_trial(spec, i, configs[i])

    if workers <= 1:
        results = [job(i) for i in range(len(configs))]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(job, range(len(configs))))
    return rank(results)


def winning_config(spec: SearchSpec, ranked: List[TrialResult]) -> TrainingConfig:
    """Base configuration with the best hyperparameters, at full length."""
    return dataclasses.replace(spec.base, hyper=ranked[0].hyper)
