"""Tree-structured Parzen Estimator over a flat space of independent dimensions.

Trials are split into a good set (lowest ``gamma`` fraction of losses) and a
bad set. Each dimension gets a Parzen density per set: smoothed frequencies
for discrete dimensions, a truncated Gaussian mixture for continuous ones.
Candidates are drawn from the good densities and the one maximising
``log l(x) - log g(x)`` is suggested. Losses are minimised.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Any, Callable, Sequence, Union

import numpy as np
from scipy.special import logsumexp, ndtr, ndtri

from .errors import ObjectiveFailure

Point = dict[str, Any]


@dataclass(frozen=True)
class Categorical:
    name: str
    choices: tuple

    def __post_init__(self):
        object.__setattr__(self, "choices", tuple(self.choices))
        if not self.choices:
            raise ValueError(f"{self.name}: choices must be non-empty")


@dataclass(frozen=True)
class Uniform:
    name: str
    lo: float
    hi: float

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError(f"{self.name}: need lo < hi")


@dataclass(frozen=True)
class IntUniform:
    """Integers lo..hi inclusive; modelled with the same smoothed frequencies as a categorical."""

    name: str
    lo: int
    hi: int

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError(f"{self.name}: need lo < hi")

    @property
    def choices(self) -> tuple:
        return tuple(range(self.lo, self.hi + 1))


Dim = Union[Categorical, Uniform, IntUniform]


@dataclass(frozen=True)
class ParamSpace:
    dims: tuple

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(self.dims))
        names = [d.name for d in self.dims]
        if len(set(names)) != len(names):
            raise ValueError("dimension names must be unique")

    def contains(self, point: Point) -> bool:
        if set(point) != {d.name for d in self.dims}:
            return False
        for d in self.dims:
            v = point[d.name]
            if isinstance(d, Uniform):
                if not d.lo <= v <= d.hi:
                    return False
            elif v not in d.choices:
                return False
        return True


POLICY_SPACE = ParamSpace((
    Categorical("op", ("single", "multiple", "all")),
    Uniform("p", 0.0, 1.0),
    IntUniform("m", 1, 3),
))


@dataclass(frozen=True)
class Trial:
    params: Point
    loss: float
    index: int

    def to_json(self) -> str:
        return json.dumps({"index": self.index, **self.params, "loss": self.loss})

    @classmethod
    def from_json(cls, line: str) -> Trial:
        d = json.loads(line)
        index = d.pop("index")
        loss = d.pop("loss")
        return cls(d, float(loss), int(index))


@dataclass(frozen=True)
class TpeConfig:
    gamma: float = 0.25
    n_startup: int = 10
    n_candidates: int = 24
    bandwidth_floor: float = 1e-3
    prior_weight: float = 1.0
    rng_seed: int = 0

    def __post_init__(self):
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")
        if self.n_startup < 1 or self.n_candidates < 1:
            raise ValueError("n_startup and n_candidates must be >= 1")
        if self.bandwidth_floor <= 0 or self.prior_weight <= 0:
            raise ValueError("bandwidth_floor and prior_weight must be positive")


def split_trials(history: Sequence[Trial], gamma: float) -> tuple[list[Trial], list[Trial]]:
    ranked = sorted(history, key=lambda t: (t.loss, t.index))
    n_good = max(1, math.ceil(gamma * len(ranked)))
    return ranked[:n_good], ranked[n_good:]


# -- per-dimension densities --------------------------------------------------

class CategoricalDensity:
    def __init__(self, choices: Sequence, observations: Sequence, prior_weight: float = 1.0):
        self.choices = tuple(choices)
        index = {c: i for i, c in enumerate(self.choices)}
        counts = np.zeros(len(self.choices))
        for v in observations:
            counts[index[v]] += 1
        self.probs = (counts + prior_weight) / (len(observations) + prior_weight * len(self.choices))

    def log_pdf(self, values: Sequence) -> np.ndarray:
        index = {c: i for i, c in enumerate(self.choices)}
        return np.log(self.probs[[index[v] for v in values]])

    def sample(self, rng: np.random.Generator, n: int) -> list:
        idx = rng.choice(len(self.choices), size=n, p=self.probs)
        return [self.choices[i] for i in idx]


def adaptive_bandwidths(mu: np.ndarray, lo: float, hi: float, floor: float) -> np.ndarray:
    """Per-kernel bandwidth: distance to the farther neighbour, the interval ends counting as neighbours.

    Clipped to [max(floor, range / min(100, n + 1)), range].
    """
    n = len(mu)
    span = hi - lo
    order = np.argsort(mu, kind="stable")
    ext = np.concatenate([[lo], mu[order], [hi]])
    gaps = np.maximum(ext[1:-1] - ext[:-2], ext[2:] - ext[1:-1])
    bw = np.empty(n)
    bw[order] = gaps
    return np.clip(bw, max(floor, span / min(100, n + 1)), span)


class ParzenDensity:
    """Equal-weight Gaussian kernels, each truncated and renormalised to [lo, hi].

    Kernels sit on the observations with adaptive widths (see
    ``adaptive_bandwidths``); with no observations the density is uniform.
    """

    def __init__(self, lo: float, hi: float, observations: Sequence[float], bandwidth_floor: float = 1e-3):
        self.lo, self.hi = lo, hi
        self.mu = np.asarray(observations, dtype=float)
        if len(self.mu):
            self.bw = adaptive_bandwidths(self.mu, lo, hi, bandwidth_floor)
            self._cdf_lo = ndtr((lo - self.mu) / self.bw)
            self._cdf_hi = ndtr((hi - self.mu) / self.bw)
            self._log_mass = np.log(np.maximum(self._cdf_hi - self._cdf_lo, 1e-300))

    def log_pdf(self, values: Sequence[float]) -> np.ndarray:
        x = np.asarray(values, dtype=float)
        if not len(self.mu):
            return np.full(x.shape, -math.log(self.hi - self.lo))
        z = (x[:, None] - self.mu[None, :]) / self.bw[None, :]
        log_k = (-0.5 * z * z - np.log(self.bw * math.sqrt(2 * math.pi))[None, :]
                 - self._log_mass[None, :])
        out = logsumexp(log_k, axis=1) - math.log(len(self.mu))
        return np.where((x >= self.lo) & (x <= self.hi), out, -np.inf)

    def pdf(self, values: Sequence[float]) -> np.ndarray:
        return np.exp(self.log_pdf(values))

    def sample(self, rng: np.random.Generator, n: int) -> list[float]:
        if not len(self.mu):
            return rng.uniform(self.lo, self.hi, size=n).tolist()
        k = rng.integers(len(self.mu), size=n)
        u = rng.uniform(self._cdf_lo[k], self._cdf_hi[k])
        x = self.mu[k] + self.bw[k] * ndtri(u)
        return np.clip(x, self.lo, self.hi).tolist()


def density(dim: Dim, observations: Sequence, cfg: TpeConfig = TpeConfig()):
    if isinstance(dim, Uniform):
        return ParzenDensity(dim.lo, dim.hi, observations, cfg.bandwidth_floor)
    return CategoricalDensity(dim.choices, observations, cfg.prior_weight)


def score(model, value) -> float:
    """Log-density of a single value under a fitted dimension model."""
    return float(model.log_pdf([value])[0])


# -- search loop --------------------------------------------------------------

def sample_uniform(space: ParamSpace, rng: np.random.Generator) -> Point:
    point = {}
    for d in space.dims:
        if isinstance(d, Uniform):
            point[d.name] = float(rng.uniform(d.lo, d.hi))
        else:
            point[d.name] = d.choices[int(rng.integers(len(d.choices)))]
    return point


def suggest(space: ParamSpace, history: Sequence[Trial], cfg: TpeConfig, rng: np.random.Generator) -> Point:
    if len(history) < cfg.n_startup:
        return sample_uniform(space, rng)
    good, bad = split_trials(history, cfg.gamma)
    total = np.zeros(cfg.n_candidates)
    columns = {}
    for d in space.dims:
        l = density(d, [t.params[d.name] for t in good], cfg)
        g = density(d, [t.params[d.name] for t in bad], cfg)
        cand = l.sample(rng, cfg.n_candidates)
        total += l.log_pdf(cand) - g.log_pdf(cand)
        columns[d.name] = cand
    best = int(np.argmax(total))
    return {name: _plain(vals[best]) for name, vals in columns.items()}


def _plain(v):
    # keep JSON-friendly Python scalars, never numpy ones
    if isinstance(v, np.generic):
        return v.item()
    return v


def optimize(space: ParamSpace, objective: Callable[[Point], float], n_trials: int,
             cfg: TpeConfig = TpeConfig(), rng: np.random.Generator | None = None,
             on_trial: Callable[[Trial], None] | None = None) -> list[Trial]:
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    if rng is None:
        rng = np.random.default_rng(cfg.rng_seed)
    history: list[Trial] = []
    for i in range(n_trials):
        point = suggest(space, history, cfg, rng)
        try:
            loss = float(objective(point))
        except Exception as exc:
            raise ObjectiveFailure(i, history, exc) from exc
        if not math.isfinite(loss):
            raise ObjectiveFailure(i, history, ValueError(f"non-finite loss {loss}"))
        trial = Trial(point, loss, i)
        history.append(trial)
        if on_trial is not None:
            on_trial(trial)
    return history


def random_search(space: ParamSpace, objective: Callable[[Point], float], n_trials: int,
                  rng: np.random.Generator) -> list[Trial]:
    """Baseline: every trial drawn uniformly from the space."""
    return [Trial(p, float(objective(p)), i)
            for i, p in enumerate(sample_uniform(space, rng) for _ in range(n_trials))]
