"""DDPM/DDIM schedule math, DDIM inversion and re-denoising.

Notation: ``alpha_bar[t]`` is the cumulative product of ``1 - beta_s`` for
``s <= t`` with ``alpha_bar[0] = 1``. The DDIM literature often writes this
cumulative quantity as plain ``alpha_t``; every formula here uses the
cumulative value.

State vectors are plain numpy arrays of any shape; denoisers receive the
array as is, so a batch of samples is just an array with a leading axis.
"""

from __future__ import annotations

import hashlib
import json
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from typing import Optional, Protocol, Union

import numpy as np

from .errors import PolicyError, ScheduleError, ShapeError

DEFAULT_T = 1000
DEFAULT_BETA = ("linear", 1e-4, 0.02)


@dataclass(frozen=True, eq=False)
class DiffusionSchedule:
    """Variance schedule ``beta_1..beta_T`` and its cumulative products."""

    beta: np.ndarray
    alpha_bar: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64).reshape(-1)
        if beta.size < 1:
            raise ScheduleError("schedule needs at least one step")
        if not np.all((beta > 0.0) & (beta < 1.0)):
            raise ScheduleError("every beta must lie strictly between 0 and 1")
        abar = np.concatenate([[1.0], np.cumprod(1.0 - beta)])
        if not abar[-1] > 0.0:
            raise ScheduleError("alpha_bar underflows to zero")
        beta.setflags(write=False)
        abar.setflags(write=False)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "alpha_bar", abar)

    @property
    def T(self) -> int:
        return self.beta.size

    def alpha(self, t: int) -> float:
        """Per-step ``1 - beta_t`` for ``1 <= t <= T``."""
        return 1.0 - self.beta[t - 1]

    def check_t(self, t: int, lo: int = 0) -> int:
        if not lo <= t <= self.T:
            raise ScheduleError(f"step {t} outside [{lo}, {self.T}]")
        return int(t)

    def fingerprint(self) -> str:
        return hashlib.sha256(self.beta.tobytes()).hexdigest()[:16]

    def __eq__(self, other):
        if not isinstance(other, DiffusionSchedule):
            return NotImplemented
        return np.array_equal(self.beta, other.beta)

    def __hash__(self):
        return hash(self.fingerprint())


def make_schedule(T: int = DEFAULT_T, beta_spec=DEFAULT_BETA) -> DiffusionSchedule:
    """Build a schedule from ``("linear", beta_min, beta_max)`` or an explicit list.

    >>> make_schedule(2, [0.1, 0.2]).alpha_bar.round(12).tolist()
    [1.0, 0.9, 0.72]
    """
    if T < 1:
        raise ScheduleError("T must be at least 1")
    if isinstance(beta_spec, tuple) and beta_spec and beta_spec[0] == "linear":
        _, lo, hi = beta_spec
        if not 0.0 < lo <= hi < 1.0:
            raise ScheduleError(f"linear schedule needs 0 < beta_min <= beta_max < 1, got {lo}, {hi}")
        beta = np.linspace(lo, hi, T, dtype=np.float64)
    else:
        beta = np.asarray(beta_spec, dtype=np.float64)
        if beta.shape != (T,):
            raise ScheduleError(f"explicit schedule has {beta.size} betas, expected {T}")
    return DiffusionSchedule(beta)


def make_timesteps(s: DiffusionSchedule, num_steps: Optional[int] = None) -> np.ndarray:
    """Strictly increasing step grid ``0 = t_0 < ... < t_n = T``.

    ``None`` uses every step; a smaller ``num_steps`` gives the coarse grid
    used for skipped-step sampling. Inversion and re-denoising must share it.
    """
    if num_steps is None or num_steps >= s.T:
        return np.arange(s.T + 1)
    if num_steps < 1:
        raise ScheduleError("num_steps must be at least 1")
    return np.unique(np.round(np.linspace(0, s.T, num_steps + 1)).astype(np.int64))


def _grid(s: DiffusionSchedule, timesteps) -> np.ndarray:
    grid = make_timesteps(s) if timesteps is None else np.asarray(timesteps, dtype=np.int64)
    if grid.ndim != 1 or grid.size < 2 or grid[0] != 0 or np.any(np.diff(grid) <= 0) or grid[-1] > s.T:
        raise ScheduleError("timesteps must be strictly increasing, start at 0 and stay within T")
    return grid


def _same_shape(a, b):
    if np.shape(a) != np.shape(b):
        raise ShapeError(f"shape mismatch: {np.shape(a)} vs {np.shape(b)}")


# -- closed-form pieces ----------------------------------------------------------

def forward_marginal(x0, t: int, eps, s: DiffusionSchedule) -> np.ndarray:
    """Sample of ``q(x_t | x_0)`` for the given noise: ``sqrt(ab) x0 + sqrt(1 - ab) eps``."""
    _same_shape(x0, eps)
    ab = s.alpha_bar[s.check_t(t)]
    return np.sqrt(ab) * np.asarray(x0, dtype=np.float64) + np.sqrt(1.0 - ab) * np.asarray(eps, dtype=np.float64)


def predict_x0(x_t, eps_pred, t: int, s: DiffusionSchedule) -> np.ndarray:
    """Clean-sample estimate implied by a noise prediction (inverse of the marginal)."""
    _same_shape(x_t, eps_pred)
    ab = s.alpha_bar[s.check_t(t)]
    return (np.asarray(x_t, dtype=np.float64) - np.sqrt(1.0 - ab) * np.asarray(eps_pred, dtype=np.float64)) / np.sqrt(ab)


def ddpm_sigma(s: DiffusionSchedule, t: int, t_prev: Optional[int] = None) -> float:
    """Noise scale that turns the DDIM family into the ancestral DDPM sampler.

    ``sigma_t = sqrt((1 - ab_prev) / (1 - ab_t)) * sqrt(1 - ab_t / ab_prev)``;
    for consecutive steps its square equals the DDPM posterior variance.
    """
    s.check_t(t, lo=1)
    t_prev = t - 1 if t_prev is None else s.check_t(t_prev)
    ab_t, ab_p = s.alpha_bar[t], s.alpha_bar[t_prev]
    return float(np.sqrt((1.0 - ab_p) / (1.0 - ab_t)) * np.sqrt(1.0 - ab_t / ab_p))


def posterior_variance(s: DiffusionSchedule, t: int) -> float:
    """``beta_tilde_t = (1 - ab_{t-1}) / (1 - ab_t) * beta_t``."""
    s.check_t(t, lo=1)
    return float((1.0 - s.alpha_bar[t - 1]) / (1.0 - s.alpha_bar[t]) * s.beta[t - 1])


@dataclass(frozen=True)
class SigmaPolicy:
    """``eta = 0`` is DDIM, ``eta = 1`` is DDPM, values between scale the DDPM sigma."""

    eta: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.eta <= 1.0:
            raise PolicyError(f"eta must lie in [0, 1], got {self.eta}")

    @classmethod
    def ddim(cls) -> SigmaPolicy:
        return cls(0.0)

    @classmethod
    def ddpm(cls) -> SigmaPolicy:
        return cls(1.0)

    @classmethod
    def scaled(cls, eta: float) -> SigmaPolicy:
        return cls(eta)

    @property
    def deterministic(self) -> bool:
        return self.eta == 0.0

    def sigma(self, s: DiffusionSchedule, t: int, t_prev: Optional[int] = None) -> float:
        if self.eta == 0.0:
            return 0.0
        return self.eta * ddpm_sigma(s, t, t_prev)


DDIM = SigmaPolicy.ddim()
DDPM = SigmaPolicy.ddpm()


def cfg_combine(eps_cond, eps_uncond, w: float) -> np.ndarray:
    """Classifier-free guidance: ``eps_uncond + w (eps_cond - eps_uncond)``."""
    _same_shape(eps_cond, eps_uncond)
    eps_cond = np.asarray(eps_cond, dtype=np.float64)
    eps_uncond = np.asarray(eps_uncond, dtype=np.float64)
    return eps_uncond + w * (eps_cond - eps_uncond)


# -- conditions and denoisers ------------------------------------------------------

@dataclass(frozen=True)
class Condition:
    """Hashable condition token (bundle id, toy parameters, ...)."""

    name: str
    params: tuple = ()

    @classmethod
    def null(cls) -> Condition:
        return cls("")


class Denoiser(Protocol):
    def eps_predict(self, x: np.ndarray, t: int, c: Condition) -> np.ndarray: ...


@dataclass(frozen=True, eq=False)
class ConstantDenoiser:
    """Predicts the same noise everywhere; DDIM steps become exactly invertible."""

    value: Union[float, np.ndarray] = 0.0

    def eps_predict(self, x, t, c):
        return np.broadcast_to(np.asarray(self.value, dtype=np.float64), np.shape(x)).copy()


def _gaussian_eps(x, ab: float, mu, s2: float) -> np.ndarray:
    # (x - sqrt(ab) E[x0|x]) / sqrt(1 - ab) with the posterior mean substituted,
    # simplified so that ab = 1 (t = 0) is finite.
    x = np.asarray(x, dtype=np.float64)
    return np.sqrt(1.0 - ab) * (x - np.sqrt(ab) * mu) / (ab * s2 + 1.0 - ab)


@dataclass(frozen=True, eq=False)
class GaussianDenoiser:
    """Exact noise predictor for data ``x0 ~ N(mu_c, s2 I)``.

    ``means`` maps each condition to its data mean; ``default_mean`` covers
    conditions not listed (``None`` makes unknown conditions an error).
    """

    schedule: DiffusionSchedule
    s2: float
    means: Mapping[Condition, np.ndarray] = field(default_factory=dict)
    default_mean: Optional[np.ndarray] = None

    def __post_init__(self):
        if not self.s2 > 0:
            raise ValueError("data variance must be positive")

    def mean_for(self, c: Condition) -> np.ndarray:
        mu = self.means.get(c, self.default_mean)
        if mu is None:
            raise KeyError(f"no data mean registered for condition {c!r}")
        return np.asarray(mu, dtype=np.float64)

    def posterior_mean(self, x, t: int, c: Condition) -> np.ndarray:
        """``E[x0 | x_t]`` under the conjugate Gaussian model."""
        ab = self.schedule.alpha_bar[t]
        mu = self.mean_for(c)
        return (np.sqrt(ab) * self.s2 * np.asarray(x, dtype=np.float64) + (1.0 - ab) * mu) / (ab * self.s2 + 1.0 - ab)

    def eps_predict(self, x, t, c):
        return _gaussian_eps(x, self.schedule.alpha_bar[t], self.mean_for(c), self.s2)


def analytic_gaussian_denoiser(mu, s2: float, schedule: DiffusionSchedule) -> GaussianDenoiser:
    """Optimal denoiser for ``N(mu, s2 I)`` data, independent of the condition."""
    return GaussianDenoiser(schedule, s2, default_mean=np.asarray(mu, dtype=np.float64))


@dataclass(frozen=True, eq=False)
class GuidedDenoiser:
    """Wraps a denoiser with classifier-free guidance at scale ``w``."""

    base: Denoiser
    w: float = 1.0
    uncond: Condition = Condition.null()

    def eps_predict(self, x, t, c):
        eps_c = self.base.eps_predict(x, t, c)
        if self.w == 1.0:
            return eps_c
        return cfg_combine(eps_c, self.base.eps_predict(x, t, self.uncond), self.w)


# -- steps ---------------------------------------------------------------------------

def ddim_update(x_t, eps, t: int, t_prev: int, s: DiffusionSchedule, sigma: float = 0.0,
                noise=None) -> np.ndarray:
    """One reverse update from ``t`` to ``t_prev`` given a noise prediction.

    ``x_prev = sqrt(ab_prev) x0_hat + sqrt(1 - ab_prev - sigma^2) eps + sigma z``.
    """
    ab_p = s.alpha_bar[t_prev]
    var_dir = 1.0 - ab_p - sigma * sigma
    if var_dir < 0.0:
        if var_dir < -1e-12:
            raise PolicyError(f"sigma^2 = {sigma * sigma:.6g} exceeds 1 - alpha_bar[{t_prev}] = {1.0 - ab_p:.6g}")
        var_dir = 0.0
    out = np.sqrt(ab_p) * predict_x0(x_t, eps, t, s) + np.sqrt(var_dir) * eps
    if sigma > 0.0:
        if noise is None:
            raise PolicyError("a stochastic step needs a noise sample")
        _same_shape(x_t, noise)
        out = out + sigma * np.asarray(noise, dtype=np.float64)
    return out


def ddim_step(x_t, t: int, c: Condition, d: Denoiser, s: DiffusionSchedule,
              policy: SigmaPolicy = DDIM, noise=None, t_prev: Optional[int] = None,
              rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Reverse step ``x_t -> x_{t_prev}`` (``t_prev`` defaults to ``t - 1``).

    With a stochastic policy pass either ``noise`` or a seeded ``rng``.
    """
    s.check_t(t, lo=1)
    t_prev = t - 1 if t_prev is None else s.check_t(t_prev)
    if t_prev >= t:
        raise ScheduleError("t_prev must be smaller than t")
    sigma = policy.sigma(s, t, t_prev)
    if sigma > 0.0 and noise is None:
        if rng is None:
            raise PolicyError("a stochastic policy needs noise or a random generator")
        noise = rng.standard_normal(np.shape(x_t))
    eps = np.asarray(d.eps_predict(x_t, t, c), dtype=np.float64)
    _same_shape(x_t, eps)
    return ddim_update(x_t, eps, t, t_prev, s, sigma, noise if sigma > 0.0 else None)


# -- inversion -------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class LatentState:
    x: np.ndarray
    t: int
    timesteps: tuple[int, ...]
    schedule_id: str

    @property
    def dim(self) -> int:
        return int(np.size(self.x))


@dataclass(frozen=True)
class TrajectoryRecord:
    t: int
    x_sha256: str
    eps_sha256: Optional[str]

    def to_json(self) -> str:
        return json.dumps({"t": self.t, "x": self.x_sha256, "eps": self.eps_sha256}, sort_keys=True)


def _checksum(a) -> str:
    return hashlib.sha256(np.ascontiguousarray(a, dtype=np.float64).tobytes()).hexdigest()


def write_trajectory(records: Sequence[TrajectoryRecord], path) -> None:
    """Line-delimited JSON, one record per step."""
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")


def ddim_invert(x_obs, c_ref: Condition, t_star: int, d: Denoiser, s: DiffusionSchedule,
                timesteps=None, keep_trajectory: bool = False):
    """Run deterministic noise-adding updates from ``x_obs`` up to ``t_star``.

    Each update from grid point ``t`` to the next one ``u`` is
    ``x_u = sqrt(ab_u) x0_hat(x_t, eps) + sqrt(1 - ab_u) eps`` with
    ``eps = d(x_t, t, c_ref)``. Returns ``(LatentState, records)``; records is
    ``None`` unless ``keep_trajectory``.
    """
    grid = _grid(s, timesteps)
    s.check_t(t_star)
    if t_star not in grid:
        raise ScheduleError(f"t_star={t_star} is not on the step grid")
    x = np.array(x_obs, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("x_obs must be finite")
    records = [TrajectoryRecord(0, _checksum(x), None)] if keep_trajectory else None
    for t, u in zip(grid[:-1], grid[1:]):
        if t >= t_star:
            break
        eps = np.asarray(d.eps_predict(x, int(t), c_ref), dtype=np.float64)
        _same_shape(x, eps)
        ab_u = s.alpha_bar[u]
        x = np.sqrt(ab_u) * predict_x0(x, eps, int(t), s) + np.sqrt(1.0 - ab_u) * eps
        if records is not None:
            records.append(TrajectoryRecord(int(u), _checksum(x), _checksum(eps)))
    return LatentState(x, int(t_star), tuple(int(g) for g in grid), s.fingerprint()), records


def redenoise(state: LatentState, c_new: Condition, d: Denoiser, s: DiffusionSchedule,
              policy: SigmaPolicy = DDIM, timesteps=None, rng: Optional[np.random.Generator] = None,
              keep_trajectory: bool = False):
    """Denoise an inverted latent from ``state.t`` down to 0 under ``c_new``.

    Returns ``x0`` (and the trajectory records when ``keep_trajectory``).
    """
    if state.schedule_id != s.fingerprint():
        raise ScheduleError("latent was inverted with a different schedule")
    grid = np.asarray(state.timesteps, dtype=np.int64)
    if timesteps is not None and not np.array_equal(_grid(s, timesteps), grid):
        raise ScheduleError("re-denoising must use the step grid of the inversion")
    x = np.array(state.x, dtype=np.float64)
    records = [TrajectoryRecord(state.t, _checksum(x), None)] if keep_trajectory else None
    down = grid[grid <= state.t][::-1]
    for t, t_prev in zip(down[:-1], down[1:]):
        x = ddim_step(x, int(t), c_new, d, s, policy, t_prev=int(t_prev), rng=rng)
        if records is not None:
            records.append(TrajectoryRecord(int(t_prev), _checksum(x), None))
    return (x, records) if keep_trajectory else x


def sample(d: Denoiser, c: Condition, s: DiffusionSchedule, shape, rng: np.random.Generator,
           policy: SigmaPolicy = DDPM, timesteps=None, x_T=None) -> np.ndarray:
    """Ancestral/DDIM sampling from ``x_T ~ N(0, I)`` down to ``x_0``."""
    grid = _grid(s, timesteps)
    x = rng.standard_normal(shape) if x_T is None else np.array(x_T, dtype=np.float64)
    down = grid[::-1]
    for t, t_prev in zip(down[:-1], down[1:]):
        x = ddim_step(x, int(t), c, d, s, policy, t_prev=int(t_prev), rng=rng)
    return x


def relative_error(x, ref) -> float:
    x, ref = np.asarray(x, dtype=np.float64), np.asarray(ref, dtype=np.float64)
    denom = np.linalg.norm(ref)
    return float(np.linalg.norm(x - ref) / (denom if denom > 0 else 1.0))
