"""Shared domain types, unit conventions, and configuration handling.

Unit system: time in microseconds, every rate and angular frequency in
rad/us.  The decay rate ``gamma`` is an inverse lifetime and therefore
enters as-is; the drive is configured as a cyclic frequency in MHz and
converted internally by 2*pi.  Energies and action rates produced by the
analysis modules are in the same rad/us units and labeled "MHz" in file
outputs, so that they are directly comparable with ``gamma`` and the drive.
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

TWO_PI = 2.0 * math.pi

#: Default integration step (us).  Chosen by a halving convergence study
#: (see sde_sim.mean_convergence_gap), not by any external convention.
DEFAULT_DT = 0.002


class ConfigError(ValueError):
    """Invalid run configuration (CLI exit code 1)."""


class NumericFailure(RuntimeError):
    """A numerical procedure failed to converge or diverged (CLI exit code 2)."""


class EmptySelection(RuntimeError):
    """Post-selection produced an empty sub-ensemble (CLI exit code 3)."""


@dataclass(frozen=True)
class PhysParams:
    """Physical constants of a run.

    gamma: decay rate, 1/us.  eta: quantum efficiency in [0, 1].
    omega_rabi: angular drive frequency, rad/us.  phi: homodyne phase,
    fixed to 0 in this codebase.
    """

    gamma: float
    eta: float
    omega_rabi: float
    phi: float = 0.0

    def __post_init__(self):
        if not self.gamma > 0.0:
            raise ConfigError(f"gamma must be positive, got {self.gamma}")
        if not 0.0 <= self.eta <= 1.0:
            raise ConfigError(f"eta must lie in [0, 1], got {self.eta}")
        if self.phi != 0.0:
            raise ConfigError("only phi = 0 homodyne phase is supported")

    @property
    def omega_ratio(self) -> float:
        """Dimensionless drive-to-decay ratio omega_rabi / gamma."""
        return self.omega_rabi / self.gamma

    @property
    def omega_over_2pi_mhz(self) -> float:
        """Drive expressed back as a cyclic frequency in MHz."""
        return self.omega_rabi / TWO_PI


def convert_config(omega_mhz: float, gamma: float, eta: float) -> PhysParams:
    """Build PhysParams from a cyclic drive frequency in MHz.

    The internal angular frequency is 2*pi*omega_mhz; the derived
    dimensionless ratio is exposed as ``PhysParams.omega_ratio``.
    """
    if omega_mhz < 0.0:
        raise ConfigError(f"drive frequency must be non-negative, got {omega_mhz}")
    return PhysParams(gamma=gamma, eta=eta, omega_rabi=TWO_PI * omega_mhz)


@dataclass(frozen=True)
class BlochState:
    """Bloch-vector state restricted to the x-z plane (y pinned at 0)."""

    x: float
    z: float
    y: float = 0.0

    def as_xz(self) -> tuple[float, float]:
        return (self.x, self.z)


def bloch_norm(s: BlochState) -> float:
    """Euclidean length of the Bloch vector."""
    return math.sqrt(s.x * s.x + s.y * s.y + s.z * s.z)


@dataclass(frozen=True)
class TimeGrid:
    """Uniform time grid: n_steps steps of size dt, spanning [0, n_steps*dt]."""

    dt: float
    n_steps: int

    def __post_init__(self):
        if not self.dt > 0.0:
            raise ConfigError(f"dt must be positive, got {self.dt}")
        if self.n_steps < 1:
            raise ConfigError(f"n_steps must be >= 1, got {self.n_steps}")

    @property
    def t_final(self) -> float:
        return self.n_steps * self.dt

    def times(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.dt

    def index_of(self, t: float, tol: float = 1e-9) -> int:
        """Grid index of time t; t must sit on the grid within tol."""
        k = int(round(t / self.dt))
        if k < 0 or k > self.n_steps or abs(k * self.dt - t) > tol:
            raise ConfigError(f"time {t} is not on the grid (dt={self.dt}, T={self.t_final})")
        return k

    @classmethod
    def from_duration(cls, dt: float, t_final: float) -> "TimeGrid":
        n = int(round(t_final / dt))
        if n < 1 or abs(n * dt - t_final) > 1e-9:
            raise ConfigError(f"t_final {t_final} is not an integer multiple of dt {dt}")
        return cls(dt=dt, n_steps=n)


# --- JSON run configuration -------------------------------------------------

CONFIG_KEYS = ("gamma_per_us", "eta", "omega_over_2pi_mhz", "dt_us", "t_final_us", "seed")


@dataclass(frozen=True)
class RunConfig:
    params: PhysParams
    grid: TimeGrid
    seed: int

    def to_dict(self) -> dict:
        return {
            "gamma_per_us": self.params.gamma,
            "eta": self.params.eta,
            "omega_over_2pi_mhz": self.params.omega_over_2pi_mhz,
            "dt_us": self.grid.dt,
            "t_final_us": self.grid.t_final,
            "seed": self.seed,
        }


def config_from_dict(d: dict) -> RunConfig:
    missing = [k for k in CONFIG_KEYS if k not in d]
    if missing:
        raise ConfigError(f"config missing keys: {missing}")
    extra = [k for k in d if k not in CONFIG_KEYS]
    if extra:
        raise ConfigError(f"config has unknown keys: {extra}")
    if not isinstance(d["seed"], int):
        raise ConfigError(f"seed must be an integer, got {d['seed']!r}")
    params = convert_config(d["omega_over_2pi_mhz"], d["gamma_per_us"], d["eta"])
    grid = TimeGrid.from_duration(d["dt_us"], d["t_final_us"])
    return RunConfig(params=params, grid=grid, seed=d["seed"])


def load_config(path) -> RunConfig:
    with open(path) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return config_from_dict(raw)


def save_config(path, cfg: RunConfig) -> None:
    with open(path, "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


# --- worker pool helper -----------------------------------------------------

def worker_count(workers: int | None = None) -> int:
    """Resolve a worker count: explicit argument, CAUSTIQ_THREADS, or 1."""
    if workers is not None:
        return max(1, int(workers))
    env = os.environ.get("CAUSTIQ_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError as exc:
            raise ConfigError(f"CAUSTIQ_THREADS must be an integer, got {env!r}") from exc
    return 1


def pmap(fn, items, workers: int | None = None, chunksize: int = 1) -> list:
    """Order-preserving parallel map.

    Results are identical for any worker count: items are dispatched as an
    indexed sequence and reassembled in order.  With one worker this is a
    plain list comprehension (no process overhead).
    """
    n = worker_count(workers)
    items = list(items)
    if n == 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items, chunksize=max(1, chunksize)))
