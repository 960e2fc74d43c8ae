"""Path probabilities, trajectory distances, post-selection, and the two
record-driven extremal-path estimators.

The log path probability of a trajectory is the sum over steps of the
log-density of its record increment, which is Gaussian with mean
sqrt(eta)*gamma*x_t*dt and variance gamma*dt.  Additive constants are kept,
so values are comparable only between trajectories on the same grid.

The squared trajectory distance is the time sum of squared per-component
state differences over the first N points (N = step count), matching the
mean-distance ranking used to pick representative paths.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .core import BlochState, ConfigError, PhysParams, TimeGrid
from .sde_sim import Trajectory


@dataclass(frozen=True)
class PostselectRule:
    """Final-state selection window at time t_final.

    tol is the half-width per component for the default box window; with
    window="disc" it is instead the Euclidean radius in the x-z plane.
    """

    initial: BlochState
    final: BlochState
    t_final: float
    tol: float = 0.05
    window: str = "box"

    def __post_init__(self):
        if not self.tol > 0.0:
            raise ConfigError(f"selection tolerance must be positive, got {self.tol}")
        if self.window not in ("box", "disc"):
            raise ConfigError(f"window must be 'box' or 'disc', got {self.window!r}")


@dataclass
class MlpEstimate:
    """Averaged representative path with a per-time, per-component std band."""

    t: np.ndarray
    mean: np.ndarray  # (n+1, 2) columns (x, z)
    std: np.ndarray  # (n+1, 2)
    n_members: int
    method: str

    def __post_init__(self):
        if self.n_members < 1:
            raise ConfigError("an estimate needs at least one member")


def log_path_probability(t: Trajectory, p: PhysParams) -> float:
    """Joint log-density of the stored record given the stored states."""
    dt = t.grid.dt
    if t.record.shape[0] != t.grid.n_steps or t.states.shape[0] != t.grid.n_steps + 1:
        raise ConfigError("trajectory arrays inconsistent with its grid")
    mean = math.sqrt(p.eta) * p.gamma * t.states[:-1, 0] * dt
    var = p.gamma * dt
    resid = t.record - mean
    return float(-0.5 * np.sum(resid * resid) / var - 0.5 * t.grid.n_steps * math.log(2.0 * math.pi * var))


def log_path_probabilities(ensemble: list[Trajectory], p: PhysParams) -> np.ndarray:
    return np.array([log_path_probability(t, p) for t in ensemble])


def _stacked_states(ensemble: list[Trajectory]) -> np.ndarray:
    n = ensemble[0].grid.n_steps
    for t in ensemble:
        if t.grid.n_steps != n or t.grid.dt != ensemble[0].grid.dt:
            raise ConfigError("ensemble members must share one grid")
    return np.stack([t.states for t in ensemble])


def euclid_distance(a: Trajectory, b: Trajectory) -> float:
    """Squared-deviation time sum over the first n_steps points."""
    if a.grid != b.grid:
        raise ConfigError("trajectories live on different grids")
    n = a.grid.n_steps
    d = a.states[:n] - b.states[:n]
    return float(np.sum(d * d))


def distance_matrix(ensemble: list[Trajectory]) -> np.ndarray:
    """All-pairs euclid_distance, computed via the Gram-matrix identity."""
    n = ensemble[0].grid.n_steps
    flat = _stacked_states(ensemble)[:, :n, :].reshape(len(ensemble), -1)
    sq = np.einsum("ij,ij->i", flat, flat)
    d = sq[:, None] + sq[None, :] - 2.0 * flat @ flat.T
    np.maximum(d, 0.0, out=d)
    np.fill_diagonal(d, 0.0)
    return d


def mean_distance(i: int, ensemble: list[Trajectory], dmat: np.ndarray | None = None) -> float:
    """Average distance of member i to every other ensemble member."""
    m = len(ensemble)
    if m < 2:
        raise ConfigError("mean distance needs at least two trajectories")
    if dmat is None:
        dmat = distance_matrix(ensemble)
    return float(dmat[i].sum() / (m - 1))


def selection_mask(finals: np.ndarray, rule: PostselectRule) -> np.ndarray:
    """Boolean mask over final states (m, 2) that fall inside the window."""
    dx = finals[:, 0] - rule.final.x
    dz = finals[:, 1] - rule.final.z
    if rule.window == "box":
        return (np.abs(dx) <= rule.tol) & (np.abs(dz) <= rule.tol)
    return dx * dx + dz * dz <= rule.tol * rule.tol


def postselect(ensemble: list[Trajectory], rule: PostselectRule) -> list[Trajectory]:
    """Members whose state at rule.t_final lies inside the selection window.

    An empty result is returned, not raised; callers decide whether that is
    an error condition.
    """
    out = []
    for t in ensemble:
        k = t.grid.index_of(rule.t_final)
        if selection_mask(t.states[k : k + 1], rule)[0]:
            out.append(t)
    return out


def collect_postselected(chunks, grid: TimeGrid, rules: list[PostselectRule], method: str = "kraus"):
    """Stream ensemble blocks once and post-select for several rules at once.

    chunks is an iterable of (seeds, states, records) blocks on `grid` (as
    produced by sde_sim.iter_ensemble).  Each rule may use a different
    horizon; survivors are truncated to the rule's own grid.  Returns a list
    of trajectory lists, parallel to rules.
    """
    ks = [grid.index_of(r.t_final) for r in rules]
    out: list[list[Trajectory]] = [[] for _ in rules]
    for seeds, states, records in chunks:
        for ri, (rule, k) in enumerate(zip(rules, ks)):
            mask = selection_mask(states[:, k, :], rule)
            for j in np.nonzero(mask)[0]:
                out[ri].append(
                    Trajectory(
                        grid=TimeGrid(grid.dt, k),
                        states=states[j, : k + 1].copy(),
                        record=records[j, :k].copy(),
                        seed=int(seeds[j]),
                        method=method,
                    )
                )
    return out


def _estimate(ensemble: list[Trajectory], order: np.ndarray, n_keep: int, method: str) -> MlpEstimate:
    members = _stacked_states(ensemble)[order[:n_keep]]
    return MlpEstimate(
        t=ensemble[0].grid.times(),
        mean=members.mean(axis=0),
        std=members.std(axis=0),
        n_members=n_keep,
        method=method,
    )


def _keep_count(m: int, frac: float) -> int:
    if not 0.0 < frac <= 1.0:
        raise ConfigError(f"frac must lie in (0, 1], got {frac}")
    return max(1, math.ceil(frac * m))


def mlp_by_distance(
    ensemble: list[Trajectory], frac: float = 0.05, dmat: np.ndarray | None = None
) -> MlpEstimate:
    """Average of the frac closest members under mean pairwise distance."""
    m = len(ensemble)
    if m == 0:
        raise ConfigError("cannot estimate from an empty ensemble")
    if m == 1:
        return _estimate(ensemble, np.array([0]), 1, "distance")
    if dmat is None:
        dmat = distance_matrix(ensemble)
    d = dmat.sum(axis=1) / (m - 1)
    seeds = np.array([t.seed for t in ensemble])
    order = np.lexsort((seeds, d))  # ties broken by seed for determinism
    return _estimate(ensemble, order, _keep_count(m, frac), "distance")


def mlp_by_probability(
    ensemble: list[Trajectory],
    p: PhysParams,
    frac: float = 0.05,
    logp: np.ndarray | None = None,
) -> MlpEstimate:
    """Average of the frac most probable members by record log-density."""
    m = len(ensemble)
    if m == 0:
        raise ConfigError("cannot estimate from an empty ensemble")
    if logp is None:
        logp = log_path_probabilities(ensemble, p)
    seeds = np.array([t.seed for t in ensemble])
    order = np.lexsort((seeds, -np.asarray(logp, dtype=float)))
    return _estimate(ensemble, order, _keep_count(m, frac), "probability")


def write_estimate_csv(path, est: MlpEstimate) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "x_mean", "z_mean", "x_std", "z_std", "n_members"])
        for i in range(len(est.t)):
            w.writerow(
                [
                    f"{est.t[i]:.9g}",
                    f"{est.mean[i,0]:.17g}",
                    f"{est.mean[i,1]:.17g}",
                    f"{est.std[i,0]:.17g}",
                    f"{est.std[i,1]:.17g}",
                    est.n_members,
                ]
            )
