"""Variational extremal-path machinery for the monitored driven qubit.

The readout-extremized Hamiltonian on the planar phase space (x, z, p_x, p_z)
is

    H = p_z*F_z + p_x*F_x - r^2/2 + r*sqrt(eta*gamma)*x - eta*gamma*(1-z)/2

with the state-flow brackets

    F_z = Omega*x + gamma*(1-z)*(1 - eta*(1-z)/2) + sqrt(eta*gamma)*x*(1-z)*r
    F_x = -Omega*z - (gamma/2)*x*(1 - eta*(1-z)) + sqrt(eta*gamma)*(1-z-x^2)*r

and the stationary readout

    r* = sqrt(eta*gamma) * [x + p_x*(1-z-x^2) + p_z*x*(1-z)].

Hamilton's equations of this H (with r held at r*, which is stationary) give
the four path equations integrated here; H is conserved along every path and
is reported as the path energy E.  The action is accumulated from the
integrand H - qdot.p, which collapses to the readout terms
r*(sqrt(eta*gamma)*x - r/2) - eta*gamma*(1-z)/2.

The sign of the conjugate-momentum flow follows from Hamilton consistency
with the state flow above (the test suite verifies dH/dt = 0 and the
finite-difference gradient identities); a formulation in the shifted
population variable u = 1 - z with momentum p_u = -p_z is equivalent.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .core import BlochState, ConfigError, NumericFailure, PhysParams

#: Momenta beyond this magnitude abort a shot as singular.
P_LIMIT = 1.0e3

#: Shortest admissible horizon for boundary-value solving (degenerate
#: T -> 0 problems have a momentum continuum of solutions).
MIN_HORIZON = 1.0e-4


@dataclass(frozen=True)
class PhasePoint:
    x: float
    z: float
    p_x: float
    p_z: float


@dataclass
class MlpPath:
    """Solved extremal path sampled on a uniform time grid."""

    t: np.ndarray
    xz: np.ndarray  # (n, 2)
    p: np.ndarray  # (n, 2) columns (p_x, p_z)
    r: np.ndarray  # (n,)
    energy: float
    action: float
    winding: int
    start: PhasePoint

    def endpoint(self) -> tuple[float, float]:
        return float(self.xz[-1, 0]), float(self.xz[-1, 1])

    def max_energy_drift(self) -> float:
        """Worst |H - E| along the stored samples, relative to max(1, |E|)."""
        params = self._params
        h = np.array(
            [hamiltonian(PhasePoint(*self.xz[i], *self.p[i]), float(self.r[i]), params) for i in range(len(self.t))]
        )
        return float(np.abs(h - self.energy).max() / max(1.0, abs(self.energy)))

    _params: PhysParams = None  # set by integrate_mlp; used for drift checks


def optimal_readout(pt: PhasePoint, p: PhysParams) -> float:
    """Deterministic record rate that makes H stationary (dH/dr = 0)."""
    oz = 1.0 - pt.z
    return math.sqrt(p.eta * p.gamma) * (pt.x + pt.p_x * (oz - pt.x * pt.x) + pt.p_z * pt.x * oz)


def hamiltonian(pt: PhasePoint, r: float, p: PhysParams) -> float:
    """Stochastic Hamiltonian at a phase-space point and readout value."""
    x, z, px, pz = pt.x, pt.z, pt.p_x, pt.p_z
    oz = 1.0 - z
    seg = math.sqrt(p.eta * p.gamma)
    fz = p.omega_rabi * x + p.gamma * oz * (1.0 - 0.5 * p.eta * oz) + seg * x * oz * r
    fx = -p.omega_rabi * z - 0.5 * p.gamma * x * (1.0 - p.eta * oz) + seg * (oz - x * x) * r
    return pz * fz + px * fx - 0.5 * r * r + r * seg * x - 0.5 * p.eta * p.gamma * oz


def hamiltonian_xyz(
    x: float, y: float, z: float, p_x: float, p_y: float, p_z: float, r: float, p: PhysParams
) -> float:
    """Three-component variant; the p_y bracket vanishes identically at y = 0,
    decoupling the out-of-plane momentum from the planar problem."""
    seg = math.sqrt(p.eta * p.gamma)
    oz = 1.0 - z
    fy = -0.5 * p.gamma * y * (1.0 - p.eta * oz) - seg * x * y * r
    return hamiltonian(PhasePoint(x, z, p_x, p_z), r, p) + p_y * fy


def eom_rhs(pt: PhasePoint, p: PhysParams) -> tuple[float, float, float, float]:
    """(xdot, zdot, p_x dot, p_z dot) with the readout held at its optimum."""
    fx, fz, dpx, dpz, _, _ = _rhs(pt.x, pt.z, pt.p_x, pt.p_z, p.gamma, p.eta, p.omega_rabi)
    return fx, fz, dpx, dpz


def _rhs(x, z, px, pz, gam, eta, om):
    """Scalar RHS: returns (fx, fz, dpx, dpz, sdot, r)."""
    oz = 1.0 - z
    seg = math.sqrt(eta * gam)
    r = seg * (x + px * (oz - x * x) + pz * x * oz)
    sxr = seg * x * r
    fz = om * x + gam * oz * (1.0 - 0.5 * eta * oz) + sxr * oz
    fx = -om * z - 0.5 * gam * x * (1.0 - eta * oz) + seg * (oz - x * x) * r
    gpe = gam * (1.0 - eta * oz)
    dpz = pz * (gpe + sxr) + px * (om + 0.5 * gam * eta * x + seg * r) - 0.5 * eta * gam
    dpx = -pz * (om + seg * oz * r) + px * (0.5 * gpe + 2.0 * sxr) - seg * r
    sdot = r * (seg * x - 0.5 * r) - 0.5 * eta * gam * oz
    return fx, fz, dpx, dpz, sdot, r


# Dormand-Prince 5(4) tableau (FSAL)
_C = (0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0)
_A = (
    (),
    (1.0 / 5.0,),
    (3.0 / 40.0, 9.0 / 40.0),
    (44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0),
    (19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0),
    (9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0),
)
_B5 = (35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0)
_B4 = (5179.0 / 57600.0, 0.0, 7571.0 / 16695.0, 393.0 / 640.0, -92097.0 / 339200.0, 187.0 / 2100.0, 1.0 / 40.0)


def _dp54(y0, T, gam, eta, om, rtol, atol, t_out=None, max_steps=500_000):
    """Adaptive embedded RK integration of the 5-component extremal system.

    y = (x, z, p_x, p_z, S).  Returns (ys_at_t_out or final y, status, t_fail)
    where status is "ok", "singular" (momentum guard) or "budget".
    Output times, when given, are hit exactly by capping the step.
    """
    t = 0.0
    y = [float(v) for v in y0]
    out = []
    next_i = 0
    if t_out is not None and len(t_out) and t_out[0] == 0.0:
        out.append(tuple(y))
        next_i = 1
    k1 = _rhs(y[0], y[1], y[2], y[3], gam, eta, om)[:5]
    h = 1e-3
    steps = 0
    while t < T - 1e-15:
        if abs(y[2]) > P_LIMIT or abs(y[3]) > P_LIMIT:
            return None, "singular", t
        if steps > max_steps:
            return None, "budget", t
        cap = T - t
        if t_out is not None and next_i < len(t_out):
            cap = t_out[next_i] - t
        h = min(h, cap)
        ks = [k1]
        for i in range(1, 6):
            ai = _A[i]
            yi = [y[d] + h * sum(ai[j] * ks[j][d] for j in range(i)) for d in range(5)]
            ks.append(_rhs(yi[0], yi[1], yi[2], yi[3], gam, eta, om)[:5])
        y5 = [
            y[d]
            + h
            * (
                _B5[0] * ks[0][d]
                + _B5[2] * ks[2][d]
                + _B5[3] * ks[3][d]
                + _B5[4] * ks[4][d]
                + _B5[5] * ks[5][d]
            )
            for d in range(5)
        ]
        k7 = _rhs(y5[0], y5[1], y5[2], y5[3], gam, eta, om)[:5]
        err = 0.0
        for d in range(5):
            e4 = y[d] + h * (
                _B4[0] * ks[0][d]
                + _B4[2] * ks[2][d]
                + _B4[3] * ks[3][d]
                + _B4[4] * ks[4][d]
                + _B4[5] * ks[5][d]
                + _B4[6] * k7[d]
            )
            sc = atol + rtol * max(abs(y[d]), abs(y5[d]))
            e = (y5[d] - e4) / sc
            err += e * e
        err = math.sqrt(err / 5.0)
        steps += 1
        if err <= 1.0:
            t += h
            y = y5
            k1 = k7
            if t_out is not None and next_i < len(t_out) and abs(t - t_out[next_i]) < 1e-12:
                out.append(tuple(y))
                next_i += 1
        fac = 0.9 * err ** -0.2 if err > 1e-30 else 5.0
        h *= min(5.0, max(0.2, fac))
        if h < 1e-14:
            return None, "singular", t
    if t_out is not None:
        while next_i < len(t_out):  # guard against rounding at the last node
            out.append(tuple(y))
            next_i += 1
        return out, "ok", t
    return [tuple(y)], "ok", t


def _winding_count(xz: np.ndarray) -> int:
    """Net polar-angle turns about the Bloch-disc origin, floor of |sweep|/2pi.

    The polar angle is measured from +z toward +x and unwrapped along the
    path, so branches that loop the disc an extra time get distinct tags.
    """
    theta = np.unwrap(np.arctan2(xz[:, 0], xz[:, 1]))
    return int(math.floor(abs(theta[-1] - theta[0]) / (2.0 * math.pi)))


def integrate_mlp(
    start: PhasePoint,
    p: PhysParams,
    T: float,
    rtol: float = 1e-10,
    atol: float = 1e-12,
    n_out: int | None = None,
) -> MlpPath:
    """Integrate the extremal equations from a full phase-space start.

    n_out fixes the number of output samples (default: ceil(T/0.002)+1 so
    theory paths line up with default trajectory grids).  Raises
    NumericFailure with the failure time if the momenta blow up.
    """
    if not T > 0.0:
        raise ConfigError(f"horizon must be positive, got {T}")
    if n_out is None:
        n_out = int(round(T / 0.002)) + 1
    t_out = np.linspace(0.0, T, n_out)
    y0 = (start.x, start.z, start.p_x, start.p_z, 0.0)
    rows, status, t_end = _dp54(y0, T, p.gamma, p.eta, p.omega_rabi, rtol, atol, t_out=t_out)
    if status != "ok":
        raise NumericFailure(f"extremal-path integration diverged at t = {t_end:.6f} us ({status})")
    arr = np.asarray(rows)
    xz = arr[:, 0:2]
    mom = arr[:, 2:4]
    r = np.array(
        [optimal_readout(PhasePoint(xz[i, 0], xz[i, 1], mom[i, 0], mom[i, 1]), p) for i in range(n_out)]
    )
    energy = hamiltonian(start, optimal_readout(start, p), p)
    path = MlpPath(
        t=t_out,
        xz=xz,
        p=mom,
        r=r,
        energy=energy,
        action=float(arr[-1, 4]),
        winding=_winding_count(xz),
        start=start,
    )
    path._params = p
    return path


def final_state(start: PhasePoint, p: PhysParams, T: float, rtol: float = 1e-10) -> tuple | None:
    """Endpoint (x, z) of a shot, or None if it hits the momentum guard."""
    y0 = (start.x, start.z, start.p_x, start.p_z, 0.0)
    rows, status, _ = _dp54(y0, T, p.gamma, p.eta, p.omega_rabi, rtol, 1e-12)
    if status != "ok":
        return None
    return rows[-1][0], rows[-1][1]


# --- coarse grid propagation (vectorized fixed-step RK4) ---------------------

def _rhs_vec(x, z, px, pz, gam, eta, om):
    oz = 1.0 - z
    seg = math.sqrt(eta * gam)
    r = seg * (x + px * (oz - x * x) + pz * x * oz)
    sxr = seg * x * r
    fz = om * x + gam * oz * (1.0 - 0.5 * eta * oz) + sxr * oz
    fx = -om * z - 0.5 * gam * x * (1.0 - eta * oz) + seg * (oz - x * x) * r
    gpe = gam * (1.0 - eta * oz)
    dpz = pz * (gpe + sxr) + px * (om + 0.5 * gam * eta * x + seg * r) - 0.5 * eta * gam
    dpx = -pz * (om + seg * oz * r) + px * (0.5 * gpe + 2.0 * sxr) - seg * r
    return fx, fz, dpx, dpz


def propagate_grid(
    q_i: tuple[float, float],
    p: PhysParams,
    T: float,
    px0: np.ndarray,
    pz0: np.ndarray,
    dt: float = 0.002,
):
    """Fixed-step RK4 endpoints for a whole momentum grid at once.

    Used only as the coarse residual scan behind the boundary-value search;
    candidate minima are re-solved with the adaptive integrator.  Returns
    (xf, zf, valid) arrays matching the broadcast shape of px0/pz0.
    """
    x = np.broadcast_to(np.asarray(q_i[0], dtype=float), np.broadcast_shapes(px0.shape, pz0.shape)).copy()
    z = np.broadcast_to(np.asarray(q_i[1], dtype=float), x.shape).copy()
    px = np.array(px0, dtype=float, copy=True)
    pz = np.array(pz0, dtype=float, copy=True)
    valid = np.ones(x.shape, dtype=bool)
    n = max(1, int(round(T / dt)))
    h = T / n
    args = (p.gamma, p.eta, p.omega_rabi)
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(n):
            k1 = _rhs_vec(x, z, px, pz, *args)
            k2 = _rhs_vec(x + 0.5 * h * k1[0], z + 0.5 * h * k1[1], px + 0.5 * h * k1[2], pz + 0.5 * h * k1[3], *args)
            k3 = _rhs_vec(x + 0.5 * h * k2[0], z + 0.5 * h * k2[1], px + 0.5 * h * k2[2], pz + 0.5 * h * k2[3], *args)
            k4 = _rhs_vec(x + h * k3[0], z + h * k3[1], px + h * k3[2], pz + h * k3[3], *args)
            xn = x + (h / 6.0) * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0])
            zn = z + (h / 6.0) * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1])
            pxn = px + (h / 6.0) * (k1[2] + 2.0 * k2[2] + 2.0 * k3[2] + k4[2])
            pzn = pz + (h / 6.0) * (k1[3] + 2.0 * k2[3] + 2.0 * k3[3] + k4[3])
            ok = (
                np.isfinite(xn)
                & np.isfinite(zn)
                & np.isfinite(pxn)
                & np.isfinite(pzn)
                & (np.abs(pxn) <= P_LIMIT)
                & (np.abs(pzn) <= P_LIMIT)
            )
            valid &= ok
            upd = valid
            x = np.where(upd, xn, x)
            z = np.where(upd, zn, z)
            px = np.where(upd, pxn, px)
            pz = np.where(upd, pzn, pz)
    return x, z, valid


# --- boundary value solver ----------------------------------------------------

def _refine(q_i, q_f, T, p: PhysParams, p0, rtol, tol=1e-6, max_iter=60):
    """Damped finite-difference Gauss-Newton on the endpoint residual."""
    pv = np.array(p0, dtype=float)
    fd = 1e-7
    f = final_state(PhasePoint(q_i[0], q_i[1], pv[0], pv[1]), p, T, rtol)
    if f is None:
        return None
    res = np.array([f[0] - q_f[0], f[1] - q_f[1]])
    for _ in range(max_iter):
        nrm = math.hypot(*res)
        if nrm <= tol:
            return pv
        fx = final_state(PhasePoint(q_i[0], q_i[1], pv[0] + fd, pv[1]), p, T, rtol)
        fz = final_state(PhasePoint(q_i[0], q_i[1], pv[0], pv[1] + fd), p, T, rtol)
        if fx is None or fz is None:
            return None
        jac = np.array(
            [
                [(fx[0] - f[0]) / fd, (fz[0] - f[0]) / fd],
                [(fx[1] - f[1]) / fd, (fz[1] - f[1]) / fd],
            ]
        )
        try:
            step = np.linalg.solve(jac, res)
        except np.linalg.LinAlgError:
            return None
        lam = 1.0
        while lam > 1e-4:
            cand = pv - lam * step
            fc = final_state(PhasePoint(q_i[0], q_i[1], cand[0], cand[1]), p, T, rtol)
            if fc is not None and math.hypot(fc[0] - q_f[0], fc[1] - q_f[1]) < nrm:
                pv, f = cand, fc
                res = np.array([f[0] - q_f[0], f[1] - q_f[1]])
                break
            lam *= 0.5
        else:
            return None
    return pv if math.hypot(*res) <= tol else None


def _as_xz(q) -> tuple[float, float]:
    if isinstance(q, BlochState):
        return (q.x, q.z)
    return (float(q[0]), float(q[1]))


def shoot_bvp(
    q_i,
    q_f,
    T: float,
    p: PhysParams,
    box: tuple[float, float] = (-5.0, 5.0),
    n_grid: int = 61,
    coarse_threshold: float = 0.35,
    rtol: float = 1e-10,
    scan: tuple | None = None,
) -> list[MlpPath]:
    """All distinct extremal paths from q_i to q_f in time T.

    A residual scan over initial momenta in box x box (reusable across
    final states via the `scan` argument) seeds damped Gauss-Newton
    refinement; solutions are deduplicated on initial momenta (1e-3) and
    full-path RMS (1e-3), and returned sorted by action, largest first.
    """
    qi, qf = _as_xz(q_i), _as_xz(q_f)
    if T < 10.0 * MIN_HORIZON:
        raise ConfigError(f"horizon {T} too short for a well-posed boundary problem")
    if scan is None:
        scan = shoot_scan(qi, p, T, box=box, n_grid=n_grid)
    px_ax, pz_ax, xf, zf, valid = scan
    res = np.where(valid, np.hypot(xf - qf[0], zf - qf[1]), np.inf)
    n_px, n_pz = res.shape
    cands = []
    for i in range(n_px):
        for j in range(n_pz):
            v = res[i, j]
            if not np.isfinite(v) or v > coarse_threshold:
                continue
            neigh = res[max(0, i - 1) : i + 2, max(0, j - 1) : j + 2]
            if v <= neigh.min() + 1e-15:
                cands.append((v, px_ax[i], pz_ax[j]))
    cands.sort()
    sols: list[MlpPath] = []
    for _, px0, pz0 in cands:
        pv = _refine(qi, qf, T, p, (px0, pz0), rtol)
        if pv is None:
            continue
        if any(
            abs(pv[0] - s.start.p_x) < 1e-3 and abs(pv[1] - s.start.p_z) < 1e-3 for s in sols
        ):
            continue
        path = integrate_mlp(PhasePoint(qi[0], qi[1], pv[0], pv[1]), p, T, rtol=rtol)
        if any(
            math.sqrt(np.mean(np.sum((path.xz - s.xz) ** 2, axis=1))) < 1e-3 for s in sols
        ):
            continue
        sols.append(path)
    sols.sort(key=lambda s: (-s.action, s.start.p_x, s.start.p_z))
    if not sols:
        finite = res[np.isfinite(res)]
        best = float(finite.min()) if finite.size else math.inf
        import logging

        logging.getLogger(__name__).warning(
            "no boundary solution in box %s (minimal scan residual %.4g)", box, best
        )
    return sols


def shoot_scan(q_i, p: PhysParams, T: float, box=(-5.0, 5.0), n_grid: int = 61):
    """Coarse endpoint scan over the initial-momentum box, for reuse across
    several final states with the same (q_i, T)."""
    qi = _as_xz(q_i)
    px_ax = np.linspace(box[0], box[1], n_grid)
    pz_ax = np.linspace(box[0], box[1], n_grid)
    PX, PZ = np.meshgrid(px_ax, pz_ax, indexing="ij")
    xf, zf, valid = propagate_grid(qi, p, T, PX, PZ)
    return px_ax, pz_ax, xf, zf, valid


def action_difference(a: MlpPath, b: MlpPath, tol: float = 1e-3) -> float:
    """Action gap S_a - S_b between two paths with shared boundary data;
    exp of it predicts their relative probability."""
    if abs(a.t[-1] - b.t[-1]) > 1e-9:
        raise ConfigError("paths have different horizons")
    ea, eb = a.endpoint(), b.endpoint()
    if (
        math.hypot(a.xz[0, 0] - b.xz[0, 0], a.xz[0, 1] - b.xz[0, 1]) > tol
        or math.hypot(ea[0] - eb[0], ea[1] - eb[1]) > tol
    ):
        raise ConfigError("paths do not share boundary conditions")
    return a.action - b.action


def write_path_csv(path, mlp: MlpPath, p: PhysParams) -> None:
    with open(path, "w", newline="") as fh:
        ex, ez = mlp.endpoint()
        fh.write(f"# E_mhz = {mlp.energy:.12g}\n")
        fh.write(f"# S = {mlp.action:.12g}\n")
        fh.write(f"# winding = {mlp.winding}\n")
        fh.write(
            f"# start = ({mlp.xz[0,0]:.9g}, {mlp.xz[0,1]:.9g})  end = ({ex:.9g}, {ez:.9g})  T = {mlp.t[-1]:.9g}\n"
        )
        w = csv.writer(fh)
        w.writerow(["t", "x", "z", "p_x", "p_z", "r", "H"])
        for i in range(len(mlp.t)):
            h = hamiltonian(PhasePoint(*mlp.xz[i], *mlp.p[i]), float(mlp.r[i]), p)
            w.writerow(
                [
                    f"{mlp.t[i]:.9g}",
                    f"{mlp.xz[i,0]:.17g}",
                    f"{mlp.xz[i,1]:.17g}",
                    f"{mlp.p[i,0]:.17g}",
                    f"{mlp.p[i,1]:.17g}",
                    f"{mlp.r[i]:.17g}",
                    f"{h:.17g}",
                ]
            )
