"""Quadratic tracking planners: SPC, TPC, 2norm-DDPC and DeePC.

Every planner reduces to one symmetric linear solve (unconstrained predictor
substitution) or one KKT saddle solve (coefficient-parametrised data
constraint). Planner objects pre-factorise everything that does not depend
on the lead-in, so receding-horizon loops only pay a triangular solve per
step.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import scipy.linalg

from ddpclab.estimators import LqFactors, SubspacePredictor, TransientBank
from ddpclab.hankel import HankelSet
from ddpclab.lti_sim import LtiSystem, TrajectoryData


class SolverError(RuntimeError):
    """Raised when a planner's linear system cannot be solved reliably."""


@dataclass(frozen=True)
class TrackingCost:
    """Quadratic tracking cost ||y - y_r||_Q^2 + ||u||_R^2 over the horizon."""

    q: np.ndarray
    r: np.ndarray
    y_r: np.ndarray

    def __post_init__(self):
        q = np.atleast_2d(np.asarray(self.q, dtype=float))
        r = np.atleast_2d(np.asarray(self.r, dtype=float))
        y_r = np.asarray(self.y_r, dtype=float).ravel()
        if not np.allclose(q, q.T) or not np.allclose(r, r.T):
            raise ValueError("Q and R must be symmetric")
        if np.min(np.linalg.eigvalsh(q)) < -1e-10 * max(1.0, np.abs(q).max()):
            raise ValueError("Q must be positive semidefinite")
        try:
            scipy.linalg.cho_factor(r)
        except scipy.linalg.LinAlgError as exc:
            raise ValueError("R must be positive definite") from exc
        if y_r.shape[0] != q.shape[0]:
            raise ValueError("y_r length must match Q")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "y_r", y_r)

    def tracking_value(self, u_f: np.ndarray, y_f: np.ndarray) -> float:
        dy = y_f - self.y_r
        return float(dy @ self.q @ dy + u_f @ self.r @ u_f)


def benchmark_tracking_cost(
    tau: int,
    q_step=(1000.0, 10.0),
    r_step=(1.0,),
    ref_step=(1.0, 0.0),
) -> TrackingCost:
    """Per-step diagonal weights tiled over the horizon; defaults match the
    double-integrator benchmark (position weight 1000, velocity weight 10,
    unit input weight, reference position 1 at rest)."""
    q = np.kron(np.eye(tau), np.diag(q_step))
    r = np.kron(np.eye(tau), np.diag(r_step))
    y_r = np.tile(np.asarray(ref_step, dtype=float), tau)
    return TrackingCost(q, r, y_r)


@dataclass(frozen=True)
class ControlQuery:
    """One planning request: lead-in vector, cost, method and regularisation."""

    z_p: np.ndarray
    cost: TrackingCost
    method: str = "spc"
    lam: float = 0.0
    squared_reg: bool = True

    def __post_init__(self):
        if self.method not in ("spc", "tpc", "2norm_ddpc", "deepc"):
            raise ValueError(f"unknown method {self.method!r}")
        if self.lam < 0:
            raise ValueError("lam must be nonnegative")
        object.__setattr__(self, "z_p", np.asarray(self.z_p, dtype=float).ravel())


@dataclass(frozen=True)
class ControlResult:
    u_f: np.ndarray
    y_pred: np.ndarray
    multiplier: Optional[np.ndarray]
    objective: float
    method: str


class PredictorPlanner:
    """Tracking through an explicit predictor matrix [P_p, P_u]: used by SPC and TPC."""

    def __init__(self, predictor: np.ndarray, cost: TrackingCost, n_past: int, method: str):
        predictor = np.asarray(predictor, dtype=float)
        self.method = method
        self.cost = cost
        self.p_p = predictor[:, :n_past]
        self.p_u = predictor[:, n_past:]
        self.lead_in_dim = n_past
        hess = self.p_u.T @ cost.q @ self.p_u + cost.r
        hess = 0.5 * (hess + hess.T)
        try:
            self._cho = scipy.linalg.cho_factor(hess)
        except scipy.linalg.LinAlgError as exc:
            raise SolverError(f"{method}: reduced Hessian not positive definite") from exc
        self._qt_u = self.p_u.T @ cost.q

    def solve(self, z_p: np.ndarray) -> ControlResult:
        z_p = np.asarray(z_p, dtype=float).ravel()
        rhs = self._qt_u @ (self.cost.y_r - self.p_p @ z_p)
        u_f = scipy.linalg.cho_solve(self._cho, rhs)
        y_pred = self.p_p @ z_p + self.p_u @ u_f
        return ControlResult(u_f, y_pred, None, self.cost.tracking_value(u_f, y_pred), self.method)


class _ConstrainedPlanner:
    """Shared KKT machinery for coefficient-parametrised planners.

    Decision variable c with u_f = T_u c, y_f = T_y c, constraint A c = z_p,
    objective tracking cost plus lam * ||c||^2 (or lam * ||c|| when
    squared_reg is False, solved by reweighting the squared problem).
    """

    _FEAS_TOL = 1e-8

    def __init__(self, t_y, t_u, a_c, cost: TrackingCost, lam: float, squared_reg: bool, method: str):
        if lam <= 0:
            raise ValueError(f"{method} requires lam > 0")
        self.method = method
        self.cost = cost
        self.lam = lam
        self.squared_reg = squared_reg
        self.t_y = t_y
        self.t_u = t_u
        self.a_c = a_c
        self.lead_in_dim = a_c.shape[0]
        self._dim = t_y.shape[1]
        base = t_y.T @ cost.q @ t_y + t_u.T @ cost.r @ t_u
        self._base = 0.5 * (base + base.T)
        self._rhs_top = 2.0 * (t_y.T @ cost.q @ cost.y_r)
        self._lu = None
        if squared_reg:
            self._lu = self._factor(lam)

    def _kkt(self, lam_eff: float) -> np.ndarray:
        n, p = self._dim, self.lead_in_dim
        kkt = np.zeros((n + p, n + p))
        kkt[:n, :n] = 2.0 * (self._base + lam_eff * np.eye(n))
        kkt[:n, n:] = self.a_c.T
        kkt[n:, :n] = self.a_c
        return kkt

    def _factor(self, lam_eff: float):
        try:
            return scipy.linalg.lu_factor(self._kkt(lam_eff))
        except scipy.linalg.LinAlgError:
            return None

    def _solve_kkt(self, lam_eff: float, z_p: np.ndarray, lu=None) -> np.ndarray:
        n = self._dim
        rhs = np.concatenate([self._rhs_top, z_p])
        if lu is not None:
            sol = scipy.linalg.lu_solve(lu, rhs)
            if np.all(np.isfinite(sol)):
                return sol[:n]
        # rank-deficient constraint rows (noise-free data): minimum-norm multiplier
        sol, *_ = np.linalg.lstsq(self._kkt(lam_eff), rhs, rcond=None)
        return sol[:n]

    def _check_feasible(self, coeff: np.ndarray, z_p: np.ndarray):
        gap = np.linalg.norm(self.a_c @ coeff - z_p)
        if not np.isfinite(gap) or gap > self._FEAS_TOL * (1.0 + np.linalg.norm(z_p)):
            raise SolverError(
                f"{self.method}: constraint residual {gap:.3e}; "
                "lam too small for the conditioning of the data"
            )

    def solve(self, z_p: np.ndarray) -> ControlResult:
        z_p = np.asarray(z_p, dtype=float).ravel()
        if z_p.shape[0] != self.lead_in_dim:
            raise ValueError(f"z_p has length {z_p.shape[0]}, expected {self.lead_in_dim}")
        if self.squared_reg:
            coeff = self._solve_kkt(self.lam, z_p, self._lu)
            reg = self.lam * float(coeff @ coeff)
        else:
            # fixed point of the reweighted squared problem: lam_eff = lam / (2 ||c||)
            lam_eff = self.lam
            coeff = self._solve_kkt(lam_eff, z_p, self._factor(lam_eff))
            for _ in range(100):
                norm = np.linalg.norm(coeff)
                if norm < 1e-14:
                    break
                new_lam = self.lam / (2.0 * norm)
                if abs(new_lam - lam_eff) <= 1e-12 * lam_eff:
                    break
                lam_eff = new_lam
                coeff = self._solve_kkt(lam_eff, z_p, self._factor(lam_eff))
            reg = self.lam * float(np.linalg.norm(coeff))
        self._check_feasible(coeff, z_p)
        u_f = self.t_u @ coeff
        y_pred = self.t_y @ coeff
        objective = self.cost.tracking_value(u_f, y_pred) + reg
        return ControlResult(u_f, y_pred, coeff, objective, self.method)


class GammaDdpcPlanner(_ConstrainedPlanner):
    """2norm-DDPC: track through the LQ factors with an isotropic gamma penalty."""

    def __init__(self, lq: LqFactors, cost: TrackingCost, lam: float, squared_reg: bool = True):
        q, m = lq.dims
        npz = (q + m) * lq.rho
        n_e = lq.l_ye.shape[1]
        t_y = np.hstack([lq.l_yv, lq.l_ye])
        t_u = np.hstack([lq.l_vv[npz:, :], np.zeros((m * lq.tau, n_e))])
        a_c = np.hstack([lq.l_vv[:npz, :], np.zeros((npz, n_e))])
        super().__init__(t_y, t_u, a_c, cost, lam, squared_reg, "2norm_ddpc")
        self.nv = lq.nv

    def split_gamma(self, coeff: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return coeff[: self.nv], coeff[self.nv :]


class DeepcPlanner(_ConstrainedPlanner):
    """DeePC over the raw data columns; equivalent to GammaDdpcPlanner at matched lam."""

    def __init__(self, h: HankelSet, cost: TrackingCost, lam: float, squared_reg: bool = True):
        q, m = h.dims
        npz = (q + m) * h.rho
        super().__init__(h.yf, h.uf, h.zp, cost, lam, squared_reg, "deepc")
        assert self.lead_in_dim == npz


def solve_spc(s: SubspacePredictor, query: ControlQuery) -> ControlResult:
    """Unconstrained tracking with the subspace predictor substituted for the output."""
    if query.method != "spc":
        raise ValueError(f"query method is {query.method!r}, expected 'spc'")
    return PredictorPlanner(s.s, query.cost, s.n_past, "spc").solve(query.z_p)


def solve_tpc(bank: TransientBank, query: ControlQuery) -> ControlResult:
    """Same quadratic solve as SPC with the transient multistep predictor."""
    if query.method != "tpc":
        raise ValueError(f"query method is {query.method!r}, expected 'tpc'")
    q, m = bank.dims
    return PredictorPlanner(bank.h_hat, query.cost, (q + m) * bank.rho, "tpc").solve(query.z_p)


def solve_2norm_ddpc(lq: LqFactors, query: ControlQuery) -> ControlResult:
    if query.method != "2norm_ddpc":
        raise ValueError(f"query method is {query.method!r}, expected '2norm_ddpc'")
    planner = GammaDdpcPlanner(lq, query.cost, query.lam, query.squared_reg)
    return planner.solve(query.z_p)


def solve_deepc(h: HankelSet, query: ControlQuery) -> ControlResult:
    if query.method != "deepc":
        raise ValueError(f"query method is {query.method!r}, expected 'deepc'")
    planner = DeepcPlanner(h, query.cost, query.lam, query.squared_reg)
    return planner.solve(query.z_p)


def run_receding_horizon(
    sys: LtiSystem,
    planner,
    t_sim: int,
    seed: int = 0,
    x0: Optional[np.ndarray] = None,
) -> TrajectoryData:
    """Replann at every step, applying only the first input block.

    The lead-in buffer starts at zero. At step t the planner sees the last
    rho measured (y, u) pairs; the plan's first input is applied, the plant
    advances, and the fresh noisy measurement enters the buffer.
    """
    if t_sim < 1:
        raise ValueError("t_sim must be at least 1")
    q, m = sys.q, sys.m
    block = q + m
    if planner.lead_in_dim % block != 0:
        raise ValueError("planner lead-in dimension does not match the plant")
    rho = planner.lead_in_dim // block
    rng = np.random.default_rng(seed)
    vals, vecs = np.linalg.eigh(sys.noise_cov)
    noise_factor = vecs * np.sqrt(np.clip(vals, 0.0, None))
    e = rng.standard_normal((t_sim, q)) @ noise_factor.T
    history = [np.zeros(block) for _ in range(rho)]
    x = np.zeros(sys.n) if x0 is None else np.asarray(x0, dtype=float).reshape(sys.n)
    u_rec = np.empty((t_sim, m))
    y_rec = np.empty((t_sim, q))
    for t in range(t_sim):
        z_p = np.concatenate(history[-rho:])
        try:
            result = planner.solve(z_p)
        except Exception as exc:
            raise SolverError(f"{planner.method} failed at step {t}: {exc}") from exc
        u_t = result.u_f[:m]
        y_t = sys.c @ x + e[t]
        x = sys.a @ x + sys.b @ u_t
        u_rec[t] = u_t
        y_rec[t] = y_t
        history.append(np.concatenate([y_t, u_t]))
    meta = {"seed": seed, "method": planner.method, "t_sim": t_sim}
    return TrajectoryData(u_rec, y_rec, seed, meta)
