"""Closed-form bias quantities for subspace predictive control and DDPC.

The central objects are the empirical bias of the subspace predictor on the
training columns, the worst-case and expected bias magnitudes derived from
it, the gamma/g bias decomposition into a subspace part and an optimism part,
and the innovation/input correlation heatmap used to visualise feedback in
the training data.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from ddpclab.estimators import (
    BiasPredictor,
    InnovationEstimate,
    LqFactors,
    SingularDataError,
    SubspacePredictor,
    TransientBank,
)
from ddpclab.hankel import HankelSet


def subspace_bias(beta: BiasPredictor, v: np.ndarray) -> np.ndarray:
    """Predicted bias of the subspace prediction for a query vector v = [z_p; u_f]."""
    v = np.asarray(v, dtype=float)
    if v.shape[0] != beta.beta_hat.shape[1]:
        raise ValueError(
            f"v has length {v.shape[0]}, expected {beta.beta_hat.shape[1]}"
        )
    return beta.beta_hat @ v


def empirical_bias(s: SubspacePredictor, bank: TransientBank, h: HankelSet) -> np.ndarray:
    """Empirical bias matrix (S - H) V on the training columns."""
    return (s.s - bank.h_hat) @ h.v_matrix()


@dataclass(frozen=True)
class BiasSummary:
    sigma_max: float
    expected_bias_sq: float


def subspace_bias_summary(
    beta_v: np.ndarray,
    bank: TransientBank,
    innov: InnovationEstimate,
    h: HankelSet,
    rcond: float = 1e-13,
) -> BiasSummary:
    """Scalar bias summaries: worst case over unit-coefficient training mixtures,
    and the expected squared bias under queries drawn like the training columns.

    The expectation is the squared Frobenius norm of
    (I - phi_y)^{-1} [0, E Uf^T] applied to an inverse square-root factor of
    V V^T, evaluated through the SVD of V so the conditioning is not squared.
    """
    sigma_max = float(np.linalg.svd(beta_v, compute_uv=False)[0])
    q_tau = h.q * h.tau
    cross = innov.e_hat @ h.uf.T
    b = np.zeros((q_tau, h.nv))
    b[:, (h.q + h.m) * h.rho :] = cross
    b = np.linalg.solve(np.eye(q_tau) - bank.phi_y, b)
    w, s, _ = np.linalg.svd(h.v_matrix(), full_matrices=False)
    if s[0] == 0.0 or s[-1] / s[0] < rcond:
        raise SingularDataError("V V^T is not numerically positive definite")
    projected = (w.T @ b.T) / s[:, None]
    expected = float(np.sum(projected * projected))
    return BiasSummary(sigma_max, expected)


def gamma_ddpc_bias(
    lq: LqFactors,
    beta: BiasPredictor,
    gamma_v: np.ndarray,
    gamma_e: np.ndarray,
) -> np.ndarray:
    """Prediction bias of a gamma-parametrised DDPC solution.

    The first term is the subspace bias routed through L_vv, the second is
    the optimism bias L_ye gamma_e.
    """
    gamma_v = np.asarray(gamma_v, dtype=float)
    gamma_e = np.asarray(gamma_e, dtype=float)
    if gamma_v.shape[0] != lq.nv or gamma_e.shape[0] != lq.l_ye.shape[1]:
        raise ValueError("gamma partition lengths do not match the LQ factors")
    return beta.beta_hat @ (lq.l_vv @ gamma_v) + lq.l_ye @ gamma_e


def optimism_bias(lq: LqFactors, gamma_e: np.ndarray) -> np.ndarray:
    """Optimism component L_ye gamma_e alone."""
    return lq.l_ye @ np.asarray(gamma_e, dtype=float)


def deepc_bias(lq: LqFactors, beta_v: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Prediction bias of a DeePC coefficient vector g: (beta_V + L_ye Q_e) g."""
    g = np.asarray(g, dtype=float)
    if g.shape[0] != lq.q_e.shape[1]:
        raise ValueError(f"g has length {g.shape[0]}, expected {lq.q_e.shape[1]}")
    return beta_v @ g + lq.l_ye @ (lq.q_e @ g)


@dataclass(frozen=True)
class DdpcBiasSummary:
    sigma_max_open: float
    sigma_max_closed: float


def ddpc_bias_summary(lq: LqFactors, beta: BiasPredictor) -> DdpcBiasSummary:
    """Worst-case DDPC bias gains: optimism-only and optimism-plus-subspace."""
    sigma_open = float(np.linalg.svd(lq.l_ye, compute_uv=False)[0])
    stacked = np.hstack([beta.beta_hat @ lq.l_vv, lq.l_ye])
    sigma_closed = float(np.linalg.svd(stacked, compute_uv=False)[0])
    return DdpcBiasSummary(sigma_open, sigma_closed)


@dataclass(frozen=True)
class CorrelationHeatmap:
    """Entrywise Pearson correlation between innovation rows and future-input rows."""

    matrix: np.ndarray
    degenerate: np.ndarray  # True where a zero-variance row forced the entry to 0


def correlation_heatmap(innov: InnovationEstimate, h: HankelSet) -> CorrelationHeatmap:
    if innov.e_hat.shape[1] != h.n_cols:
        raise ValueError("innovations and HankelSet column counts differ")
    e_c = innov.e_hat - innov.e_hat.mean(axis=1, keepdims=True)
    u_c = h.uf - h.uf.mean(axis=1, keepdims=True)
    e_norm = np.sqrt(np.sum(e_c * e_c, axis=1))
    u_norm = np.sqrt(np.sum(u_c * u_c, axis=1))
    degenerate = (e_norm[:, None] == 0.0) | (u_norm[None, :] == 0.0)
    denom = np.outer(np.where(e_norm == 0.0, 1.0, e_norm), np.where(u_norm == 0.0, 1.0, u_norm))
    matrix = (e_c @ u_c.T) / denom
    matrix[degenerate] = 0.0
    return CorrelationHeatmap(matrix, degenerate)


@dataclass(frozen=True)
class BiasReport:
    """Scalar bias diagnostics for one fitted dataset."""

    beta_v: np.ndarray
    sigma_max_subspace: float
    expected_bias_sq: float
    sigma_max_ddpc: float
    sigma_max_optimism: float
    n_cols: int
    rho: int
    tau: int

    def scalars(self) -> dict:
        return {
            "sigma_max_subspace": self.sigma_max_subspace,
            "expected_bias_sq": self.expected_bias_sq,
            "sigma_max_ddpc": self.sigma_max_ddpc,
            "sigma_max_optimism": self.sigma_max_optimism,
        }


def build_bias_report(
    s: SubspacePredictor,
    bank: TransientBank,
    innov: InnovationEstimate,
    beta: BiasPredictor,
    lq: LqFactors,
    h: HankelSet,
) -> BiasReport:
    """Assemble the scalar diagnostics for one fitted dataset.

    The norms are evaluated through the LQ factors: V = L_vv Q_v with
    orthonormal Q_v rows, so sigma(X V) = sigma(X L_vv) and V V^T inverses
    reduce to triangular solves. This matches subspace_bias_summary up to
    rounding without any N-sized decompositions.
    """
    diff = s.s - bank.h_hat
    beta_v = diff @ h.v_matrix()
    sigma_max = float(np.linalg.svd(diff @ lq.l_vv, compute_uv=False)[0])
    q_tau = h.q * h.tau
    b = np.zeros((q_tau, h.nv))
    b[:, (h.q + h.m) * h.rho :] = innov.e_hat @ h.uf.T
    b = np.linalg.solve(np.eye(q_tau) - bank.phi_y, b)
    if np.min(np.abs(np.diag(lq.l_vv))) <= 0.0:
        raise SingularDataError("V V^T is not numerically positive definite")
    x = scipy.linalg.solve_triangular(lq.l_vv, b.T, lower=True)
    expected = float(np.sum(x * x))
    ddpc = ddpc_bias_summary(lq, beta)
    return BiasReport(
        beta_v=beta_v,
        sigma_max_subspace=sigma_max,
        expected_bias_sq=expected,
        sigma_max_ddpc=ddpc.sigma_max_closed,
        sigma_max_optimism=ddpc.sigma_max_open,
        n_cols=h.n_cols,
        rho=h.rho,
        tau=h.tau,
    )
