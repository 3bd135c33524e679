"""Predictor fits: subspace regression, LQ factors, transient predictor bank,
sample innovations and the estimated bias predictor.

All regressions are solved through orthogonal decompositions (SVD or QR),
never by forming and inverting Gram matrices, so conditioning is that of the
data matrix itself. A relative singular value below `rcond` raises
SingularDataError unless a positive ridge is supplied.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np
import scipy.linalg

from ddpclab.hankel import HankelSet, build_hankel_set, hankel_matrix
from ddpclab.lti_sim import TrajectoryData


class SingularDataError(ValueError):
    """Raised when a regression design is numerically rank deficient."""


def regress_rows(
    targets: np.ndarray,
    design: np.ndarray,
    ridge: float = 0.0,
    rcond: float = 1e-10,
    label: str = "design",
) -> np.ndarray:
    """Least-squares coefficients C with C ~= targets @ design.T @ inv(design @ design.T).

    Rows of `targets` are regressed on rows of `design` via the SVD of the
    design, so the conditioning is not squared. With ridge > 0 the Gram is
    shifted by ridge * I instead of raising on rank deficiency.
    """
    w, s, vt = np.linalg.svd(design, full_matrices=False)
    if s[0] == 0.0:
        raise SingularDataError(f"{label} is identically zero")
    if ridge > 0.0:
        gains = s / (s * s + ridge)
    else:
        rel = s[-1] / s[0]
        if rel < rcond:
            raise SingularDataError(
                f"{label} numerically singular: relative singular value {rel:.3e} < {rcond:.1e}"
            )
        gains = 1.0 / s
    return ((targets @ vt.T) * gains) @ w.T


def _r_factor_chunks(z_signal: np.ndarray, depth: int, n_cols: int, chunk_size: int) -> np.ndarray:
    """Upper-triangular R with R.T @ R = Z @ Z.T for the scaled depth-row Hankel Z.

    Accumulates the R factor over column chunks so the full Hankel is never
    materialised; the fixed chunking keeps results bit-reproducible.
    """
    n_w = z_signal.shape[1]
    rows = depth * n_w
    if chunk_size < rows:
        chunk_size = rows
    scale = 1.0 / np.sqrt(n_cols)
    views = np.lib.stride_tricks.sliding_window_view(z_signal, depth, axis=0)
    r = np.zeros((0, rows))
    for start in range(0, n_cols, chunk_size):
        stop = min(start + chunk_size, n_cols)
        block = np.transpose(views[start:stop], (0, 2, 1)).reshape(stop - start, rows) * scale
        stacked = np.vstack([r, block])
        r = scipy.linalg.qr(stacked, mode="r")[0][:rows]
    return r


@dataclass(frozen=True)
class SubspacePredictor:
    """One-shot regression of future outputs on past history and future inputs."""

    s: np.ndarray
    rho: int
    tau: int
    dims: Tuple[int, int]

    @property
    def n_past(self) -> int:
        q, m = self.dims
        return (q + m) * self.rho

    def split(self) -> Tuple[np.ndarray, np.ndarray]:
        """(S_p, S_u): coefficient blocks for the lead-in and the future inputs."""
        return self.s[:, : self.n_past], self.s[:, self.n_past :]

    def predict(self, v: np.ndarray) -> np.ndarray:
        return self.s @ v


def fit_subspace(h: HankelSet, ridge: float = 0.0, rcond: float = 1e-10) -> SubspacePredictor:
    """Fit the sample subspace predictor Yf ~ S [Zp; Uf]."""
    s = regress_rows(
        h.yf,
        h.v_matrix(),
        ridge=ridge,
        rcond=rcond,
        label=f"regressor stack V (rho={h.rho}, tau={h.tau})",
    )
    return SubspacePredictor(s, h.rho, h.tau, h.dims)


@dataclass(frozen=True)
class LqFactors:
    """LQ factorisation of the stacked data [V; Yf] = L Q.

    L is block lower triangular with nonnegative diagonal; the rows of
    [Q_v; Q_e] are orthonormal.
    """

    l_vv: np.ndarray
    l_yv: np.ndarray
    l_ye: np.ndarray
    q_v: np.ndarray
    q_e: np.ndarray
    rho: int
    tau: int
    dims: Tuple[int, int]

    @property
    def nv(self) -> int:
        return self.l_vv.shape[0]

    def l_matrix(self) -> np.ndarray:
        top = np.hstack([self.l_vv, np.zeros((self.nv, self.l_ye.shape[1]))])
        bottom = np.hstack([self.l_yv, self.l_ye])
        return np.vstack([top, bottom])

    def q_matrix(self) -> np.ndarray:
        return np.vstack([self.q_v, self.q_e])


def lq_decompose(h: HankelSet) -> LqFactors:
    """LQ-factor the stacked training data [Zp; Uf; Yf]."""
    q, m = h.dims
    stacked = np.vstack([h.zp, h.uf, h.yf])
    rows = stacked.shape[0]
    if h.n_cols < rows:
        raise ValueError(
            f"need at least {rows} Hankel columns for the LQ factorisation, got {h.n_cols}"
        )
    q_t, r = scipy.linalg.qr(stacked.T, mode="economic")
    l = r.T.copy()
    q_rows = q_t.T.copy()
    signs = np.sign(np.diag(l))
    signs[signs == 0.0] = 1.0
    l *= signs[None, :]
    q_rows *= signs[:, None]
    nv = (q + m) * h.rho + m * h.tau
    return LqFactors(
        l_vv=l[:nv, :nv],
        l_yv=l[nv:, :nv],
        l_ye=l[nv:, nv:],
        q_v=q_rows[:nv],
        q_e=q_rows[nv:],
        rho=h.rho,
        tau=h.tau,
        dims=h.dims,
    )


@dataclass(frozen=True)
class TransientBank:
    """Bank of growing-history single-step predictors and the assembled multistep map.

    Block row k of `phi` predicts the output k steps ahead from the joint
    history up to one step before it; `h_hat` feeds the predicted outputs
    forward through (I - phi_y)^{-1}.
    """

    blocks: Tuple[np.ndarray, ...]
    phi: np.ndarray
    phi_p: np.ndarray
    phi_y: np.ndarray
    phi_u: np.ndarray
    h_hat: np.ndarray
    rho: int
    tau: int
    dims: Tuple[int, int]
    n_cols: int

    def predict(self, v: np.ndarray) -> np.ndarray:
        return self.h_hat @ v


def _assemble_bank(blocks, rho, tau, dims, n_cols) -> TransientBank:
    q, m = dims
    width = (q + m) * (rho + tau)
    phi = np.zeros((q * tau, width))
    for k, block in enumerate(blocks, start=1):
        phi[(k - 1) * q : k * q, : block.shape[1]] = block
    phi_p = phi[:, : (q + m) * rho].copy()
    phi_y = np.zeros((q * tau, q * tau))
    phi_u = np.zeros((q * tau, m * tau))
    for k in range(tau):
        base = (q + m) * (rho + k)
        phi_y[:, k * q : (k + 1) * q] = phi[:, base : base + q]
        phi_u[:, k * m : (k + 1) * m] = phi[:, base + q : base + q + m]
    eye = np.eye(q * tau)
    h_hat = np.linalg.solve(eye - phi_y, np.hstack([phi_p, phi_u]))
    return TransientBank(
        blocks=tuple(blocks),
        phi=phi,
        phi_p=phi_p,
        phi_y=phi_y,
        phi_u=phi_u,
        h_hat=h_hat,
        rho=rho,
        tau=tau,
        dims=dims,
        n_cols=n_cols,
    )


def fit_transient_bank(
    data: TrajectoryData,
    rho: int,
    tau: int,
    ridge: float = 0.0,
    rcond: float = 1e-10,
    chunk_size: int = 200_000,
) -> TransientBank:
    """Fit the transient single-step predictor bank from a trajectory.

    Every step-k regression uses the same maximal Hankel column set as
    build_hankel_set, so the residuals later computed by estimate_innovations
    are exactly the least-squares residuals of these fits.
    """
    q, m = data.q, data.m
    n_cols = data.length - rho - tau + 1
    if n_cols < 1:
        raise ValueError(
            f"trajectory of length {data.length} too short for rho={rho}, tau={tau}"
        )
    r = _r_factor_chunks(data.z(), rho + tau, n_cols, chunk_size)
    blocks = []
    for k in range(1, tau + 1):
        l = rho + k - 1
        c = (q + m) * l
        target_cols = slice(c, c + q)
        block = regress_rows(
            r[:c, target_cols].T,
            r[:c, :c].T,
            ridge=ridge,
            rcond=rcond,
            label=f"joint-history Gram for lead-in {l}",
        )
        blocks.append(block)
    return _assemble_bank(blocks, rho, tau, (q, m), n_cols)


@dataclass(frozen=True)
class InnovationEstimate:
    """Stacked single-step residuals, aligned column-wise with the HankelSet."""

    e_hat: np.ndarray
    rho: int
    tau: int
    dims: Tuple[int, int]


def estimate_innovations(bank: TransientBank, data: TrajectoryData) -> InnovationEstimate:
    """Residuals E = Yf - phi Z over the same columns the bank was fitted on."""
    q, m = bank.dims
    if (data.q, data.m) != bank.dims:
        raise ValueError("trajectory dimensions do not match the fitted bank")
    n_cols = data.length - bank.rho - bank.tau + 1
    if n_cols != bank.n_cols:
        raise ValueError(
            f"trajectory yields {n_cols} Hankel columns but bank was fitted on {bank.n_cols}"
        )
    z = hankel_matrix(data.z(), 1, bank.rho + bank.tau, n_cols)
    y_rows = np.concatenate(
        [
            np.arange((q + m) * (bank.rho + k), (q + m) * (bank.rho + k) + q)
            for k in range(bank.tau)
        ]
    )
    e_hat = z[y_rows] - bank.phi @ z
    return InnovationEstimate(e_hat, bank.rho, bank.tau, bank.dims)


@dataclass(frozen=True)
class BiasPredictor:
    """Estimated map from a query vector [z_p; u_f] to the subspace prediction bias."""

    beta_hat: np.ndarray
    m_hat: np.ndarray
    omega_hat: np.ndarray
    rho: int
    tau: int
    dims: Tuple[int, int]


def _bias_predictor_from_cross(cross, c_uz, residual_u, phi_y, rho, tau, dims) -> BiasPredictor:
    """Assemble M, Omega and the bias predictor from regression by-products.

    `cross` is E Uf^T, `c_uz` the regression of Uf on Zp, `residual_u` the
    matching residual coefficient rows (any factor R with R R^T equal to the
    projected input Gram works).
    """
    omega = residual_u @ residual_u.T
    omega = 0.5 * (omega + omega.T)
    try:
        cho = scipy.linalg.cho_factor(omega)
    except scipy.linalg.LinAlgError as exc:
        raise SingularDataError(
            "future-input Gram after lead-in projection is not positive definite"
        ) from exc
    m_hat = np.hstack(
        [-scipy.linalg.cho_solve(cho, c_uz), scipy.linalg.cho_solve(cho, np.eye(omega.shape[0]))]
    )
    q, _ = dims
    beta_hat = np.linalg.solve(np.eye(q * tau) - phi_y, cross @ m_hat)
    return BiasPredictor(beta_hat, m_hat, omega, rho, tau, dims)


def estimate_bias_predictor(
    bank: TransientBank,
    innov: InnovationEstimate,
    h: HankelSet,
    rcond: float = 1e-10,
) -> BiasPredictor:
    """Estimate the bias predictor from the innovation/input cross-moments.

    Omega is the Gram of the future inputs after projecting out the lead-in
    history; M stacks [-Omega^{-1} C_uz, Omega^{-1}] where C_uz regresses the
    future inputs on the lead-in. The bias predictor is
    (I - phi_y)^{-1} (E Uf^T) M.
    """
    if (bank.rho, bank.tau, bank.dims) != (h.rho, h.tau, h.dims):
        raise ValueError("bank and HankelSet shapes do not match")
    if innov.e_hat.shape[1] != h.n_cols:
        raise ValueError("innovation estimate and HankelSet column counts differ")
    c_uz = regress_rows(
        h.uf, h.zp, rcond=rcond, label=f"lead-in Gram (rho={h.rho})"
    )
    residual_u = h.uf - c_uz @ h.zp
    cross = innov.e_hat @ h.uf.T
    return _bias_predictor_from_cross(
        cross, c_uz, residual_u, bank.phi_y, h.rho, h.tau, h.dims
    )


@dataclass(frozen=True)
class PipelineFit:
    """Every estimator fitted from one orthogonal factorisation of the data."""

    h: HankelSet
    s: SubspacePredictor
    bank: TransientBank
    innov: InnovationEstimate
    beta: BiasPredictor
    lq: LqFactors


def fit_pipeline(
    data: TrajectoryData, rho: int, tau: int, ridge: float = 0.0, rcond: float = 1e-10
) -> PipelineFit:
    """Fit the subspace predictor, transient bank, innovations, bias predictor
    and LQ factors through a single QR of the stacked training data.

    Equal to running the standalone fits one by one (up to rounding), but the
    one N-sized factorisation makes repeated experiment batteries cheap.
    """
    h = build_hankel_set(data, rho, tau)
    q, m = h.dims
    nv = h.nv
    rows = nv + q * tau
    if h.n_cols < rows:
        raise ValueError(
            f"need at least {rows} Hankel columns for the joint factorisation, got {h.n_cols}"
        )
    stacked = np.vstack([h.zp, h.uf, h.yf])
    q_t, r = scipy.linalg.qr(stacked.T, mode="economic")
    l = r.T.copy()
    q_rows = q_t.T.copy()
    signs = np.sign(np.diag(l))
    signs[signs == 0.0] = 1.0
    l *= signs[None, :]
    q_rows *= signs[:, None]
    lq = LqFactors(
        l_vv=l[:nv, :nv].copy(),
        l_yv=l[nv:, :nv].copy(),
        l_ye=l[nv:, nv:].copy(),
        q_v=q_rows[:nv],
        q_e=q_rows[nv:],
        rho=rho,
        tau=tau,
        dims=h.dims,
    )
    # coefficient rows of the joint-history matrix in time order:
    # past blocks sit at the top of the stack, future blocks interleave
    # the Yf rows (stored last) with the Uf rows (stored after Zp)
    past = (q + m) * rho
    z_to_stack = np.empty(rows, dtype=int)
    z_to_stack[:past] = np.arange(past)
    for k in range(tau):
        z_base = past + (q + m) * k
        z_to_stack[z_base : z_base + q] = nv + k * q + np.arange(q)
        z_to_stack[z_base + q : z_base + q + m] = past + k * m + np.arange(m)
    l_z = l[z_to_stack]
    l_v = l[:nv]
    l_y = l[nv:]
    s_mat = regress_rows(
        l_y, l_v, ridge=ridge, rcond=rcond, label=f"regressor stack V (rho={rho}, tau={tau})"
    )
    s = SubspacePredictor(s_mat, rho, tau, h.dims)
    blocks = []
    for k in range(1, tau + 1):
        lead = rho + k - 1
        c = (q + m) * lead
        blocks.append(
            regress_rows(
                l_z[c : c + q],
                l_z[:c],
                ridge=ridge,
                rcond=rcond,
                label=f"joint-history Gram for lead-in {lead}",
            )
        )
    bank = _assemble_bank(blocks, rho, tau, h.dims, h.n_cols)
    e_coeff = l_y - bank.phi @ l_z
    innov = InnovationEstimate(e_coeff @ q_rows, rho, tau, h.dims)
    l_u = l[past:nv]
    l_zp = l[:past]
    c_uz = regress_rows(l_u, l_zp, rcond=rcond, label=f"lead-in Gram (rho={rho})")
    residual_u = l_u - c_uz @ l_zp
    cross = e_coeff @ l_u.T
    beta = _bias_predictor_from_cross(cross, c_uz, residual_u, bank.phi_y, rho, tau, h.dims)
    return PipelineFit(h, s, bank, innov, beta, lq)
