"""Scaled block-Hankel matrices and the Zp/Uf/Yf partition used by all fits.

Windows are indexed 1-based: block (i, j) of the Hankel over rows [t0, t1]
holds w(t0+i+j-2) / sqrt(N).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Tuple

import numpy as np

if TYPE_CHECKING:  # pragma: no cover
    from ddpclab.lti_sim import TrajectoryData


def hankel_matrix(w: np.ndarray, t0: int, t1: int, n_cols: int) -> np.ndarray:
    """Block-Hankel of signal w over rows [t0, t1] with n_cols columns, 1/sqrt(N) scaled."""
    w = np.asarray(w, dtype=float)
    if w.ndim == 1:
        w = w[:, None]
    t_len = w.shape[0]
    if not (1 <= t0 <= t1):
        raise ValueError(f"need 1 <= t0 <= t1, got t0={t0}, t1={t1}")
    if n_cols < 1:
        raise ValueError("n_cols must be at least 1")
    if t1 + n_cols - 1 > t_len:
        raise ValueError(
            f"window [{t0},{t1}] with {n_cols} columns exceeds signal length {t_len}"
        )
    depth = t1 - t0 + 1
    # views[s, :, i] = w[s+i, :]; column j of the Hankel stacks w(t0-1+j ... t0-1+j+depth-1)
    views = np.lib.stride_tricks.sliding_window_view(w, depth, axis=0)
    cols = views[t0 - 1 : t0 - 1 + n_cols]
    return np.transpose(cols, (0, 2, 1)).reshape(n_cols, depth * w.shape[1]).T / np.sqrt(n_cols)


@dataclass(frozen=True)
class HankelSet:
    """Partitioned training Hankels: past joint history, future inputs, future outputs."""

    zp: np.ndarray
    uf: np.ndarray
    yf: np.ndarray
    rho: int
    tau: int
    n_cols: int
    dims: Tuple[int, int]  # (q, m)

    @property
    def q(self) -> int:
        return self.dims[0]

    @property
    def m(self) -> int:
        return self.dims[1]

    @property
    def nv(self) -> int:
        """Row count of V = [Zp; Uf]."""
        q, m = self.dims
        return (q + m) * self.rho + m * self.tau

    def v_matrix(self) -> np.ndarray:
        """Stacked regressor matrix V = [Zp; Uf]."""
        return np.vstack([self.zp, self.uf])

    def z_full(self) -> np.ndarray:
        """Joint-history Hankel over rows [1, rho+tau], assembled from the partitions.

        Rows are z(t) = [y(t); u(t)] blocks; past blocks come from Zp and the
        future blocks interleave the matching Yf and Uf block rows.
        """
        q, m = self.dims
        rows = (q + m) * (self.rho + self.tau)
        z = np.empty((rows, self.n_cols))
        z[: (q + m) * self.rho] = self.zp
        for k in range(self.tau):
            base = (q + m) * (self.rho + k)
            z[base : base + q] = self.yf[k * q : (k + 1) * q]
            z[base + q : base + q + m] = self.uf[k * m : (k + 1) * m]
        return z


def build_hankel_set(data: "TrajectoryData", rho: int, tau: int) -> HankelSet:
    """Build the maximal-column HankelSet for the trajectory: N = T - rho - tau + 1."""
    if rho < 1 or tau < 1:
        raise ValueError("rho and tau must be at least 1")
    t_len = data.length
    n_cols = t_len - rho - tau + 1
    if n_cols < 1:
        raise ValueError(
            f"trajectory of length {t_len} too short for rho={rho}, tau={tau}"
        )
    z = data.z()
    zp = hankel_matrix(z, 1, rho, n_cols)
    uf = hankel_matrix(data.u, rho + 1, rho + tau, n_cols)
    yf = hankel_matrix(data.y, rho + 1, rho + tau, n_cols)
    return HankelSet(zp, uf, yf, rho, tau, n_cols, (data.q, data.m))
