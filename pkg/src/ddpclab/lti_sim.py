"""Discrete-time LTI simulation with measurement noise and static output feedback.

The plant convention throughout the package is

    y(t) = C x(t) + e(t)
    u(t) = K y(t) + alpha(t)
    x(t+1) = A x(t) + B u(t)

so the recorded pair (u(t), y(t)) at time t has y(t) independent of u(t),
and u(t) only reaches the output from y(t+1) onward.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np


@dataclass(frozen=True)
class LtiSystem:
    """State-space plant with additive Gaussian measurement noise."""

    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    noise_cov: np.ndarray

    def __post_init__(self):
        a = np.atleast_2d(np.asarray(self.a, dtype=float))
        b = np.atleast_2d(np.asarray(self.b, dtype=float))
        c = np.atleast_2d(np.asarray(self.c, dtype=float))
        cov = np.atleast_2d(np.asarray(self.noise_cov, dtype=float))
        if a.shape[0] != a.shape[1]:
            raise ValueError(f"A must be square, got {a.shape}")
        if b.shape[0] != a.shape[0]:
            raise ValueError(f"B must have {a.shape[0]} rows, got {b.shape}")
        if c.shape[1] != a.shape[0]:
            raise ValueError(f"C must have {a.shape[0]} columns, got {c.shape}")
        if cov.shape != (c.shape[0], c.shape[0]):
            raise ValueError(f"noise_cov must be {c.shape[0]}x{c.shape[0]}, got {cov.shape}")
        if not np.allclose(cov, cov.T):
            raise ValueError("noise_cov must be symmetric")
        if np.min(np.linalg.eigvalsh(cov)) < -1e-12 * max(1.0, np.abs(cov).max()):
            raise ValueError("noise_cov must be positive semidefinite")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "noise_cov", cov)

    @property
    def n(self) -> int:
        return self.a.shape[0]

    @property
    def m(self) -> int:
        return self.b.shape[1]

    @property
    def q(self) -> int:
        return self.c.shape[0]

    def noise_free(self) -> "LtiSystem":
        return LtiSystem(self.a, self.b, self.c, np.zeros((self.q, self.q)))


@dataclass(frozen=True)
class DoubleIntegratorConfig:
    """Euler-discretised point mass: position and velocity both measured."""

    dt: float = 1.0
    noise_var: float = 1e-4

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.noise_var < 0:
            raise ValueError(f"noise_var must be nonnegative, got {self.noise_var}")


def make_double_integrator(cfg: DoubleIntegratorConfig) -> LtiSystem:
    """Double integrator with A=[[1,dt],[0,1]], B=[0,dt], full state output."""
    a = np.array([[1.0, cfg.dt], [0.0, 1.0]])
    b = np.array([[0.0], [cfg.dt]])
    c = np.eye(2)
    return LtiSystem(a, b, c, cfg.noise_var * np.eye(2))


@dataclass(frozen=True)
class FeedbackLaw:
    """Static output feedback u = K y + alpha with Gaussian excitation alpha."""

    k: np.ndarray
    excitation_std: np.ndarray
    mode: str = "closed_loop"

    def __post_init__(self):
        k = np.atleast_2d(np.asarray(self.k, dtype=float))
        std = np.atleast_1d(np.asarray(self.excitation_std, dtype=float))
        if self.mode not in ("open_loop", "closed_loop"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode == "open_loop" and np.any(k != 0.0):
            raise ValueError("open_loop mode requires K = 0")
        if np.any(std < 0):
            raise ValueError("excitation_std entries must be nonnegative")
        if std.shape[0] != k.shape[0]:
            raise ValueError("excitation_std length must match input count")
        object.__setattr__(self, "k", k)
        object.__setattr__(self, "excitation_std", std)

    @property
    def excites(self) -> bool:
        """True when some channel carries excitation; required of training data
        (zero-excitation laws are allowed only for degenerate diagnostics)."""
        return bool(np.any(self.excitation_std > 0))

    @classmethod
    def open_loop(cls, excitation_std, m: int, q: int) -> "FeedbackLaw":
        std = np.broadcast_to(np.asarray(excitation_std, dtype=float), (m,))
        return cls(np.zeros((m, q)), np.array(std), "open_loop")

    @classmethod
    def closed_loop(cls, k, excitation_std) -> "FeedbackLaw":
        k = np.atleast_2d(np.asarray(k, dtype=float))
        std = np.broadcast_to(np.asarray(excitation_std, dtype=float), (k.shape[0],))
        return cls(k, np.array(std), "closed_loop")


@dataclass(frozen=True)
class TrajectoryData:
    """Recorded input/output run. u is T x m, y is T x q."""

    u: np.ndarray
    y: np.ndarray
    seed: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        u = np.atleast_2d(np.asarray(self.u, dtype=float))
        y = np.atleast_2d(np.asarray(self.y, dtype=float))
        if u.shape[0] != y.shape[0]:
            raise ValueError("u and y must have equal length")
        if u.shape[0] < 1:
            raise ValueError("trajectory must contain at least one step")
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "y", y)

    @property
    def length(self) -> int:
        return self.u.shape[0]

    @property
    def m(self) -> int:
        return self.u.shape[1]

    @property
    def q(self) -> int:
        return self.y.shape[1]

    def z(self) -> np.ndarray:
        """Joint signal z(t) = [y(t); u(t)], shape T x (q+m)."""
        return np.hstack([self.y, self.u])


def _noise_factor(cov: np.ndarray) -> np.ndarray:
    # cov may be singular (noise-free runs), so use an eigen factor not Cholesky
    vals, vecs = np.linalg.eigh(cov)
    vals = np.clip(vals, 0.0, None)
    return vecs * np.sqrt(vals)


def _roll_states(a: np.ndarray, x0: np.ndarray, drive: np.ndarray, block: int = 64) -> np.ndarray:
    """States of x(t+1) = a x(t) + drive(t), evaluated blockwise.

    Within a block the recursion unrolls to a lower-block-Toeplitz matrix of
    powers of `a` applied to the drive, replacing the per-step loop by one
    matrix product per block.
    """
    t_len, n = drive.shape
    block = min(block, max(t_len, 1))
    powers = np.empty((block + 1, n, n))
    powers[0] = np.eye(n)
    for i in range(block):
        powers[i + 1] = a @ powers[i]
    offsets = np.arange(block)[:, None] - 1 - np.arange(block)[None, :]
    tiles = powers[np.clip(offsets, 0, None)]
    tiles[offsets < 0] = 0.0
    toeplitz = tiles.transpose(0, 2, 1, 3).reshape(block * n, block * n)
    power_stack = powers[:block].reshape(block * n, n)
    states = np.empty((t_len, n))
    x = np.asarray(x0, dtype=float).reshape(n)
    start = 0
    while start < t_len:
        size = min(block, t_len - start)
        w = drive[start : start + size].ravel()
        if size == block:
            segment = power_stack @ x + toeplitz @ w
        else:
            segment = power_stack[: size * n] @ x + toeplitz[: size * n, : size * n] @ w
        states[start : start + size] = segment.reshape(size, n)
        x = a @ states[start + size - 1] + drive[start + size - 1]
        start += size
    return states


def simulate(
    sys: LtiSystem,
    law: FeedbackLaw,
    t_steps: int,
    x0: Optional[np.ndarray] = None,
    seed: int = 0,
    burn_in: int = 0,
) -> TrajectoryData:
    """Run the plant for t_steps recorded samples under the given law.

    The first burn_in steps are simulated and discarded so that recorded
    closed-loop data approximates a stationary joint process. Identical
    arguments produce bit-identical trajectories.
    """
    if t_steps < 1:
        raise ValueError("t_steps must be at least 1")
    if law.k.shape != (sys.m, sys.q):
        raise ValueError(f"K must be {sys.m}x{sys.q}, got {law.k.shape}")
    x = np.zeros(sys.n) if x0 is None else np.asarray(x0, dtype=float).reshape(sys.n)
    total = t_steps + burn_in
    rng = np.random.default_rng(seed)
    e = rng.standard_normal((total, sys.q)) @ _noise_factor(sys.noise_cov).T
    alpha = rng.standard_normal((total, sys.m)) * law.excitation_std
    # substituting u = K(Cx+e)+alpha gives x(t+1) = (A+BKC) x + BK e + B alpha,
    # which leaves a pure linear state recursion
    a_cl = sys.a + sys.b @ law.k @ sys.c
    drive = e @ (sys.b @ law.k).T + alpha @ sys.b.T
    states = _roll_states(a_cl, x, drive)
    y_rec = states @ sys.c.T + e
    u_rec = y_rec @ law.k.T + alpha
    meta = {
        "seed": seed,
        "burn_in": burn_in,
        "mode": law.mode,
        "k": law.k.copy(),
        "excitation_std": law.excitation_std.copy(),
        "noise_cov": sys.noise_cov.copy(),
    }
    return TrajectoryData(u_rec[burn_in:], y_rec[burn_in:], seed, meta)


def apply_input_sequence(
    sys: LtiSystem,
    x0: np.ndarray,
    u_seq: np.ndarray,
    seed: int = 0,
) -> np.ndarray:
    """Roll the plant forward applying u_seq verbatim.

    Step k applies u_seq[k] and then measures, so the returned row k is
    C (A x_{k-1} + B u_k) + e_k. Zero noise_cov gives the noise-free rollout.
    """
    u_seq = np.atleast_2d(np.asarray(u_seq, dtype=float))
    if u_seq.shape[1] != sys.m:
        u_seq = u_seq.reshape(-1, sys.m)
    steps = u_seq.shape[0]
    if steps < 1:
        raise ValueError("input sequence must contain at least one step")
    rng = np.random.default_rng(seed)
    e = rng.standard_normal((steps, sys.q)) @ _noise_factor(sys.noise_cov).T
    x = np.asarray(x0, dtype=float).reshape(sys.n)
    out = np.empty((steps, sys.q))
    for k in range(steps):
        x = sys.a @ x + sys.b @ u_seq[k]
        out[k] = sys.c @ x + e[k]
    return out


@dataclass(frozen=True)
class PersistencyReport:
    ok: bool
    min_singular_value: float
    min_z_rel_sv: float


def check_persistency(
    data: TrajectoryData,
    rho: int,
    tau: int,
    c_min: float = 1e-8,
    rcond: float = 1e-10,
) -> PersistencyReport:
    """Check the persistency-of-excitation condition on the training inputs.

    Returns the smallest eigenvalue of the input Hankel Gram over rows
    [1, rho+tau-1], and flags whether it clears c_min and whether every
    joint-history Gram over rows [1, l], l in [rho, rho+tau-1], is
    numerically nonsingular (relative singular value above rcond).
    """
    from ddpclab.hankel import hankel_matrix

    depth = rho + tau - 1
    if data.length < depth:
        raise ValueError(
            f"trajectory of length {data.length} too short for window depth {depth}"
        )
    n_cols = data.length - depth + 1
    u_h = hankel_matrix(data.u, 1, depth, n_cols)
    gram = u_h @ u_h.T
    min_eig = float(np.min(np.linalg.eigvalsh(gram)))

    z = data.z()
    min_rel = np.inf
    for l in range(rho, rho + tau):
        if data.length < l:
            break
        cols = data.length - l + 1
        z_h = hankel_matrix(z, 1, l, cols)
        sv = np.linalg.svd(z_h, compute_uv=False)
        rel = float(sv[-1] / sv[0]) if sv[0] > 0 else 0.0
        min_rel = min(min_rel, rel)
    ok = (min_eig >= c_min) and (min_rel > rcond)
    return PersistencyReport(ok, min_eig, min_rel)
