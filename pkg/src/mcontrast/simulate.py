"""Euler-Maruyama simulation of the joint slow-fast system with fully
reproducible randomness.

Replicate i of a Monte Carlo study uses the derived seed
``replicate_seed(master_seed, i)`` (a SplitMix64 finalizer of
master + (i+1)*golden), feeding an independent PCG64 stream.  Each path
consumes, per Euler step, first the W increments (noise_dim values) and
then the B increment (omitted for slaved-fast models, where Y = X/delta
exactly and only X is advanced).  Batch simulation draws the same
per-replicate streams, so batched and one-at-a-time runs are bitwise
identical.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BlowUp, DivisibilityError
from .model import MultiscaleModel, ScalePair

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
BLOWUP_GUARD = 1e12


def splitmix64(z: int) -> int:
    z &= _MASK
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9 & _MASK
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB & _MASK
    return z ^ (z >> 31)


def replicate_seed(master_seed: int, index: int) -> int:
    """Seed of replicate ``index`` derived from the master seed."""
    return splitmix64((master_seed + (index + 1) * _GOLDEN) & _MASK)


@dataclass
class Trajectory:
    """Fine-grid path of the joint system."""

    times: np.ndarray          # (N+1,)
    slow: np.ndarray           # (N+1, m)
    fast: np.ndarray           # (N+1,)
    seed: int
    scales: ScalePair

    @property
    def n_steps(self) -> int:
        return self.times.size - 1


@dataclass
class ObservationSet:
    """Discrete sample {x_{t_k}}, k = 1..n, on the uniform grid t_k = k*T/n,
    with the known initial point x0 at t_0 = 0."""

    x0: np.ndarray             # (m,)
    samples: np.ndarray        # (n, m)
    T: float

    def __post_init__(self):
        self.x0 = np.atleast_1d(np.asarray(self.x0, dtype=float))
        s = np.asarray(self.samples, dtype=float)
        if s.ndim == 1:
            s = s[:, None]
        self.samples = s
        if self.n < 1:
            raise ValueError("need at least one observation")

    @property
    def n(self) -> int:
        return self.samples.shape[0]

    @property
    def delta_t(self) -> float:
        return self.T / self.n

    @property
    def times(self) -> np.ndarray:
        return np.arange(1, self.n + 1) * self.delta_t


def _vec(raw, r, m):
    raw = np.asarray(raw, dtype=float)
    if m == 1 and raw.ndim <= 1:
        return np.broadcast_to(raw, (r,))[:, None]
    return np.broadcast_to(raw, (r, m))


def _sigma_mat(raw, r, m, w):
    raw = np.asarray(raw, dtype=float)
    if m == 1 and w == 1 and raw.ndim <= 1:
        return np.broadcast_to(raw, (r,))[:, None, None]
    return np.broadcast_to(raw, (r, m, w))


def _tau1_vec(raw, r, w):
    raw = np.asarray(raw, dtype=float)
    if w == 1 and raw.ndim <= 1:
        return np.broadcast_to(raw, (r,))[:, None]
    return np.broadcast_to(raw, (r, w))


def _euler(model: MultiscaleModel, theta, scales: ScalePair, seeds, n_steps,
           keep_every=None, store_full=False):
    """Shared Euler-Maruyama core, vectorized over replicates.

    Returns (kept_slow, kept_fast, full) where kept_* hold the states at
    every ``keep_every``-th step (shape (n_kept, R, ...)), and full is the
    complete path when ``store_full`` (single replicate only).
    """
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    eps, delta = scales.epsilon, scales.delta
    R = len(seeds)
    m = model.slow_dim
    w = model.noise_dim
    dt = model.horizon / n_steps
    sqdt = np.sqrt(dt)
    rngs = [np.random.default_rng(s) for s in seeds]
    ndraw = w if model.slaved_fast else w + 1

    X = np.broadcast_to(model.x0, (R, m)).astype(float).copy()
    Y = np.full(R, float(model.y0))
    if model.slaved_fast:
        Y = X[:, 0] / delta

    if store_full:
        if R != 1:
            raise ValueError("full storage is single-replicate only")
        full_slow = np.empty((n_steps + 1, m))
        full_fast = np.empty(n_steps + 1)
        full_slow[0] = X[0]
        full_fast[0] = Y[0]
    kept_slow = kept_fast = None
    if keep_every:
        n_kept = n_steps // keep_every
        kept_slow = np.empty((n_kept, R, m))
        kept_fast = np.empty((n_kept, R))

    ce_b = eps / delta * dt
    ce_w = np.sqrt(eps) * sqdt
    cf = eps / delta ** 2 * dt
    cg = dt / delta
    ct = np.sqrt(eps) / delta * sqdt

    scalar = (m == 1 and w == 1)
    chunk = int(min(n_steps, max(1024, 4_000_000 // max(R * ndraw, 1))))
    step = 0
    while step < n_steps:
        size = min(chunk, n_steps - step)
        Z = np.stack([r.standard_normal((size, ndraw)) for r in rngs], axis=-1)
        for i in range(size):
            xa = X[:, 0] if m == 1 else X
            if model.slaved_fast:
                Y = X[:, 0] / delta
            if scalar:
                bv = np.asarray(model.b(theta, xa, Y), dtype=float)
                cv = np.asarray(model.c(theta, xa, Y), dtype=float)
                sv = np.asarray(model.sigma(xa, Y), dtype=float)
                xn = X[:, 0] + ce_b * bv + dt * cv + ce_w * sv * Z[i, 0]
                if not model.slaved_fast:
                    fv = np.asarray(model.f(theta, xa, Y), dtype=float)
                    gv = np.asarray(model.g(theta, xa, Y), dtype=float)
                    t1 = np.asarray(model.tau1(xa, Y), dtype=float)
                    t2 = np.asarray(model.tau2(xa, Y), dtype=float)
                    Y = Y + cf * fv + cg * gv + ct * (t1 * Z[i, 0] + t2 * Z[i, 1])
                X[:, 0] = xn
            else:
                bv = _vec(model.b(theta, xa, Y), R, m)
                cv = _vec(model.c(theta, xa, Y), R, m)
                sv = _sigma_mat(model.sigma(xa, Y), R, m, w)
                dW = Z[i, :w]                       # (w, R)
                xn = (X + ce_b * bv + dt * cv
                      + ce_w * np.einsum("rmw,wr->rm", sv, dW))
                if not model.slaved_fast:
                    fv = np.asarray(model.f(theta, xa, Y), dtype=float)
                    gv = np.asarray(model.g(theta, xa, Y), dtype=float)
                    t1 = _tau1_vec(model.tau1(xa, Y), R, w)
                    t2 = np.asarray(model.tau2(xa, Y), dtype=float)
                    Y = Y + cf * fv + cg * gv + ct * (
                        np.einsum("rw,wr->r", t1, dW) + t2 * Z[i, w])
                X = xn
            step += 1
            if not (np.all(np.abs(X) < BLOWUP_GUARD)
                    and np.all(np.abs(Y) < BLOWUP_GUARD)):
                raise BlowUp(
                    "state magnitude exceeded %.0e at t = %.6g (step %d); "
                    "step size too coarse or dynamics non-recurrent"
                    % (BLOWUP_GUARD, step * dt, step), time=step * dt)
            if store_full:
                full_slow[step] = X[0]
                full_fast[step] = Y[0] if not model.slaved_fast else X[0, 0] / delta
            if keep_every and step % keep_every == 0:
                j = step // keep_every - 1
                kept_slow[j] = X
                kept_fast[j] = Y if not model.slaved_fast else X[:, 0] / delta
    if store_full:
        return kept_slow, kept_fast, (full_slow, full_fast)
    return kept_slow, kept_fast, None


def step_size_warnings(model: MultiscaleModel, scales: ScalePair,
                       n_steps: int) -> list[str]:
    dt = model.horizon / n_steps
    limit = 0.1 * scales.delta ** 2 / scales.epsilon
    out = []
    if dt > limit * (1 + 1e-12):
        out.append(
            "step T/N = %.3g exceeds 0.1*delta^2/eps = %.3g: fast dynamics "
            "under-resolved" % (dt, limit))
    return out


def simulate_path(model: MultiscaleModel, theta, scales: ScalePair,
                  seed: int, n_steps: int, warn: bool = True) -> Trajectory:
    """Euler-Maruyama path of the joint system on a uniform fine grid.

    Bit-reproducible for fixed (seed, n_steps, model, theta, scales).
    For slaved-fast models only X is advanced and Y = X/delta is recorded.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    if warn:
        import warnings as _w
        for msg in step_size_warnings(model, scales, n_steps):
            _w.warn(msg, RuntimeWarning, stacklevel=2)
    _, _, full = _euler(model, theta, scales, [seed], n_steps, store_full=True)
    slow, fast = full
    times = np.linspace(0.0, model.horizon, n_steps + 1)
    return Trajectory(times=times, slow=slow, fast=fast, seed=seed,
                      scales=scales)


def subsample(traj: Trajectory, n: int) -> ObservationSet:
    """Every (N/n)-th slow state; n must divide the fine step count."""
    N = traj.n_steps
    if n < 1 or N % n != 0:
        raise DivisibilityError("n = %d does not divide N = %d" % (n, N))
    stride = N // n
    return ObservationSet(x0=traj.slow[0].copy(),
                          samples=traj.slow[stride::stride].copy(),
                          T=float(traj.times[-1]))


def simulate_observations(model: MultiscaleModel, theta, scales: ScalePair,
                          seeds, n_steps: int, n_obs: int) -> np.ndarray:
    """Observation matrices for a batch of replicate seeds, without storing
    fine paths: returns (R, n_obs, m).  Bitwise identical to running
    simulate_path + subsample per seed."""
    if n_steps % n_obs != 0:
        raise DivisibilityError(
            "n = %d does not divide N = %d" % (n_obs, n_steps))
    kept_slow, _, _ = _euler(model, theta, scales, list(seeds), n_steps,
                             keep_every=n_steps // n_obs)
    return np.swapaxes(kept_slow, 0, 1)
