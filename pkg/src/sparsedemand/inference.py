"""Constraint transforms, Hamiltonian Monte Carlo and convergence diagnostics.

The sampler is plain HMC with a fixed leapfrog step count, dual-averaging
step-size adaptation toward a target acceptance rate, and a diagonal mass
matrix estimated during warmup. Chains are independent with per-chain RNG
streams derived from (seed, chain index), so runs are bit-reproducible.
Convergence is summarized per parameter by split R-hat and effective sample
size.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from sparsedemand.model import EXP, IDENTITY, ONE_PLUS_EXP, ParamLayout


@dataclass(frozen=True)
class SamplerConfig:
    chains: int = 4
    warmup_iters: int = 1000
    sampling_iters: int = 1000
    leapfrog_steps: int = 32
    target_acceptance: float = 0.8
    seed: int = 0
    max_init_retries: int = 100

    def __post_init__(self):
        if self.chains < 1 or self.warmup_iters < 1 or self.sampling_iters < 1:
            raise ValueError("chains and iteration counts must be positive")
        if not 0.0 < self.target_acceptance < 1.0:
            raise ValueError("target_acceptance must be in (0, 1)")
        if self.leapfrog_steps < 1:
            raise ValueError("leapfrog_steps must be >= 1")


class InitializationError(RuntimeError):
    """No finite starting point found within the retry budget."""


# ---------------------------------------------------------------------------
# Constraint transforms


def to_unconstrained(vec: np.ndarray, layout: ParamLayout) -> np.ndarray:
    """Map a constrained parameter vector to the sampler's unconstrained space.

    Positive parameters map through log, shifted-support ones through
    ``log(x - 1)``. Boundary values (``kappa = 0``, ``mu = 1``) are rejected.
    """
    vec = np.asarray(vec, dtype=float)
    if vec.shape != (layout.dim,):
        raise ValueError(f"expected vector of length {layout.dim}")
    codes = layout.codes
    bad = ((codes == EXP) & (vec <= 0.0)) | ((codes == ONE_PLUS_EXP) & (vec <= 1.0))
    if np.any(bad):
        i = int(np.argmax(bad))
        raise ValueError(
            f"parameter {layout.names[i]} = {vec[i]} is at or below its support boundary"
        )
    u = vec.copy()
    u[codes == EXP] = np.log(vec[codes == EXP])
    u[codes == ONE_PLUS_EXP] = np.log(vec[codes == ONE_PLUS_EXP] - 1.0)
    return u


def from_unconstrained(u: np.ndarray, layout: ParamLayout) -> tuple[np.ndarray, float]:
    """Inverse transform; returns the constrained vector and the log-Jacobian."""
    u = np.asarray(u, dtype=float)
    codes = layout.codes
    x = u.copy()
    x[codes == EXP] = np.exp(u[codes == EXP])
    x[codes == ONE_PLUS_EXP] = 1.0 + np.exp(u[codes == ONE_PLUS_EXP])
    logjac = float(np.sum(u[codes != IDENTITY]))
    return x, logjac


# ---------------------------------------------------------------------------
# Draws container


@dataclass
class PosteriorDraws:
    """Retained constrained-space draws, one matrix per chain."""

    names: tuple[str, ...]
    draws: np.ndarray  # (chains, samples, dim)
    accept_rate: np.ndarray
    divergences: np.ndarray
    step_sizes: np.ndarray
    seed: int = 0

    @property
    def n_chains(self) -> int:
        return self.draws.shape[0]

    @property
    def n_samples(self) -> int:
        return self.draws.shape[1]

    def flat(self) -> np.ndarray:
        """All chains stacked, shape (chains * samples, dim)."""
        return self.draws.reshape(-1, self.draws.shape[-1])

    def column(self, name: str) -> np.ndarray:
        return self.draws[:, :, self.names.index(name)]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["chain", "iter", *self.names])
            for c in range(self.n_chains):
                for s in range(self.n_samples):
                    writer.writerow(
                        [c, s, *(format(v, ".17g") for v in self.draws[c, s])]
                    )

    @classmethod
    def from_csv(cls, path) -> "PosteriorDraws":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if header[:2] != ["chain", "iter"]:
                raise ValueError("draw file must start with chain,iter columns")
            names = tuple(header[2:])
            rows = [(int(r[0]), int(r[1]), [float(v) for v in r[2:]]) for r in reader]
        if not rows:
            raise ValueError("draw file has no rows")
        chains = 1 + max(r[0] for r in rows)
        samples = 1 + max(r[1] for r in rows)
        draws = np.zeros((chains, samples, len(names)))
        for c, s, vals in rows:
            draws[c, s] = vals
        return cls(
            names=names,
            draws=draws,
            accept_rate=np.full(chains, np.nan),
            divergences=np.zeros(chains, dtype=int),
            step_sizes=np.full(chains, np.nan),
        )


# ---------------------------------------------------------------------------
# HMC

_DIVERGENCE_ENERGY = 1000.0


def _batch_fn(target):
    """Row-batched (values, gradients) callable for any target."""
    fn = getattr(target, "value_and_grad_batch", None)
    if fn is not None:
        return fn

    def shim(u_rows):
        vals = np.empty(u_rows.shape[0])
        grads = np.empty_like(u_rows)
        for i, row in enumerate(u_rows):
            vals[i], grads[i] = target.value_and_grad(row)
        return vals, grads

    return shim


def _leapfrog_batch(u, p, grads, steps, n_steps, inv_mass, batch):
    """Lockstep leapfrog for all chains; rows with non-finite values carry NaN."""
    eps = steps[:, None]
    with np.errstate(invalid="ignore", over="ignore"):
        u = u + 0.0
        p = p + 0.5 * eps * grads
        vals = np.full(u.shape[0], -np.inf)
        for k in range(n_steps):
            u = u + eps * inv_mass * p
            vals, grads = batch(u)
            p = p + (eps if k < n_steps - 1 else 0.5 * eps) * grads
    return u, p, vals, grads


def _find_reasonable_step(u, value, grad, inv_mass, batch, rng) -> float:
    """Doubling/halving heuristic for one chain's initial step size."""

    def try_step(step: float) -> float:
        u1, p1, v1, _ = _leapfrog_batch(
            u[None], p[None], grad[None], np.array([step]), 1, inv_mass[None], batch
        )
        if not np.isfinite(v1[0]):
            return -np.inf
        h1 = -v1[0] + 0.5 * float(p1[0] * inv_mass @ p1[0])
        return h0 - h1

    step = 0.1
    p = rng.standard_normal(len(u)) / np.sqrt(inv_mass)
    h0 = -value + 0.5 * float(p * inv_mass @ p)
    log_ratio = try_step(step)
    direction = 1.0 if log_ratio > math.log(0.5) else -1.0
    for _ in range(100):
        if direction * log_ratio <= direction * math.log(0.5):
            break
        step *= 2.0**direction
        if step < 1e-10 or step > 1e6:
            break
        log_ratio = try_step(step)
    return float(np.clip(step, 1e-10, 1e6))


@dataclass
class _DualAveraging:
    """Nesterov dual averaging of log step size toward a target acceptance."""

    target: float
    mu: float
    gamma: float = 0.05
    t0: float = 10.0
    kappa: float = 0.75
    count: int = 0
    h_bar: float = 0.0
    log_step_bar: float = 0.0

    def update(self, accept_prob: float) -> float:
        self.count += 1
        m = self.count
        eta_h = 1.0 / (m + self.t0)
        self.h_bar = (1.0 - eta_h) * self.h_bar + eta_h * (self.target - accept_prob)
        log_step = self.mu - math.sqrt(m) / self.gamma * self.h_bar
        eta = m**-self.kappa
        self.log_step_bar = eta * log_step + (1.0 - eta) * self.log_step_bar
        return math.exp(log_step)

    @property
    def adapted_step(self) -> float:
        return math.exp(self.log_step_bar)


def _constrain_rows(u: np.ndarray, codes: np.ndarray) -> np.ndarray:
    x = u.copy()
    exp_mask = codes == EXP
    shift_mask = codes == ONE_PLUS_EXP
    x[..., exp_mask] = np.exp(u[..., exp_mask])
    x[..., shift_mask] = 1.0 + np.exp(u[..., shift_mask])
    return x


def run_mcmc(target, cfg: SamplerConfig, progress=None) -> PosteriorDraws:
    """Sample the target log posterior with HMC.

    ``target`` exposes ``dim``, ``names``, ``value_and_grad(u)`` (or the
    batched ``value_and_grad_batch``) and ``sample_init(rng)``;
    :class:`~sparsedemand.model.PosteriorBundle` satisfies this. Chains are
    advanced in lockstep so one batched gradient call serves every chain, with
    per-chain RNG streams, step sizes and mass matrices. Draws come back in
    constrained space when the target carries a layout.
    """
    n_chains, dim = cfg.chains, target.dim
    batch = _batch_fn(target)
    layout = getattr(target, "layout", None)
    rngs = [np.random.default_rng((cfg.seed, c)) for c in range(n_chains)]

    u = np.empty((n_chains, dim))
    vals = np.empty(n_chains)
    grads = np.empty((n_chains, dim))
    for c in range(n_chains):
        for _ in range(cfg.max_init_retries):
            start = target.sample_init(rngs[c])
            u0 = (
                to_unconstrained(start, layout)
                if layout is not None
                else np.asarray(start, dtype=float)
            )
            v, g = batch(u0[None])
            if np.isfinite(v[0]) and np.all(np.isfinite(g[0])):
                u[c], vals[c], grads[c] = u0, v[0], g[0]
                break
        else:
            raise InitializationError(
                f"chain {c}: no finite starting point after {cfg.max_init_retries} prior draws"
            )

    inv_mass = np.ones((n_chains, dim))
    steps = np.array(
        [
            _find_reasonable_step(u[c], vals[c], grads[c], inv_mass[c], batch, rngs[c])
            for c in range(n_chains)
        ]
    )
    adapt = [
        _DualAveraging(target=cfg.target_acceptance, mu=math.log(10.0 * steps[c]))
        for c in range(n_chains)
    ]

    warmup = cfg.warmup_iters
    mass_window_start = warmup // 4
    mass_update_at = warmup // 2 if warmup >= 40 else None
    window_draws: list[np.ndarray] = []

    kept = np.empty((n_chains, cfg.sampling_iters, dim))
    divergences = np.zeros(n_chains, dtype=int)
    accepts = np.zeros(n_chains)

    total = warmup + cfg.sampling_iters
    for it in range(total):
        z = np.stack([rngs[c].standard_normal(dim) for c in range(n_chains)])
        p0 = z / np.sqrt(inv_mass)
        jitter = np.array([1.0 + 0.1 * (2.0 * rngs[c].random() - 1.0) for c in range(n_chains)])
        h0 = -vals + 0.5 * np.sum(p0 * p0 * inv_mass, axis=1)
        u1, p1, v1, g1 = _leapfrog_batch(
            u, p0, grads, steps * jitter, cfg.leapfrog_steps, inv_mass, batch
        )
        with np.errstate(invalid="ignore", over="ignore"):
            h1 = -v1 + 0.5 * np.sum(p1 * p1 * inv_mass, axis=1)
            delta = h0 - h1
        finite = np.isfinite(delta)
        delta = np.where(finite, delta, -np.inf)
        diverged = ~finite | (-delta > _DIVERGENCE_ENERGY)
        accept_prob = np.where(diverged, 0.0, np.exp(np.minimum(0.0, delta)))
        uniforms = np.array([rngs[c].random() for c in range(n_chains)])
        with np.errstate(divide="ignore"):
            take = ~diverged & (np.log(uniforms) < delta)
        u[take], vals[take], grads[take] = u1[take], v1[take], g1[take]

        if it < warmup:
            for c in range(n_chains):
                steps[c] = adapt[c].update(float(accept_prob[c]))
            if mass_update_at is not None and mass_window_start <= it < mass_update_at:
                window_draws.append(u.copy())
            if mass_update_at is not None and it == mass_update_at - 1 and len(window_draws) >= 10:
                sample = np.asarray(window_draws)  # (window, chains, dim)
                var = sample.var(axis=0, ddof=1)
                n = sample.shape[0]
                inv_mass = np.maximum((n / (n + 5.0)) * var + (5.0 / (n + 5.0)) * 1e-3, 1e-8)
                for c in range(n_chains):
                    steps[c] = _find_reasonable_step(
                        u[c], vals[c], grads[c], inv_mass[c], batch, rngs[c]
                    )
                    adapt[c] = _DualAveraging(
                        target=cfg.target_acceptance, mu=math.log(10.0 * steps[c])
                    )
            if it == warmup - 1:
                steps = np.array([a.adapted_step for a in adapt])
        else:
            kept[:, it - warmup] = u
            accepts += accept_prob
            divergences += diverged.astype(int)
        if progress is not None and (it + 1) % 500 == 0:
            progress(it + 1, total)

    if layout is not None:
        kept = _constrain_rows(kept, layout.codes)
    return PosteriorDraws(
        names=tuple(target.names),
        draws=kept,
        accept_rate=accepts / cfg.sampling_iters,
        divergences=divergences,
        step_sizes=steps,
        seed=cfg.seed,
    )


# ---------------------------------------------------------------------------
# Diagnostics

RHAT_THRESHOLD = 1.05


def _split_chains(x: np.ndarray) -> np.ndarray:
    m, n = x.shape
    half = n // 2
    return np.concatenate([x[:, :half], x[:, half : 2 * half]], axis=0)


def _split_rhat(x: np.ndarray) -> float:
    s = _split_chains(x)
    m, n = s.shape
    if n < 2:
        return float("nan")
    means = s.mean(axis=1)
    within = s.var(axis=1, ddof=1).mean()
    between = n * means.var(ddof=1)
    if within == 0.0:
        return float("nan")
    var_plus = (n - 1) / n * within + between / n
    return float(math.sqrt(var_plus / within))


def _autocovariance(x: np.ndarray) -> np.ndarray:
    n = x.shape[-1]
    centered = x - x.mean(axis=-1, keepdims=True)
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(centered, size, axis=-1)
    acov = np.fft.irfft(f * np.conj(f), size, axis=-1)[..., :n].real
    return acov / n


def _ess(x: np.ndarray) -> float:
    """Effective sample size with Geyer's initial monotone sequence."""
    s = _split_chains(x)
    m, n = s.shape
    if n < 4:
        return float("nan")
    acov = _autocovariance(s)
    chain_var = acov[:, 0] * n / (n - 1)
    within = chain_var.mean()
    means = s.mean(axis=1)
    between_over_n = means.var(ddof=1)
    var_plus = within * (n - 1) / n + between_over_n
    if var_plus == 0.0 or within == 0.0:
        return float("nan")
    rho = 1.0 - (within - acov.mean(axis=0)) / var_plus
    rho[0] = 1.0
    max_pairs = (n - 2) // 2
    pair_sums = []
    for k in range(max_pairs):
        p = rho[2 * k] + rho[2 * k + 1]
        if p <= 0.0:
            break
        pair_sums.append(p)
    if not pair_sums:
        return float(m * n)
    pair_sums = np.minimum.accumulate(pair_sums)
    tau = -1.0 + 2.0 * float(np.sum(pair_sums))
    tau = max(tau, 1.0 / math.log10(max(m * n, 10)))
    return float(m * n / tau)


@dataclass(frozen=True)
class ParamDiagnostics:
    rhat: float
    ess: float
    degenerate: bool


def diagnostics(draws: PosteriorDraws) -> dict[str, ParamDiagnostics]:
    """Split R-hat and ESS per parameter. Needs at least 2 chains.

    A constant (zero-variance) parameter has undefined R-hat and is reported
    with ``degenerate=True``.
    """
    if draws.n_chains < 2:
        raise ValueError("diagnostics need at least 2 chains")
    out = {}
    for j, name in enumerate(draws.names):
        x = draws.draws[:, :, j]
        rhat = _split_rhat(x)
        ess = _ess(x)
        out[name] = ParamDiagnostics(
            rhat=rhat, ess=ess, degenerate=not np.isfinite(rhat)
        )
    return out


def nonconverged(diag: dict[str, ParamDiagnostics], threshold: float = RHAT_THRESHOLD) -> list[str]:
    """Names of parameters whose split R-hat exceeds the threshold."""
    return [n for n, d in diag.items() if np.isfinite(d.rhat) and d.rhat > threshold]


def write_diagnostics_csv(diag: dict[str, ParamDiagnostics], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["parameter", "rhat", "ess", "degenerate"])
        for name, d in diag.items():
            writer.writerow([name, format(d.rhat, ".6g"), format(d.ess, ".6g"), int(d.degenerate)])
