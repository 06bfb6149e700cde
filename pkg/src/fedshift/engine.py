"""Soft-clustering core: assignment updates, label statistics, objective, M-step.

The per-sample kernel for cluster k is

    kernel(x, y, k) = exp(-loss(x, y, theta_k)) * total_mass[k] / label_mass[k, y]

i.e. the model likelihood divided by an estimate of the cluster's label
marginal.  Dividing out the label marginal is what keeps clusters from forming
around skewed label distributions; only a genuinely different input-to-label
mapping (a concept) makes the kernel collapse.  The ``em`` kernel drops the
mass ratio and reduces to plain likelihood weighting.

Summation order is fixed (client, then sample, then cluster) so repeated runs
are bit-identical.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import models
from .errors import ConfigurationError, NumericError
from .models import ModelSpec

log = logging.getLogger(__name__)

Dataset = tuple[np.ndarray, np.ndarray]  # (features (N, d), labels (N,))

EPS_FLOOR_DEFAULT = 1e-12


@dataclass
class RCHyper:
    """Hyper-parameters of the clustering engine."""

    eta: float = 0.5
    eps_floor: float = EPS_FLOOR_DEFAULT
    adam_enabled: bool = False
    adam_alpha: float = 1.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.99
    adam_eps: float = 1e-8

    def __post_init__(self) -> None:
        if self.eta <= 0:
            raise ConfigurationError(f"eta must be positive, got {self.eta}")
        if self.eps_floor <= 0:
            raise ConfigurationError(f"eps_floor must be positive, got {self.eps_floor}")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ConfigurationError("adam betas must lie in [0, 1)")


@dataclass
class LabelStats:
    """Aggregated (possibly noised) per-cluster label masses.

    ``mass[k, y]`` approximates the assignment mass of label y in cluster k and
    is clamped at ``eps_floor``; ``total[k]`` is the exact total mass.
    """

    mass: np.ndarray
    total: np.ndarray
    noise_sigma: float = 0.0
    floored_pairs: int = 0

    @property
    def num_clusters(self) -> int:
        return len(self.total)


@dataclass
class AssignmentState:
    """Per-sample cluster weights (gamma) and per-client weights (omega).

    ``gamma[i]`` has shape (N_i, K_active); ``omega`` has shape (M, K_active).
    ``cluster_ids`` maps columns to stable ensemble indices.  Adam moment
    buffers mirror gamma's shape and exist only in Adam mode.
    """

    gamma: list[np.ndarray]
    omega: np.ndarray
    cluster_ids: tuple[int, ...]
    adam_nu: list[np.ndarray] | None = None
    adam_a: list[np.ndarray] | None = None

    @classmethod
    def uniform(cls, sample_counts: list[int], cluster_ids: tuple[int, ...], adam: bool = False) -> "AssignmentState":
        k = len(cluster_ids)
        gamma = [np.full((n, k), 1.0 / k) for n in sample_counts]
        omega = np.full((len(sample_counts), k), 1.0 / k)
        nu = [np.zeros((n, k)) for n in sample_counts] if adam else None
        a = [np.zeros((n, k)) for n in sample_counts] if adam else None
        return cls(gamma=gamma, omega=omega, cluster_ids=cluster_ids, adam_nu=nu, adam_a=a)

    def copy(self) -> "AssignmentState":
        return AssignmentState(
            gamma=[g.copy() for g in self.gamma],
            omega=self.omega.copy(),
            cluster_ids=self.cluster_ids,
            adam_nu=None if self.adam_nu is None else [m.copy() for m in self.adam_nu],
            adam_a=None if self.adam_a is None else [m.copy() for m in self.adam_a],
        )

    @property
    def num_clusters(self) -> int:
        return len(self.cluster_ids)

    def total_samples(self) -> int:
        return sum(g.shape[0] for g in self.gamma)

    def mass_fractions(self) -> np.ndarray:
        """Fraction of total assignment mass per cluster column."""
        total = np.zeros(self.num_clusters)
        for g in self.gamma:
            total += g.sum(axis=0)
        return total / self.total_samples()


def omega_from_gamma(gamma_i: np.ndarray) -> np.ndarray:
    """Per-client cluster weight: arithmetic mean of gamma over samples."""
    return gamma_i.mean(axis=0)


def cluster_loss_matrix(spec: ModelSpec, params_list: list[np.ndarray], X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-sample loss under every cluster model, shape (N, K)."""
    return np.stack([models.losses(spec, p, X, y) for p in params_list], axis=1)


def kernel_matrix(loss_mat: np.ndarray, y: np.ndarray, stats: LabelStats, kernel: str = "rc") -> np.ndarray:
    """Per-sample, per-cluster assignment kernel.

    ``rc``: exp(-loss) * total[k] / mass[k, y]; ``em``: exp(-loss).
    """
    lik = np.exp(-loss_mat)
    if kernel == "em":
        return lik
    if kernel != "rc":
        raise ConfigurationError(f"unknown kernel {kernel!r}")
    ratio = stats.total[None, :] / stats.mass[:, y].T
    return lik * ratio


def i_tilde(
    x: np.ndarray,
    y: int,
    params_k: np.ndarray,
    spec: ModelSpec,
    stats: LabelStats,
    cluster: int,
) -> float:
    """Likelihood-over-label-marginal kernel for one sample and one cluster column."""
    f = models.loss(x, y, params_k, spec)
    return float(np.exp(-f) * stats.total[cluster] / stats.mass[cluster, y])


def _assignment_rows(
    spec: ModelSpec,
    params_list: list[np.ndarray],
    X: np.ndarray,
    y: np.ndarray,
    omega_i: np.ndarray,
    stats: LabelStats,
    kernel: str,
) -> np.ndarray:
    """Responsibility rows gamma = omega * kernel, normalised per sample."""
    loss_mat = cluster_loss_matrix(spec, params_list, X, y)
    numer = kernel_matrix(loss_mat, y, stats, kernel) * omega_i[None, :]
    denom = numer.sum(axis=1)
    bad = ~(denom > 0)
    if bad.any():
        log.warning("e-step denominator underflow on %d samples; falling back to uniform", int(bad.sum()))
        denom[bad] = 1.0
    gamma = numer / denom[:, None]
    gamma[bad] = 1.0 / len(params_list)
    return gamma


def client_e_step(
    spec: ModelSpec,
    params_list: list[np.ndarray],
    X: np.ndarray,
    y: np.ndarray,
    omega_i: np.ndarray,
    stats: LabelStats,
    kernel: str = "rc",
) -> tuple[np.ndarray, np.ndarray]:
    """One client's assignment update; returns (gamma_i, omega_i)."""
    gamma = _assignment_rows(spec, params_list, X, y, omega_i, stats, kernel)
    return gamma, omega_from_gamma(gamma)


def client_e_step_adam(
    spec: ModelSpec,
    params_list: list[np.ndarray],
    X: np.ndarray,
    y: np.ndarray,
    omega_i: np.ndarray,
    gamma_prev: np.ndarray,
    nu: np.ndarray,
    a: np.ndarray,
    stats: LabelStats,
    hyper: RCHyper,
    kernel: str = "rc",
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Adam-accelerated assignment update for one client.

    The plain update target acts as the gradient signal g = gamma_prev - target;
    moments use constant (1 - beta) normalisers; the result is clamped at zero
    and renormalised per sample.
    """
    target = _assignment_rows(spec, params_list, X, y, omega_i, stats, kernel)
    g = gamma_prev - target
    nu = (1.0 - hyper.adam_beta1) * g + hyper.adam_beta1 * nu
    a = (1.0 - hyper.adam_beta2) * g**2 + hyper.adam_beta2 * a
    step = hyper.adam_alpha * (nu / (1.0 - hyper.adam_beta1)) / (
        np.sqrt(a / (1.0 - hyper.adam_beta2)) + hyper.adam_eps
    )
    raw = np.maximum(gamma_prev - step, 0.0)
    denom = raw.sum(axis=1)
    bad = ~(denom > 0)
    if bad.any():
        denom[bad] = 1.0
    gamma = raw / denom[:, None]
    gamma[bad] = 1.0 / gamma.shape[1]
    return gamma, omega_from_gamma(gamma), nu, a


def e_step(
    datasets: list[Dataset],
    params_list: list[np.ndarray],
    spec: ModelSpec,
    stats: LabelStats,
    state: AssignmentState,
    kernel: str = "rc",
) -> AssignmentState:
    """Assignment update over all clients; simplex invariants restored."""
    if not params_list:
        raise ConfigurationError("e_step requires at least one active cluster")
    gamma_new, omega_rows = [], []
    for (X, y), omega_i in zip(datasets, state.omega):
        g, o = client_e_step(spec, params_list, X, y, omega_i, stats, kernel)
        gamma_new.append(g)
        omega_rows.append(o)
    return AssignmentState(
        gamma=gamma_new,
        omega=np.stack(omega_rows),
        cluster_ids=state.cluster_ids,
        adam_nu=state.adam_nu,
        adam_a=state.adam_a,
    )


def e_step_adam(
    datasets: list[Dataset],
    params_list: list[np.ndarray],
    spec: ModelSpec,
    stats: LabelStats,
    state: AssignmentState,
    hyper: RCHyper,
    kernel: str = "rc",
) -> AssignmentState:
    """Adam-mode assignment update over all clients."""
    if state.adam_nu is None or state.adam_a is None:
        raise ConfigurationError("adam buffers not initialised; build the state with adam=True")
    gamma_new, omega_rows, nu_new, a_new = [], [], [], []
    for (X, y), omega_i, g_prev, nu, a in zip(datasets, state.omega, state.gamma, state.adam_nu, state.adam_a):
        g, o, nu2, a2 = client_e_step_adam(spec, params_list, X, y, omega_i, g_prev, nu, a, stats, hyper, kernel)
        gamma_new.append(g)
        omega_rows.append(o)
        nu_new.append(nu2)
        a_new.append(a2)
    return AssignmentState(
        gamma=gamma_new,
        omega=np.stack(omega_rows),
        cluster_ids=state.cluster_ids,
        adam_nu=nu_new,
        adam_a=a_new,
    )


def client_label_mass(gamma_i: np.ndarray, y_i: np.ndarray, num_classes: int) -> np.ndarray:
    """Exact per-cluster, per-label assignment mass for one client, shape (K, C)."""
    k = gamma_i.shape[1]
    mass = np.zeros((k, num_classes))
    for c in range(num_classes):
        sel = y_i == c
        if sel.any():
            mass[:, c] = gamma_i[sel].sum(axis=0)
    return mass


def label_stats(
    state: AssignmentState,
    datasets: list[Dataset],
    num_classes: int,
    noise_sigma: float = 0.0,
    noise_rngs: list[np.random.Generator] | None = None,
    eps_floor: float = EPS_FLOOR_DEFAULT,
) -> LabelStats:
    """Aggregate label masses over clients, optionally noised per client.

    Each client contributes its per-(cluster, label) mass plus zero-mean
    Gaussian noise of std ``noise_sigma``; the exact per-cluster totals are
    transmitted alongside.  Aggregates are clamped at ``eps_floor``.
    """
    if noise_sigma > 0 and noise_rngs is None:
        raise ConfigurationError("noise_sigma > 0 requires per-client noise generators")
    k = state.num_clusters
    mass = np.zeros((k, num_classes))
    total = np.zeros(k)
    for i, ((_, y), gamma_i) in enumerate(zip(datasets, state.gamma)):
        contrib = client_label_mass(gamma_i, y, num_classes)
        if noise_sigma > 0:
            contrib = contrib + noise_rngs[i].normal(0.0, noise_sigma, size=contrib.shape)
        mass += contrib
        total += gamma_i.sum(axis=0)
    floored = int((mass < eps_floor).sum())
    if floored:
        log.debug("clamped %d degenerate cluster-label masses at %.1e", floored, eps_floor)
    return LabelStats(
        mass=np.maximum(mass, eps_floor),
        total=total,
        noise_sigma=noise_sigma,
        floored_pairs=floored,
    )


def uniform_label_stats(datasets: list[Dataset], num_clusters: int, num_classes: int,
                        eps_floor: float = EPS_FLOOR_DEFAULT) -> LabelStats:
    """Cold-start statistics: uniform assignments make masses raw counts / K."""
    counts = np.zeros(num_classes)
    for _, y in datasets:
        counts += np.bincount(y, minlength=num_classes)
    mass = np.tile(counts / num_clusters, (num_clusters, 1))
    total = np.full(num_clusters, counts.sum() / num_clusters)
    floored = int((mass < eps_floor).sum())
    return LabelStats(mass=np.maximum(mass, eps_floor), total=total, floored_pairs=floored)


def objective(
    state: AssignmentState,
    params_list: list[np.ndarray],
    spec: ModelSpec,
    stats: LabelStats,
    datasets: list[Dataset],
) -> float:
    """Mean over samples of ln(sum_k omega_k * kernel_k).

    The simplex constraint term vanishes because omega rows are normalised.
    """
    total = 0.0
    count = 0
    for i, ((X, y), omega_i) in enumerate(zip(datasets, state.omega)):
        loss_mat = cluster_loss_matrix(spec, params_list, X, y)
        mix = (kernel_matrix(loss_mat, y, stats) * omega_i[None, :]).sum(axis=1)
        terms = np.log(mix)
        if not np.all(np.isfinite(terms)):
            j = int(np.flatnonzero(~np.isfinite(terms))[0])
            raise NumericError(f"non-finite objective term at client {i}, sample {j}")
        total += terms.sum()
        count += len(y)
    return total / count


def m_step_centralized(
    state: AssignmentState,
    params_list: list[np.ndarray],
    spec: ModelSpec,
    datasets: list[Dataset],
    eta: float,
) -> list[np.ndarray]:
    """Full-batch gradient step on every cluster with assignment-weighted samples.

    With a shared trunk, the trunk receives the summed trunk gradients of all
    clusters and the identical updated block is copied into every vector.
    """
    n_total = sum(len(y) for _, y in datasets)
    grads = [np.zeros(spec.num_params) for _ in params_list]
    for (X, y), gamma_i in zip(datasets, state.gamma):
        for k in range(len(params_list)):
            col = gamma_i[:, k]
            if col.any():
                grads[k] += models.weighted_grad_sum(spec, params_list[k], X, y, col)
    for k, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for cluster column {k}")
    scale = eta / n_total
    if spec.shared_trunk:
        t = spec.trunk_size
        trunk_grad = np.zeros(t)
        for g in grads:
            trunk_grad += g[:t]
        new_trunk = params_list[0][:t] - scale * trunk_grad
        return [np.concatenate([new_trunk, p[t:] - scale * g[t:]]) for p, g in zip(params_list, grads)]
    return [p - scale * g for p, g in zip(params_list, grads)]


def estimate_ascent_step(
    datasets: list[Dataset],
    params_list: list[np.ndarray],
    spec: ModelSpec,
    rng: np.random.Generator,
    num_pairs: int = 9,
    sample_cap: int = 48,
    safety: float = 1.5,
) -> tuple[float, float, float]:
    """Step size eta = 8 / (40 L + 9 sigma^2) from empirical estimates.

    sigma^2 is the largest mean squared per-sample gradient norm over the
    current cluster models; L comes from secant ratios of per-sample gradients
    at random nearby parameter pairs, inflated by ``safety``.  Both estimates
    err high, which only shrinks eta and preserves the ascent property.
    """
    sigma2 = 0.0
    for p in params_list:
        acc = 0.0
        n = 0
        for X, y in datasets:
            acc += models.per_sample_sq_grad_norms(spec, p, X, y).sum()
            n += len(y)
        sigma2 = max(sigma2, acc / n)

    all_x = np.concatenate([X for X, _ in datasets])
    all_y = np.concatenate([y for _, y in datasets])
    idx = rng.permutation(len(all_y))[: min(sample_cap, len(all_y))]
    lips = 0.0
    scales = (1e-3, 1e-2, 1e-1)
    for pair in range(num_pairs):
        base = params_list[pair % len(params_list)]
        step = scales[pair % len(scales)] * rng.standard_normal(spec.num_params)
        other = base + step
        dist = float(np.linalg.norm(step))
        for j in idx:
            sample = (all_x[j], int(all_y[j]))
            diff = models.loss_gradient(sample, base, spec) - models.loss_gradient(sample, other, spec)
            lips = max(lips, float(np.linalg.norm(diff)) / dist)
    lips *= safety
    eta = 8.0 / (40.0 * lips + 9.0 * sigma2)
    return eta, lips, sigma2


def centralized_fit(
    datasets: list[Dataset],
    params_list: list[np.ndarray],
    spec: ModelSpec,
    hyper: RCHyper,
    num_iters: int,
    num_classes: int,
    kernel: str = "rc",
    refresh_stats: bool = True,
) -> tuple[list[np.ndarray], AssignmentState, LabelStats, list[float]]:
    """Alternate assignment and gradient steps on one in-memory dataset.

    Statistics refresh once per iteration from the previous iteration's
    assignments; iteration 0 uses the uniform cold start.  Returns the
    objective value recorded after each iteration.
    """
    k = len(params_list)
    state = AssignmentState.uniform([len(y) for _, y in datasets], tuple(range(k)), adam=hyper.adam_enabled)
    stats = uniform_label_stats(datasets, k, num_classes, hyper.eps_floor)
    params = [p.copy() for p in params_list]
    trace: list[float] = []
    for it in range(num_iters):
        if refresh_stats and it > 0:
            stats = label_stats(state, datasets, num_classes, eps_floor=hyper.eps_floor)
        if hyper.adam_enabled:
            state = e_step_adam(datasets, params, spec, stats, state, hyper, kernel)
        else:
            state = e_step(datasets, params, spec, stats, state, kernel)
        params = m_step_centralized(state, params, spec, datasets, hyper.eta)
        trace.append(objective(state, params, spec, stats, datasets))
    return params, state, stats, trace
