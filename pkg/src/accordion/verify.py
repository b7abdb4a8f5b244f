"""Numerical checks of the sparse-gradient and critical-regime claims.

* LASSO on two-Gaussian data: the expected gradient is sparse and, for small
  noise, every stochastic gradient stays within the smallest nonzero entry of
  it (Monte Carlo against a Chebyshev bound).
* Top-K support overlap between stochastic gradients.
* Hessian top eigenvalues through finite-difference Hessian-vector products.
* Critical-regime flags from a per-epoch scalar trace.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .linalg import EigResult, norm2, power_iteration_top_eig
from .model import Dataset, Model, flatten, lasso_example_grads, loss_and_grad, unflatten

MAX_HESSIAN_PARAMS = 1000


@dataclass
class LemmaParams:
    mu: np.ndarray
    w: np.ndarray
    lam: float
    sigma: float
    n: int = 1000  # samples per batch
    eps: float = 0.1
    gamma_min: float | None = None  # smallest |nonzero| of the expected gradient; derived if None
    trials: int = 200

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.w = np.asarray(self.w, dtype=np.float64)
        if self.mu.shape != self.w.shape or self.mu.ndim != 1:
            raise ValueError("mu and w must be vectors of the same length")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.lam < 0:
            raise ValueError("lam must be nonnegative")

    @property
    def k1(self) -> int:
        return int(np.count_nonzero(self.mu))

    @property
    def k2(self) -> int:
        return int(np.count_nonzero(self.w))

    @property
    def dim(self) -> int:
        return len(self.mu)


def expected_lasso_grad(p: LemmaParams, exact: bool = True) -> np.ndarray:
    """Expectation of ``x (x^T w) - x y + lam sign(w)`` under the two-Gaussian model.

    With ``E[x x^T] = sigma^2 I + mu mu^T`` and ``E[x y] = mu`` the expectation is
    ``sigma^2 w + mu (mu^T w) - mu + lam sign(w)``. ``exact=False`` returns the
    simplified form ``w + lam sign(w) + mu (mu^T w)``, which drops the label term
    and fixes ``sigma = 1``. Both are supported on ``supp(w) | supp(mu)``.
    """
    mu, w = p.mu, p.w
    if exact:
        g = p.sigma**2 * w + mu * (mu @ w) - mu + p.lam * np.sign(w)
    else:
        g = w + p.lam * np.sign(w) + mu * (mu @ w)
    assert np.count_nonzero(g) <= p.k1 + p.k2
    return g


def sample_lasso_grads(p: LemmaParams, count: int, rng: np.random.Generator) -> np.ndarray:
    """``count`` single-example stochastic gradients as rows."""
    y = np.where(rng.random(count) < 0.5, -1.0, 1.0)
    x = y[:, None] * p.mu[None, :] + p.sigma * rng.standard_normal((count, p.dim))
    return lasso_example_grads(p.w, x, y, p.lam)


def coordinate_variance_bound(p: LemmaParams) -> float:
    """Per-coordinate variance bound ``(sigma^4 + 2 max|mu|^2 sigma^2) |w|^2 + sigma^2``."""
    s2 = p.sigma**2
    mu_max = float(np.max(np.abs(p.mu)))
    return (s2 * s2 + 2.0 * mu_max**2 * s2) * float(p.w @ p.w) + s2


@dataclass
class LemmaReport:
    support_size: int
    k1: int
    k2: int
    gamma_min: float
    empirical_tail: float
    chebyshev_bound: float
    coordinate_tail_max: float
    coordinate_bound: float
    trials: int
    n: int

    def checks(self) -> dict[str, bool]:
        out = {"support_size <= k1 + k2": self.support_size <= self.k1 + self.k2}
        if self.chebyshev_bound < 1.0:
            out["empirical_tail <= chebyshev_bound"] = self.empirical_tail <= self.chebyshev_bound
        if self.coordinate_bound < 1.0:
            out["coordinate_tail <= coordinate_bound"] = self.coordinate_tail_max <= self.coordinate_bound
        return out

    def to_dict(self) -> dict:
        return asdict(self)


def lemma_montecarlo(p: LemmaParams, seed: int = 0) -> LemmaReport:
    """Estimate how often a batch of ``n`` stochastic gradients strays ``gamma_min`` from the mean.

    ``empirical_tail`` is the fraction of ``trials`` batches in which some sample
    deviates from the expected gradient by at least ``gamma_min`` in some
    coordinate; ``chebyshev_bound`` is ``n d Var / gamma^2`` for the variance
    bound above. ``coordinate_tail_max`` is the largest single-sample,
    single-coordinate exceedance frequency, compared with ``Var / gamma^2``.
    """
    mean = expected_lasso_grad(p)
    nz = np.abs(mean[mean != 0])
    gamma = p.gamma_min if p.gamma_min is not None else (float(nz.min()) if nz.size else 0.0)
    if gamma <= 0:
        raise ValueError("expected gradient has no nonzero entry; gamma_min is undefined")
    var = coordinate_variance_bound(p)
    rng = np.random.default_rng([seed, 0x1E44A])
    hits = 0
    coord_hits = np.zeros(p.dim)
    for _ in range(p.trials):
        dev = np.abs(sample_lasso_grads(p, p.n, rng) - mean)
        exceed = dev >= gamma
        hits += bool(exceed.any())
        coord_hits += exceed.sum(axis=0)
    return LemmaReport(
        support_size=int(np.count_nonzero(mean)),
        k1=p.k1,
        k2=p.k2,
        gamma_min=gamma,
        empirical_tail=hits / p.trials,
        chebyshev_bound=p.n * p.dim * var / gamma**2,
        coordinate_tail_max=float(coord_hits.max() / (p.trials * p.n)),
        coordinate_bound=var / gamma**2,
        trials=p.trials,
        n=p.n,
    )


def random_sparse_instance(dim: int, k1: int, k2: int, rng: np.random.Generator, lam: float = 0.1, sigma: float = 0.1) -> LemmaParams:
    mu = np.zeros(dim)
    w = np.zeros(dim)
    mu[rng.choice(dim, k1, replace=False)] = rng.uniform(0.5, 2.0, k1) * rng.choice([-1.0, 1.0], k1)
    w[rng.choice(dim, k2, replace=False)] = rng.uniform(0.5, 2.0, k2) * rng.choice([-1.0, 1.0], k2)
    return LemmaParams(mu=mu, w=w, lam=lam, sigma=sigma)


# -- top-k overlap ----------------------------------------------------------


def topk_support(v: np.ndarray, fraction: float) -> np.ndarray:
    v = np.ravel(v)
    k = max(1, int(np.ceil(round(fraction * v.size, 9))))
    return np.argsort(-np.abs(v), kind="stable")[:k]


def topk_overlap(grads, fraction: float = 0.1, max_pairs: int = 10_000, seed: int = 0) -> float:
    """Mean pairwise ``|S_K(u) & S_K(v)| / ceil(K d)`` over gradient pairs.

    Pairs are subsampled without replacement (seeded) when there are more than
    ``max_pairs`` of them.
    """
    grads = [np.ravel(g) for g in grads]
    if len(grads) < 2:
        raise ValueError("need at least two gradients")
    if len({g.size for g in grads}) != 1:
        raise ValueError("gradients must share a dimension")
    supports = [set(topk_support(g, fraction).tolist()) for g in grads]
    k = len(supports[0])
    m = len(grads)
    total = m * (m - 1) // 2
    if total <= max_pairs:
        pairs = [(i, j) for i in range(m) for j in range(i + 1, m)]
    else:
        rng = np.random.default_rng([seed, 0x0E7])
        flat = rng.choice(total, max_pairs, replace=False)
        pairs = [_unrank_pair(int(t), m) for t in flat]
    return float(np.mean([len(supports[i] & supports[j]) / k for i, j in pairs]))


def _unrank_pair(t: int, m: int) -> tuple[int, int]:
    i = 0
    while t >= m - 1 - i:
        t -= m - 1 - i
        i += 1
    return i, i + 1 + t


# -- Hessian ----------------------------------------------------------------


def make_hvp(model: Model, x: np.ndarray, y: np.ndarray):
    """Hessian-vector product by central differences of the analytic gradient.

    The step is ``1e-4 * |w| / |v|`` (``1e-4 / |v|`` at ``w = 0``).
    """
    w0 = model.flat()
    shapes = model.shapes()
    wn = norm2(w0)

    def grad_at(vec):
        m = Model(model.kind, unflatten(vec, shapes), model.lam, model.hidden_width)
        return flatten(loss_and_grad(m, x, y)[1])

    def hvp(v):
        v = np.asarray(v, dtype=np.float64)
        vn = norm2(v)
        if vn == 0.0:
            return np.zeros_like(v)
        h = 1e-4 * (wn if wn > 0 else 1.0) / vn
        return (grad_at(w0 + h * v) - grad_at(w0 - h * v)) / (2.0 * h)

    return hvp


def hvp_symmetry_error(hvp, dim: int, seed: int = 0) -> float:
    rng = np.random.default_rng([seed, 0x5A3])
    u = rng.standard_normal(dim)
    v = rng.standard_normal(dim)
    u /= norm2(u)
    v /= norm2(v)
    return abs(float(hvp(u) @ v) - float(u @ hvp(v)))


@dataclass
class EigenReport:
    eigenvalues: list[float]
    converged: list[bool] = field(default_factory=list)


def top_eigs(matvec, dim: int, k: int, iters: int = 2000, tol: float = 1e-9, seed: int = 0) -> EigenReport:
    """Largest ``k`` eigenvalues (algebraic order) of a symmetric operator.

    The operator is shifted by its spectral radius so it becomes positive
    semidefinite; power iteration with deflation then walks down from the top.
    """
    dom = power_iteration_top_eig(matvec, dim, iters=iters, tol=tol, seed=seed)
    shift = abs(dom.eigenvalue)
    found: list[tuple[float, np.ndarray]] = []
    vals, flags = [], []
    for i in range(k):

        def shifted(v, found=tuple(found)):
            out = matvec(v) + shift * v
            for mu, u in found:
                out = out - mu * (u @ v) * u
            return out

        res: EigResult = power_iteration_top_eig(shifted, dim, iters=iters, tol=tol, seed=seed + 1 + i)
        found.append((res.eigenvalue, res.eigenvector))
        vals.append(res.eigenvalue - shift)
        flags.append(res.converged and dom.converged)
    return EigenReport(vals, flags)


def hessian_top_eigs(
    model: Model,
    data: Dataset,
    k: int = 1,
    checkpoints: list[Model] | None = None,
    iters: int = 2000,
    tol: float = 1e-9,
    seed: int = 0,
) -> list[EigenReport]:
    """Top-``k`` Hessian eigenvalues of the full-data loss at each checkpoint."""
    checkpoints = [model] if checkpoints is None else checkpoints
    if model.num_params() > MAX_HESSIAN_PARAMS:
        raise ValueError(f"model has {model.num_params()} parameters; limit is {MAX_HESSIAN_PARAMS}")
    if not 1 <= k <= 10:
        raise ValueError("k must lie in [1, 10]")
    out = []
    for ck in checkpoints:
        hvp = make_hvp(ck, data.features, data.labels)
        out.append(top_eigs(hvp, ck.num_params(), k, iters=iters, tol=tol, seed=seed))
    return out


# -- critical regimes -------------------------------------------------------


def critical_trace(values, window: int = 3, eta: float = 0.5) -> set[int]:
    """Epochs inside a critical regime according to a per-epoch scalar trace.

    A change is detected at epoch ``e`` when ``|v[e] - v[e-window]| / v[e-window]``
    reaches ``eta`` (the reference index is clipped at 0). The change happened
    somewhere in ``[e - window, e]`` and, as with the scheduler, the regime is
    held for ``window`` more epochs, so ``[e - window, e + window]`` is flagged.
    """
    values = [float(v) for v in values]
    last = len(values) - 1
    flagged: set[int] = set()
    for e in range(1, len(values)):
        ref = values[max(0, e - window)]
        cur = values[e]
        if ref == 0.0:
            hit = cur != 0.0
        else:
            hit = abs(cur - ref) / abs(ref) >= eta
        if hit:
            flagged.update(range(max(0, e - window), min(last, e + window) + 1))
    return flagged


def full_gradient_norms(checkpoints: list[Model], data: Dataset) -> list[float]:
    return [norm2(flatten(loss_and_grad(ck, data.features, data.labels)[1])) for ck in checkpoints]
