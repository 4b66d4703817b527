"""Mixture density estimation on top of a converged adversarial forest.

The fitted discriminator's leaves carve the feature space into
hyperrectangles; within a leaf, features are treated as independent. Each
leaf contributes a product of univariate densities (truncated Gaussian per
continuous feature, smoothed level frequencies per categorical feature),
weighted by the share of real training data falling into the leaf:

    p(x) = sum_l pi_l * prod_j p_lj(x_j)

Conditioning on fixed values for a column subset C only reweights leaves,

    pi'_l = pi_l * p_l(x_C) / sum_k pi_k * p_k(x_C),

so arbitrary conditioning sets are available without refitting anything.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import log_ndtr, logsumexp, ndtr

from .arf import ArfModel
from .forest import leaf_regions
from .tabular import Evidence, Schema

__all__ = [
    "LeafDensity",
    "DensityModel",
    "ConditionalWeights",
    "forde",
    "joint_density",
    "condition",
]

_LOG_2PI = math.log(2.0 * math.pi)
_FALLBACK_TOP_K = 5
_MIN_LOG_MASS = -700.0  # floor for log truncation mass, avoids inf densities


@dataclass(frozen=True)
class LeafDensity:
    """Univariate density parameters of one leaf.

    ``mu``/``sigma``/``lo``/``hi`` are per-feature arrays (NaN at
    categorical positions); ``cat_probs`` maps categorical feature
    positions to level probability vectors.
    """

    leaf_id: int
    weight: float
    n_rows: int
    mu: np.ndarray
    sigma: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    cat_probs: dict[int, np.ndarray]

    def __post_init__(self):
        if self.weight < 0:
            raise ValueError("leaf weight must be >= 0")
        for j in range(len(self.mu)):
            if j in self.cat_probs:
                probs = self.cat_probs[j]
                if (probs < 0).any() or abs(probs.sum() - 1.0) > 1e-12:
                    raise ValueError("categorical probabilities must sum to 1")
            else:
                if not self.sigma[j] > 0:
                    raise ValueError("sigma must be positive")
                if not self.lo[j] < self.hi[j]:
                    raise ValueError("lower bound must be below upper bound")


def _log_trunc_mass(alpha: np.ndarray, beta: np.ndarray) -> np.ndarray:
    """log(Phi(beta) - Phi(alpha)), stable for one-sided tail intervals."""
    alpha = np.asarray(alpha, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    # mirror intervals living in the right tail so log_ndtr stays accurate
    flip = alpha > 0
    a = np.where(flip, -beta, alpha)
    b = np.where(flip, -alpha, beta)
    log_fb = log_ndtr(b)
    log_fa = log_ndtr(a)
    with np.errstate(invalid="ignore", divide="ignore"):
        diff = log_fa - log_fb
        out = log_fb + np.log1p(-np.exp(diff))
    out = np.where(np.isneginf(log_fa), log_fb, out)
    return np.maximum(out, _MIN_LOG_MASS)


class DensityModel:
    """FORDE output: normalized leaf weights plus per-leaf univariate
    densities, packed into arrays for vectorized evaluation."""

    def __init__(self, schema: Schema, leaves: list[LeafDensity]):
        if not leaves:
            raise ValueError("density model needs at least one leaf")
        ids = [lf.leaf_id for lf in leaves]
        if len(set(ids)) != len(ids):
            raise ValueError("leaf ids must be unique")
        total = sum(lf.weight for lf in leaves)
        if abs(total - 1.0) > 1e-12:
            raise ValueError("leaf weights must sum to 1")
        self.schema = schema
        self.leaves = leaves
        self.weights = np.array([lf.weight for lf in leaves])
        self.log_weights = np.log(self.weights)
        p = schema.n_columns
        L = len(leaves)
        self._mu = np.empty((L, p))
        self._sigma = np.empty((L, p))
        self._lo = np.empty((L, p))
        self._hi = np.empty((L, p))
        for i, lf in enumerate(leaves):
            self._mu[i] = lf.mu
            self._sigma[i] = lf.sigma
            self._lo[i] = lf.lo
            self._hi[i] = lf.hi
        self._log_sigma = {}
        self._log_mass = {}
        self._log_cat = {}
        self._cat_cum = {}
        for j, kind in enumerate(schema.kinds):
            if kind.is_categorical:
                probs = np.stack([lf.cat_probs[j] for lf in leaves])
                with np.errstate(divide="ignore"):
                    self._log_cat[j] = np.log(probs)
                self._cat_cum[j] = np.cumsum(probs, axis=1)
            else:
                self._log_sigma[j] = np.log(self._sigma[:, j])
                alpha = (self._lo[:, j] - self._mu[:, j]) / self._sigma[:, j]
                beta = (self._hi[:, j] - self._mu[:, j]) / self._sigma[:, j]
                self._log_mass[j] = _log_trunc_mass(alpha, beta)

    @property
    def n_leaves(self) -> int:
        return len(self.leaves)

    def log_factor(self, j: int, values: np.ndarray, truncated: bool = True) -> np.ndarray:
        """(n_leaves, len(values)) matrix of log p_lj(value).

        With ``truncated=False``, continuous factors ignore the leaf bounds
        and categorical zeros are floored; used to rank leaves for
        off-manifold evidence.
        """
        values = np.atleast_1d(np.asarray(values, dtype=np.float64))
        if j in self._log_cat:
            codes = values.astype(np.int64)
            out = self._log_cat[j][:, codes]
            if not truncated:
                out = np.maximum(out, math.log(1e-12))
            return out
        mu = self._mu[:, j, None]
        sigma = self._sigma[:, j, None]
        z = (values[None, :] - mu) / sigma
        logpdf = -0.5 * (z * z) - 0.5 * _LOG_2PI - self._log_sigma[j][:, None]
        if truncated:
            logpdf = logpdf - self._log_mass[j][:, None]
            inside = (values[None, :] >= self._lo[:, j, None]) & (
                values[None, :] <= self._hi[:, j, None]
            )
            logpdf = np.where(inside, logpdf, -np.inf)
        return logpdf

    def continuous_pdf(self, leaf_index: int, j: int, xs: np.ndarray) -> np.ndarray:
        """Truncated-Gaussian pdf of one leaf/feature (for quadrature checks)."""
        if j in self._log_cat:
            raise ValueError("feature is categorical")
        with np.errstate(over="ignore"):
            return np.exp(self.log_factor(j, xs)[leaf_index])


@dataclass(frozen=True)
class ConditionalWeights:
    """Leaf weights updated for fixed evidence values (normalized)."""

    evidence: Evidence
    weights: np.ndarray
    extrapolated: bool = False

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if (w < 0).any() or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("conditional weights must be a distribution")


def forde(
    arf: ArfModel,
    finite_bounds: str = "local",
    smoothing: float = 1e-3,
    sigma_floor_scale: float = 1e-6,
) -> DensityModel:
    """Estimate per-leaf univariate densities from the converged forest.

    Leaf weight = (real rows in leaf / N) / num_trees. Continuous features
    get a truncated Gaussian with moments from the leaf's real rows and
    bounds from the leaf region; with ``finite_bounds='local'`` infinite
    region bounds are replaced by the leaf's empirical min/max. Categorical
    features get level frequencies with additive smoothing spread over the
    levels admissible in the leaf's region. Leaves holding no real rows are
    dropped (zero weight).
    """
    if finite_bounds not in ("local", "none"):
        raise ValueError("finite_bounds must be 'local' or 'none'")
    forest = arf.forest
    data = arf.data
    X = data.values
    n_real = data.n_rows
    schema = data.schema
    kinds = schema.kinds
    p = schema.n_columns
    regions = leaf_regions(forest)
    num_trees = len(forest.trees)

    global_std = np.array(
        [X[:, j].std() if not kinds[j].is_categorical else np.nan for j in range(p)]
    )
    sigma_floor = np.where(global_std > 0, sigma_floor_scale * global_std, 1e-12)

    leaves: list[LeafDensity] = []
    for _, leaf in forest.all_leaves():
        real_rows = leaf.row_ids[leaf.row_ids < n_real]
        if len(real_rows) == 0:
            continue
        region = regions[leaf.id]
        mu = np.full(p, np.nan)
        sigma = np.full(p, np.nan)
        lo = np.full(p, np.nan)
        hi = np.full(p, np.nan)
        cat_probs: dict[int, np.ndarray] = {}
        for j in range(p):
            vals = X[real_rows, j]
            if kinds[j].is_categorical:
                admissible = region.levels[j]
                counts = np.bincount(vals.astype(np.int64), minlength=kinds[j].n_levels)
                probs = np.zeros(kinds[j].n_levels)
                adm = np.array(sorted(admissible), dtype=np.int64)
                probs[adm] = counts[adm] + smoothing
                probs /= probs.sum()
                cat_probs[j] = probs
            else:
                mu[j] = vals.mean()
                s = vals.std(ddof=1) if len(vals) > 1 else 0.0
                sigma[j] = max(s, sigma_floor[j])
                lo_j, hi_j = region.lo[j], region.hi[j]
                if finite_bounds == "local":
                    if np.isneginf(lo_j):
                        lo_j = vals.min()
                    if np.isposinf(hi_j):
                        hi_j = vals.max()
                if lo_j >= hi_j:  # degenerate (constant leaf): widen minimally
                    pad = max(sigma_floor[j], 1e-9 * max(1.0, abs(lo_j)))
                    lo_j, hi_j = lo_j - pad, hi_j + pad
                lo[j], hi[j] = lo_j, hi_j
        weight = len(real_rows) / n_real / num_trees
        leaves.append(
            LeafDensity(
                leaf_id=leaf.id, weight=weight, n_rows=len(real_rows),
                mu=mu, sigma=sigma, lo=lo, hi=hi, cat_probs=cat_probs,
            )
        )
    if not leaves:
        raise ValueError("all leaves were excluded (no real rows)")
    total = sum(lf.weight for lf in leaves)
    if abs(total - 1.0) > 1e-12:
        leaves = [
            LeafDensity(
                leaf_id=lf.leaf_id, weight=lf.weight / total, n_rows=lf.n_rows,
                mu=lf.mu, sigma=lf.sigma, lo=lf.lo, hi=lf.hi, cat_probs=lf.cat_probs,
            )
            for lf in leaves
        ]
    return DensityModel(schema, leaves)


def joint_density(model: DensityModel, row: np.ndarray) -> float:
    """Mixture density of a complete row; 0 outside every leaf's support."""
    row = np.asarray(row, dtype=np.float64)
    if row.shape != (model.schema.n_columns,):
        raise ValueError("row width mismatch")
    for j in range(len(row)):
        model.schema.validate_cell(j, row[j])
    log_terms = model.log_weights.copy()
    for j in range(len(row)):
        log_terms = log_terms + model.log_factor(j, row[j : j + 1])[:, 0]
    if np.isneginf(log_terms).all():
        return 0.0
    return float(np.exp(logsumexp(log_terms)))


def evidence_log_weights(
    model: DensityModel, X: np.ndarray, cols: tuple[int, ...],
    base_log_weights: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Unnormalized conditional log-weights for a batch of evidence rows.

    ``X`` is (n, p) in the model's schema order; evidence is taken from
    columns ``cols`` of each row. Returns (n_leaves, n) log-weights plus a
    boolean mask of rows whose evidence had zero likelihood in every leaf;
    those rows fall back to uniform weight over the top-5 leaves ranked by
    untruncated log-likelihood.
    """
    base = model.log_weights if base_log_weights is None else base_log_weights
    logw = np.repeat(base[:, None], X.shape[0], axis=1)
    for j in cols:
        logw += model.log_factor(j, X[:, j])
    dead = np.isneginf(logw).all(axis=0)
    if dead.any():
        idx = np.flatnonzero(dead)
        score = np.repeat(base[:, None], len(idx), axis=1)
        for j in cols:
            score += model.log_factor(j, X[idx, j], truncated=False)
        k = min(_FALLBACK_TOP_K, model.n_leaves)
        top = np.argpartition(-score, k - 1, axis=0)[:k]
        repaired = np.full((model.n_leaves, len(idx)), -np.inf)
        repaired[top, np.arange(len(idx))[None, :]] = 0.0
        logw[:, idx] = repaired
    return logw, dead


def normalized_weights(logw: np.ndarray) -> np.ndarray:
    """Columnwise softmax of log-weights into proper distributions."""
    m = logw.max(axis=0, keepdims=True)
    w = np.exp(logw - m)
    return w / w.sum(axis=0, keepdims=True)


def condition(
    model: DensityModel, evidence: Evidence, base: ConditionalWeights | None = None
) -> ConditionalWeights:
    """Update leaf weights for fixed evidence values.

    Empty evidence returns the model weights unchanged. A ``base`` of
    previously conditioned weights lets evidence accumulate incrementally;
    the result matches conditioning once on the merged evidence.
    """
    evidence.validate(model.schema)
    if base is not None:
        merged = base.evidence.merged_with(evidence)
    else:
        merged = evidence
    if not evidence.assignments:
        if base is not None:
            return ConditionalWeights(merged, base.weights, base.extrapolated)
        return ConditionalWeights(merged, model.weights.copy())
    cols = evidence.columns
    row = np.zeros((1, model.schema.n_columns))
    for j, v in evidence.assignments.items():
        row[0, j] = v
    base_log = None
    if base is not None:
        with np.errstate(divide="ignore"):
            base_log = np.log(np.asarray(base.weights, dtype=np.float64))
    logw, dead = evidence_log_weights(model, row, cols, base_log_weights=base_log)
    weights = normalized_weights(logw)[:, 0]
    return ConditionalWeights(
        merged, weights, extrapolated=bool(dead[0]) or bool(base and base.extrapolated)
    )
