"""Invertible flow built from residual blocks and actnorm layers.

The map ``f`` is an ordered stack of layers applied left to right; the
model density against a standard-normal base follows the change of
variables identity: ``log p(x) = log p_base(f(x)) + sum of per-layer
log-determinants``.  Residual blocks contribute ``log det(I + J_g)``
(exact oracle or stochastic estimate, per evaluation mode), actnorm
layers contribute the sum of their log scales.

Inversion is plain fixed-point iteration ``x <- z - g(x)``, which
converges geometrically because every branch is a contraction.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from resflow.blocks import BlockParams, block_forward
from resflow.errors import ContractivityError, InitializationError, NonFiniteError, ShapeError
from resflow.logdet import (
    EstimatorConfig,
    LogDetSample,
    biased_logdet_rows,
    biased_truncated_logdet,
    exact_logdet,
    roulette_logdet,
    roulette_logdet_rows,
)

LOG_TWO_PI = float(np.log(2.0 * np.pi))

ACTNORM_VARIANCE_FLOOR = 1e-6


@dataclass
class ActNorm:
    """Per-dimension affine layer ``y = exp(log_scale) * x + shift``.

    Scales live in log space, so they are strictly positive by
    construction and the layer's log-determinant is just
    ``sum(log_scale)``.  Initialization is data dependent: the first
    batch fixes scale and shift so the layer's outputs are standardized.
    """

    log_scale: np.ndarray
    shift: np.ndarray
    initialized: bool = False

    @staticmethod
    def identity(dim: int) -> "ActNorm":
        return ActNorm(log_scale=np.zeros(dim), shift=np.zeros(dim), initialized=True)

    @staticmethod
    def uninitialized(dim: int) -> "ActNorm":
        return ActNorm(log_scale=np.zeros(dim), shift=np.zeros(dim), initialized=False)

    def initialize_from(self, batch: np.ndarray) -> None:
        batch = np.atleast_2d(np.asarray(batch, dtype=np.float64))
        mean = batch.mean(axis=0)
        var = batch.var(axis=0)
        if np.any(var < ACTNORM_VARIANCE_FLOOR):
            warnings.warn(
                "actnorm initialization hit the variance floor; "
                "a data dimension is (nearly) constant",
                stacklevel=2,
            )
            var = np.maximum(var, ACTNORM_VARIANCE_FLOOR)
        std = np.sqrt(var)
        self.log_scale = -np.log(std)
        self.shift = -mean / std
        self.initialized = True

    def forward(self, x: np.ndarray) -> np.ndarray:
        if not self.initialized:
            raise InitializationError("actnorm used before data-dependent initialization")
        return np.exp(self.log_scale) * x + self.shift

    def inverse(self, y: np.ndarray) -> np.ndarray:
        if not self.initialized:
            raise InitializationError("actnorm used before data-dependent initialization")
        return (y - self.shift) * np.exp(-self.log_scale)

    @property
    def logdet(self) -> float:
        return float(np.sum(self.log_scale))

    def copy(self) -> "ActNorm":
        return ActNorm(self.log_scale.copy(), self.shift.copy(), self.initialized)


@dataclass
class ResidualBlock:
    """One invertible unit ``y = x + g(x)`` wrapping branch parameters."""

    params: BlockParams

    def forward(self, x: np.ndarray) -> np.ndarray:
        return x + block_forward(self.params, x)

    def copy(self) -> "ResidualBlock":
        return ResidualBlock(params=self.params.copy())


@dataclass
class LogDensityResult:
    """Value and bookkeeping of one density evaluation.

    ``logp`` always equals ``base_logp + sum(per_layer_logdet)`` exactly;
    ``estimator_meta`` holds one sample record per residual block when a
    stochastic mode ran (empty in exact mode).
    """

    logp: float
    base_logp: float
    per_layer_logdet: list[float]
    estimator_meta: list[LogDetSample] = field(default_factory=list)


@dataclass
class FlowModel:
    dim: int
    layers: list

    def validate(self) -> None:
        for layer in self.layers:
            if isinstance(layer, ResidualBlock):
                if layer.params.dim != self.dim:
                    raise ShapeError("block dimension does not match model")
            elif isinstance(layer, ActNorm):
                if layer.log_scale.shape != (self.dim,):
                    raise ShapeError("actnorm dimension does not match model")
            else:
                raise ShapeError(f"unknown layer type {type(layer)!r}")

    def blocks(self) -> list[ResidualBlock]:
        return [lay for lay in self.layers if isinstance(lay, ResidualBlock)]

    def copy(self) -> "FlowModel":
        return FlowModel(dim=self.dim, layers=[lay.copy() for lay in self.layers])


def base_log_density(z: np.ndarray) -> np.ndarray:
    """Standard-normal log density, summed over the last axis."""
    z = np.asarray(z, dtype=np.float64)
    d = z.shape[-1]
    return -0.5 * d * LOG_TWO_PI - 0.5 * np.sum(z * z, axis=-1)


def build_model(
    rng: np.random.Generator,
    dim: int = 2,
    n_blocks: int = 10,
    hidden: int = 128,
    n_layers: int = 3,
    coeff: float = 0.98,
    norm_preset: str = "spectral",
    actnorm: bool = True,
) -> FlowModel:
    """Fresh model: leading actnorm, then (block, actnorm) pairs.

    Actnorms start uninitialized; run :func:`actnorm_initialize` on a data
    batch (or :func:`set_identity_actnorms` for synthetic models) before
    evaluating densities.  Block weights come out of ``init_block_params``
    already inside the constraint set.
    """
    from resflow.norms import init_block_params

    layers: list = []
    if actnorm:
        layers.append(ActNorm.uninitialized(dim))
    for _ in range(n_blocks):
        layers.append(
            ResidualBlock(
                params=init_block_params(
                    rng, dim, hidden=hidden, n_layers=n_layers, coeff=coeff,
                    norm_preset=norm_preset,
                )
            )
        )
        if actnorm:
            layers.append(ActNorm.uninitialized(dim))
    return FlowModel(dim=dim, layers=layers)


def set_identity_actnorms(model: FlowModel) -> FlowModel:
    for lay in model.layers:
        if isinstance(lay, ActNorm) and not lay.initialized:
            lay.log_scale = np.zeros(model.dim)
            lay.shift = np.zeros(model.dim)
            lay.initialized = True
    return model


def actnorm_initialize(model: FlowModel, batch: np.ndarray) -> FlowModel:
    """Data-dependent init: each actnorm standardizes its input batch.

    Layers run in order, so every actnorm sees the batch as transformed
    by everything before it.  Mutates the model in place.
    """
    batch = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    if batch.shape[0] < 1:
        raise ValueError("actnorm initialization needs a nonempty batch")
    h = batch
    for lay in model.layers:
        if isinstance(lay, ActNorm):
            if not lay.initialized:
                lay.initialize_from(h)
            h = lay.forward(h)
        else:
            h = lay.forward(h)
    return model


def forward(
    model: FlowModel,
    x: np.ndarray,
    mode: str = "exact",
    cfg: EstimatorConfig | None = None,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, LogDensityResult]:
    """Map one point through the flow and account its log density.

    ``mode`` selects the per-block log-determinant route: ``exact``
    (dense oracle, small d), ``unbiased`` (roulette estimate) or
    ``biased`` (fixed truncation).  Stochastic modes need ``cfg`` and
    ``rng``.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != model.dim:
        raise ShapeError(f"forward expects a single point of dim {model.dim}")
    if mode not in ("exact", "unbiased", "biased"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode != "exact" and (cfg is None or rng is None):
        raise ValueError(f"mode {mode!r} needs an estimator config and rng")
    h = x
    per_layer: list[float] = []
    meta: list[LogDetSample] = []
    for lay in model.layers:
        if isinstance(lay, ActNorm):
            per_layer.append(lay.logdet)
            h = lay.forward(h)
        else:
            if mode == "exact":
                per_layer.append(float(exact_logdet(lay.params, h)))
            elif mode == "unbiased":
                sample = roulette_logdet(lay.params, h, cfg, rng)
                per_layer.append(sample.value)
                meta.append(sample)
            else:
                sample = biased_truncated_logdet(lay.params, h, cfg, rng)
                per_layer.append(sample.value)
                meta.append(sample)
            h = lay.forward(h)
    base = float(base_log_density(h))
    result = LogDensityResult(
        logp=base + float(sum(per_layer)),
        base_logp=base,
        per_layer_logdet=per_layer,
        estimator_meta=meta,
    )
    return h, result


def log_density_batch(
    model: FlowModel,
    X: np.ndarray,
    mode: str = "exact",
    cfg: EstimatorConfig | None = None,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, np.ndarray, float]:
    """Vectorized density evaluation over rows of ``X``.

    Returns (transformed points, per-row log density in nats, mean number
    of series terms per residual block and row; 0.0 in exact mode).
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != model.dim:
        raise ShapeError(f"expected points of dim {model.dim}")
    if mode not in ("exact", "unbiased", "biased"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode != "exact" and (cfg is None or rng is None):
        raise ValueError(f"mode {mode!r} needs an estimator config and rng")
    h = X
    logdet = np.zeros(X.shape[0])
    terms_total = 0.0
    n_blocks = 0
    for lay in model.layers:
        if isinstance(lay, ActNorm):
            logdet += lay.logdet
            h = lay.forward(h)
        else:
            n_blocks += 1
            if mode == "exact":
                logdet += exact_logdet(lay.params, h)
            elif mode == "unbiased":
                vals, terms = roulette_logdet_rows(lay.params, h, cfg, rng)
                logdet += vals
                terms_total += float(terms.mean())
            else:
                vals, terms = biased_logdet_rows(lay.params, h, cfg, rng)
                logdet += vals
                terms_total += float(terms.mean())
            h = lay.forward(h)
    logp = base_log_density(h) + logdet
    mean_terms = terms_total / n_blocks if (n_blocks and mode != "exact") else 0.0
    return h, logp, mean_terms


def transform(model: FlowModel, X: np.ndarray) -> np.ndarray:
    """Apply f to rows of X without any density bookkeeping."""
    h = np.atleast_2d(np.asarray(X, dtype=np.float64))
    for lay in model.layers:
        h = lay.forward(h)
    return h


def inverse(
    model: FlowModel,
    z: np.ndarray,
    tol: float = 1e-10,
    max_iters: int = 200,
    return_residuals: bool = False,
):
    """Invert the flow by per-block fixed-point iteration.

    Each residual block solves ``x = z - g(x)`` by Picard iteration from
    ``x0 = z`` until the update norm drops below ``tol``; actnorms invert
    in closed form.  Because Lip(g) < 1 the iteration contracts
    geometrically; running out of iterations signals a constraint
    violation.  With ``return_residuals`` the per-iteration update norms
    of every block come back for convergence diagnostics.
    """
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    h = np.atleast_2d(z)
    if h.shape[1] != model.dim:
        raise ShapeError(f"expected points of dim {model.dim}")
    residual_log: list[list[float]] = []
    for lay in reversed(model.layers):
        if isinstance(lay, ActNorm):
            h = lay.inverse(h)
            continue
        target = h
        x = target
        block_res: list[float] = []
        converged = False
        for _ in range(max_iters):
            x_next = target - block_forward(lay.params, x)
            step = float(np.max(np.sqrt(np.sum((x_next - x) ** 2, axis=1))))
            block_res.append(step)
            x = x_next
            if step < tol:
                converged = True
                break
        if not converged:
            raise ContractivityError(
                f"fixed-point inversion did not reach tol={tol} in {max_iters} iterations"
            )
        residual_log.append(block_res)
        h = x
    out = h[0] if single else h
    if return_residuals:
        return out, residual_log
    return out


def sample(model: FlowModel, rng: np.random.Generator, n: int) -> np.ndarray:
    """Draw base-normal points and pull them back through the inverse."""
    if n < 0:
        raise ValueError("n must be non-negative")
    z = rng.standard_normal((n, model.dim))
    if n == 0:
        return z
    x = inverse(model, z)
    if not np.all(np.isfinite(x)):
        raise NonFiniteError("sampling produced non-finite points")
    return x
