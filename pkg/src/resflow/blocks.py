"""Residual-branch network and its derivative primitives.

The branch ``g`` is a small dense MLP (default ``d -> hidden -> hidden -> d``)
with LipSwish activations between linear layers.  Everything a flow or an
estimator needs from ``g`` is exposed as an explicit function:

* ``block_forward``       -- g(x)
* ``block_jvp``           -- J_g(x) v
* ``block_vjp``           -- J_g(x)^T u
* ``block_dense_jacobian``-- the full d x d Jacobian (small-d oracle)
* ``bilinear_param_grad`` -- d/dtheta [u^T J_g(x) v]  (second-order)
* ``block_param_grad_of_output`` -- d/dtheta [u^T g(x)]

Derivatives are hand-derived per layer rather than taped: the chain is
short and fixed-shape, and writing it out makes the retained-state
accounting of the gradient estimators auditable.  All functions accept a
single point ``(d,)`` or a batch ``(n, d)`` and operate in float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from resflow.activations import (
    LIPSWISH_SCALE,
    beta_from_raw,
    beta_raw_chain,
)
from resflow.errors import GuardError, ShapeError

DENSE_JACOBIAN_MAX_DIM = 16


@dataclass
class LayerParams:
    """One linear layer plus the LipSwish that follows it.

    ``raw_beta`` is None on the final layer (no activation after it).
    ``norm_in``/``norm_out`` are the vector-norm orders of the layer's
    input and output spaces; the induced (norm_in -> norm_out) norm of
    ``weight`` is what the Lipschitz constraint bounds.  ``pi_u`` caches
    the power-iteration vector between constraint applications.
    """

    weight: np.ndarray
    bias: np.ndarray
    raw_beta: float | None
    norm_in: float = 2.0
    norm_out: float = 2.0
    pi_u: np.ndarray | None = None
    pi_estimate: float | None = None
    pi_iters_used: int = 0

    @property
    def beta(self) -> float:
        if self.raw_beta is None:
            raise ValueError("final layer has no activation parameter")
        return beta_from_raw(self.raw_beta)

    def copy(self) -> "LayerParams":
        return LayerParams(
            weight=self.weight.copy(),
            bias=self.bias.copy(),
            raw_beta=self.raw_beta,
            norm_in=self.norm_in,
            norm_out=self.norm_out,
            pi_u=None if self.pi_u is None else self.pi_u.copy(),
            pi_estimate=self.pi_estimate,
            pi_iters_used=self.pi_iters_used,
        )


@dataclass
class BlockParams:
    """Ordered layers of one residual branch ``g``."""

    layers: list[LayerParams]

    def __post_init__(self) -> None:
        self.validate()

    @property
    def dim(self) -> int:
        return self.layers[0].weight.shape[1]

    def validate(self) -> None:
        layers = self.layers
        if not layers:
            raise ShapeError("a block needs at least one layer")
        for i, lay in enumerate(layers):
            if lay.weight.ndim != 2 or lay.bias.shape != (lay.weight.shape[0],):
                raise ShapeError(f"layer {i}: weight/bias shapes do not agree")
            if not np.all(np.isfinite(lay.weight)) or not np.all(np.isfinite(lay.bias)):
                raise ShapeError(f"layer {i}: non-finite parameters")
        for i in range(len(layers) - 1):
            if layers[i].weight.shape[0] != layers[i + 1].weight.shape[1]:
                raise ShapeError(
                    f"layer {i} output dim {layers[i].weight.shape[0]} does not "
                    f"match layer {i + 1} input dim {layers[i + 1].weight.shape[1]}"
                )
            if layers[i].norm_out != layers[i + 1].norm_in:
                raise ShapeError(
                    f"norm orders do not chain between layers {i} and {i + 1}"
                )
            if layers[i].raw_beta is None:
                raise ShapeError(f"layer {i} is not the last layer but has no beta")
        if layers[-1].raw_beta is not None:
            raise ShapeError("last layer must not carry an activation parameter")
        if layers[0].weight.shape[1] != layers[-1].weight.shape[0]:
            raise ShapeError("block must map back to its input dimension")
        if layers[0].norm_in != layers[-1].norm_out:
            raise ShapeError("block must map back to its input normed space")

    def copy(self) -> "BlockParams":
        return BlockParams(layers=[lay.copy() for lay in self.layers])


@dataclass
class LayerGrads:
    weight: np.ndarray
    bias: np.ndarray
    raw_beta: float


@dataclass
class BlockGrads:
    """Parameter gradient with the same structure as :class:`BlockParams`."""

    layers: list[LayerGrads]

    @staticmethod
    def zeros_like(params: BlockParams) -> "BlockGrads":
        return BlockGrads(
            layers=[
                LayerGrads(
                    weight=np.zeros_like(lay.weight),
                    bias=np.zeros_like(lay.bias),
                    raw_beta=0.0,
                )
                for lay in params.layers
            ]
        )

    def add_(self, other: "BlockGrads", scale: float = 1.0) -> "BlockGrads":
        for a, b in zip(self.layers, other.layers):
            a.weight += scale * b.weight
            a.bias += scale * b.bias
            a.raw_beta += scale * b.raw_beta
        return self

    def scale_(self, scale: float) -> "BlockGrads":
        for a in self.layers:
            a.weight *= scale
            a.bias *= scale
            a.raw_beta *= scale
        return self


# -- parameter vector utilities (used by the optimizer and FD oracles) -----


def param_count(params: BlockParams) -> int:
    total = 0
    for lay in params.layers:
        total += lay.weight.size + lay.bias.size
        if lay.raw_beta is not None:
            total += 1
    return total


def param_vector(params: BlockParams) -> np.ndarray:
    parts = []
    for lay in params.layers:
        parts.append(lay.weight.ravel())
        parts.append(lay.bias)
        if lay.raw_beta is not None:
            parts.append(np.array([lay.raw_beta]))
    return np.concatenate(parts)


def set_param_vector(params: BlockParams, vec: np.ndarray) -> None:
    pos = 0
    for lay in params.layers:
        n = lay.weight.size
        lay.weight[...] = vec[pos : pos + n].reshape(lay.weight.shape)
        pos += n
        n = lay.bias.size
        lay.bias[...] = vec[pos : pos + n]
        pos += n
        if lay.raw_beta is not None:
            lay.raw_beta = float(vec[pos])
            pos += 1
    if pos != vec.size:
        raise ShapeError("parameter vector length does not match block")


def grads_vector(grads: BlockGrads) -> np.ndarray:
    parts = []
    last = len(grads.layers) - 1
    for l, lay in enumerate(grads.layers):
        parts.append(lay.weight.ravel())
        parts.append(lay.bias)
        if l != last:
            parts.append(np.array([lay.raw_beta]))
    return np.concatenate(parts)


# -- forward and cache ------------------------------------------------------


@dataclass
class BlockCache:
    """Forward intermediates reused by every derivative routine.

    ``inputs[l]`` is the input to layer l, ``pre[l]`` its pre-activation,
    ``slope[l]`` the activation derivative at ``pre[l]`` (absent for the
    final layer), ``betas[l]`` the positive activation parameters.
    ``arg[l]`` and ``sig[l]`` keep ``beta * z`` and its sigmoid so all
    higher activation derivatives come out of stored values instead of
    fresh exponentials.
    """

    inputs: list[np.ndarray]
    pre: list[np.ndarray]
    slope: list[np.ndarray]
    betas: list[float]
    arg: list[np.ndarray] = field(default_factory=list)
    sig: list[np.ndarray] = field(default_factory=list)
    squeeze: bool = field(default=False)
    _derived: dict = field(default_factory=dict, repr=False)

    def _sig_d1(self, l: int) -> np.ndarray:
        key = ("sd1", l)
        if key not in self._derived:
            s = self.sig[l]
            self._derived[key] = s * (1.0 - s)
        return self._derived[key]

    def curv(self, l: int) -> np.ndarray:
        """Second derivative of the activation at pre[l]."""
        key = ("curv", l)
        if key not in self._derived:
            t, sd1 = self.arg[l], self._sig_d1(l)
            sd2 = sd1 * (1.0 - 2.0 * self.sig[l])
            common = (2.0 * sd1 + t * sd2) / LIPSWISH_SCALE
            self._derived[key] = self.betas[l] * common
            self._derived[("mix", l)] = self.pre[l] * common
        return self._derived[key]

    def dslope_dbeta(self, l: int) -> np.ndarray:
        """d(slope)/d(beta) at pre[l]; equals z * curv / beta."""
        key = ("mix", l)
        if key not in self._derived:
            self.curv(l)
        return self._derived[key]

    def dact_dbeta(self, l: int) -> np.ndarray:
        """d(activation value)/d(beta) at pre[l]."""
        key = ("dbeta", l)
        if key not in self._derived:
            z = self.pre[l]
            self._derived[key] = z * z * self._sig_d1(l) / LIPSWISH_SCALE
        return self._derived[key]


def _as_batch(params: BlockParams, x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.dim:
        raise ShapeError(
            f"input has shape {x.shape}, expected (*, {params.dim})"
        )
    return x, squeeze


def _stable_sigmoid(t: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(t))
    return np.where(t >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def block_forward_cache(params: BlockParams, x: np.ndarray) -> tuple[np.ndarray, BlockCache]:
    """Evaluate g(x) and keep the intermediates."""
    h, squeeze = _as_batch(params, x)
    inputs, pre, slope, betas, args, sigs = [], [], [], [], [], []
    n_layers = len(params.layers)
    for l, lay in enumerate(params.layers):
        inputs.append(h)
        z = h @ lay.weight.T + lay.bias
        pre.append(z)
        if l < n_layers - 1:
            beta = lay.beta
            betas.append(beta)
            t = beta * z
            s = _stable_sigmoid(t)
            args.append(t)
            sigs.append(s)
            slope.append((s + t * (s * (1.0 - s))) / LIPSWISH_SCALE)
            h = z * s / LIPSWISH_SCALE
        else:
            h = z
    cache = BlockCache(
        inputs=inputs, pre=pre, slope=slope, betas=betas, arg=args, sig=sigs, squeeze=squeeze
    )
    return h, cache


def block_forward(params: BlockParams, x: np.ndarray) -> np.ndarray:
    """g(x); the residual add ``x + g(x)`` lives in the flow module."""
    h, squeeze = _as_batch(params, x)
    n_layers = len(params.layers)
    for l, lay in enumerate(params.layers):
        z = h @ lay.weight.T + lay.bias
        if l < n_layers - 1:
            h = z * _stable_sigmoid(lay.beta * z) / LIPSWISH_SCALE
        else:
            h = z
    return h[0] if squeeze else h


def _cache_for(params: BlockParams, x: np.ndarray, cache: BlockCache | None) -> BlockCache:
    if cache is not None:
        return cache
    _, cache = block_forward_cache(params, x)
    return cache


def block_jvp(
    params: BlockParams, x: np.ndarray, v: np.ndarray, cache: BlockCache | None = None
) -> np.ndarray:
    """J_g(x) v via the layer chain rule."""
    cache = _cache_for(params, x, cache)
    t, squeeze = _as_batch(params, np.asarray(v, dtype=np.float64))
    n_layers = len(params.layers)
    for l, lay in enumerate(params.layers):
        t = t @ lay.weight.T
        if l < n_layers - 1:
            t = cache.slope[l] * t
    return t[0] if squeeze else t


def block_vjp(
    params: BlockParams, x: np.ndarray, u: np.ndarray, cache: BlockCache | None = None
) -> np.ndarray:
    """J_g(x)^T u, i.e. the row vector u^T J_g(x) laid out as a vector."""
    cache = _cache_for(params, x, cache)
    r, squeeze = np.asarray(u, dtype=np.float64), False
    if r.ndim == 1:
        r, squeeze = r[None, :], True
    n_layers = len(params.layers)
    for l in range(n_layers - 1, -1, -1):
        s = r @ params.layers[l].weight
        r = cache.slope[l - 1] * s if l > 0 else s
    return r[0] if squeeze else r


def block_dense_jacobian(params: BlockParams, x: np.ndarray, cache: BlockCache | None = None) -> np.ndarray:
    """Assemble J_g(x) column by column from JVPs with basis vectors.

    Brute-force oracle; guarded to small dimensions.
    """
    d = params.dim
    if d > DENSE_JACOBIAN_MAX_DIM:
        raise GuardError(
            f"dense Jacobian limited to dim <= {DENSE_JACOBIAN_MAX_DIM}, got {d}"
        )
    xb, squeeze = _as_batch(params, x)
    cache = _cache_for(params, xb, cache)
    n = xb.shape[0]
    jac = np.empty((n, d, d))
    for j in range(d):
        e = np.zeros((n, d))
        e[:, j] = 1.0
        jac[:, :, j] = block_jvp(params, xb, e, cache=cache)
    return jac[0] if squeeze else jac


# -- first-order parameter gradient ----------------------------------------


def block_param_grad_of_output(
    params: BlockParams,
    x: np.ndarray,
    u: np.ndarray,
    cache: BlockCache | None = None,
    return_vjp: bool = False,
):
    """Gradient of ``u . g(x)`` with respect to every block parameter.

    Standard reverse pass.  With ``return_vjp`` the input cotangent
    ``J_g(x)^T u`` comes back too, so a flow backward sweep gets both for
    the price of one traversal.  Batched inputs are summed over the batch.
    """
    xb, _ = _as_batch(params, x)
    cache = _cache_for(params, xb, cache)
    delta = np.asarray(u, dtype=np.float64)
    u_single = delta.ndim == 1
    if u_single:
        delta = delta[None, :]
    n_layers = len(params.layers)
    grads = BlockGrads.zeros_like(params)
    for l in range(n_layers - 1, -1, -1):
        lay = params.layers[l]
        g = grads.layers[l]
        g.weight += delta.T @ cache.inputs[l]
        g.bias += delta.sum(axis=0)
        p = delta @ lay.weight
        if l > 0:
            grads.layers[l - 1].raw_beta += float(
                np.sum(p * cache.dact_dbeta(l - 1))
                * beta_raw_chain(params.layers[l - 1].raw_beta)
            )
            delta = cache.slope[l - 1] * p
        else:
            vjp = p
    if return_vjp:
        return grads, (vjp[0] if u_single and vjp.shape[0] == 1 else vjp)
    return grads


# -- second-order bilinear gradient -----------------------------------------


def _bilinear_chains(params: BlockParams, cache: BlockCache, u: np.ndarray, v: np.ndarray):
    """Shared tangent/cotangent chains for the bilinear form u^T J_g(x) v.

    Returns (tau, kappa, pi, lam, eps) where, for layer l:
      tau[l]   input-side tangent entering the layer (J chain applied to v),
      kappa[l] = W_l tau[l],
      pi[l]    cotangent of the form w.r.t. kappa[l],
      lam[l]   cotangent w.r.t. the activated tangent (layers 0..L-2),
      eps[l]   sensitivity of the form to the pre-activation z_l, including
               the cascade of z_l into all later activation slopes.
    """
    n_layers = len(params.layers)
    tau = [None] * n_layers
    kappa = [None] * n_layers
    t = v
    for l, lay in enumerate(params.layers):
        tau[l] = t
        kappa[l] = t @ lay.weight.T
        if l < n_layers - 1:
            t = cache.slope[l] * kappa[l]

    pi = [None] * n_layers
    lam = [None] * (n_layers - 1)
    r = u
    pi[n_layers - 1] = r
    for l in range(n_layers - 2, -1, -1):
        lam[l] = pi[l + 1] @ params.layers[l + 1].weight
        pi[l] = cache.slope[l] * lam[l]

    eps = [None] * (n_layers - 1)
    carry = None
    for l in range(n_layers - 2, -1, -1):
        e = lam[l] * cache.curv(l) * kappa[l]
        if carry is not None:
            e = e + cache.slope[l] * (carry @ params.layers[l + 1].weight)
        eps[l] = e
        carry = e
    return tau, kappa, pi, lam, eps


def bilinear_param_grad(
    params: BlockParams,
    x: np.ndarray,
    u: np.ndarray,
    v: np.ndarray,
    cache: BlockCache | None = None,
    want_input_grad: bool = False,
):
    """Gradient of the scalar ``s = u^T J_g(x) v`` in all block parameters.

    This is the primitive that turns an accumulated Neumann cotangent into
    a parameter gradient without differentiating through the series
    accumulation.  Requires the activation's second derivative, since the
    Jacobian already contains its first.  With ``want_input_grad`` the
    gradient of ``s`` with respect to ``x`` is also returned, which the
    training loop backpropagates into upstream layers.  Batched ``u, v``
    are summed over the batch.
    """
    xb, _ = _as_batch(params, x)
    cache = _cache_for(params, xb, cache)
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.ndim == 1:
        u = u[None, :]
    if v.ndim == 1:
        v = v[None, :]
    n_layers = len(params.layers)
    tau, kappa, pi, lam, eps = _bilinear_chains(params, cache, u, v)

    grads = BlockGrads.zeros_like(params)
    n = u.shape[0]
    for l in range(n_layers):
        g = grads.layers[l]
        g.weight += pi[l].T @ tau[l]
        if l < n_layers - 1:
            inp = cache.inputs[l]
            if inp.shape[0] != n:
                # single-point cache against a batch of probe pairs
                inp = np.broadcast_to(inp, (n, inp.shape[1]))
            g.weight += eps[l].T @ inp
            g.bias += eps[l].sum(axis=0)
            dbeta = np.sum(lam[l] * cache.dslope_dbeta(l) * kappa[l])
            if l + 1 <= n_layers - 2:
                # beta also moves the activation value feeding later layers
                dbeta += np.sum(
                    eps[l + 1] * (cache.dact_dbeta(l) @ params.layers[l + 1].weight.T)
                )
            g.raw_beta += float(dbeta * beta_raw_chain(params.layers[l].raw_beta))
    if want_input_grad:
        if n_layers > 1:
            input_grad = eps[0] @ params.layers[0].weight
        else:
            input_grad = np.zeros((u.shape[0], params.dim))
        return grads, input_grad
    return grads


def bilinear_param_grad_per_sample(
    params: BlockParams,
    x: np.ndarray,
    u: np.ndarray,
    v: np.ndarray,
    cache: BlockCache | None = None,
) -> np.ndarray:
    """Per-sample gradients of ``u_i^T J_g(x) v_i`` as an (n, P) matrix.

    Materializes the rank-2 per-sample weight gradients, so it is meant
    for small blocks (Monte-Carlo statistics in tests/diagnostics).
    """
    xb, _ = _as_batch(params, x)
    cache = _cache_for(params, xb, cache)
    u = np.atleast_2d(np.asarray(u, dtype=np.float64))
    v = np.atleast_2d(np.asarray(v, dtype=np.float64))
    n = u.shape[0]
    n_layers = len(params.layers)
    tau, kappa, pi, lam, eps = _bilinear_chains(params, cache, u, v)
    cols = []
    for l in range(n_layers):
        lay = params.layers[l]
        inp = cache.inputs[l]
        if inp.shape[0] == 1:
            inp = np.broadcast_to(inp, (n, inp.shape[1]))
        w_g = pi[l][:, :, None] * tau[l][:, None, :]
        if l < n_layers - 1:
            w_g = w_g + eps[l][:, :, None] * inp[:, None, :]
        cols.append(w_g.reshape(n, -1))
        if l < n_layers - 1:
            cols.append(eps[l])
            chain = beta_raw_chain(lay.raw_beta)
            dbeta = (lam[l] * cache.dslope_dbeta(l) * kappa[l]).sum(axis=1)
            if l + 1 <= n_layers - 2:
                dbeta = dbeta + (
                    eps[l + 1] * (cache.dact_dbeta(l) @ params.layers[l + 1].weight.T)
                ).sum(axis=1)
            cols.append(dbeta[:, None] * chain)
        else:
            cols.append(np.zeros((n, lay.bias.size)))
    return np.concatenate(cols, axis=1)
