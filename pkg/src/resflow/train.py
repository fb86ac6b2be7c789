"""Maximum-likelihood training of a flow on 2D toy data.

The NLL gradient splits into two parts.  The pathwise part (base density
through the stack) is exact analytic backprop.  The log-determinant part
is where the estimators live: per block either the unbiased roulette
value paired with the Neumann-series gradient, the biased fixed
truncation differentiated term by term, or the dense exact oracle.  Both
parts propagate input cotangents upstream, so downstream blocks'
log-determinants correctly contribute gradient to upstream parameters.

Each step: one Adam update with decoupled weight decay, Polyak shadow
update, then re-application of the Lipschitz constraint so the model is
inside the feasible set at every observable point.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from resflow.blocks import (
    block_forward_cache,
    block_param_grad_of_output,
    grads_vector,
    param_vector,
    set_param_vector,
)
from resflow.checkpoint import save_checkpoint
from resflow.config import TrainConfig, config_to_mapping, write_config_file
from resflow.data import Dataset2D, make_dataset
from resflow.errors import NonFiniteError
from resflow.flow import (
    ActNorm,
    FlowModel,
    ResidualBlock,
    actnorm_initialize,
    base_log_density,
    build_model,
    log_density_batch,
    set_identity_actnorms,
)
from resflow.logdet import (
    EstimatorConfig,
    RouletteDist,
    biased_value_and_grad_rows,
    exact_logdet,
    exact_logdet_grad,
    roulette_value_and_neumann_grad_rows,
)
from resflow.norms import apply_lipschitz_constraint, checkpoint_constraint
from resflow.optim import AdamW, PolyakAverage

LN2 = math.log(2.0)


def nats_to_bits(nats: float) -> float:
    return nats / LN2


def estimator_config_from(cfg: TrainConfig) -> EstimatorConfig:
    return EstimatorConfig(
        roulette=RouletteDist(q=cfg.q, n_exact=cfg.n_exact),
        hutchinson_dist=cfg.hutchinson,
        n_hutchinson=cfg.n_hutchinson,
        n_fixed=cfg.n_fixed,
    )


def eval_estimator_config_from(cfg: TrainConfig) -> EstimatorConfig:
    """Evaluation protocol: many leading terms, several tail samples."""
    return EstimatorConfig(
        roulette=RouletteDist(q=cfg.q, n_exact=cfg.eval_terms),
        hutchinson_dist=cfg.hutchinson,
        n_hutchinson=cfg.eval_tail_samples,
        n_fixed=cfg.n_fixed,
    )


# -- flat parameter packing --------------------------------------------------


class ParamPacker:
    """Maps the model's trainable arrays to one flat float64 vector.

    Layout per layer, in model order: actnorm contributes (log_scale,
    shift); a residual block contributes its block parameter vector
    (weights, biases, activation parameters).  Cached power-iteration
    vectors are state, not parameters, and are not packed.
    """

    def __init__(self, model: FlowModel):
        self.sizes: list[int] = []
        for lay in model.layers:
            if isinstance(lay, ActNorm):
                self.sizes.append(2 * model.dim)
            else:
                self.sizes.append(param_vector(lay.params).size)
        self.total = int(sum(self.sizes))
        self.offsets = np.concatenate([[0], np.cumsum(self.sizes)]).astype(int)

    def get_vector(self, model: FlowModel) -> np.ndarray:
        parts = []
        for lay in model.layers:
            if isinstance(lay, ActNorm):
                parts.append(lay.log_scale)
                parts.append(lay.shift)
            else:
                parts.append(param_vector(lay.params))
        if not parts:
            return np.zeros(0)
        return np.concatenate(parts)

    def set_vector(self, model: FlowModel, vec: np.ndarray) -> None:
        d = model.dim
        for i, lay in enumerate(model.layers):
            chunk = vec[self.offsets[i] : self.offsets[i + 1]]
            if isinstance(lay, ActNorm):
                lay.log_scale = chunk[:d].copy()
                lay.shift = chunk[d:].copy()
            else:
                set_param_vector(lay.params, chunk)

    def pack_grads(self, model: FlowModel, grads: list) -> np.ndarray:
        parts = []
        for lay, g in zip(model.layers, grads):
            if isinstance(lay, ActNorm):
                parts.append(g["log_scale"])
                parts.append(g["shift"])
            else:
                parts.append(grads_vector(g))
        if not parts:
            return np.zeros(0)
        return np.concatenate(parts)


# -- objective and gradient --------------------------------------------------


def nll_and_grad(
    model: FlowModel,
    X: np.ndarray,
    mode: str,
    est_cfg: EstimatorConfig | None = None,
    rng: np.random.Generator | None = None,
):
    """Mean NLL over the batch and its gradient in every parameter.

    Returns (loss, per-layer gradient structures, aux dict).  ``mode`` is
    ``exact``, ``unbiased`` or ``biased``; stochastic modes draw one
    (probe, truncation) pair per sample and block, shared between the
    recorded value and the gradient.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    n = X.shape[0]
    if mode not in ("exact", "unbiased", "biased"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode != "exact" and (est_cfg is None or rng is None):
        raise ValueError(f"mode {mode!r} needs an estimator config and rng")

    # forward, keeping per-layer inputs and block caches
    inputs: list[np.ndarray] = []
    caches: list = []
    h = X
    for lay in model.layers:
        inputs.append(h)
        if isinstance(lay, ResidualBlock):
            g, cache = block_forward_cache(lay.params, h)
            caches.append(cache)
            h = h + g
        else:
            caches.append(None)
            h = lay.forward(h)
    z = h
    base = base_log_density(z)

    # backward sweep; cotangent of sum_i NLL_i w.r.t. the layer output
    cot = z.copy()
    logdet_sum = np.zeros(n)
    grads: list = [None] * len(model.layers)
    terms_mean = 0.0
    n_blocks = 0
    for idx in range(len(model.layers) - 1, -1, -1):
        lay = model.layers[idx]
        x_in = inputs[idx]
        if isinstance(lay, ActNorm):
            scale = np.exp(lay.log_scale)
            g_log_scale = (cot * x_in).sum(axis=0) * scale
            g_shift = cot.sum(axis=0)
            # log-det term of the objective: each sample adds -sum(log_scale)
            g_log_scale = g_log_scale - n
            logdet_sum += lay.logdet
            grads[idx] = {"log_scale": g_log_scale, "shift": g_shift}
            cot = cot * scale
            continue

        n_blocks += 1
        block = lay.params
        bg, vjp = block_param_grad_of_output(
            block, x_in, cot, cache=caches[idx], return_vjp=True
        )
        cot = cot + vjp

        if mode == "exact":
            values = exact_logdet(block, x_in)
            lg, ig = exact_logdet_grad(block, x_in, cache=caches[idx], want_input_grad=True)
        elif mode == "unbiased":
            values, terms, lg, ig = roulette_value_and_neumann_grad_rows(
                block, x_in, est_cfg, rng, cache=caches[idx]
            )
            terms_mean += float(terms.mean())
        else:
            values, terms, lg, ig = biased_value_and_grad_rows(
                block, x_in, est_cfg, rng, cache=caches[idx]
            )
            terms_mean += float(terms.mean())
        logdet_sum += values
        bg.add_(lg, scale=-1.0)
        cot = cot - ig
        grads[idx] = bg

    loss = float(np.mean(-base - logdet_sum))
    inv_n = 1.0 / n
    for idx, lay in enumerate(model.layers):
        if isinstance(lay, ActNorm):
            grads[idx]["log_scale"] *= inv_n
            grads[idx]["shift"] *= inv_n
        else:
            grads[idx].scale_(inv_n)
    aux = {
        "train_nll_nats": loss,
        "mean_terms": terms_mean / n_blocks if (n_blocks and mode != "exact") else 0.0,
    }
    return loss, grads, aux


# -- training loop -----------------------------------------------------------


@dataclass
class TrainState:
    cfg: TrainConfig
    model: FlowModel
    dataset: Dataset2D
    eval_dataset: Dataset2D
    packer: ParamPacker
    opt: AdamW
    polyak: PolyakAverage
    est_cfg: EstimatorConfig
    rng_train: np.random.Generator
    rng_eval: np.random.Generator
    step: int = 0
    layer_norm_log: list = field(default_factory=list)


def init_train_state(cfg: TrainConfig) -> TrainState:
    root = np.random.SeedSequence(cfg.seed)
    ss_init, ss_train, ss_eval = root.spawn(3)
    dataset = make_dataset(cfg.dataset, seed=cfg.seed)
    # a disjoint stream so evaluation points never overlap training batches
    eval_dataset = make_dataset(cfg.dataset, seed=cfg.seed + 777_001)
    model = build_model(
        np.random.default_rng(ss_init),
        dim=2,
        n_blocks=cfg.blocks,
        hidden=cfg.hidden,
        coeff=cfg.lipschitz_coeff,
        norm_preset=cfg.norm_preset,
    )
    if cfg.actnorm_init == "data":
        actnorm_initialize(model, dataset.sample(cfg.batch_size))
    else:
        set_identity_actnorms(model)
    constrain_model(model, cfg)
    packer = ParamPacker(model)
    opt = AdamW(
        size=packer.total,
        lr=cfg.lr,
        beta1=cfg.adam_beta1,
        beta2=cfg.adam_beta2,
        eps=cfg.adam_eps,
        weight_decay=cfg.weight_decay,
    )
    return TrainState(
        cfg=cfg,
        model=model,
        dataset=dataset,
        eval_dataset=eval_dataset,
        packer=packer,
        opt=opt,
        polyak=PolyakAverage(decay=cfg.polyak_decay),
        est_cfg=estimator_config_from(cfg),
        rng_train=np.random.default_rng(ss_train),
        rng_eval=np.random.default_rng(ss_eval),
    )


def constrain_model(model: FlowModel, cfg: TrainConfig) -> list[list[float]]:
    norms = []
    for lay in model.layers:
        if isinstance(lay, ResidualBlock):
            norms.append(
                apply_lipschitz_constraint(
                    lay.params,
                    cfg.lipschitz_coeff,
                    tol=cfg.lipschitz_tol,
                    max_iters=cfg.lipschitz_max_iters,
                    max_iters_warm=cfg.lipschitz_max_iters_warm,
                )
            )
    return norms


def train_step(state: TrainState, batch: np.ndarray) -> dict:
    """One optimization step; returns the step's metrics record."""
    cfg = state.cfg
    mode = "unbiased" if cfg.estimator_kind == "unbiased" else "biased"
    loss, grads, aux = nll_and_grad(
        state.model, batch, mode, est_cfg=state.est_cfg, rng=state.rng_train
    )
    flat_grad = state.packer.pack_grads(state.model, grads)
    if not np.isfinite(loss) or not np.all(np.isfinite(flat_grad)):
        raise NonFiniteError(
            f"non-finite loss or gradient at step {state.step}: "
            f"loss={loss}, |grad| finite={np.all(np.isfinite(flat_grad))}"
        )
    params = state.packer.get_vector(state.model)
    new_params = state.opt.step(params, flat_grad)
    state.packer.set_vector(state.model, new_params)
    state.polyak.update(new_params)
    norms = constrain_model(state.model, cfg)
    state.step += 1
    record = {
        "step": state.step,
        "train_nll_nats": loss,
        "grad_norm": float(np.linalg.norm(flat_grad)),
        "mean_terms_evaluated": aux["mean_terms"],
        "layer_norms": norms,
    }
    return record


def eval_model(state: TrainState) -> FlowModel:
    """Polyak-averaged, fully constrained copy for evaluation."""
    model = state.model.copy()
    vec = state.polyak.average(fallback=state.packer.get_vector(state.model))
    state.packer.set_vector(model, vec)
    for lay in model.layers:
        if isinstance(lay, ResidualBlock):
            checkpoint_constraint(lay.params, state.cfg.lipschitz_coeff)
    return model


def evaluate(state: TrainState, n_eval: int | None = None, mode: str = "exact") -> dict:
    """Mean NLL of the Polyak model over fresh dataset samples.

    ``mode='exact'`` uses the dense oracle; ``mode='estimator'`` uses the
    evaluation protocol (eval_terms leading terms, unbiased tail,
    eval_tail_samples probe draws per point).
    """
    cfg = state.cfg
    n_eval = cfg.n_eval if n_eval is None else n_eval
    model = eval_model(state)
    X = state.eval_dataset.sample(n_eval)
    if mode == "exact":
        _, logp, _ = log_density_batch(model, X, mode="exact")
        mean_terms = 0.0
    elif mode == "estimator":
        _, logp, mean_terms = log_density_batch(
            model, X, mode="unbiased", cfg=eval_estimator_config_from(cfg), rng=state.rng_eval
        )
    else:
        raise ValueError(f"unknown eval mode {mode!r}")
    nll = float(np.mean(-logp))
    return {
        "step": state.step,
        "eval_mode": mode,
        "eval_nll_nats": nll,
        "eval_nll_bits": nats_to_bits(nll),
        "eval_nll_se_nats": float(np.std(-logp, ddof=1) / np.sqrt(len(logp))),
        "eval_mean_terms": mean_terms,
        "n_eval": n_eval,
    }


def fit(cfg: TrainConfig, out_dir: str | Path, progress: bool = False) -> TrainState:
    """Full training run, writing metrics, config echo, and checkpoints."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_config_file(cfg, out / "config.txt")
    state = init_train_state(cfg)
    metrics_path = out / "metrics.jsonl"
    with metrics_path.open("w") as fh:
        fh.write(json.dumps(evaluate(state), sort_keys=True) + "\n")
        for _ in range(cfg.steps):
            batch = state.dataset.sample(cfg.batch_size)
            record = train_step(state, batch)
            if state.step % cfg.eval_every == 0 or state.step == cfg.steps:
                record.update(evaluate(state))
            fh.write(json.dumps(record, sort_keys=True) + "\n")
            if progress and state.step % 50 == 0:
                import sys

                print(
                    f"step {state.step}/{cfg.steps} nll={record['train_nll_nats']:.4f}",
                    file=sys.stderr,
                )
            if cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
                save_state_checkpoint(state, out / f"checkpoint_step{state.step}.txt")
    save_state_checkpoint(state, out / "checkpoint_final.txt")
    return state


def save_state_checkpoint(state: TrainState, path: str | Path) -> None:
    meta = dict(config_to_mapping(state.cfg))
    meta["step"] = str(state.step)
    meta["polyak.count"] = str(state.polyak.count)
    arrays = {}
    if state.polyak.shadow is not None:
        arrays["polyak.shadow"] = state.polyak.shadow
    save_checkpoint(path, state.model, meta=meta, arrays=arrays)


def gaussian_fit_nll(X: np.ndarray) -> float:
    """Mean NLL of the moment-matched Gaussian on its own fitting sample.

    The floor any sensible trained model should beat on multimodal data.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    n, d = X.shape
    mu = X.mean(axis=0)
    cov = np.cov(X.T, bias=True)
    sign, logdet = np.linalg.slogdet(cov)
    if sign <= 0:
        raise ValueError("degenerate sample covariance")
    # mean Mahalanobis term of the fitting sample is exactly d
    return float(0.5 * d * np.log(2.0 * np.pi) + 0.5 * logdet + 0.5 * d)
