"""ELBO estimation, analytic gradients, Adam, and the fit loop.

The ELBO is estimated by pushing a batch of uniforms through the posterior's
inverse (tree-)CDF.  Its gradient w.r.t. the raw pre-weights has two parts:
the entropy term is exact via the closed-form recursion, and the expected
log-density term composes the exact Jacobian of the inverse-CDF chain with
the target's gradient (analytic when the target provides one, central
differences in x-space otherwise).  With quantization on, the forward value
snaps to the visited cell's representative while the gradient keeps flowing
through the continuous output (straight-through contract).

One batch of uniforms per step is shared by value and gradient, and sample
batches are reduced chunk-wise in a fixed order, so results do not depend on
how many worker threads evaluate the chunks.
"""

from __future__ import annotations

import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .circuit import BitCircuit
from .multivariate import MeanFieldPosterior

# Fixed reduction arity: sample batches are split into chunks of this size
# and partial sums are combined in index order.
CHUNK = 65536

FD_STEP_SCALE = 1e-5  # x-space step for black-box targets, per unit range


class TrainingError(RuntimeError):
    """Numerical failure during training; carries the trace so far."""

    def __init__(self, message: str, trace: "TrainTrace | None" = None,
                 sample: np.ndarray | None = None):
        super().__init__(message)
        self.trace = trace
        self.sample = sample


@dataclass(frozen=True)
class EarlyStopConfig:
    """Validation-ELBO early stopping; patience counts evaluations."""

    patience: int = 10
    eval_every: int = 50
    mc_samples: int = 512


@dataclass(frozen=True)
class TrainConfig:
    mc_samples: int = 64
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    max_steps: int = 2000
    seed: int = 0
    smoothing_c: float = 0.1
    quantize: bool = False
    early_stop: EarlyStopConfig | None = None
    threads: int = 1

    def __post_init__(self) -> None:
        if self.mc_samples < 1:
            raise ValueError("mc_samples must be at least 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")


@dataclass(frozen=True)
class TraceRecord:
    step: int
    elbo: float
    entropy: float
    grad_norm: float
    wall_time: float

    def to_json(self) -> str:
        return json.dumps({"step": self.step, "elbo": self.elbo,
                           "entropy": self.entropy,
                           "grad_norm": self.grad_norm,
                           "wall_time": self.wall_time})


@dataclass
class TrainTrace:
    records: list[TraceRecord] = field(default_factory=list)

    def append(self, record: TraceRecord) -> None:
        if self.records and record.step <= self.records[-1].step:
            raise ValueError("trace steps must increase monotonically")
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def final_elbo(self) -> float:
        return self.records[-1].elbo


@dataclass(frozen=True)
class ElboEstimate:
    value: float
    entropy_term: float
    expected_logp_term: float
    grad: np.ndarray


def as_posterior(q):
    """Wrap a bare univariate circuit as a one-dimensional posterior."""
    if isinstance(q, BitCircuit):
        return MeanFieldPosterior([q])
    return q


def _map_chunks(fn: Callable, n: int, threads: int) -> list:
    slices = [slice(i, min(i + CHUNK, n)) for i in range(0, n, CHUNK)]
    if threads > 1 and len(slices) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, slices))
    return [fn(s) for s in slices]


def _target_value_and_grad(target, x: np.ndarray, domain,
                           want_grad: bool) -> tuple[np.ndarray, np.ndarray | None]:
    if want_grad and target.value_and_grad is not None:
        logp, grad = target.value_and_grad(x)
        return np.asarray(logp, dtype=float), np.asarray(grad, dtype=float)
    logp = np.asarray(target.log_density(x), dtype=float)
    if not want_grad:
        return logp, None
    if target.grad is not None:
        return logp, np.asarray(target.grad(x), dtype=float)
    # Black-box target: central differences in x-space, step scaled by the
    # posterior's per-dimension range.
    grad = np.empty_like(x)
    for d, (lo, hi) in enumerate(domain):
        h = FD_STEP_SCALE * (hi - lo)
        bump = np.zeros(x.shape[1])
        bump[d] = h
        grad[:, d] = (np.asarray(target.log_density(x + bump))
                      - np.asarray(target.log_density(x - bump))) / (2.0 * h)
    return logp, grad


def elbo_from_uniforms(posterior, target, u: np.ndarray, quantize: bool,
                       threads: int = 1, want_grad: bool = True
                       ) -> ElboEstimate:
    """ELBO estimate from a fixed batch of uniform draws."""
    posterior = as_posterior(posterior)
    domain = posterior.domain()
    t_total = u.shape[0]
    wstate = posterior.weight_state(want_grad)

    def one_chunk(sl: slice):
        res = posterior.push_uniforms(u[sl], wstate)
        x_eval = res.quantized if quantize else res.x
        logp, dlogp = _target_value_and_grad(target, x_eval, domain,
                                             want_grad)
        bad = np.isnan(logp)
        if bad.any():
            i = int(np.argmax(bad))
            raise TrainingError(
                f"target returned NaN at sample {x_eval[i].tolist()}",
                sample=x_eval[i])
        grad = None
        if want_grad:
            usable = np.isfinite(logp)
            dlogp = np.where(usable[:, None], dlogp, 0.0)
            grad = posterior.vjp_logp(res, dlogp, wstate)
        return float(logp.sum()), grad

    parts = _map_chunks(one_chunk, t_total, threads)
    logp_mean = math.fsum(p[0] for p in parts) / t_total
    if want_grad:
        entropy, grad = posterior.entropy_with_grad(wstate)
        for p in parts:
            grad += p[1] / t_total
    else:
        entropy = posterior.entropy()
        grad = np.zeros(0)
    return ElboEstimate(value=logp_mean + entropy, entropy_term=entropy,
                        expected_logp_term=logp_mean, grad=grad)


def elbo_estimate(posterior, target, cfg: TrainConfig,
                  rng: np.random.Generator) -> ElboEstimate:
    """Monte Carlo ELBO with gradient; draws ``cfg.mc_samples`` uniforms."""
    posterior = as_posterior(posterior)
    u = rng.random((cfg.mc_samples, posterior.dims))
    return elbo_from_uniforms(posterior, target, u, cfg.quantize, cfg.threads)


def reverse_kl(posterior, target, n_samples: int,
               rng: np.random.Generator) -> float:
    """MC estimate of KL(q || p) for a normalized target.

    Uses the exact closed-form entropy, so the estimate is the exact
    negative of the ELBO computed from the same draws.
    """
    if not target.normalized:
        raise ValueError("reverse KL needs a normalized target; report the "
                         "negative ELBO for unnormalized ones")
    posterior = as_posterior(posterior)
    u = rng.random((n_samples, posterior.dims))
    est = elbo_from_uniforms(posterior, target, u, quantize=False,
                             want_grad=False)
    return -est.value


# -- Adam ------------------------------------------------------------------


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n))


def adam_step(params: np.ndarray, grad: np.ndarray, state: AdamState,
              cfg: TrainConfig) -> tuple[np.ndarray, AdamState]:
    """One textbook Adam descent step on the given loss gradient."""
    state.t += 1
    state.m = cfg.adam_beta1 * state.m + (1.0 - cfg.adam_beta1) * grad
    state.v = cfg.adam_beta2 * state.v + (1.0 - cfg.adam_beta2) * grad * grad
    m_hat = state.m / (1.0 - cfg.adam_beta1 ** state.t)
    v_hat = state.v / (1.0 - cfg.adam_beta2 ** state.t)
    return params - cfg.learning_rate * m_hat / (np.sqrt(v_hat)
                                                 + cfg.adam_eps), state


# -- fit loop ----------------------------------------------------------------


def _step_target(target, step: int):
    for_step = getattr(target, "for_step", None)
    return for_step(step) if for_step is not None else target


def fit(posterior, target, cfg: TrainConfig, validation_target=None,
        trace_sink: Callable[[TraceRecord], None] | None = None):
    """Maximize the ELBO with Adam; returns ``(posterior, trace)``.

    ``target`` may expose ``for_step(step)`` to cycle minibatches.  With
    early stopping enabled the best-by-validation parameters are restored
    before returning; otherwise the final parameters stand.
    """
    wrapped = as_posterior(posterior)
    rng = np.random.default_rng(cfg.seed)
    params = wrapped.raw_vector()
    state = AdamState.zeros(params.size)
    trace = TrainTrace()

    stopper = cfg.early_stop
    if stopper is not None:
        if validation_target is None:
            validation_target = getattr(target, "validation_target", None)
        if validation_target is None and not hasattr(target, "for_step"):
            validation_target = target
        if validation_target is None:
            raise ValueError("early stopping with a minibatch schedule "
                             "needs an explicit validation target")
        u_val = np.random.default_rng(
            np.random.SeedSequence([cfg.seed, 0xE5])).random(
                (stopper.mc_samples, wrapped.dims))
        best_val = -np.inf
        best_params = None
        evals_since_best = 0

    t0 = time.perf_counter()
    for step in range(cfg.max_steps):
        est = elbo_estimate(wrapped, _step_target(target, step), cfg, rng)
        record = TraceRecord(step=step, elbo=est.value,
                             entropy=est.entropy_term,
                             grad_norm=float(np.linalg.norm(est.grad)),
                             wall_time=time.perf_counter() - t0)
        if not math.isfinite(est.value):
            trace.append(record)
            raise TrainingError(
                f"ELBO became non-finite ({est.value}) at step {step}",
                trace=trace)
        trace.append(record)
        if trace_sink is not None:
            trace_sink(record)
        params, state = adam_step(params, -est.grad, state, cfg)
        wrapped.set_raw_vector(params)

        if stopper is not None and (step + 1) % stopper.eval_every == 0:
            val = elbo_from_uniforms(wrapped, validation_target, u_val,
                                     cfg.quantize, cfg.threads,
                                     want_grad=False).value
            if val > best_val:
                best_val = val
                best_params = params.copy()
                evals_since_best = 0
            else:
                evals_since_best += 1
                if evals_since_best >= stopper.patience:
                    break
    if stopper is not None and best_params is not None:
        wrapped.set_raw_vector(best_params)
    return posterior, trace


# -- gradient verification -----------------------------------------------------


def grad_check(posterior, target, n_points: int = 20, h: float = 1e-5,
               n_coords: int | None = None, seed: int = 0) -> float:
    """Max relative error of the analytic ELBO gradient vs central
    differences.

    Uses common random numbers and draws evaluation points whose descent
    stays clear of branch boundaries (margins recovered from the stored
    post-move residuals: ``w (1 - u')`` on a left move, ``(1 - w) u'`` on a
    right move), so the finite differences probe a smooth region.
    Quantization is off (the straight-through forward is piecewise constant,
    which finite differences cannot see).
    """
    wrapped = as_posterior(posterior)
    rng = np.random.default_rng(seed)
    margin = max(10.0 * h, 5e-3)
    u = rng.random((n_points, wrapped.dims))
    for _ in range(500):
        bad = wrapped.path_margins(u) <= margin
        if not bad.any():
            break
        u[bad] = rng.random(int(bad.sum()))
    else:
        raise RuntimeError("could not sample points away from boundaries")

    analytic = elbo_from_uniforms(wrapped, target, u, quantize=False).grad
    params = wrapped.raw_vector()
    n_total = params.size
    coords = (np.arange(n_total) if n_coords is None or n_coords >= n_total
              else rng.choice(n_total, size=n_coords, replace=False))

    def objective() -> float:
        return elbo_from_uniforms(wrapped, target, u, quantize=False,
                                  want_grad=False).value

    worst = 0.0
    try:
        for i in coords:
            theta = params.copy()
            theta[i] = params[i] + h
            wrapped.set_raw_vector(theta)
            up = objective()
            theta[i] = params[i] - h
            wrapped.set_raw_vector(theta)
            down = objective()
            fd = (up - down) / (2.0 * h)
            scale = max(abs(analytic[i]), abs(fd), 1e-6)
            worst = max(worst, abs(analytic[i] - fd) / scale)
    finally:
        wrapped.set_raw_vector(params)
    return worst
