"""Bayesian MLP posterior targets, predictive inference, and datasets.

The network is a fixed two-hidden-layer MLP with optional pre-activation
layer norm; every weight, bias and layer-norm parameter gets its own
circuit in a mean-field posterior.  The unnormalized posterior log-density
(minibatch-scaled Bernoulli likelihood plus standard-normal prior) is
exposed as a target with hand-written reverse-mode gradients, so training
needs no autodiff framework.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .circuit import SmoothingSchedule
from .fixedpoint import FixedPointFormat
from .multivariate import MeanFieldPosterior

LN_EPS = 1e-5
LOG_2PI = math.log(2.0 * math.pi)

_ACTIVATIONS = ("tanh", "relu")


def weight_format_for(bits: int) -> FixedPointFormat:
    """Default weight format: sign + 2 integer bits, except the 2-bit model
    which is sign + 1 fraction bit."""
    if bits < 2:
        raise ValueError("weight formats need at least 2 bits")
    if bits == 2:
        return FixedPointFormat(True, 0, 1)
    if bits == 3:
        return FixedPointFormat(True, 2, 0)
    return FixedPointFormat(True, 2, bits - 3)


@dataclass(frozen=True)
class MlpSpec:
    """Two-hidden-layer MLP with optional pre-activation layer norm."""

    layer_sizes: tuple[int, int, int, int]
    layernorm: bool = True
    ln_affine: bool = True
    activation: str = "tanh"
    weight_format: FixedPointFormat = FixedPointFormat(True, 2, 5)

    def __post_init__(self) -> None:
        if len(self.layer_sizes) != 4:
            raise ValueError("layer_sizes must be (in, hidden1, hidden2, out)")
        if self.layer_sizes[-1] != 1:
            raise ValueError("binary classification needs a single logit")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"activation must be one of {_ACTIVATIONS}")

    @property
    def n_params(self) -> int:
        return self._slices()[-1][1]

    def _slices(self):
        """(start, stop, shape) of every parameter block in the flat vector."""
        blocks = []
        pos = 0

        def add(shape):
            nonlocal pos
            size = int(np.prod(shape))
            blocks.append((pos, pos + size, shape))
            pos += size

        sizes = self.layer_sizes
        for i in range(3):
            add((sizes[i], sizes[i + 1]))   # weights
            add((sizes[i + 1],))            # bias
            if self.layernorm and self.ln_affine and i < 2:
                add((sizes[i + 1],))        # layer-norm gain
                add((sizes[i + 1],))        # layer-norm bias
        return blocks


def _unpack(spec: MlpSpec, w: np.ndarray) -> list[np.ndarray]:
    if w.shape[-1] != spec.n_params:
        raise ValueError(
            f"expected {spec.n_params} parameters, got {w.shape[-1]}")
    return [w[..., a:b].reshape(w.shape[:-1] + shape)
            for a, b, shape in spec._slices()]


def _act(spec: MlpSpec, z: np.ndarray) -> np.ndarray:
    return np.tanh(z) if spec.activation == "tanh" else np.maximum(z, 0.0)


def _act_grad(spec: MlpSpec, a: np.ndarray, z: np.ndarray) -> np.ndarray:
    return 1.0 - a * a if spec.activation == "tanh" else (z > 0).astype(float)


def _forward(spec: MlpSpec, w: np.ndarray, x: np.ndarray, keep_cache: bool):
    """Batched forward pass: ``w`` is (S, P), ``x`` is (n, d) -> (S, n)."""
    params = _unpack(spec, w)
    affine = spec.layernorm and spec.ln_affine
    per_hidden = 4 if affine else 2
    a = np.broadcast_to(x, (w.shape[0],) + x.shape)
    cache = {"a": [a], "z": [], "zn": [], "inv": [], "zl": []}
    for i in range(2):
        wi, bi = params[per_hidden * i], params[per_hidden * i + 1]
        z = a @ wi + bi[:, None, :]
        if spec.layernorm:
            zc = z - z.mean(axis=-1, keepdims=True)
            inv = 1.0 / np.sqrt((zc * zc).mean(axis=-1, keepdims=True)
                                + LN_EPS)
            zn = zc * inv
            if affine:
                gain = params[per_hidden * i + 2]
                bias = params[per_hidden * i + 3]
                zl = gain[:, None, :] * zn + bias[:, None, :]
            else:
                zl = zn
        else:
            zn, inv, zl = None, None, z
        a = _act(spec, zl)
        if keep_cache:
            cache["z"].append(z)
            cache["zn"].append(zn)
            cache["inv"].append(inv)
            cache["zl"].append(zl)
            cache["a"].append(a)
    w3, b3 = params[per_hidden * 2], params[per_hidden * 2 + 1]
    logits = (a @ w3)[..., 0] + b3
    if not keep_cache:
        return logits, None
    cache["params"] = params
    cache["final_a"] = a
    return logits, cache


def _backward(spec: MlpSpec, cache: dict, dlogit: np.ndarray) -> np.ndarray:
    """Gradient of ``sum dlogit * logit`` w.r.t. the flat weights, (S, P)."""
    params = cache["params"]
    affine = spec.layernorm and spec.ln_affine
    per_hidden = 4 if affine else 2
    grads = [None] * len(params)
    w3 = params[per_hidden * 2]
    dz3 = dlogit[..., None]
    grads[per_hidden * 2] = cache["final_a"].transpose(0, 2, 1) @ dz3
    grads[per_hidden * 2 + 1] = dz3.sum(axis=1)
    da = dz3 @ w3.transpose(0, 2, 1)
    for i in (1, 0):
        zl = cache["zl"][i]
        dzl = da * _act_grad(spec, cache["a"][i + 1], zl)
        if spec.layernorm:
            zn, inv = cache["zn"][i], cache["inv"][i]
            if affine:
                gain = params[per_hidden * i + 2]
                grads[per_hidden * i + 2] = (dzl * zn).sum(axis=1)
                grads[per_hidden * i + 3] = dzl.sum(axis=1)
                dzn = dzl * gain[:, None, :]
            else:
                dzn = dzl
            dz = inv * (dzn - dzn.mean(axis=-1, keepdims=True)
                        - zn * (dzn * zn).mean(axis=-1, keepdims=True))
        else:
            dz = dzl
        wi = params[per_hidden * i]
        grads[per_hidden * i] = cache["a"][i].transpose(0, 2, 1) @ dz
        grads[per_hidden * i + 1] = dz.sum(axis=1)
        da = dz @ wi.transpose(0, 2, 1)
    return np.concatenate([g.reshape(g.shape[0], -1) for g in grads], axis=1)


def mlp_forward(spec: MlpSpec, flat_weights: np.ndarray,
                x: np.ndarray) -> np.ndarray:
    """Logits of a single weight vector on a batch of inputs."""
    w = np.asarray(flat_weights, dtype=float)
    logits, _ = _forward(spec, w[None, :], np.atleast_2d(np.asarray(x, float)),
                         keep_cache=False)
    return logits[0]


def _bernoulli_loglik(logits: np.ndarray, y: np.ndarray) -> np.ndarray:
    # log sigmoid(l) = -log(1 + e^-l); log(1 - sigmoid(l)) = -log(1 + e^l)
    return -(y * np.logaddexp(0.0, -logits)
             + (1.0 - y) * np.logaddexp(0.0, logits))


def log_joint(spec: MlpSpec, x: np.ndarray, y: np.ndarray,
              flat_weights: np.ndarray, n_total: int | None = None):
    """Unnormalized posterior log-density at one or many weight vectors.

    Minibatch likelihoods are rescaled by ``n_total / len(x)`` so they
    estimate the full-data term; the prior is standard normal per parameter.
    """
    w = np.asarray(flat_weights, dtype=float)
    single = w.ndim == 1
    wb = np.atleast_2d(w)
    x = np.atleast_2d(np.asarray(x, float))
    y = np.asarray(y, dtype=float)
    scale = (n_total if n_total is not None else len(x)) / len(x)
    logits, _ = _forward(spec, wb, x, keep_cache=False)
    ll = scale * _bernoulli_loglik(logits, y[None, :]).sum(axis=1)
    prior = -0.5 * (wb * wb).sum(axis=1) - 0.5 * wb.shape[1] * LOG_2PI
    out = ll + prior
    return float(out[0]) if single else out


class BnnTarget:
    """Posterior log-joint on a fixed batch, as a trainable target."""

    grad = None

    def __init__(self, spec: MlpSpec, x: np.ndarray, y: np.ndarray,
                 n_total: int):
        self.spec = spec
        self.x = np.atleast_2d(np.asarray(x, float))
        self.y = np.asarray(y, dtype=float)
        self.n_total = n_total
        self.scale = n_total / len(self.x)
        self.dims = spec.n_params
        self.normalized = False
        lim = spec.weight_format
        self.recommended_domain = ((lim.lo, lim.hi),) * self.dims

    def log_density(self, w: np.ndarray) -> np.ndarray:
        return log_joint(self.spec, self.x, self.y, np.atleast_2d(w),
                         n_total=self.n_total)

    def value_and_grad(self, w: np.ndarray):
        wb = np.atleast_2d(np.asarray(w, dtype=float))
        logits, cache = _forward(self.spec, wb, self.x, keep_cache=True)
        ll = self.scale * _bernoulli_loglik(logits, self.y[None, :]).sum(axis=1)
        prior = -0.5 * (wb * wb).sum(axis=1) - 0.5 * wb.shape[1] * LOG_2PI
        probs = 1.0 / (1.0 + np.exp(-logits))
        dlogit = self.scale * (self.y[None, :] - probs)
        grad = _backward(self.spec, cache, dlogit) - wb
        return ll + prior, grad


class BnnTargetSchedule:
    """Deterministic epoch-shuffled minibatch schedule over the train split."""

    def __init__(self, spec: MlpSpec, dataset: "Dataset", batch_size: int,
                 seed: int):
        self.spec = spec
        self.x, self.y = dataset.subset("train")
        self.batch_size = min(batch_size, len(self.x))
        self.seed = seed
        self.dims = spec.n_params
        self.normalized = False
        self._epoch = -1
        self._order = None
        xv, yv = dataset.subset("val")
        # Validation likelihoods are scaled to the train size so the
        # monitored ELBO is comparable to the training objective.
        self.validation_target = (
            BnnTarget(spec, xv, yv, n_total=len(self.x)) if len(xv)
            else BnnTarget(spec, self.x, self.y, len(self.x)))

    @property
    def batches_per_epoch(self) -> int:
        return math.ceil(len(self.x) / self.batch_size)

    def for_step(self, step: int) -> BnnTarget:
        epoch, b = divmod(step, self.batches_per_epoch)
        if epoch != self._epoch:
            rng = np.random.default_rng(
                np.random.SeedSequence([self.seed, epoch]))
            self._order = rng.permutation(len(self.x))
            self._epoch = epoch
        idx = self._order[b * self.batch_size:(b + 1) * self.batch_size]
        return BnnTarget(self.spec, self.x[idx], self.y[idx],
                         n_total=len(self.x))


def make_posterior(spec: MlpSpec, smoothing: SmoothingSchedule,
                   seed: int) -> MeanFieldPosterior:
    """Mean-field posterior with one circuit per MLP parameter."""
    return MeanFieldPosterior.random([spec.weight_format] * spec.n_params,
                                     smoothing, seed)


def predictive(posterior: MeanFieldPosterior, spec: MlpSpec, x: np.ndarray,
               n_samples: int,
               rng: np.random.Generator | None = None) -> np.ndarray:
    """Posterior predictive p(y=1 | x) from quantized weight samples."""
    if n_samples < 1:
        raise ValueError("need at least one posterior sample")
    rng = rng if rng is not None else np.random.default_rng(0)
    _, w_quant = posterior.sample(rng, n_samples)
    logits, _ = _forward(spec, w_quant, np.atleast_2d(np.asarray(x, float)),
                         keep_cache=False)
    return (1.0 / (1.0 + np.exp(-logits))).mean(axis=0)


def metrics(probs: np.ndarray, labels: np.ndarray,
            n_bins: int = 10) -> dict[str, float]:
    """NLPD, accuracy at 0.5 and expected calibration error."""
    p = np.clip(np.asarray(probs, dtype=float), 1e-7, 1.0 - 1e-7)
    y = np.asarray(labels, dtype=float)
    nlpd = float(-(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)).mean())
    pred = (p >= 0.5).astype(float)
    accuracy = float((pred == y).mean())
    confidence = np.maximum(p, 1.0 - p)
    bins = np.clip((confidence * n_bins).astype(int), 0, n_bins - 1)
    ece = 0.0
    for b in range(n_bins):
        mask = bins == b
        if mask.any():
            acc_b = float((pred[mask] == y[mask]).mean())
            conf_b = float(confidence[mask].mean())
            ece += mask.mean() * abs(acc_b - conf_b)
    return {"nlpd": nlpd, "accuracy": accuracy, "ece": float(ece)}


# -- datasets -----------------------------------------------------------------


@dataclass
class Dataset:
    """Standardized inputs with binary labels and split tags."""

    name: str
    inputs: np.ndarray
    labels: np.ndarray
    split: np.ndarray
    params: dict = field(default_factory=dict)

    def subset(self, tag: str) -> tuple[np.ndarray, np.ndarray]:
        mask = self.split == tag
        return self.inputs[mask], self.labels[mask]

    def to_csv(self, path) -> None:
        d = self.inputs.shape[1]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([f"x{i + 1}" for i in range(d)] + ["y", "split"])
            for row, label, tag in zip(self.inputs, self.labels, self.split):
                writer.writerow([repr(v) for v in row]
                                + [int(label), str(tag)])

    @classmethod
    def from_csv(cls, path, name: str = "csv") -> "Dataset":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            has_split = header[-1] == "split"
            d = len(header) - 1 - int(has_split)
            xs, ys, tags = [], [], []
            for row in reader:
                xs.append([float(v) for v in row[:d]])
                ys.append(int(row[d]))
                tags.append(row[d + 1] if has_split else "train")
        return cls(name, np.asarray(xs), np.asarray(ys, dtype=np.int64),
                   np.asarray(tags))


def two_moons_points(n: int, noise: float,
                     rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Interleaving half-circles: class 0 on the upper unit half-circle at
    the origin, class 1 on the lower half-circle centered at (1, 0.5)."""
    y = rng.integers(0, 2, size=n)
    theta = rng.uniform(0.0, math.pi, size=n)
    x = np.where(y[:, None] == 0,
                 np.stack([np.cos(theta), np.sin(theta)], axis=1),
                 np.stack([1.0 - np.cos(theta), 0.5 - np.sin(theta)], axis=1))
    return x + noise * rng.standard_normal((n, 2)), y


def banana_points(n: int, noise: float,
                  rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Interlocking parabolic arcs: class 0 on y = t^2/2 - 1, class 1 on the
    mirrored arc y = 1 - t^2/2, with t uniform on [-2.5, 2.5]."""
    y = rng.integers(0, 2, size=n)
    t = rng.uniform(-2.5, 2.5, size=n)
    arc = 0.5 * t * t - 1.0
    x = np.stack([t, np.where(y == 0, arc, -arc)], axis=1)
    return x + noise * rng.standard_normal((n, 2)), y


_GENERATORS = {"two_moons": two_moons_points, "banana_clf": banana_points}

_DATASET_DEFAULTS = {
    "two_moons": {"n_train": 1024, "n_val": 256, "n_test": 512,
                  "noise": 0.1},
    "banana_clf": {"n_train": 2048, "n_val": 512, "n_test": 512,
                   "noise": 0.35},
}


def make_dataset(name: str, params: dict | None = None,
                 seed: int = 0) -> Dataset:
    """Generate, split and standardize one of the synthetic datasets."""
    if name not in _GENERATORS:
        raise ValueError(f"unknown dataset {name!r}; "
                         f"available: {', '.join(sorted(_GENERATORS))}")
    p = {**_DATASET_DEFAULTS[name], **(params or {})}
    rng = np.random.default_rng(seed)
    sizes = [p["n_train"], p["n_val"], p["n_test"]]
    x, y = _GENERATORS[name](sum(sizes), p["noise"], rng)
    tags = np.repeat(["train", "val", "test"], sizes)
    train_x = x[:sizes[0]]
    mean = train_x.mean(axis=0)
    std = train_x.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    return Dataset(name, (x - mean) / std, y.astype(np.int64), tags,
                   params={**p, "seed": seed})
