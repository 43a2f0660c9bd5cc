"""Univariate deterministic probabilistic circuit over a fixed-point format.

The circuit is a complete binary tree: one sum node per dyadic interval of
depth < B, one uniform leaf per format cell.  Each node stores a pair of raw
pre-weights; the effective left probability is their softmax-like ratio with
depth-dependent Laplace smoothing, so weights are always interior and the
tree stays normalized by construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, NamedTuple

import numpy as np

from . import treeops
from .fixedpoint import Bits, FixedPointFormat, bits_to_index, index_to_bits

# Wider trees would need log-space mass accumulation; the experiments top
# out at 16 bits.
MAX_CIRCUIT_BITS = 16

_ALPHA_RULES = ("quadratic", "exponential")


@dataclass(frozen=True)
class SmoothingSchedule:
    """Laplace smoothing constant and its growth rule over tree depth.

    The additive term at a depth-``j`` node is ``c * alpha(j + depth_offset)``
    with ``alpha(j) = j**2`` (quadratic) or ``2**j`` (exponential).  Under the
    quadratic rule the root (depth 0) is unsmoothed.
    """

    c: float
    alpha_rule: str = "quadratic"
    depth_offset: int = 0

    def __post_init__(self) -> None:
        if not self.c > 0:
            raise ValueError("smoothing constant c must be positive")
        if self.alpha_rule not in _ALPHA_RULES:
            raise ValueError(f"alpha_rule must be one of {_ALPHA_RULES}")

    def alpha(self, depth) -> np.ndarray:
        j = np.maximum(np.asarray(depth, dtype=float) + self.depth_offset, 0.0)
        if self.alpha_rule == "quadratic":
            return j * j
        return np.exp2(j)

    def additive(self, depth) -> np.ndarray:
        return self.c * self.alpha(depth)


class CircuitSample(NamedTuple):
    x: float
    quantized: float
    leaf: Bits


class BitCircuit:
    """Density, CDF, inverse CDF, sampling and entropy over one format."""

    def __init__(self, fmt: FixedPointFormat, smoothing: SmoothingSchedule,
                 raw: np.ndarray):
        if fmt.total_bits > MAX_CIRCUIT_BITS:
            raise ValueError(
                f"circuit depth {fmt.total_bits} exceeds {MAX_CIRCUIT_BITS}")
        n = treeops.n_internal(fmt.total_bits)
        raw = np.asarray(raw, dtype=float)
        if raw.shape != (n, 2):
            raise ValueError(f"pre-weights must have shape ({n}, 2)")
        self.fmt = fmt
        self.smoothing = smoothing
        self.raw = raw
        self.smooth_add = smoothing.additive(treeops.node_depths(fmt.total_bits))

    # -- construction -----------------------------------------------------

    @classmethod
    def uniform(cls, fmt: FixedPointFormat,
                smoothing: SmoothingSchedule) -> "BitCircuit":
        """All weights exactly 0.5 (equal pre-weights at every node)."""
        return cls(fmt, smoothing,
                   np.zeros((treeops.n_internal(fmt.total_bits), 2)))

    @property
    def depth(self) -> int:
        return self.fmt.total_bits

    @property
    def n_nodes(self) -> int:
        return treeops.n_internal(self.depth)

    # -- weights ----------------------------------------------------------

    def left_weights(self) -> np.ndarray:
        """Smoothed left-child probability of every node, breadth-first."""
        return treeops.left_weights(self.raw, self.smooth_add)

    def weights(self, prefix: Bits) -> tuple[float, float]:
        """Smoothed ``(wL, wR)`` of the node addressed by ``prefix``."""
        j = len(prefix)
        if j >= self.depth:
            raise ValueError(f"prefix of length {j} is not an internal node")
        idx = treeops.n_internal(j) + bits_to_index(prefix)
        w = float(treeops.left_weights(self.raw[idx], self.smooth_add[idx]))
        return w, 1.0 - w

    # -- evaluation -------------------------------------------------------

    def _cell_indices(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Leaf index per query plus an in-range mask."""
        fmt = self.fmt
        inside = (x >= fmt.lo) & (x < fmt.hi)
        scaled = (np.where(inside, x, fmt.lo) - fmt.lo) * (2.0 ** fmt.frac_bits)
        k = np.minimum(np.floor(scaled).astype(np.int64), fmt.n_cells - 1)
        return k, inside

    def log_density(self, x):
        """Log density; ``-inf`` outside the representable range."""
        arr = np.asarray(x, dtype=float)
        k, inside = self._cell_indices(np.atleast_1d(arr))
        logs = treeops.path_log_weight(self.left_weights()[None, :],
                                       k[:, None], self.depth)[:, 0]
        out = np.where(inside, logs - math.log(self.fmt.resolution), -np.inf)
        return float(out[0]) if arr.ndim == 0 else out.reshape(arr.shape)

    def cdf(self, x):
        """P(X <= x), clamped to [0, 1] outside the range."""
        arr = np.asarray(x, dtype=float)
        xs = np.atleast_1d(arr).astype(float)
        fmt = self.fmt
        wl = self.left_weights()
        acc = np.zeros_like(xs)
        scale = np.ones_like(xs)
        offset = np.zeros(xs.shape, dtype=np.int64)
        below = xs <= fmt.lo
        above = xs >= fmt.hi
        inside = ~(below | above)
        for j in range(self.depth):
            node = ((1 << j) - 1) + offset
            w = wl[node]
            mid = fmt.lo + (2 * offset + 1) * math.ldexp(fmt.hi - fmt.lo,
                                                         -(j + 1))
            right = inside & (xs >= mid)
            acc = np.where(right, acc + scale * w, acc)
            scale = np.where(right, scale * (1.0 - w), np.where(inside,
                                                                scale * w,
                                                                scale))
            offset = 2 * offset + right
        a = fmt.lo + offset * fmt.resolution
        acc = np.where(inside, acc + scale * (xs - a) / fmt.resolution, acc)
        acc = np.where(above, 1.0, np.where(below, 0.0, acc))
        return float(acc[0]) if arr.ndim == 0 else acc.reshape(arr.shape)

    def inverse_cdf(self, u: float) -> tuple[float, Bits]:
        """Exact inverse of the CDF plus the leaf bitstring it lands in."""
        if not 0.0 <= u < 1.0:
            raise ValueError(f"u must lie in [0, 1), got {u!r}")
        x, _, leaf, _ = self._descend(np.asarray([u]))
        return float(x[0]), index_to_bits(int(leaf[0]), self.depth)

    def _descend(self, u: np.ndarray):
        """Batched inverse CDF: continuous value, quantized value, leaf."""
        wl = self.left_weights()
        leaf, resid, state = treeops.descend(wl[None, :], u[:, None],
                                             self.depth)
        a = self.fmt.lo + leaf[:, 0] * self.fmt.resolution
        return a + resid[:, 0] * self.fmt.resolution, a, leaf[:, 0], state

    def sample(self, rng: np.random.Generator, n: int) -> list[CircuitSample]:
        """Draw ``n`` samples via inverse-CDF reparameterization."""
        if n < 0:
            raise ValueError("sample count must be non-negative")
        if n == 0:
            return []
        x, quant, leaf, _ = self._descend(rng.random(n))
        return [CircuitSample(float(x[i]), float(quant[i]),
                              index_to_bits(int(leaf[i]), self.depth))
                for i in range(n)]

    def entropy(self) -> float:
        """Closed-form entropy in nats (one pass, linear in edges)."""
        return float(treeops.entropy(self.left_weights(),
                                     math.log(self.fmt.resolution),
                                     self.depth))

    def leaf_masses(self) -> np.ndarray:
        """Mass of every leaf cell in bit order (path products)."""
        return treeops.leaf_masses(self.left_weights(), self.depth)

    # -- precision truncation ----------------------------------------------

    def truncate(self, new_frac_bits: int) -> "BitCircuit":
        """Exact marginalization to fewer fraction bits.

        Nodes above the new leaf level are kept verbatim, so every surviving
        prefix keeps its mass; each removed subtree becomes a uniform leaf.
        """
        fmt = self.fmt
        if not 0 <= new_frac_bits <= fmt.frac_bits:
            raise ValueError("new fraction bit count must be in [0, F]")
        new_fmt = FixedPointFormat(fmt.has_sign, fmt.int_bits, new_frac_bits)
        if new_fmt.total_bits < 1:
            raise ValueError("truncation would leave an empty format")
        keep = treeops.n_internal(new_fmt.total_bits)
        return BitCircuit(new_fmt, self.smoothing, self.raw[:keep].copy())

    # -- serialization ------------------------------------------------------

    def to_json_dict(self) -> dict:
        return {
            "version": 1,
            "kind": "circuit",
            "format": str(self.fmt),
            "smoothing": _smoothing_to_json(self.smoothing),
            "pre_weights": [v.hex() for v in self.raw.ravel().tolist()],
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "BitCircuit":
        if doc.get("kind") != "circuit" or doc.get("version") != 1:
            raise ValueError("not a version-1 circuit document")
        fmt = FixedPointFormat.from_string(doc["format"])
        raw = np.array([float.fromhex(v) for v in doc["pre_weights"]],
                       dtype=float).reshape(-1, 2)
        return cls(fmt, _smoothing_from_json(doc["smoothing"]), raw)


def _smoothing_to_json(s: SmoothingSchedule) -> dict:
    return {"c": s.c.hex(), "alpha_rule": s.alpha_rule,
            "depth_offset": s.depth_offset}


def _smoothing_from_json(doc: dict) -> SmoothingSchedule:
    return SmoothingSchedule(c=float.fromhex(doc["c"]),
                             alpha_rule=doc["alpha_rule"],
                             depth_offset=int(doc["depth_offset"]))


def new_circuit(fmt: FixedPointFormat, smoothing: SmoothingSchedule,
                init_seed: int) -> BitCircuit:
    """Fresh circuit with Beta-initialized weights.

    A node at height ``h`` (leaves at height 0) draws its left weight from
    ``Beta(2**h, 2**h)``, so deeper nodes start closer to uniform; the raw
    pre-weights are set to ``log wL`` / ``log wR`` so the pre-smoothing
    ratio reproduces the draw.
    """
    rng = np.random.default_rng(init_seed)
    depths = treeops.node_depths(fmt.total_bits)
    conc = np.exp2((fmt.total_bits - depths).astype(float))
    wl = rng.beta(conc, conc)
    # Guard against degenerate draws at float resolution.
    wl = np.clip(wl, 1e-12, 1.0 - 1e-12)
    raw = np.stack([np.log(wl), np.log1p(-wl)], axis=1)
    return BitCircuit(fmt, smoothing, raw)


def iter_prefixes(depth: int) -> Iterator[Bits]:
    """All internal-node prefixes of a depth-``depth`` tree, breadth-first."""
    for j in range(depth):
        for k in range(1 << j):
            yield index_to_bits(k, j)
