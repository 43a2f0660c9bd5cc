"""Multivariate variational families built from bit circuits.

Two constructions: a mean-field product of independent per-dimension
circuits, and a single joint tree that alternates axis-aligned splits so its
leaves tile the product range with hyper-rectangles.  Both expose the same
protocol the trainer drives: uniform pushforward with reverse-pass state,
vector-Jacobian products into raw parameter space, and closed-form entropy
with exact gradients.
"""

from __future__ import annotations

import math
from typing import NamedTuple, Sequence

import numpy as np

from . import treeops
from .circuit import BitCircuit, SmoothingSchedule, _smoothing_from_json, \
    _smoothing_to_json
from .fixedpoint import Bits, FixedPointFormat, index_to_bits

# 2**(B*D) leaves make the joint tree explode; cap it and use mean-field
# beyond the cap.
MAX_JOINT_LEVELS = 24


class PushResult(NamedTuple):
    x: np.ndarray          # continuous inverse-CDF output, (T, D)
    quantized: np.ndarray  # lower endpoint of the visited leaf box, (T, D)
    leaves: np.ndarray     # leaf index per tree: (T, D) mean-field, (T,) joint
    state: object


class _WeightState(NamedTuple):
    """Smoothed weights (and their raw-space Jacobians) for one step."""

    wl: np.ndarray           # (G, n_nodes) or (n_nodes,)
    f0: np.ndarray | None    # d wL / d raw0, same shape as wl
    f1: np.ndarray | None


class MeanFieldPosterior:
    """Product of independent univariate circuits, one per dimension.

    Dimensions sharing a format and schedule are stored in one stacked
    ``(G, n_nodes, 2)`` block; each member circuit's ``raw`` is rebound to a
    view of its row, so per-circuit reads and block-level kernels see the
    same parameters.
    """

    def __init__(self, circuits: Sequence[BitCircuit]):
        if not circuits:
            raise ValueError("need at least one circuit")
        if len({id(c) for c in circuits}) != len(circuits):
            raise ValueError("circuits must be distinct objects")
        self.circuits = list(circuits)
        groups: dict[tuple, list[int]] = {}
        for d, c in enumerate(self.circuits):
            groups.setdefault((c.fmt, c.smoothing), []).append(d)
        self._groups = [np.asarray(cols, dtype=np.int64)
                        for cols in groups.values()]
        self._storage = []
        for cols in self._groups:
            block = np.stack([self.circuits[d].raw for d in cols])
            for i, d in enumerate(cols):
                self.circuits[d].raw = block[i]
            self._storage.append(block)
        sizes = [c.raw.size for c in self.circuits]
        self._offsets = np.concatenate([[0], np.cumsum(sizes)])

    @classmethod
    def random(cls, fmts: Sequence[FixedPointFormat],
               smoothing: SmoothingSchedule, seed: int) -> "MeanFieldPosterior":
        from .circuit import new_circuit
        seeds = np.random.SeedSequence(seed).generate_state(len(fmts))
        return cls([new_circuit(f, smoothing, int(s))
                    for f, s in zip(fmts, seeds)])

    @property
    def dims(self) -> int:
        return len(self.circuits)

    @property
    def n_raw_params(self) -> int:
        return int(self._offsets[-1])

    def raw_vector(self) -> np.ndarray:
        return np.concatenate([c.raw.ravel() for c in self.circuits])

    def set_raw_vector(self, vec: np.ndarray) -> None:
        if vec.shape != (self.n_raw_params,):
            raise ValueError("parameter vector has the wrong length")
        for d, c in enumerate(self.circuits):
            c.raw[:] = vec[self._offsets[d]:self._offsets[d + 1]].reshape(-1, 2)

    def domain(self) -> list[tuple[float, float]]:
        return [(c.fmt.lo, c.fmt.hi) for c in self.circuits]

    # -- densities ----------------------------------------------------------

    def _check_dims(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.dims:
            raise ValueError(
                f"expected trailing dimension {self.dims}, got {x.shape}")
        return x

    def weight_state(self, want_grad: bool = True) -> list[_WeightState]:
        """Smoothed weights of every group, computed once per step."""
        out = []
        for cols, block in zip(self._groups, self._storage):
            c0 = self.circuits[cols[0]]
            if want_grad:
                wl, f0, f1 = treeops.left_weight_jacobian(block, c0.smooth_add)
            else:
                wl, f0, f1 = treeops.left_weights(block, c0.smooth_add), \
                    None, None
            out.append(_WeightState(wl, f0, f1))
        return out

    def log_density(self, x):
        x = self._check_dims(x)
        batch = np.atleast_2d(x)
        out = np.zeros(batch.shape[0])
        wstate = self.weight_state(want_grad=False)
        for cols, ws in zip(self._groups, wstate):
            c0 = self.circuits[cols[0]]
            ks, insides = [], []
            for d in cols:
                k, inside = self.circuits[d]._cell_indices(batch[:, d])
                ks.append(k)
                insides.append(inside)
            leaf = np.stack(ks, axis=1)
            ok = np.stack(insides, axis=1).all(axis=1)
            logs = treeops.path_log_weight(ws.wl, leaf, c0.depth).sum(axis=1)
            logs -= len(cols) * math.log(c0.fmt.resolution)
            out += np.where(ok, logs, -np.inf)
        return float(out[0]) if x.ndim == 1 else out

    def entropy(self) -> float:
        total = 0.0
        for cols, ws in zip(self._groups, self.weight_state(want_grad=False)):
            c0 = self.circuits[cols[0]]
            total += float(treeops.entropy(
                ws.wl, math.log(c0.fmt.resolution), c0.depth).sum())
        return total

    def inverse_cdf(self, u) -> tuple[np.ndarray, list[Bits]]:
        """Per-dimension inverse CDF of a point in the unit box."""
        u = np.asarray(u, dtype=float)
        if u.shape != (self.dims,):
            raise ValueError(f"expected {self.dims} coordinates")
        xs, leaves = [], []
        for d, c in enumerate(self.circuits):
            x, leaf = c.inverse_cdf(float(u[d]))
            xs.append(x)
            leaves.append(leaf)
        return np.asarray(xs), leaves

    def sample(self, rng: np.random.Generator, n: int
               ) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(x_continuous, x_quantized)`` arrays of shape (n, D)."""
        res = self.push_uniforms(rng.random((n, self.dims)))
        return res.x, res.quantized

    # -- trainer protocol -----------------------------------------------------

    def push_uniforms(self, u: np.ndarray,
                      wstate: list[_WeightState] | None = None) -> PushResult:
        u = self._check_dims(u)
        if np.any(u < 0.0) or np.any(u >= 1.0):
            raise ValueError("uniform draws must lie in [0, 1)")
        if wstate is None:
            wstate = self.weight_state(want_grad=False)
        t = u.shape[0]
        x = np.empty((t, self.dims))
        quant = np.empty((t, self.dims))
        leaves = np.empty((t, self.dims), dtype=np.int64)
        states = []
        for cols, ws in zip(self._groups, wstate):
            c0 = self.circuits[cols[0]]
            leaf, resid, st = treeops.descend(ws.wl, u[:, cols], c0.depth)
            a = c0.fmt.lo + leaf * c0.fmt.resolution
            x[:, cols] = a + resid * c0.fmt.resolution
            quant[:, cols] = a
            leaves[:, cols] = leaf
            states.append(st)
        return PushResult(x, quant, leaves, states)

    def _scatter_by_dim(self, grad: np.ndarray, cols: np.ndarray,
                        graw: np.ndarray) -> None:
        for i, d in enumerate(cols):
            grad[self._offsets[d]:self._offsets[d + 1]] += graw[i].ravel()

    def vjp_logp(self, result: PushResult, dlogp: np.ndarray,
                 wstate: list[_WeightState] | None = None) -> np.ndarray:
        """Gradient of ``sum_s dlogp_s . x_s`` w.r.t. the raw parameters."""
        if wstate is None or wstate[0].f0 is None:
            wstate = self.weight_state(want_grad=True)
        grad = np.zeros(self.n_raw_params)
        for cols, st, ws in zip(self._groups, result.state, wstate):
            c0 = self.circuits[cols[0]]
            lam = dlogp[:, cols] * c0.fmt.resolution
            gw = treeops.descend_vjp(st, lam, len(cols), c0.n_nodes)
            self._scatter_by_dim(grad, cols,
                                 np.stack([gw * ws.f0, gw * ws.f1], axis=-1))
        return grad

    def entropy_with_grad(self, wstate: list[_WeightState] | None = None
                          ) -> tuple[float, np.ndarray]:
        if wstate is None or wstate[0].f0 is None:
            wstate = self.weight_state(want_grad=True)
        total = 0.0
        grad = np.zeros(self.n_raw_params)
        for cols, ws in zip(self._groups, wstate):
            c0 = self.circuits[cols[0]]
            h, gw = treeops.entropy_and_grad(
                ws.wl, math.log(c0.fmt.resolution), c0.depth)
            total += float(h.sum())
            self._scatter_by_dim(grad, cols,
                                 np.stack([gw * ws.f0, gw * ws.f1], axis=-1))
        return total, grad

    def path_margins(self, u: np.ndarray) -> np.ndarray:
        """Per-dimension distance of each sample's residuals to the branch
        thresholds along its path, shape ``(T, D)``.  A perturbation of one
        circuit's weights can only flip branches in its own dimension."""
        res = self.push_uniforms(u)
        margins = np.empty_like(u)
        for cols, st in zip(self._groups, res.state):
            m = np.full((u.shape[0], len(cols)), np.inf)
            for w, right, post in zip(st.weights, st.went_right,
                                      st.residuals):
                m = np.minimum(m, np.where(right, (1.0 - w) * post,
                                           w * (1.0 - post)))
            margins[:, cols] = m
        return margins

    # -- precision truncation -------------------------------------------------

    def truncate(self, new_frac_bits: int) -> "MeanFieldPosterior":
        return MeanFieldPosterior([c.truncate(new_frac_bits)
                                   for c in self.circuits])

    # -- serialization ----------------------------------------------------------

    def to_json_dict(self) -> dict:
        return {"version": 1, "kind": "meanfield",
                "circuits": [c.to_json_dict() for c in self.circuits]}

    @classmethod
    def from_json_dict(cls, doc: dict) -> "MeanFieldPosterior":
        if doc.get("kind") != "meanfield" or doc.get("version") != 1:
            raise ValueError("not a version-1 mean-field document")
        return cls([BitCircuit.from_json_dict(d) for d in doc["circuits"]])


class JointTreeCircuit:
    """Single alternating-split tree over all dimensions.

    Level ``l`` splits axis ``axis_order[l % D]``, so after ``B * D`` levels
    every dimension has been halved ``B`` times and the leaves are congruent
    hyper-rectangles (one per combination of per-dimension cells).
    """

    def __init__(self, fmts: Sequence[FixedPointFormat],
                 smoothing: SmoothingSchedule, raw: np.ndarray,
                 axis_order: Sequence[int] | None = None):
        fmts = list(fmts)
        if not fmts:
            raise ValueError("need at least one dimension")
        bits = {f.total_bits for f in fmts}
        if len(bits) != 1:
            raise ValueError("joint tree requires an equal bit budget per "
                             f"dimension, got {sorted(bits)}")
        self.bits_per_dim = bits.pop()
        self.fmts = fmts
        levels = self.bits_per_dim * len(fmts)
        if levels > MAX_JOINT_LEVELS:
            raise ValueError(
                f"B*D = {levels} exceeds the joint-tree cap "
                f"{MAX_JOINT_LEVELS}; use a mean-field posterior")
        if axis_order is None:
            axis_order = tuple(range(len(fmts)))
        if sorted(axis_order) != list(range(len(fmts))):
            raise ValueError("axis_order must be a permutation of dimensions")
        self.axis_order = tuple(int(a) for a in axis_order)
        self.axes = np.asarray(
            [self.axis_order[l % len(fmts)] for l in range(levels)],
            dtype=np.int64)
        raw = np.asarray(raw, dtype=float)
        n = treeops.n_internal(levels)
        if raw.shape != (n, 2):
            raise ValueError(f"pre-weights must have shape ({n}, 2)")
        self.raw = raw
        self.smoothing = smoothing
        self.smooth_add = smoothing.additive(treeops.node_depths(levels))

    @classmethod
    def random(cls, fmts: Sequence[FixedPointFormat],
               smoothing: SmoothingSchedule, seed: int,
               axis_order: Sequence[int] | None = None) -> "JointTreeCircuit":
        fmts = list(fmts)
        levels = fmts[0].total_bits * len(fmts)
        rng = np.random.default_rng(seed)
        depths = treeops.node_depths(levels)
        conc = np.exp2((levels - depths).astype(float))
        wl = np.clip(rng.beta(conc, conc), 1e-12, 1.0 - 1e-12)
        raw = np.stack([np.log(wl), np.log1p(-wl)], axis=1)
        return cls(fmts, smoothing, raw, axis_order)

    @classmethod
    def uniform(cls, fmts: Sequence[FixedPointFormat],
                smoothing: SmoothingSchedule,
                axis_order: Sequence[int] | None = None) -> "JointTreeCircuit":
        fmts = list(fmts)
        levels = fmts[0].total_bits * len(fmts)
        return cls(fmts, smoothing,
                   np.zeros((treeops.n_internal(levels), 2)), axis_order)

    @classmethod
    def from_product(cls, circuits: Sequence[BitCircuit],
                     smoothing: SmoothingSchedule,
                     axis_order: Sequence[int] | None = None
                     ) -> "JointTreeCircuit":
        """Embed a mean-field product exactly as a joint tree.

        Each joint node's effective weight is made to equal the univariate
        weight of its own axis at its own-axis prefix by inverting the
        additive smoothing (the pre-weight scale is a free parameter).
        """
        jt = cls.uniform([c.fmt for c in circuits], smoothing, axis_order)
        uni = [c.left_weights() for c in circuits]
        for level in range(len(jt.axes)):
            d = int(jt.axes[level])
            own_levels = [m for m in range(level) if jt.axes[m] == d]
            r = len(own_levels)
            offsets = np.arange(1 << level, dtype=np.int64)
            prefix = np.zeros_like(offsets)
            for m in own_levels:
                prefix = 2 * prefix + ((offsets >> (level - 1 - m)) & 1)
            w = uni[d][treeops.n_internal(r) + prefix]
            lo = treeops.n_internal(level)
            s = float(jt.smooth_add[lo])
            if s == 0.0:
                v0, v1 = w, 1.0 - w
            else:
                m_scale = s / np.minimum(w, 1.0 - w) + 1.0
                v0 = w * (m_scale + 2.0 * s) - s
                v1 = m_scale - v0
            jt.raw[lo:lo + (1 << level), 0] = np.log(v0)
            jt.raw[lo:lo + (1 << level), 1] = np.log(v1)
        return jt

    @property
    def dims(self) -> int:
        return len(self.fmts)

    @property
    def levels(self) -> int:
        return len(self.axes)

    @property
    def n_nodes(self) -> int:
        return treeops.n_internal(self.levels)

    @property
    def n_raw_params(self) -> int:
        return self.raw.size

    def raw_vector(self) -> np.ndarray:
        return self.raw.ravel().copy()

    def set_raw_vector(self, vec: np.ndarray) -> None:
        if vec.shape != (self.n_raw_params,):
            raise ValueError("parameter vector has the wrong length")
        self.raw[:] = vec.reshape(-1, 2)

    def domain(self) -> list[tuple[float, float]]:
        return [(f.lo, f.hi) for f in self.fmts]

    def left_weights(self) -> np.ndarray:
        return treeops.left_weights(self.raw, self.smooth_add)

    def _log_leaf_volume(self) -> float:
        return float(sum(math.log(f.resolution) for f in self.fmts))

    # -- densities ----------------------------------------------------------

    def _leaf_index(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Map points to their leaf box: interleave per-dimension cell bits."""
        b = self.bits_per_dim
        ks, insides = [], []
        for d, f in enumerate(self.fmts):
            inside = (x[:, d] >= f.lo) & (x[:, d] < f.hi)
            scaled = (np.where(inside, x[:, d], f.lo) - f.lo) \
                * (2.0 ** f.frac_bits)
            ks.append(np.minimum(np.floor(scaled).astype(np.int64),
                                 f.n_cells - 1))
            insides.append(inside)
        leaf = np.zeros(x.shape[0], dtype=np.int64)
        rounds = np.zeros(self.dims, dtype=np.int64)
        for level in range(self.levels):
            d = int(self.axes[level])
            bit = (ks[d] >> (b - 1 - rounds[d])) & 1
            leaf = (leaf << 1) | bit
            rounds[d] += 1
        return leaf, np.stack(insides, axis=1).all(axis=1)

    def log_density(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.dims:
            raise ValueError(f"expected trailing dimension {self.dims}")
        batch = np.atleast_2d(x)
        leaf, ok = self._leaf_index(batch)
        logs = treeops.joint_path_log_weight(self.left_weights(), leaf,
                                             self.levels)
        out = np.where(ok, logs - self._log_leaf_volume(), -np.inf)
        return float(out[0]) if x.ndim == 1 else out

    def entropy(self) -> float:
        return float(treeops.entropy(self.left_weights(),
                                     self._log_leaf_volume(), self.levels))

    def box_masses(self) -> np.ndarray:
        """Mass of every leaf box in leaf-index order."""
        return treeops.leaf_masses(self.left_weights(), self.levels)

    def inverse_cdf(self, u) -> tuple[np.ndarray, Bits]:
        """Inverse tree-CDF of one point in the unit box; returns the leaf
        bitstring of the full descent."""
        u = np.asarray(u, dtype=float)
        if u.shape != (self.dims,):
            raise ValueError(f"expected {self.dims} coordinates")
        if np.any(u < 0.0) or np.any(u >= 1.0):
            raise ValueError("coordinates must lie in [0, 1)")
        res = self.push_uniforms(u[None, :])
        return res.x[0], index_to_bits(int(res.leaves[0]), self.levels)

    def sample(self, rng: np.random.Generator, n: int
               ) -> tuple[np.ndarray, np.ndarray]:
        res = self.push_uniforms(rng.random((n, self.dims)))
        return res.x, res.quantized

    # -- trainer protocol -----------------------------------------------------

    def weight_state(self, want_grad: bool = True) -> _WeightState:
        if want_grad:
            return _WeightState(*treeops.left_weight_jacobian(
                self.raw, self.smooth_add))
        return _WeightState(treeops.left_weights(self.raw, self.smooth_add),
                            None, None)

    def push_uniforms(self, u: np.ndarray,
                      wstate: _WeightState | None = None) -> PushResult:
        u = np.asarray(u, dtype=float)
        if u.ndim != 2 or u.shape[1] != self.dims:
            raise ValueError(f"expected shape (T, {self.dims})")
        if np.any(u < 0.0) or np.any(u >= 1.0):
            raise ValueError("uniform draws must lie in [0, 1)")
        if wstate is None:
            wstate = self.weight_state(want_grad=False)
        leaf, resid, st = treeops.joint_descend(wstate.wl, u, self.axes)
        ks = np.zeros((u.shape[0], self.dims), dtype=np.int64)
        for level in range(self.levels):
            d = int(self.axes[level])
            ks[:, d] = (ks[:, d] << 1) | st.went_right[level]
        widths = np.asarray([f.resolution for f in self.fmts])
        los = np.asarray([f.lo for f in self.fmts])
        quant = los + ks * widths
        return PushResult(quant + resid * widths, quant, leaf, st)

    def vjp_logp(self, result: PushResult, dlogp: np.ndarray,
                 wstate: _WeightState | None = None) -> np.ndarray:
        if wstate is None or wstate.f0 is None:
            wstate = self.weight_state(want_grad=True)
        widths = np.asarray([f.resolution for f in self.fmts])
        gw = treeops.joint_descend_vjp(result.state, dlogp * widths,
                                       self.axes, self.n_nodes)
        return np.stack([gw * wstate.f0, gw * wstate.f1], axis=-1).ravel()

    def entropy_with_grad(self, wstate: _WeightState | None = None
                          ) -> tuple[float, np.ndarray]:
        if wstate is None or wstate.f0 is None:
            wstate = self.weight_state(want_grad=True)
        h, gw = treeops.entropy_and_grad(wstate.wl, self._log_leaf_volume(),
                                         self.levels)
        return float(h), np.stack([gw * wstate.f0, gw * wstate.f1],
                                  axis=-1).ravel()

    def path_margins(self, u: np.ndarray) -> np.ndarray:
        """Row-wise boundary margins broadcast over dimensions; residual
        coupling through the shared tree makes the whole row sensitive."""
        res = self.push_uniforms(u)
        st = res.state
        m = np.full(u.shape[0], np.inf)
        for w, right, post in zip(st.weights, st.went_right, st.residuals):
            m = np.minimum(m, np.where(right, (1.0 - w) * post,
                                       w * (1.0 - post)))
        return np.broadcast_to(m[:, None], u.shape)

    # -- serialization ----------------------------------------------------------

    def to_json_dict(self) -> dict:
        return {
            "version": 1,
            "kind": "jointtree",
            "dims": self.dims,
            "formats": [str(f) for f in self.fmts],
            "axis_order": list(self.axis_order),
            "smoothing": _smoothing_to_json(self.smoothing),
            "pre_weights": [v.hex() for v in self.raw.ravel().tolist()],
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "JointTreeCircuit":
        if doc.get("kind") != "jointtree" or doc.get("version") != 1:
            raise ValueError("not a version-1 joint-tree document")
        fmts = [FixedPointFormat.from_string(s) for s in doc["formats"]]
        raw = np.array([float.fromhex(v) for v in doc["pre_weights"]],
                       dtype=float).reshape(-1, 2)
        return cls(fmts, _smoothing_from_json(doc["smoothing"]), raw,
                   doc["axis_order"])


def load_posterior(doc: dict):
    """Dispatch a serialized posterior document to its class."""
    kind = doc.get("kind")
    if kind == "circuit":
        return BitCircuit.from_json_dict(doc)
    if kind == "meanfield":
        return MeanFieldPosterior.from_json_dict(doc)
    if kind == "jointtree":
        return JointTreeCircuit.from_json_dict(doc)
    raise ValueError(f"unknown posterior kind {kind!r}")
