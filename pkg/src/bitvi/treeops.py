"""Vectorized kernels for complete binary partition trees.

Trees are stored breadth-first: the internal node reached from the root by
the bit path ``b_0 .. b_(j-1)`` sits at index ``2**j - 1 + int(path)``, so a
depth-``L`` tree occupies ``2**L - 1`` rows.  All kernels accept a leading
batch axis over independent trees (used to stack the per-dimension circuits
of a mean-field posterior) and loop only over tree levels.

The descent kernels return enough per-level state to run the exact reverse
pass: with ``u' = u/w`` on a left move and ``u' = (u - w)/(1 - w)`` on a
right move, the local derivatives are ``du'/dw = -u'/w`` (left),
``du'/dw = (u' - 1)/(1 - w)`` (right) and ``du'/du = 1/w`` resp.
``1/(1 - w)``.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np


def n_internal(depth: int) -> int:
    return (1 << depth) - 1


def node_depths(depth: int) -> np.ndarray:
    """Depth of every breadth-first node index, shape ``(2**depth - 1,)``."""
    out = np.empty(n_internal(depth), dtype=np.int64)
    for j in range(depth):
        out[(1 << j) - 1: (2 << j) - 1] = j
    return out


def left_weights(raw: np.ndarray, smooth_add: np.ndarray) -> np.ndarray:
    """Smoothed left-child probabilities from raw pre-weights.

    ``raw`` has shape ``(..., n_nodes, 2)``; ``v = exp(raw)`` and
    ``wL = (v0 + s) / (v0 + v1 + 2 s)`` with per-node additive ``s``.
    Evaluated in a max-shifted frame so extreme raw values stay finite.
    """
    s = np.broadcast_to(smooth_add, raw.shape[:-1])
    with np.errstate(divide="ignore"):
        log_s = np.where(s > 0, np.log(np.maximum(s, 1e-300)), -np.inf)
    m = np.maximum(np.maximum(raw[..., 0], raw[..., 1]), log_s)
    v0 = np.exp(raw[..., 0] - m)
    v1 = np.exp(raw[..., 1] - m)
    sm = s * np.exp(-m)
    return (v0 + sm) / (v0 + v1 + 2.0 * sm)


def left_weight_jacobian(
    raw: np.ndarray, smooth_add: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``wL`` plus its derivatives w.r.t. the two raw pre-weights."""
    s = np.broadcast_to(smooth_add, raw.shape[:-1])
    with np.errstate(divide="ignore"):
        log_s = np.where(s > 0, np.log(np.maximum(s, 1e-300)), -np.inf)
    m = np.maximum(np.maximum(raw[..., 0], raw[..., 1]), log_s)
    v0 = np.exp(raw[..., 0] - m)
    v1 = np.exp(raw[..., 1] - m)
    sm = s * np.exp(-m)
    den = v0 + v1 + 2.0 * sm
    w = (v0 + sm) / den
    f0 = v0 * (1.0 - w) / den
    f1 = -v1 * w / den
    return w, f0, f1


def _binary_entropy(w: np.ndarray) -> np.ndarray:
    return -w * np.log(w) - (1.0 - w) * np.log1p(-w)


def entropy(wl: np.ndarray, leaf_log_width, depth: int) -> np.ndarray:
    """Closed-form entropy, one bottom-up pass over the levels.

    ``wl`` is ``(..., n_nodes)``; ``leaf_log_width`` is the log measure of a
    single leaf cell (scalar or batch-shaped; all leaves share it because the
    splits are midpoints).  Sum-node recursion:
    ``H = -wL log wL - wR log wR + wL H_left + wR H_right``.
    """
    batch = np.shape(wl)[:-1]
    h = np.broadcast_to(np.asarray(leaf_log_width, dtype=float)[..., None],
                        batch + (1 << depth,)).copy()
    for j in reversed(range(depth)):
        w = wl[..., (1 << j) - 1: (2 << j) - 1]
        pair = h.reshape(batch + (1 << j, 2))
        h = _binary_entropy(w) + w * pair[..., 0] + (1.0 - w) * pair[..., 1]
    return h[..., 0]


def entropy_and_grad(
    wl: np.ndarray, leaf_log_width, depth: int
) -> tuple[np.ndarray, np.ndarray]:
    """Entropy and its exact gradient w.r.t. every left weight.

    ``dH/dwL = P(node) * (log(wR/wL) + H_sub(left) - H_sub(right))`` where
    ``P`` is the probability of reaching the node and ``H_sub`` the
    conditional subtree entropies from the bottom-up pass.
    """
    batch = np.shape(wl)[:-1]
    sub = [None] * (depth + 1)
    sub[depth] = np.broadcast_to(
        np.asarray(leaf_log_width, dtype=float)[..., None],
        batch + (1 << depth,)).copy()
    for j in reversed(range(depth)):
        w = wl[..., (1 << j) - 1: (2 << j) - 1]
        pair = sub[j + 1].reshape(batch + (1 << j, 2))
        sub[j] = _binary_entropy(w) + w * pair[..., 0] + (1.0 - w) * pair[..., 1]

    grad = np.empty_like(wl)
    reach = np.ones(batch + (1,), dtype=float)
    for j in range(depth):
        lo, hi = (1 << j) - 1, (2 << j) - 1
        w = wl[..., lo:hi]
        pair = sub[j + 1].reshape(batch + (1 << j, 2))
        grad[..., lo:hi] = reach * (
            np.log1p(-w) - np.log(w) + pair[..., 0] - pair[..., 1])
        reach = np.stack([reach * w, reach * (1.0 - w)],
                         axis=-1).reshape(batch + (1 << (j + 1),))
    return sub[0][..., 0], grad


def leaf_masses(wl: np.ndarray, depth: int) -> np.ndarray:
    """Path-product mass of every leaf, shape ``(..., 2**depth)``."""
    batch = np.shape(wl)[:-1]
    mass = np.ones(batch + (1,), dtype=float)
    for j in range(depth):
        w = wl[..., (1 << j) - 1: (2 << j) - 1]
        mass = np.stack([mass * w, mass * (1.0 - w)],
                        axis=-1).reshape(batch + (1 << (j + 1),))
    return mass


def path_log_weight(wl: np.ndarray, leaf: np.ndarray, depth: int) -> np.ndarray:
    """Sum of log edge weights along the path to each leaf.

    ``wl`` is ``(G, n_nodes)`` for ``G`` stacked trees, ``leaf`` is
    ``(..., G)`` int64; returns ``(..., G)``.
    """
    g = np.arange(wl.shape[0])
    out = np.zeros(leaf.shape, dtype=float)
    for j in range(depth):
        node = (leaf >> (depth - j)) + ((1 << j) - 1)
        bit = (leaf >> (depth - 1 - j)) & 1
        w = wl[g, node]
        out += np.where(bit == 1, np.log1p(-w), np.log(w))
    return out


class DescentState(NamedTuple):
    """Per-level records of a batched descent, for the reverse pass."""

    nodes: list[np.ndarray]      # breadth-first node indices per level
    weights: list[np.ndarray]    # wL gathered at those nodes
    went_right: list[np.ndarray]
    residuals: list[np.ndarray]  # u AFTER the local move of that level


def descend(wl: np.ndarray, u: np.ndarray, depth: int
            ) -> tuple[np.ndarray, np.ndarray, DescentState]:
    """Inverse-CDF descent for ``G`` stacked trees.

    ``wl``: ``(G, n_nodes)``; ``u``: ``(T, G)`` in ``[0, 1)``.  A residual
    equal to the left weight routes right.  Returns the leaf index,
    the final residual within the leaf, and the reverse-pass state.
    """
    g = np.arange(wl.shape[0])
    offset = np.zeros(u.shape, dtype=np.int64)
    resid = np.array(u, dtype=float)
    state = DescentState([], [], [], [])
    for j in range(depth):
        node = ((1 << j) - 1) + offset
        w = wl[g, node]
        right = resid >= w
        resid = np.where(right, (resid - w) / (1.0 - w), resid / w)
        offset = 2 * offset + right
        state.nodes.append(node)
        state.weights.append(w)
        state.went_right.append(right)
        state.residuals.append(resid)
    return offset, resid, state


def descend_vjp(state: DescentState, lam: np.ndarray, n_trees: int,
                n_nodes: int) -> np.ndarray:
    """Accumulate ``d(sum lam * u_final)/d wL`` into ``(G, n_nodes)``.

    ``lam`` is the adjoint of the final residual (callers fold in the leaf
    width and the target gradient before calling).
    """
    cols = np.broadcast_to(np.arange(n_trees), lam.shape)
    grad = np.zeros(n_trees * n_nodes, dtype=float)
    lam = np.array(lam, dtype=float)
    for node, w, right, resid in zip(
            reversed(state.nodes), reversed(state.weights),
            reversed(state.went_right), reversed(state.residuals)):
        dw = np.where(right, (resid - 1.0) / (1.0 - w), -resid / w)
        flat = (cols * n_nodes + node).ravel()
        grad += np.bincount(flat, weights=(lam * dw).ravel(),
                            minlength=grad.size)
        lam = lam * np.where(right, 1.0 / (1.0 - w), 1.0 / w)
    return grad.reshape(n_trees, n_nodes)


def joint_descend(wl: np.ndarray, u: np.ndarray, axes: np.ndarray
                  ) -> tuple[np.ndarray, np.ndarray, DescentState]:
    """Inverse tree-CDF descent over a single axis-rotating tree.

    ``wl``: ``(n_nodes,)`` for a depth ``L = len(axes)`` tree; ``u``:
    ``(T, D)``.  Level ``l`` applies the univariate local move to coordinate
    ``axes[l]`` only.
    """
    offset = np.zeros(u.shape[0], dtype=np.int64)
    resid = np.array(u, dtype=float)
    state = DescentState([], [], [], [])
    for level, d in enumerate(axes):
        node = ((1 << level) - 1) + offset
        w = wl[node]
        c = resid[:, d]
        right = c >= w
        resid[:, d] = np.where(right, (c - w) / (1.0 - w), c / w)
        offset = 2 * offset + right
        state.nodes.append(node)
        state.weights.append(w)
        state.went_right.append(right)
        state.residuals.append(resid[:, d].copy())
    return offset, resid, state


def joint_descend_vjp(state: DescentState, lam: np.ndarray,
                      axes: np.ndarray, n_nodes: int) -> np.ndarray:
    """Reverse pass of :func:`joint_descend`; ``lam`` is ``(T, D)``."""
    grad = np.zeros(n_nodes, dtype=float)
    lam = np.array(lam, dtype=float)
    for level in reversed(range(len(axes))):
        d = axes[level]
        node = state.nodes[level]
        w = state.weights[level]
        right = state.went_right[level]
        resid = state.residuals[level]
        dw = np.where(right, (resid - 1.0) / (1.0 - w), -resid / w)
        grad += np.bincount(node, weights=lam[:, d] * dw, minlength=n_nodes)
        lam[:, d] = lam[:, d] * np.where(right, 1.0 / (1.0 - w), 1.0 / w)
    return grad


def joint_path_log_weight(wl: np.ndarray, leaf: np.ndarray,
                          depth: int) -> np.ndarray:
    """Path log mass for leaves of a single tree; ``leaf`` is ``(...,)``."""
    out = np.zeros(leaf.shape, dtype=float)
    for j in range(depth):
        node = (leaf >> (depth - j)) + ((1 << j) - 1)
        bit = (leaf >> (depth - 1 - j)) & 1
        w = wl[node]
        out += np.where(bit == 1, np.log1p(-w), np.log(w))
    return out
