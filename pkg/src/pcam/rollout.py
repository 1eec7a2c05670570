"""Cross-attention rollout accumulated over layers.

The pairwise map at layer l adds a row-softmax of the scaled source/target
patch-embedding dot products to the layer l-1 map, so each source patch
distributes unit mass over target patches per layer: entries stay inside
[0, l] and every row sums to l.  Dividing by l gives the running-mean map in
[0, 1].  The per-patch map is the column sum over source patches.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import ContractViolation, check_finite, softmax


@dataclass
class RolloutMap:
    layer: int                 # 1-based layer count accumulated so far
    pairwise: np.ndarray       # (N, N): source patch i -> target patch j
    branch: str = "st"
    normalized: bool = False

    @property
    def per_patch(self) -> np.ndarray:
        return self.pairwise.sum(axis=0)

    def grid(self, grid_side: int) -> np.ndarray:
        """G x G view of the per-patch map (pure reshape, row-major)."""
        if grid_side * grid_side != self.pairwise.shape[1]:
            raise ContractViolation("grid side does not match patch count")
        return self.per_patch.reshape(grid_side, grid_side)


def _layer_term(z_s: np.ndarray, z_t: np.ndarray) -> np.ndarray:
    z_s = check_finite("rollout source embeddings", z_s)
    z_t = check_finite("rollout target embeddings", z_t)
    if z_s.shape != z_t.shape:
        raise ContractViolation("rollout embeddings must share a shape")
    d = z_s.shape[1]
    return softmax(z_s @ z_t.T / np.sqrt(d), axis=-1)


def rollout_step(prev: RolloutMap | None, z_s_layer: np.ndarray, z_t_layer: np.ndarray,
                 layer: int, branch: str = "st") -> RolloutMap:
    """One accumulation step; `layer` is 1-based, prev must be layer-1."""
    term = _layer_term(z_s_layer, z_t_layer)
    if layer == 1:
        if prev is not None:
            raise ContractViolation("layer 1 takes no previous map")
        return RolloutMap(layer=1, pairwise=term, branch=branch)
    if prev is None or prev.layer != layer - 1:
        raise ContractViolation(f"rollout layer discontinuity: prev is {None if prev is None else prev.layer}, need {layer - 1}")
    if prev.branch != branch:
        raise ContractViolation("rollout branch changed mid-accumulation")
    return RolloutMap(layer=layer, pairwise=prev.pairwise + term, branch=branch)


def rollout_stack(patch_states_s: list[np.ndarray], patch_states_t: list[np.ndarray],
                  branch: str = "st") -> list[RolloutMap]:
    """Accumulated maps for layers 1..L from recorded post-block patch tokens."""
    if len(patch_states_s) != len(patch_states_t) or not patch_states_s:
        raise ContractViolation("need matching non-empty per-layer embedding lists")
    maps = []
    prev = None
    for l, (zs, zt) in enumerate(zip(patch_states_s, patch_states_t), start=1):
        prev = rollout_step(prev, zs, zt, l, branch)
        maps.append(prev)
    return maps


def normalize(rmap: RolloutMap) -> RolloutMap:
    """Running-mean map: entries in [0, 1], rows sum to 1."""
    if rmap.layer < 1:
        raise ContractViolation("normalize needs an accumulated map")
    return RolloutMap(layer=rmap.layer, pairwise=rmap.pairwise / rmap.layer,
                      branch=rmap.branch, normalized=True)


def foreground_score_gap(per_patch: np.ndarray, fg_mask: np.ndarray, bg_mask: np.ndarray):
    """Mean per-patch score over foreground vs background patch sets."""
    per_patch = check_finite("per-patch map", np.asarray(per_patch, dtype=np.float64).ravel())
    fg = np.asarray(fg_mask, dtype=bool).ravel()
    bg = np.asarray(bg_mask, dtype=bool).ravel()
    if fg.shape != per_patch.shape or bg.shape != per_patch.shape:
        raise ContractViolation("masks must match the patch count")
    if not fg.any() or not bg.any():
        raise ContractViolation("foreground and background masks must be non-empty")
    if np.any(fg & bg):
        raise ContractViolation("masks must partition the patches")
    return float(per_patch[fg].mean()), float(per_patch[bg].mean())


# ---------------------------------------------------------------------------
# Backward support for losses defined on rollout maps.


def rollout_backward(patch_states_s: list[np.ndarray], patch_states_t: list[np.ndarray],
                     pairwise_adjoints: list[np.ndarray]):
    """Adjoints on the per-layer embeddings given adjoints on each layer's
    accumulated pairwise map.

    The layer-k softmax term appears in every accumulated map from k up, so
    its adjoint is the suffix sum of the per-layer map adjoints; the row
    softmax Jacobian then routes it onto the two embedding matrices.
    """
    L = len(pairwise_adjoints)
    d_s = [None] * L
    d_t = [None] * L
    suffix = np.zeros_like(pairwise_adjoints[-1])
    # precompute suffix sums from the top layer down
    suffixes = [None] * L
    for l in reversed(range(L)):
        suffix = suffix + pairwise_adjoints[l]
        suffixes[l] = suffix.copy()
    for k in range(L):
        zs, zt = patch_states_s[k], patch_states_t[k]
        d = zs.shape[1]
        term = softmax(zs @ zt.T / np.sqrt(d), axis=-1)
        d_term = suffixes[k]
        d_scores = term * (d_term - (d_term * term).sum(axis=-1, keepdims=True))
        d_s[k] = d_scores @ zt / np.sqrt(d)
        d_t[k] = d_scores.T @ zs / np.sqrt(d)
    return d_s, d_t
