"""Structured latent space: per-timestep one-hot grids over H x W cells.

A latent assigns each of T timesteps one cell; the structured space has
(H*W)**T configurations. Exhaustive enumeration backs the exact-expectation
oracles on small spaces; the coordinate sweep (vary one timestep, freeze the
rest) backs the T*H*W-sized batched evaluation used by the estimators.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ENUMERATION_CAP = 1_000_000


class EnumerationCapError(ValueError):
    """Structured space too large to enumerate exhaustively."""


@dataclass(frozen=True)
class LatentSpaceDims:
    t: int
    h: int
    w: int

    def __post_init__(self):
        if self.t < 1 or self.h < 1 or self.w < 1:
            raise ValueError(f"latent dims must be positive, got {self}")

    @property
    def cells(self) -> int:
        return self.h * self.w

    @property
    def cardinality(self) -> int:
        return self.cells**self.t

    @property
    def sweep_size(self) -> int:
        return self.t * self.cells

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.t, self.h, self.w)


@dataclass(frozen=True)
class GazeLatent:
    """One structured latent, carrying both the index and one-hot views."""

    index: np.ndarray  # (T, 2) ints, (h, w) per timestep
    onehot: np.ndarray  # (T, H, W) floats in {0, 1}

    @property
    def flat(self) -> np.ndarray:
        return self.onehot.ravel()


def _check_index(index: np.ndarray, dims: LatentSpaceDims) -> np.ndarray:
    index = np.asarray(index, dtype=np.int64)
    if index.shape != (dims.t, 2):
        raise ValueError(f"latent index shape {index.shape}, expected ({dims.t}, 2)")
    if (index < 0).any() or (index[:, 0] >= dims.h).any() or (index[:, 1] >= dims.w).any():
        raise ValueError(f"latent index out of range for {dims}: {index.tolist()}")
    return index


def onehot_encode(index, dims: LatentSpaceDims) -> GazeLatent:
    """One-hot encode a per-timestep cell index; exactly one 1 per timestep."""
    index = _check_index(index, dims)
    grids = np.zeros(dims.shape)
    grids[np.arange(dims.t), index[:, 0], index[:, 1]] = 1.0
    return GazeLatent(index=index, onehot=grids)


def decode(latent: GazeLatent) -> np.ndarray:
    return latent.index


def index_to_flat(index: np.ndarray, dims: LatentSpaceDims) -> np.ndarray:
    """Per-timestep flat cell ids (h * W + w)."""
    index = np.asarray(index, dtype=np.int64)
    return index[..., 0] * dims.w + index[..., 1]


def flat_to_index(flat: np.ndarray, dims: LatentSpaceDims) -> np.ndarray:
    flat = np.asarray(flat, dtype=np.int64)
    return np.stack([flat // dims.w, flat % dims.w], axis=-1)


def enumerate_latents(dims: LatentSpaceDims, cap: int = ENUMERATION_CAP) -> list[GazeLatent]:
    """Every structured configuration, in lexicographic order of flat cell ids."""
    if dims.cardinality > cap:
        raise EnumerationCapError(
            f"structured space has {dims.cardinality} configurations, cap is {cap}"
        )
    combos = all_config_flat_ids(dims, cap)
    return [onehot_encode(flat_to_index(row, dims), dims) for row in combos]


def all_config_flat_ids(dims: LatentSpaceDims, cap: int = ENUMERATION_CAP) -> np.ndarray:
    """(cardinality, T) flat cell ids for every configuration, lexicographic."""
    if dims.cardinality > cap:
        raise EnumerationCapError(
            f"structured space has {dims.cardinality} configurations, cap is {cap}"
        )
    grids = np.meshgrid(*[np.arange(dims.cells)] * dims.t, indexing="ij")
    return np.stack([g.ravel() for g in grids], axis=-1)


def config_onehot_matrix(dims: LatentSpaceDims, cap: int = ENUMERATION_CAP) -> np.ndarray:
    """(cardinality, T*H*W) flattened one-hot rows for every configuration."""
    combos = all_config_flat_ids(dims, cap)
    n = combos.shape[0]
    out = np.zeros((n, dims.sweep_size))
    cols = combos + np.arange(dims.t) * dims.cells
    out[np.arange(n)[:, None], cols] = 1.0
    return out


def lowdim_variants(base, dims: LatentSpaceDims) -> list[list[GazeLatent]]:
    """All single-coordinate edits of ``base``, grouped by timestep.

    Group t holds H*W latents equal to ``base`` except that timestep t is
    placed at each cell in turn; the base reappears once per group.
    """
    base = _check_index(base, dims)
    groups: list[list[GazeLatent]] = []
    for t in range(dims.t):
        group = []
        for h in range(dims.h):
            for w in range(dims.w):
                idx = base.copy()
                idx[t] = (h, w)
                group.append(onehot_encode(idx, dims))
        groups.append(group)
    return groups


def variant_onehot_matrix(base_flat: np.ndarray, dims: LatentSpaceDims) -> np.ndarray:
    """Flattened one-hots of every single-coordinate edit, batched.

    ``base_flat`` is (..., T) flat cell ids; returns (..., T, H*W, T*H*W)
    where entry [..., t, c, :] is the one-hot of base with timestep t moved
    to cell c.
    """
    base_flat = np.asarray(base_flat, dtype=np.int64)
    *lead, t = base_flat.shape
    flat = base_flat.reshape(-1, t)
    n = flat.shape[0]
    cells, sweep = dims.cells, dims.sweep_size
    offsets = flat + np.arange(t) * cells  # (n, t) positions of the base cells
    base_oh = np.zeros((n, sweep))
    base_oh[np.arange(n)[:, None], offsets] = 1.0
    out = np.broadcast_to(base_oh[:, None, None, :], (n, t, cells, sweep)).copy()
    rows = np.arange(n)[:, None, None]
    ts = np.arange(t)[None, :, None]
    cs = np.arange(cells)[None, None, :]
    out[rows, ts, cs, offsets[:, :, None]] = 0.0  # clear timestep t's base cell
    out[rows, ts, cs, ts * cells + cs] = 1.0  # place it at the candidate cell
    return out.reshape(*lead, t, cells, sweep)


# --- serialization -----------------------------------------------------------


def trace_to_json(index: np.ndarray) -> list[list[int]]:
    """Gaze trace as [t, h, w] triples."""
    index = np.asarray(index, dtype=np.int64)
    return [[int(t), int(h), int(w)] for t, (h, w) in enumerate(index)]


def trace_from_json(triples, dims: LatentSpaceDims) -> np.ndarray:
    index = np.zeros((dims.t, 2), dtype=np.int64)
    seen = set()
    for t, h, w in triples:
        if t in seen:
            raise ValueError(f"duplicate timestep {t} in gaze trace")
        seen.add(t)
        index[t] = (h, w)
    if len(seen) != dims.t:
        raise ValueError(f"gaze trace covers {len(seen)} of {dims.t} timesteps")
    return _check_index(index, dims)
