"""Neighbour discovery and interpolation-based positive views."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

log = logging.getLogger(__name__)

_CHUNK = 512


@dataclass(frozen=True)
class NeighborIndex:
    neighbor_ids: list[np.ndarray]
    k: int
    epsilon: float | None = None
    distance_metric: str = "euclidean"

    def __len__(self) -> int:
        return len(self.neighbor_ids)


@dataclass(frozen=True)
class AugmentedPairBatch:
    anchors: np.ndarray  # (B, K, T)
    views: np.ndarray  # (B, K, T)
    homology: np.ndarray  # (B, B)
    anchor_ids: np.ndarray  # (B,)
    partner_ids: np.ndarray  # (B,) neighbour used for each view (anchor itself on fallback)
    alphas: np.ndarray  # (B,)


def _flat(windows) -> np.ndarray:
    windows = getattr(windows, "windows", windows)
    windows = np.asarray(windows, dtype=np.float64)
    return windows.reshape(len(windows), -1)


def build_neighbor_index(windows, k: int = 10, epsilon: float | None = None) -> NeighborIndex:
    """k nearest windows per window under Euclidean distance on flattened values.

    Ties are broken by ascending window index.  With ``epsilon`` set, only
    neighbours at distance <= epsilon are kept, so lists can be shorter than k.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    flat = _flat(windows)
    n = len(flat)
    if n == 0:
        raise ValueError("cannot index an empty batch")
    if n == 1:
        log.warning("single window: every neighbour list is empty")
        return NeighborIndex([np.zeros(0, dtype=np.int64)], k, epsilon)

    kk = min(k, n - 1)
    out = []
    for lo in range(0, n, _CHUNK):
        hi = min(n, lo + _CHUNK)
        dist = cdist(flat[lo:hi], flat)
        dist[np.arange(hi - lo), np.arange(lo, hi)] = np.inf
        for row in dist:
            # stable sort on distance keeps ascending index order among ties
            order = np.argsort(row, kind="stable")[:kk]
            if epsilon is not None:
                order = order[row[order] <= epsilon]
            out.append(order.astype(np.int64))
    return NeighborIndex(out, k, epsilon)


def interpolate(anchor, neighbor, alpha: float):
    """``alpha * anchor + (1 - alpha) * neighbor``."""
    anchor = np.asarray(anchor, dtype=np.float64)
    neighbor = np.asarray(neighbor, dtype=np.float64)
    if anchor.shape != neighbor.shape:
        raise ValueError(f"shape mismatch: {anchor.shape} vs {neighbor.shape}")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    return alpha * anchor + (1.0 - alpha) * neighbor


def _anchor_rng(seed: int, anchor: int) -> np.random.Generator:
    # one stream per (seed, anchor): serial and parallel generation agree
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, int(anchor)]))


def make_pairs(
    windows,
    index: NeighborIndex,
    alpha_mode="uniform",
    rng_seed: int = 0,
    anchor_ids=None,
) -> AugmentedPairBatch:
    """One interpolated view per anchor.

    Each view mixes the anchor with a uniformly chosen catalogued neighbour
    (the anchor itself when its list is empty).  ``alpha_mode`` is
    ``"uniform"`` for alpha ~ U(0, 1) or a fixed float.
    """
    data = np.asarray(getattr(windows, "windows", windows), dtype=np.float64)
    if len(index) != len(data):
        raise ValueError("neighbour index was built over a different batch")
    if anchor_ids is None:
        anchor_ids = np.arange(len(data))
    anchor_ids = np.asarray(anchor_ids, dtype=np.int64)
    fixed = None if alpha_mode == "uniform" else float(alpha_mode)
    if fixed is not None and not 0.0 <= fixed <= 1.0:
        raise ValueError(f"fixed alpha must lie in [0, 1], got {fixed}")

    partners = np.empty(len(anchor_ids), dtype=np.int64)
    alphas = np.empty(len(anchor_ids))
    for i, a in enumerate(anchor_ids):
        rng = _anchor_rng(rng_seed, a)
        nbrs = index.neighbor_ids[a]
        partners[i] = nbrs[rng.integers(len(nbrs))] if len(nbrs) else a
        alphas[i] = rng.uniform(0.0, 1.0) if fixed is None else fixed

    anchors = data[anchor_ids]
    w = alphas[:, None, None]
    views = w * anchors + (1.0 - w) * data[partners]
    b = len(anchor_ids)
    return AugmentedPairBatch(
        anchors=anchors,
        views=views,
        homology=np.eye(b, dtype=np.int64),
        anchor_ids=anchor_ids,
        partner_ids=partners,
        alphas=alphas,
    )


def dump_triples(pairs: AugmentedPairBatch, path) -> None:
    """Debug dump of (anchor, neighbour, alpha) triples."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["anchor", "neighbor", "alpha"])
        for a, p, al in zip(pairs.anchor_ids, pairs.partner_ids, pairs.alphas):
            writer.writerow([int(a), int(p), repr(float(al))])
