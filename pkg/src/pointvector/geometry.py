"""Deterministic point sampling and neighborhood construction.

All distance computations run in double precision so that tie-breaking is
stable regardless of the training precision. Everything here is a pure
function of its inputs; no op is differentiated (neighbor selection is a
discrete choice).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, ConfigError, EmptyNeighborhoodError, SizeError


def _feature_shape(features) -> tuple:
    """Shape of a feature container: plain ndarray or a Tensor-like with .data."""
    if isinstance(features, np.ndarray):
        return features.shape
    if hasattr(features, "data") and isinstance(features.data, np.ndarray):
        return features.data.shape
    return np.asarray(features).shape


@dataclass
class PointSetBatch:
    """A batch of point clouds: positions [B,N,3], features [B,N,C], labels [B,N].

    Features and labels are optional; when only positions exist the model
    derives input features at its entry point. During model execution the
    features slot holds an autodiff Tensor instead of an ndarray.
    """

    positions: np.ndarray
    features: object | None = None
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions)
        if self.positions.ndim != 3 or self.positions.shape[-1] != 3:
            raise SizeError(f"positions must be [B,N,3], got {self.positions.shape}")
        if self.positions.shape[1] < 1:
            raise SizeError("point cloud must contain at least one point")
        if not np.all(np.isfinite(self.positions)):
            raise DataError("positions contain non-finite values")
        if self.features is not None:
            if isinstance(self.features, (list, tuple)):
                self.features = np.asarray(self.features)
            shape = _feature_shape(self.features)
            if len(shape) != 3 or shape[:2] != self.positions.shape[:2]:
                raise SizeError(
                    f"features shape {shape} does not match positions "
                    f"{self.positions.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels)
            if self.labels.shape != self.positions.shape[:2]:
                raise SizeError(
                    f"labels shape {self.labels.shape} does not match positions")

    @property
    def batch_size(self) -> int:
        return self.positions.shape[0]

    @property
    def num_points(self) -> int:
        return self.positions.shape[1]

    def features_array(self) -> np.ndarray:
        """Features as a plain ndarray (unwraps an autodiff Tensor)."""
        if self.features is None:
            raise DataError("point cloud carries no features")
        if isinstance(self.features, np.ndarray):
            return self.features
        return self.features.data

    def check_labels(self, num_classes: int) -> None:
        if self.labels is None:
            raise DataError("point cloud carries no labels")
        if self.labels.min() < 0 or self.labels.max() >= num_classes:
            raise DataError(
                f"labels outside [0, {num_classes}): "
                f"min {self.labels.min()}, max {self.labels.max()}")


@dataclass
class NeighborIndex:
    """Per-center neighbor table: indices [B,M,K], pad_mask [B,M,K], centers [B,M].

    pad_mask is True where an entry is a duplicated pad, not a real neighbor.
    """

    indices: np.ndarray
    pad_mask: np.ndarray
    centers: np.ndarray

    @property
    def k(self) -> int:
        return self.indices.shape[2]


def _pairwise_sq_dist(query: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """Squared distances [B,M,N] between query [B,M,3] and ref [B,N,3], float64.

    Uses |q|^2 + |r|^2 - 2 q.r so the [B,M,N,3] difference tensor is never
    materialized; tiny negative rounding residues are clamped to zero.
    """
    q = query.astype(np.float64)
    r = ref.astype(np.float64)
    d2 = (q ** 2).sum(-1)[:, :, None] + (r ** 2).sum(-1)[:, None, :]
    d2 -= 2.0 * (q @ r.transpose(0, 2, 1))
    return np.maximum(d2, 0.0)


def farthest_point_sample(cloud: PointSetBatch, m: int, start=0) -> np.ndarray:
    """Iterative max-min-distance subsampling; returns indices [B, m].

    The i-th chosen point maximizes the minimum distance to the already
    chosen set; ties and duplicate points resolve to the lowest unchosen
    index, so the output is deterministic and free of repeats. `start` is a
    single index or one index per batch entry.
    """
    pos = cloud.positions.astype(np.float64)
    b, n, _ = pos.shape
    if n == 0:
        raise SizeError("farthest_point_sample on an empty cloud")
    if not 1 <= m <= n:
        raise SizeError(f"requested {m} samples from a cloud of {n} points")
    starts = np.broadcast_to(np.asarray(start, dtype=np.int64), (b,)).copy()
    if starts.min() < 0 or starts.max() >= n:
        raise SizeError(f"start index outside [0, {n})")
    chosen = np.zeros((b, m), dtype=np.int64)
    chosen[:, 0] = starts
    batch = np.arange(b)
    # min squared distance to the chosen set; chosen entries are flagged -1
    # so they can never be selected again even when duplicates exist
    min_d = np.full((b, n), np.inf)
    min_d[batch, starts] = -1.0
    for i in range(1, m):
        last = pos[batch, chosen[:, i - 1]]
        d = ((pos - last[:, None, :]) ** 2).sum(axis=-1)
        min_d = np.minimum(min_d, d)
        nxt = np.argmax(min_d, axis=1)
        chosen[:, i] = nxt
        min_d[batch, nxt] = -1.0
    return chosen


def geometric_start(cloud: PointSetBatch) -> np.ndarray:
    """Index of the point farthest from the cloud centroid, per batch entry.

    Unlike a fixed start index, this choice does not depend on point order,
    which makes downsampling stable under input permutations.
    """
    pos = cloud.positions.astype(np.float64)
    centroid = pos.mean(axis=1, keepdims=True)
    d = ((pos - centroid) ** 2).sum(axis=-1)
    return np.argmax(d, axis=1)




def ball_query_points(query_xyz: np.ndarray, cloud: PointSetBatch, radius: float,
                      k: int) -> tuple[np.ndarray, np.ndarray]:
    """Radius search of cloud points around arbitrary query positions.

    Returns (indices [B,M,K], pad_mask [B,M,K]). Neighbors appear in scan
    order; short neighborhoods are padded by repeating the first hit.
    """
    if radius <= 0:
        raise ConfigError(f"ball query radius must be positive, got {radius}")
    if k < 1:
        raise ConfigError(f"ball query k must be >= 1, got {k}")
    b, n, _ = cloud.positions.shape
    d2 = _pairwise_sq_dist(query_xyz, cloud.positions)
    idx = np.broadcast_to(np.arange(n, dtype=np.int64), d2.shape).copy()
    idx[d2 > float(radius) ** 2] = n
    idx = np.sort(idx, axis=-1)[..., :k]
    pad_mask = idx == n
    if np.any(pad_mask[..., 0]):
        bad = np.argwhere(pad_mask[..., 0])[0]
        raise EmptyNeighborhoodError(
            f"no point within radius {radius} of query {tuple(bad)}")
    first = idx[..., :1]
    idx = np.where(pad_mask, first, idx)
    return idx, pad_mask


def ball_query(centers: np.ndarray, cloud: PointSetBatch, radius: float,
               k: int) -> NeighborIndex:
    """Radius-bounded neighbor search around existing cloud points.

    Up to k in-radius points per center, in scan order; the center itself is
    always eligible (distance 0), so same-cloud queries never come up empty.
    """
    centers = np.asarray(centers, dtype=np.int64)
    batch = np.arange(cloud.batch_size)[:, None]
    query_xyz = cloud.positions[batch, centers]
    idx, pad = ball_query_points(query_xyz, cloud, radius, k)
    return NeighborIndex(indices=idx, pad_mask=pad, centers=centers)


def knn_points(query_xyz: np.ndarray, cloud: PointSetBatch, k: int) -> np.ndarray:
    """Indices [B,M,K] of the k nearest cloud points to each query position.

    Sorted by distance; exact ties resolve to the lower index. Uses a partial
    selection with a full stable sort fallback for rows where an exact-distance
    tie straddles the k-th position, so tie-breaking is always by index.
    """
    n = cloud.num_points
    if k > n:
        raise SizeError(f"k={k} exceeds cloud size {n}")
    if k < 1:
        raise ConfigError(f"knn k must be >= 1, got {k}")
    d2 = _pairwise_sq_dist(query_xyz, cloud.positions)
    if k == n:
        return np.argsort(d2, axis=-1, kind="stable")
    cand = np.argpartition(d2, k - 1, axis=-1)[..., :k]
    cand_d = np.take_along_axis(d2, cand, axis=-1)
    # candidates in index order, then stable-sorted by distance
    order = np.argsort(cand, axis=-1)
    cand = np.take_along_axis(cand, order, axis=-1)
    cand_d = np.take_along_axis(cand_d, order, axis=-1)
    order = np.argsort(cand_d, axis=-1, kind="stable")
    cand = np.take_along_axis(cand, order, axis=-1)
    cand_d = np.take_along_axis(cand_d, order, axis=-1)
    boundary = cand_d[..., -1:]
    ties = (d2 <= boundary).sum(axis=-1) > k
    if np.any(ties):
        full = np.argsort(d2[ties], axis=-1, kind="stable")[:, :k]
        cand[ties] = full
    return cand


def knn(centers: np.ndarray, cloud: PointSetBatch, k: int) -> NeighborIndex:
    """k nearest neighbors of selected cloud points (the center included)."""
    centers = np.asarray(centers, dtype=np.int64)
    batch = np.arange(cloud.batch_size)[:, None]
    query_xyz = cloud.positions[batch, centers]
    idx = knn_points(query_xyz, cloud, k)
    pad = np.zeros(idx.shape, dtype=bool)
    return NeighborIndex(indices=idx, pad_mask=pad, centers=centers)


def group_relative(cloud: PointSetBatch, nbr: NeighborIndex):
    """Per-neighbor offsets from each center.

    Returns (rel_feat [B,M,K,C], rel_pos [B,M,K,3]) with
    rel_feat[b,i,j] = f_neighbor - f_center and rel_pos likewise for
    positions. Padded entries repeat the values of their duplicated source.
    """
    if cloud.features is None:
        raise DataError("group_relative needs per-point features")
    features = cloud.features_array()
    b, n, _ = cloud.positions.shape
    if nbr.indices.min() < 0 or nbr.indices.max() >= n:
        raise SizeError("neighbor indices outside the source cloud")
    rel_pos = relative_positions(cloud.positions, nbr)
    batch3 = np.arange(b)[:, None, None]
    batch2 = np.arange(b)[:, None]
    nbr_feat = features[batch3, nbr.indices]
    ctr_feat = features[batch2, nbr.centers]
    rel_feat = nbr_feat - ctr_feat[:, :, None, :]
    return rel_feat, rel_pos


def relative_positions(positions: np.ndarray, nbr: NeighborIndex) -> np.ndarray:
    """rel_pos[b,i,j] = p_neighbor - p_center, shape [B,M,K,3]."""
    b = positions.shape[0]
    batch3 = np.arange(b)[:, None, None]
    batch2 = np.arange(b)[:, None]
    nbr_pos = positions[batch3, nbr.indices]
    ctr_pos = positions[batch2, nbr.centers]
    return nbr_pos - ctr_pos[:, :, None, :]


def sort_neighbors_by_distance(positions: np.ndarray, nbr: NeighborIndex) -> NeighborIndex:
    """Reorder each neighborhood by (distance, index).

    Gives slot-kernel aggregation modes a canonical neighbor order on
    otherwise unordered sets. Padded entries sort like their source values
    but keep their pad flag count.
    """
    rel = relative_positions(positions, nbr).astype(np.float64)
    d2 = (rel ** 2).sum(axis=-1)
    # push padded duplicates to the end, then sort by distance (stable on index)
    key = np.where(nbr.pad_mask, np.inf, d2)
    order = np.argsort(key, axis=-1, kind="stable")
    idx = np.take_along_axis(nbr.indices, order, axis=-1)
    pad = np.take_along_axis(nbr.pad_mask, order, axis=-1)
    return NeighborIndex(indices=idx, pad_mask=pad, centers=nbr.centers)
