"""Spatial indexing, grid subsampling and human-vision batch construction.

Distances are compared as squared Euclidean distances computed from the
float64 coordinates; ties are broken by the lower point index everywhere.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import InvalidArgument, InvariantViolation
from .pcio import RawPointCloud

# --------------------------------------------------------------------------
# spatial index


class SpatialIndex:
    """Exact k-NN and annulus queries over a fixed point set.

    A kd-tree proposes candidates; the final ordering is recomputed from exact
    squared distances with a lower-index tie-break, so results equal a brute
    force scan.
    """

    _MARGIN = 4

    def __init__(self, points):
        pts = np.ascontiguousarray(points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[0] == 0:
            raise InvalidArgument("spatial index needs at least one point")
        if not np.isfinite(pts).all():
            raise InvalidArgument("spatial index needs finite coordinates")
        self.points = pts
        self.n = len(pts)
        self._tree = cKDTree(pts)

    def _exact_d2(self, cand: np.ndarray, queries: np.ndarray) -> np.ndarray:
        diff = self.points[cand] - queries[:, None, :]
        return np.einsum("ijk,ijk->ij", diff, diff)

    def _check_k(self, k: int) -> int:
        k = int(k)
        if not 1 <= k <= self.n:
            raise InvalidArgument(f"k={k} out of range for {self.n} points")
        return k

    def knn_batch(self, queries, k: int, return_d2: bool = False):
        """(m, k) neighbor indices of each query row, nearest first."""
        k = self._check_k(k)
        q = np.ascontiguousarray(queries, dtype=np.float64).reshape(-1, self.points.shape[1])
        m = len(q)
        extra = min(self.n, k + self._MARGIN)
        _, cand = self._tree.query(q, k=extra)
        cand = np.asarray(cand, dtype=np.intp).reshape(m, extra)
        d2 = self._exact_d2(cand, q)
        order = np.lexsort((cand, d2), axis=-1)
        cand = np.take_along_axis(cand, order, axis=-1)
        d2 = np.take_along_axis(d2, order, axis=-1)
        if extra < self.n:
            # the tree only ranks `extra` candidates: a row is settled when the
            # k-th exact distance is clearly below the farthest candidate's
            kth = d2[:, k - 1]
            far = d2.max(axis=1)
            unsure = np.flatnonzero(~(kth < far * (1 - 1e-9) - 1e-300))
            for i in unsure:
                cand_i, d2_i = self._ball_candidates(q[i], kth[i])
                cand[i, :k] = cand_i[:k]
                d2[i, :k] = d2_i[:k]
        cand, d2 = cand[:, :k], d2[:, :k]
        return (cand, d2) if return_d2 else cand

    def _ball_candidates(self, q: np.ndarray, r2: float):
        r = np.sqrt(r2) * (1 + 1e-7) + 1e-12
        cand = np.asarray(self._tree.query_ball_point(q, r), dtype=np.intp)
        diff = self.points[cand] - q
        d2 = np.einsum("ij,ij->i", diff, diff)
        order = np.lexsort((cand, d2))
        return cand[order], d2[order]

    def knn(self, query, k: int) -> np.ndarray:
        return self.knn_batch(np.asarray(query, dtype=np.float64)[None, :], k)[0]

    def radius_annulus(self, center, r_inner: float, r_outer: float) -> np.ndarray:
        """Indices with r_inner < distance <= r_outer, ascending."""
        if not 0 <= r_inner < r_outer:
            raise InvalidArgument(f"need 0 <= r_inner < r_outer, got {r_inner}, {r_outer}")
        return self.annulus_sq(center, r_inner * r_inner, r_outer * r_outer)

    def annulus_sq(self, center, inner_d2: float, outer_d2: float) -> np.ndarray:
        """Like radius_annulus but with squared bounds, avoiding a sqrt round trip."""
        c = np.asarray(center, dtype=np.float64)
        cand = np.asarray(
            self._tree.query_ball_point(c, np.sqrt(outer_d2) * (1 + 1e-7) + 1e-12), dtype=np.intp
        )
        diff = self.points[cand] - c
        d2 = np.einsum("ij,ij->i", diff, diff)
        keep = (d2 > inner_d2) & (d2 <= outer_d2)
        return np.sort(cand[keep])


def build_index(points) -> SpatialIndex:
    return SpatialIndex(points)


def knn(index: SpatialIndex, query, k: int) -> np.ndarray:
    return index.knn(query, k)


def radius_annulus(index: SpatialIndex, center, r_inner: float, r_outer: float) -> np.ndarray:
    return index.radius_annulus(center, r_inner, r_outer)


# --------------------------------------------------------------------------
# grid subsampling


@dataclass(frozen=True, eq=False)
class GridSampleResult:
    sampled: RawPointCloud
    origin_to_sampled: np.ndarray  # original index -> sampled index
    representatives: np.ndarray  # sampled index -> original index
    voxel_size: float
    origin: np.ndarray


def voxel_keys(positions: np.ndarray, voxel_size: float, origin) -> np.ndarray:
    return np.floor((positions - np.asarray(origin, dtype=np.float64)) / voxel_size).astype(np.int64)


def grid_subsample(cloud: RawPointCloud, voxel_size: float, origin=None) -> GridSampleResult:
    """Keep one member point per occupied voxel.

    The representative is the member nearest the voxel centroid; it carries the
    majority label and the averaged intensity / color of the voxel. The grid
    origin defaults to the cloud's minimum corner.
    """
    if not voxel_size > 0:
        raise InvalidArgument(f"voxel_size must be positive, got {voxel_size}")
    n = len(cloud)
    if n == 0:
        raise InvalidArgument("cannot subsample an empty cloud")
    pos = cloud.positions
    origin = pos.min(axis=0) if origin is None else np.asarray(origin, dtype=np.float64)
    keys = voxel_keys(pos, voxel_size, origin)
    _, inv, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inv = inv.reshape(-1)
    nvox = len(counts)
    centroid = np.stack(
        [np.bincount(inv, weights=pos[:, j], minlength=nvox) for j in range(3)], axis=1
    ) / counts[:, None]
    diff = pos - centroid[inv]
    d2 = np.einsum("ij,ij->i", diff, diff)
    order = np.lexsort((np.arange(n), d2, inv))
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    reps = order[starts]

    labels = None
    if cloud.labels is not None:
        ncls = int(cloud.labels.max()) + 1
        if cloud.num_classes is not None:
            ncls = max(ncls, cloud.num_classes)
        votes = np.bincount(inv * ncls + cloud.labels, minlength=nvox * ncls).reshape(nvox, ncls)
        labels = votes.argmax(axis=1)
    intensity = None
    if cloud.intensity is not None:
        intensity = np.bincount(inv, weights=cloud.intensity, minlength=nvox) / counts
    color = None
    if cloud.color is not None:
        mean = np.stack(
            [np.bincount(inv, weights=cloud.color[:, j], minlength=nvox) for j in range(3)], axis=1
        ) / counts[:, None]
        color = np.clip(np.round(mean * 255.0) / 255.0, 0.0, 1.0)
    sampled = RawPointCloud(pos[reps], color, intensity, labels, cloud.num_classes)
    return GridSampleResult(sampled, inv, reps, float(voxel_size), origin)


# --------------------------------------------------------------------------
# human-vision batches


_HVB_HEADER = struct.Struct("<qqd?")


@dataclass(frozen=True, eq=False)
class HumanVisionBatch:
    """Central/peripheral point sets around one center.

    ``central`` and ``peripheral`` hold cloud indices. The peripheral stream is
    laid out as [annulus draw (3N/4); messengers (N/4)], so
    ``messenger_in_peripheral`` is the tail block and lists messengers in the
    same order as ``messenger_in_central``.
    """

    center_index: int
    radius: float
    central: np.ndarray
    peripheral: np.ndarray
    messenger_in_central: np.ndarray
    messenger_in_peripheral: np.ndarray
    duplicated: bool

    @property
    def n(self) -> int:
        return len(self.central)

    def messenger_ids(self) -> np.ndarray:
        return self.central[self.messenger_in_central]

    def central_only_positions(self) -> np.ndarray:
        mask = np.ones(self.n, dtype=bool)
        mask[self.messenger_in_central] = False
        return np.flatnonzero(mask)

    def peripheral_only_positions(self) -> np.ndarray:
        mask = np.ones(self.n, dtype=bool)
        mask[self.messenger_in_peripheral] = False
        return np.flatnonzero(mask)

    def output_ids(self) -> np.ndarray:
        """Cloud ids of merged output rows: [central-only; messengers; peripheral-only]."""
        return np.concatenate([
            self.central[self.central_only_positions()],
            self.messenger_ids(),
            self.peripheral[self.peripheral_only_positions()],
        ])

    def to_bytes(self) -> bytes:
        head = _HVB_HEADER.pack(self.n, self.center_index, self.radius, self.duplicated)
        body = b"".join(
            np.asarray(a, dtype="<i8").tobytes()
            for a in (self.central, self.peripheral, self.messenger_in_central, self.messenger_in_peripheral)
        )
        return head + body

    @classmethod
    def from_bytes(cls, raw: bytes) -> "HumanVisionBatch":
        if len(raw) < _HVB_HEADER.size:
            raise InvalidArgument("batch record shorter than its header")
        n, center, radius, dup = _HVB_HEADER.unpack_from(raw)
        q = n // 4
        need = _HVB_HEADER.size + 8 * (2 * n + 2 * q)
        if n <= 0 or n % 4 or len(raw) != need:
            raise InvalidArgument(f"batch record has {len(raw)} bytes, expected {need}")
        arr = np.frombuffer(raw, dtype="<i8", offset=_HVB_HEADER.size).astype(np.int64)
        return cls(int(center), float(radius), arr[:n], arr[n:2 * n],
                   arr[2 * n:2 * n + q], arr[2 * n + q:], bool(dup))

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "HumanVisionBatch":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def sample_human_vision_batch(cloud, index: SpatialIndex, center_index: int, N: int,
                              rng: np.random.Generator) -> HumanVisionBatch:
    """Central k-NN disc plus a quarter-density peripheral disc of twice the radius."""
    positions = cloud.positions if isinstance(cloud, RawPointCloud) else np.asarray(cloud)
    n = len(positions)
    if N <= 0 or N % 4:
        raise InvalidArgument(f"N={N} must be a positive multiple of 4")
    if N > n:
        raise InvalidArgument(f"N={N} exceeds the cloud size {n}")
    center = positions[center_index]
    central, d2 = index.knn_batch(center[None, :], N, return_d2=True)
    central, d2 = central[0], d2[0]
    radius = float(np.sqrt(d2.max()))
    q = N // 4
    msg_pos = np.sort(rng.choice(N, size=q, replace=False))
    messengers = central[msg_pos]
    # compare squared distances against the exact k-th squared distance
    r2 = float(d2.max())
    annulus = index.annulus_sq(center, r2, 4.0 * r2) if r2 > 0 else np.zeros(0, np.int64)
    need = 3 * q
    duplicated = len(annulus) < need
    if not duplicated:
        draw = np.sort(rng.choice(annulus, size=need, replace=False))
    else:
        pool = np.concatenate([annulus, messengers])
        fill = rng.choice(pool, size=need - len(annulus), replace=True)
        draw = np.concatenate([annulus, fill])
    peripheral = np.concatenate([draw, messengers]).astype(np.int64)
    return HumanVisionBatch(
        int(center_index), radius, central.astype(np.int64), peripheral,
        msg_pos.astype(np.int64), np.arange(need, N, dtype=np.int64), bool(duplicated),
    )


# --------------------------------------------------------------------------
# layer plans and messenger-preserving decimation


@dataclass(frozen=True)
class LayerPlan:
    counts: tuple[int, ...]  # N^l for l = 0..layers
    messenger_counts: tuple[int, ...]
    ratios: tuple[int, ...]

    @property
    def layers(self) -> int:
        return len(self.ratios)


def plan_downsampling(N: int, layers: int = 5, ratio: int | Sequence[int] = 4) -> LayerPlan:
    """Point counts per encoder level under fixed per-layer decimation.

    ``ratio`` may be a single integer or one integer per layer.
    """
    ratios = (int(ratio),) * layers if np.isscalar(ratio) else tuple(int(r) for r in ratio)
    if len(ratios) != layers or any(r < 1 for r in ratios):
        raise InvalidArgument(f"need {layers} positive decimation ratios, got {ratios}")
    multiple = 4 * int(np.prod(ratios, dtype=np.int64))
    if N <= 0 or N % multiple:
        rule = "4·ratio^layers" if len(set(ratios)) == 1 else "4·prod(ratios)"
        raise InvalidArgument(f"N={N} must be a multiple of {rule} = {multiple}")
    counts = [N]
    for r in ratios:
        counts.append(counts[-1] // r)
    return LayerPlan(tuple(counts), tuple(c // 4 for c in counts), ratios)


def downsample_preserving_messengers(current_indices, messenger_positions, target_count: int,
                                     rng: np.random.Generator, messenger_ordinals=None):
    """Random decimation that keeps exactly a quarter messengers.

    Returns (survivor indices, survivor messenger positions). Survivors are laid
    out as [non-messengers (3t/4); messengers (t/4)], messengers ordered by their
    ordinal in ``messenger_positions``; passing the same ``messenger_ordinals``
    (or an identically seeded rng) to both streams keeps them aligned.
    """
    current = np.asarray(current_indices)
    msg = np.asarray(messenger_positions, dtype=np.intp)
    n, m = len(current), len(msg)
    if target_count <= 0 or target_count % 4 or target_count > n:
        raise InvalidArgument(f"target_count={target_count} must be a positive multiple of 4 <= {n}")
    if 4 * m != n:
        raise InvalidArgument(f"{m} messengers is not one quarter of {n} points")
    keep = target_count // 4
    if messenger_ordinals is None:
        ordinals = np.sort(rng.choice(m, size=keep, replace=False))
    else:
        ordinals = np.asarray(messenger_ordinals, dtype=np.intp)
        if len(ordinals) != keep:
            raise InvalidArgument(f"expected {keep} messenger ordinals, got {len(ordinals)}")
    mask = np.ones(n, dtype=bool)
    mask[msg] = False
    others = np.flatnonzero(mask)
    chosen = others[np.sort(rng.choice(len(others), size=3 * keep, replace=False))]
    positions = np.concatenate([chosen, msg[ordinals]])
    return current[positions], np.arange(3 * keep, target_count, dtype=np.int64)


# --------------------------------------------------------------------------
# inference-center potentials


def init_potentials(cloud_size: int, rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(0.0, 1e-3, size=cloud_size)


def select_inference_center(potentials: np.ndarray) -> int:
    """Index of the lowest potential (lowest index on ties)."""
    return int(np.argmin(potentials))


def update_potentials(potentials: np.ndarray, positions: np.ndarray, center_index: int,
                      covered, radius: float) -> None:
    """Add (1 - d/2R)^2 to every covered point within 2R of the center, in place."""
    covered = np.unique(np.asarray(covered, dtype=np.intp))
    d = np.linalg.norm(positions[covered] - positions[center_index], axis=1)
    reach = 2.0 * radius if radius > 0 else 1.0
    inside = d <= reach
    potentials[covered[inside]] += np.square(1.0 - d[inside] / reach)


# --------------------------------------------------------------------------
# per-batch stream pyramids


@dataclass
class StreamPyramid:
    """Everything one encoder/decoder stream needs, per level.

    Level ``l`` runs the local aggregation on ``points[l]`` with ``neighbors[l]``;
    ``sub[l]`` picks the level-(l+1) survivors and ``up_idx[l]`` / ``up_w[l]``
    interpolate level-(l+1) features back onto level l.
    """

    ids: list[np.ndarray]
    points: list[np.ndarray]
    neighbors: list[np.ndarray]
    sub: list[np.ndarray]
    up_idx: list[np.ndarray]
    up_w: list[np.ndarray]
    messengers: list[np.ndarray]


def upsample_indices(coarse_points, fine_points, mode: str = "nearest"):
    """Source rows and convex weights for decoder interpolation."""
    coarse = np.asarray(coarse_points, dtype=np.float64)
    fine = np.asarray(fine_points, dtype=np.float64)
    if len(coarse) == 0:
        raise InvalidArgument("cannot upsample from an empty level")
    index = SpatialIndex(coarse)
    if mode == "nearest":
        idx = index.knn_batch(fine, 1)
        return idx, np.ones(idx.shape)
    if mode == "idw3":
        k = min(3, len(coarse))
        idx, d2 = index.knn_batch(fine, k, return_d2=True)
        w = 1.0 / (np.sqrt(d2) + 1e-9)
        return idx, w / w.sum(axis=1, keepdims=True)
    raise InvalidArgument(f"unknown decoder mode {mode!r}")


def build_pyramid(points, ids, messengers, plan: LayerPlan, k_schedule: Sequence[int],
                  ordinals: Sequence[np.ndarray], rng: np.random.Generator,
                  decoder_mode: str = "nearest") -> StreamPyramid:
    """Per-level neighbor graphs and decimation for one stream.

    ``ordinals[l]`` selects which level-l messengers survive into level l+1 and
    must be shared between the two streams of a batch.
    """
    pts = np.asarray(points, dtype=np.float64)
    cur_ids = np.asarray(ids, dtype=np.int64)
    cur_msg = np.asarray(messengers, dtype=np.int64)
    if len(pts) != plan.counts[0]:
        raise InvariantViolation(f"stream has {len(pts)} points, plan expects {plan.counts[0]}")
    pyr = StreamPyramid([cur_ids], [pts], [], [], [], [], [cur_msg])
    for level in range(plan.layers):
        k = int(k_schedule[level])
        if k > len(pts):
            raise InvalidArgument(f"K={k} exceeds the {len(pts)} points at level {level}")
        pyr.neighbors.append(SpatialIndex(pts).knn_batch(pts, k))
        keep, next_msg = downsample_preserving_messengers(
            np.arange(len(pts)), cur_msg, plan.counts[level + 1], rng, ordinals[level]
        )
        idx, w = upsample_indices(pts[keep], pts, decoder_mode)
        pyr.sub.append(keep)
        pyr.up_idx.append(idx)
        pyr.up_w.append(w)
        pts, cur_ids, cur_msg = pts[keep], cur_ids[keep], next_msg
        pyr.points.append(pts)
        pyr.ids.append(cur_ids)
        pyr.messengers.append(cur_msg)
    return pyr


def draw_messenger_ordinals(plan: LayerPlan, rng: np.random.Generator) -> list[np.ndarray]:
    return [
        np.sort(rng.choice(plan.messenger_counts[l], size=plan.messenger_counts[l + 1], replace=False))
        for l in range(plan.layers)
    ]


def mean_knn_radius(points, k: int) -> float:
    """Mean distance to the k-th nearest neighbor (self counted as the first)."""
    _, d2 = SpatialIndex(points).knn_batch(points, k, return_d2=True)
    return float(np.sqrt(d2[:, -1]).mean())
