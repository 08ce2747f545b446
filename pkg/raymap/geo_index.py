"""
Planar geometry primitives and an exact k-nearest-neighbor index.

Every displacement in raymap is taken as ``d(u, v) = p_u - p_v`` and every
bearing is the ``atan2`` of that displacement wrapped into ``[-pi, pi)``.
"""
from __future__ import annotations

import dataclasses
import logging
import math
from typing import NamedTuple, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .utils import InvalidArgument

logger = logging.getLogger(__name__)

TWO_PI = 2.0 * math.pi


class Point2(NamedTuple):
    """A planar location in meters."""
    x: float
    y: float


@dataclasses.dataclass(frozen=True)
class PairGeometry:
    """
    Distance and bearing of the ordered node pair ``(u, v)``.

    Attributes
    ----------
    distance : float
        Euclidean norm of ``p_u - p_v`` in meters.
    bearing : float
        ``atan2`` of ``p_u - p_v``, wrapped into ``[-pi, pi)``.
    """
    distance: float
    bearing: float


def wrap_bearing(angle: float) -> float:
    """
    Wrap an angle into the half-open interval ``[-pi, pi)``.

    Parameters
    ----------
    angle : float
        Angle in radians.

    Returns
    -------
    float
    """
    if not math.isfinite(angle):
        raise InvalidArgument(f'Cannot wrap non-finite angle {angle!r}')
    wrapped = math.fmod(angle + math.pi, TWO_PI)
    if wrapped < 0.0:
        wrapped += TWO_PI
    wrapped -= math.pi
    # fmod can land exactly on +pi after the shift for inputs just below pi
    if wrapped >= math.pi:
        wrapped -= TWO_PI
    return wrapped


def wrap_bearings(angles: np.ndarray) -> np.ndarray:
    """Vectorized :func:`wrap_bearing`."""
    angles = np.asarray(angles, dtype=float)
    if not np.all(np.isfinite(angles)):
        raise InvalidArgument('Cannot wrap non-finite angles')
    wrapped = np.mod(angles + math.pi, TWO_PI) - math.pi
    wrapped[wrapped >= math.pi] -= TWO_PI
    return wrapped


def pair_geometry(u: Sequence[float], v: Sequence[float]) -> PairGeometry:
    """
    Pairwise geometric descriptor of the ordered pair ``(u, v)``.

    Coincident points get distance 0 and bearing 0.
    """
    ux, uy = float(u[0]), float(u[1])
    vx, vy = float(v[0]), float(v[1])
    if not all(math.isfinite(c) for c in (ux, uy, vx, vy)):
        raise InvalidArgument('pair_geometry requires finite coordinates')
    dx = ux - vx
    dy = uy - vy
    distance = math.sqrt(dx * dx + dy * dy)
    if distance == 0.0:
        return PairGeometry(0.0, 0.0)
    return PairGeometry(distance, wrap_bearing(math.atan2(dy, dx)))


def pair_geometry_many(u: np.ndarray, v: np.ndarray) -> tuple[np.ndarray,
                                                             np.ndarray]:
    """
    Row-wise :func:`pair_geometry` for ``(n, 2)`` arrays.

    Returns
    -------
    distance, bearing : np.ndarray
        Both of shape ``(n,)``.
    """
    u = np.asarray(u, dtype=float).reshape(-1, 2)
    v = np.asarray(v, dtype=float).reshape(-1, 2)
    delta = u - v
    distance = np.sqrt(delta[:, 0] * delta[:, 0] + delta[:, 1] * delta[:, 1])
    bearing = np.zeros_like(distance)
    moving = distance > 0.0
    if np.any(moving):
        bearing[moving] = wrap_bearings(
            np.arctan2(delta[moving, 1], delta[moving, 0]))
    return distance, bearing


def _distances(points: np.ndarray, center: np.ndarray) -> np.ndarray:
    delta = points - center
    return np.sqrt(delta[:, 0] * delta[:, 0] + delta[:, 1] * delta[:, 1])


class SpatialIndex:
    """
    Exact k-nearest-neighbor index over a fixed planar point set.

    Point ids are the positions in the sequence given at construction. Results
    are ordered by ascending distance with ties broken by ascending id, so a
    query returns the same ids as an exhaustive scan.

    Parameters
    ----------
    points : sequence of Point2 or array of shape (n, 2)
    """
    def __init__(self, points):
        coords = np.asarray(points, dtype=float).reshape(-1, 2)
        if coords.shape[0] == 0:
            raise InvalidArgument('Cannot index an empty point set')
        if not np.all(np.isfinite(coords)):
            raise InvalidArgument('Index points must be finite')
        coords.setflags(write=False)
        self._points = coords
        self._tree = cKDTree(coords)

    def __len__(self) -> int:
        return self._points.shape[0]

    @property
    def points(self) -> np.ndarray:
        """Read-only ``(n, 2)`` coordinate array."""
        return self._points

    def knn(self, center, k: int, exclude: Optional[int] = None) -> list[int]:
        """
        Ids of the ``k`` points nearest to ``center``.

        Parameters
        ----------
        center : Point2 or sequence of two floats
        k : int
            Number of neighbors, at least 1.
        exclude : int, optional
            An id that is never returned, typically the center itself.

        Returns
        -------
        list of int
            ``min(k, available)`` ids, nearest first, ties by ascending id.
        """
        if k < 1:
            raise InvalidArgument(f'knn needs k >= 1, got {k}')
        center = np.asarray(center, dtype=float).reshape(2)
        n = len(self)
        wanted = min(k + (exclude is not None), n)
        dist, _ = self._tree.query(center, k=wanted)
        radius = float(np.atleast_1d(dist)[-1])
        # Everything up to the k-th distance, including ties on the boundary
        candidates = self._tree.query_ball_point(
            center, r=radius * (1.0 + 1e-12) + 1e-12)
        candidates = np.asarray(sorted(candidates), dtype=np.intp)
        if exclude is not None:
            candidates = candidates[candidates != exclude]
        exact = _distances(self._points[candidates], center)
        order = np.lexsort((candidates, exact))
        return [int(i) for i in candidates[order][:k]]

    def knn_batch(self, centers: np.ndarray, k: int,
                  slack: int = 8) -> np.ndarray:
        """
        Vectorized :meth:`knn` without exclusion.

        The tree is asked for ``k + slack`` candidates per center; rows whose
        boundary ties may reach past that window are answered by :meth:`knn`
        instead, so every row equals the scalar query.

        Returns
        -------
        np.ndarray
            Integer ids of shape ``(len(centers), min(k, len(self)))``.
        """
        if k < 1:
            raise InvalidArgument(f'knn needs k >= 1, got {k}')
        centers = np.asarray(centers, dtype=float).reshape(-1, 2)
        n = len(self)
        k = min(k, n)
        wanted = min(k + slack, n)
        if centers.shape[0] == 0:
            return np.zeros((0, k), dtype=np.intp)
        _, ids = self._tree.query(centers, k=wanted)
        ids = np.asarray(ids, dtype=np.intp).reshape(centers.shape[0], wanted)
        delta = self._points[ids] - centers[:, None, :]
        exact = np.sqrt(delta[..., 0] * delta[..., 0]
                        + delta[..., 1] * delta[..., 1])
        order = np.lexsort((ids, exact), axis=-1)
        ids = np.take_along_axis(ids, order, axis=-1)
        exact = np.take_along_axis(exact, order, axis=-1)
        result = ids[:, :k].copy()
        if wanted < n:
            # A tie with the k-th distance at the window edge may hide a
            # smaller id outside the window
            boundary = exact[:, k - 1]
            unsure = exact[:, -1] <= boundary * (1.0 + 1e-12) + 1e-12
            for row in np.flatnonzero(unsure):
                result[row] = self.knn(centers[row], k)
        return result


def build_index(points) -> SpatialIndex:
    """Build an immutable :class:`SpatialIndex` over ``points``."""
    index = SpatialIndex(points)
    logger.debug('Built spatial index over %d points', len(index))
    return index


def brute_force_knn(points: np.ndarray, center, k: int,
                    exclude: Optional[int] = None) -> list[int]:
    """
    Exhaustive-scan nearest neighbors with the same ordering contract as
    :meth:`SpatialIndex.knn`.
    """
    points = np.asarray(points, dtype=float).reshape(-1, 2)
    ids = np.arange(points.shape[0])
    if exclude is not None:
        ids = ids[ids != exclude]
    exact = _distances(points[ids], np.asarray(center, dtype=float).reshape(2))
    order = np.lexsort((ids, exact))
    return [int(i) for i in ids[order][:k]]
