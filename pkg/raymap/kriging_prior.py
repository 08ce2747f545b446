"""
Classical spatial priors: variogram estimation, ordinary and universal
kriging, inverse distance weighting, and local variation descriptors.

The prior of a (target, site) pair is the ordinary kriging estimate from the
site's own observations, solved on the ``k`` nearest of them.
"""
from __future__ import annotations

import dataclasses
import logging
from pathlib import Path
from typing import Callable, NamedTuple, Optional

import numpy as np
import pandas as pd
import scipy.linalg
from scipy.optimize import least_squares
from scipy.spatial.distance import pdist

from .geo_index import SpatialIndex, build_index
from .utils import DatasetParseError, InvalidArgument

logger = logging.getLogger(__name__)

KRIGING_JITTER = 1e-8
DEGENERATE_SILL = 1e-6
# Descriptor stencil spacing when neither the bin size nor step_m is known
DEFAULT_STEP_M = 2.0
PRIOR_COLUMNS = ['site', 'target_id', 'x', 'y', 'prior_dbm', 'krig_var',
                 'grad_mag', 'local_std']
LAG_COLUMNS = ['lag', 'semivariance', 'count']
_CHUNK = 2048


@dataclasses.dataclass(frozen=True)
class KrigingConfig:
    """
    Settings of the kriging prior.

    Attributes
    ----------
    k : int
        Local neighborhood size of every kriging system.
    n_lags : int
        Number of distance bins of the empirical variogram.
    max_lag_fraction : float
        Largest lag considered, as a share of the largest pair distance.
    idw_power : float
        Exponent of the IDW baseline and of the kriging fallback.
    step_m : float, optional
        Stencil spacing of the variation descriptors; the bin size when None.
    """
    k: int = 32
    n_lags: int = 15
    max_lag_fraction: float = 0.5
    idw_power: float = 2.0
    step_m: Optional[float] = None


@dataclasses.dataclass(frozen=True)
class VariogramModel:
    """
    Exponential variogram with nugget.

    ``gamma(h) = nugget + (sill - nugget) * (1 - exp(-3 h / range))`` for
    ``h > 0`` and ``gamma(0) = 0``.
    """
    nugget: float
    sill: float
    range_m: float
    family: str = 'exponential'
    degenerate: bool = False

    def __post_init__(self):
        if self.nugget < 0 or self.sill < self.nugget or self.range_m <= 0:
            raise InvalidArgument(f'Inadmissible variogram {self}')
        if self.family != 'exponential':
            raise InvalidArgument(f'Unsupported family {self.family!r}')

    @property
    def psill(self) -> float:
        return self.sill - self.nugget

    def __call__(self, h) -> np.ndarray:
        h = np.asarray(h, dtype=float)
        value = self.nugget + self.psill * (1.0 - np.exp(-3.0 * h
                                                         / self.range_m))
        return np.where(h > 0.0, value, 0.0)


class PointData:
    """
    Coordinates and values of one site's observations, with their index.

    Parameters
    ----------
    points : array of shape (n, 2)
    values : array of shape (n,)
    """
    def __init__(self, points, values):
        self.points = np.asarray(points, dtype=float).reshape(-1, 2)
        self.values = np.asarray(values, dtype=float).reshape(-1)
        if self.points.shape[0] != self.values.shape[0]:
            raise InvalidArgument('points and values differ in length')
        self.index: SpatialIndex = build_index(self.points)

    @classmethod
    def from_frame(cls, frame: pd.DataFrame) -> PointData:
        return cls(frame[['x', 'y']].to_numpy(float),
                   frame['rss_dbm'].to_numpy(float))

    def __len__(self):
        return self.values.shape[0]


def as_point_data(obs) -> PointData:
    if isinstance(obs, PointData):
        return obs
    if isinstance(obs, pd.DataFrame):
        if obs.empty:
            raise InvalidArgument('Kriging needs at least one observation')
        return PointData.from_frame(obs)
    points, values = obs
    return PointData(points, values)


class KrigingResult(NamedTuple):
    """Estimate, kriging variance, weights and the IDW fallback flag."""
    value: float
    variance: float
    weights: np.ndarray
    fallback: bool


class KrigingBatch(NamedTuple):
    values: np.ndarray
    variances: np.ndarray
    weights: np.ndarray
    fallback: np.ndarray


def empirical_variogram(obs, n_lags: int,
                        max_lag: Optional[float] = None) -> pd.DataFrame:
    """
    Binned semivariances of all observation pairs.

    Parameters
    ----------
    obs : ObservationSet frame or PointData
    n_lags : int
        Number of equal-width distance bins over ``[0, max_lag]``.
    max_lag : float, optional
        Pairs farther apart are ignored; defaults to the largest pair
        distance.

    Returns
    -------
    pd.DataFrame
        Columns ``lag, semivariance, count``; ``lag`` is the bin center and
        empty bins are omitted.
    """
    if n_lags < 1:
        raise InvalidArgument(f'n_lags must be positive, got {n_lags}')
    data = as_point_data(obs)
    if len(data) < 2:
        raise InvalidArgument('An empirical variogram needs two observations')
    distance = pdist(data.points)
    half_sq = 0.5 * pdist(data.values[:, None], 'sqeuclidean')
    if max_lag is None:
        max_lag = float(distance.max())
    if max_lag <= 0:
        raise InvalidArgument('All observations are coincident')
    keep = distance <= max_lag
    width = max_lag / n_lags
    bins = np.minimum((distance[keep] / width).astype(int), n_lags - 1)
    count = np.bincount(bins, minlength=n_lags)
    total = np.bincount(bins, weights=half_sq[keep], minlength=n_lags)
    occupied = count > 0
    centers = (np.arange(n_lags) + 0.5) * width
    return pd.DataFrame({'lag': centers[occupied],
                         'semivariance': total[occupied] / count[occupied],
                         'count': count[occupied]})


def _exponential_residuals(params, lags, semivariance, weight):
    nugget, psill, range_m = params
    model = nugget + psill * (1.0 - np.exp(-3.0 * lags / range_m))
    return weight * (model - semivariance)


def fit_variogram(table: pd.DataFrame) -> VariogramModel:
    """
    Pair-count weighted least-squares fit of the exponential model.

    Parameters
    ----------
    table : pd.DataFrame
        Lag table from :func:`empirical_variogram`.

    Returns
    -------
    VariogramModel
        With ``degenerate`` set when every semivariance is zero.
    """
    if len(table) < 3:
        raise InvalidArgument(
            f'fit_variogram needs 3 non-empty lag bins, got {len(table)}')
    lags = table['lag'].to_numpy(float)
    semivariance = table['semivariance'].to_numpy(float)
    weight = np.sqrt(table['count'].to_numpy(float))
    max_lag = float(lags.max())
    top = float(semivariance.max())
    if top <= 0.0:
        logger.warning('All semivariances are zero, using a degenerate '
                       'variogram')
        return VariogramModel(nugget=0.0, sill=DEGENERATE_SILL,
                              range_m=max_lag, degenerate=True)
    x0 = [max(float(semivariance.min()), 0.0),
          max(top - float(semivariance.min()), 1e-3 * top),
          0.25 * max_lag]
    bounds = ([0.0, 0.0, 1e-6 * max_lag], [top, 10.0 * top, 10.0 * max_lag])
    x0 = np.clip(x0, bounds[0], bounds[1])
    res = least_squares(_exponential_residuals, x0, bounds=bounds,
                        args=(lags, semivariance, weight), x_scale='jac',
                        ftol=1e-14, xtol=1e-14, gtol=1e-14, max_nfev=2000)
    nugget, psill, range_m = (float(value) for value in res.x)
    model = VariogramModel(nugget=nugget, sill=nugget + psill,
                           range_m=range_m)
    logger.debug('Fitted variogram %s (cost %.3g)', model, res.cost)
    return model


def idw_predict(obs, query, power: float = 2.0, k: int = 32) -> float:
    """
    Inverse distance weighted estimate over the ``k`` nearest observations.

    A query coincident with an observation returns its value.
    """
    data = as_point_data(obs)
    ids = np.asarray(data.index.knn(np.asarray(query, dtype=float), k))
    return float(_idw(data, np.asarray(query, dtype=float).reshape(1, 2),
                      ids[None, :], power)[0])


def _idw(data: PointData, queries: np.ndarray, ids: np.ndarray,
         power: float) -> np.ndarray:
    delta = data.points[ids] - queries[:, None, :]
    distance = np.sqrt(delta[..., 0] * delta[..., 0]
                       + delta[..., 1] * delta[..., 1])
    values = data.values[ids]
    coincident = distance[:, 0] == 0.0
    safe = np.where(distance > 0.0, distance, 1.0)
    weight = safe ** (-power)
    estimate = (weight * values).sum(axis=1) / weight.sum(axis=1)
    return np.where(coincident, values[:, 0], estimate)


def _ok_systems(data: PointData, variogram: VariogramModel,
                queries: np.ndarray, ids: np.ndarray):
    n = ids.shape[1]
    local = data.points[ids]
    delta = local[:, :, None, :] - local[:, None, :, :]
    pair = np.sqrt(delta[..., 0] * delta[..., 0] + delta[..., 1] * delta[..., 1])
    matrix = np.zeros((ids.shape[0], n + 1, n + 1))
    matrix[:, :n, :n] = variogram(pair)
    matrix[:, :n, :n] += KRIGING_JITTER * np.eye(n)
    matrix[:, :n, n] = 1.0
    matrix[:, n, :n] = 1.0
    to_query = local - queries[:, None, :]
    gamma0 = variogram(np.sqrt(to_query[..., 0] * to_query[..., 0]
                               + to_query[..., 1] * to_query[..., 1]))
    rhs = np.ones((ids.shape[0], n + 1))
    rhs[:, :n] = gamma0
    return matrix, rhs, gamma0


def _solve_batch(matrix: np.ndarray, rhs: np.ndarray):
    """Solve each system, marking singular or non-finite ones as failed."""
    failed = np.zeros(matrix.shape[0], dtype=bool)
    try:
        solution = np.linalg.solve(matrix, rhs[..., None])[..., 0]
    except np.linalg.LinAlgError:
        solution = np.zeros_like(rhs)
        for row in range(matrix.shape[0]):
            try:
                solution[row] = np.linalg.solve(matrix[row:row + 1],
                                                rhs[row:row + 1, :, None])[0, :, 0]
            except np.linalg.LinAlgError:
                failed[row] = True
    failed |= ~np.all(np.isfinite(solution), axis=1)
    return solution, failed


def ok_predict_many(obs, variogram: VariogramModel, queries,
                    k: int = 32, idw_power: float = 2.0) -> KrigingBatch:
    """
    Ordinary kriging at many queries, solved in chunks of batched systems.

    Every row equals :func:`ok_predict` at the same query.
    """
    if k < 1:
        raise InvalidArgument(f'k must be positive, got {k}')
    data = as_point_data(obs)
    queries = np.asarray(queries, dtype=float).reshape(-1, 2)
    width = min(k, len(data))
    values = np.empty(queries.shape[0])
    variances = np.empty(queries.shape[0])
    weights = np.empty((queries.shape[0], width))
    fallback = np.zeros(queries.shape[0], dtype=bool)
    for start in range(0, queries.shape[0], _CHUNK):
        chunk = slice(start, start + _CHUNK)
        ids = data.index.knn_batch(queries[chunk], k)
        matrix, rhs, gamma0 = _ok_systems(data, variogram, queries[chunk], ids)
        solution, failed = _solve_batch(matrix, rhs)
        w = solution[:, :width]
        values[chunk] = (w * data.values[ids]).sum(axis=1)
        variances[chunk] = (w * gamma0).sum(axis=1) + solution[:, width]
        weights[chunk] = w
        if np.any(failed):
            rows = np.flatnonzero(failed)
            logger.warning('Kriging system singular at %d queries, falling '
                           'back to IDW', rows.size)
            values[start + rows] = _idw(data, queries[chunk][rows], ids[rows],
                                        idw_power)
            variances[start + rows] = variogram.sill
            weights[start + rows] = np.nan
            fallback[start + rows] = True
    return KrigingBatch(values, variances, weights, fallback)


def ok_predict(obs, variogram: VariogramModel, query, k: int = 32,
               idw_power: float = 2.0) -> KrigingResult:
    """
    Ordinary kriging estimate at ``query``.

    Solves ``Gamma w + lambda 1 = gamma0``, ``1^T w = 1`` on the ``k``
    nearest observations with :data:`KRIGING_JITTER` on the diagonal.

    Parameters
    ----------
    obs : ObservationSet frame, PointData or (points, values)
    variogram : VariogramModel
    query : Point2
    k : int, optional

    Returns
    -------
    KrigingResult
        ``value`` in dBm and ``variance`` in dB^2. When the system cannot be
        solved, ``fallback`` is True, ``value`` is the IDW estimate and
        ``variance`` the sill.
    """
    batch = ok_predict_many(obs, variogram, [query], k=k, idw_power=idw_power)
    return KrigingResult(float(batch.values[0]), float(batch.variances[0]),
                         batch.weights[0], bool(batch.fallback[0]))


def uk_predict(obs, variogram: VariogramModel, query, k: int = 32,
               idw_power: float = 2.0) -> KrigingResult:
    """
    Universal kriging with the linear drift ``{1, x, y}``.

    Coordinates are centered on the query, so the drift vector at the query
    is ``(1, 0, 0)``.
    """
    if k < 1:
        raise InvalidArgument(f'k must be positive, got {k}')
    data = as_point_data(obs)
    query = np.asarray(query, dtype=float).reshape(2)
    ids = np.asarray(data.index.knn(query, k))
    n = ids.size
    local = data.points[ids] - query
    matrix = np.zeros((n + 3, n + 3))
    delta = local[:, None, :] - local[None, :, :]
    matrix[:n, :n] = variogram(np.sqrt(delta[..., 0] * delta[..., 0]
                                       + delta[..., 1] * delta[..., 1]))
    matrix[:n, :n] += KRIGING_JITTER * np.eye(n)
    drift = np.column_stack([np.ones(n), local])
    matrix[:n, n:] = drift
    matrix[n:, :n] = drift.T
    gamma0 = variogram(np.sqrt(local[:, 0] * local[:, 0]
                               + local[:, 1] * local[:, 1]))
    rhs = np.concatenate([gamma0, [1.0, 0.0, 0.0]])
    try:
        solution = scipy.linalg.solve(matrix, rhs, assume_a='sym')
        if not np.all(np.isfinite(solution)):
            raise np.linalg.LinAlgError('non-finite kriging weights')
    except (np.linalg.LinAlgError, ValueError) as ex:
        logger.warning('Universal kriging failed at %s (%s), falling back to '
                       'IDW', query, ex)
        value = _idw(data, query[None, :], ids[None, :], idw_power)[0]
        return KrigingResult(float(value), variogram.sill,
                             np.full(n, np.nan), True)
    w = solution[:n]
    value = float(w @ data.values[ids])
    variance = float(w @ gamma0 + solution[n])
    return KrigingResult(value, variance, w, False)


def prior_variation(evaluator: Callable[[np.ndarray], np.ndarray], query,
                    step: float) -> tuple[float, float]:
    """
    Gradient magnitude and local spread of a prior field around ``query``.

    Parameters
    ----------
    evaluator : callable
        Maps an ``(m, 2)`` array of locations to ``m`` prior values.
    query : Point2
    step : float
        Stencil spacing ``h`` in meters.

    Returns
    -------
    grad_mag : float
        Central-difference gradient norm, dB/m.
    local_std : float
        Population standard deviation over the 3x3 stencil, dB.
    """
    grad, spread = prior_variation_many(evaluator, [query], step)
    return float(grad[0]), float(spread[0])


_STENCIL = np.array([(dx, dy) for dy in (-1, 0, 1) for dx in (-1, 0, 1)],
                    dtype=float)


def prior_variation_many(evaluator, queries, step: float):
    """Vectorized :func:`prior_variation`; one evaluator call in total."""
    if step <= 0:
        raise InvalidArgument(f'step must be positive, got {step}')
    queries = np.asarray(queries, dtype=float).reshape(-1, 2)
    stencil = (queries[:, None, :] + step * _STENCIL[None, :, :]).reshape(-1, 2)
    values = np.asarray(evaluator(stencil), dtype=float).reshape(-1, 9)
    # stencil order is row-major from (-h, -h): 3 is (-h, 0), 5 is (+h, 0)
    grad_x = (values[:, 5] - values[:, 3]) / (2.0 * step)
    grad_y = (values[:, 7] - values[:, 1]) / (2.0 * step)
    return np.hypot(grad_x, grad_y), values.std(axis=1)


def fit_site_variogram(obs, config: KrigingConfig = KrigingConfig()
                       ) -> VariogramModel:
    """Empirical variogram plus fit with the configured lag settings."""
    data = as_point_data(obs)
    max_lag = config.max_lag_fraction * float(pdist(data.points).max())
    return fit_variogram(empirical_variogram(data, config.n_lags, max_lag))


def build_prior_table(queries: pd.DataFrame, observations: pd.DataFrame,
                      variograms: Optional[dict[int, VariogramModel]] = None,
                      config: KrigingConfig = KrigingConfig(),
                      step: float = DEFAULT_STEP_M) -> pd.DataFrame:
    """
    Ordinary kriging prior and variation descriptors for every query pair.

    Parameters
    ----------
    queries : pd.DataFrame
        QuerySet rows, any number of sites.
    observations : pd.DataFrame
        ObservationSet rows of the same sites.
    variograms : dict, optional
        Site to fitted model; fitted from the observations when missing.
    config : KrigingConfig
    step : float
        Descriptor stencil spacing, used when ``config.step_m`` is None.

    Returns
    -------
    pd.DataFrame
        :data:`PRIOR_COLUMNS` plus an in-memory ``fallback`` flag column,
        sorted by ``site, target_id``.
    """
    variograms = dict(variograms or {})
    step = config.step_m or step
    frames = []
    for site in sorted(queries['site'].unique()):
        site = int(site)
        rows = queries[queries['site'] == site].sort_values(
            'target_id', kind='mergesort')
        data = as_point_data(observations[observations['site'] == site])
        if site not in variograms:
            variograms[site] = fit_site_variogram(data, config)
            logger.info('Fitted variogram for site %d: %s', site,
                        variograms[site])
        variogram = variograms[site]
        points = rows[['x', 'y']].to_numpy(float)
        prior = ok_predict_many(data, variogram, points, k=config.k,
                                idw_power=config.idw_power)

        def evaluator(locations, data=data, variogram=variogram):
            return ok_predict_many(data, variogram, locations, k=config.k,
                                   idw_power=config.idw_power).values

        grad_mag, local_std = prior_variation_many(evaluator, points, step)
        frames.append(pd.DataFrame({
            'site': site, 'target_id': rows['target_id'].to_numpy(),
            'x': points[:, 0], 'y': points[:, 1],
            'prior_dbm': prior.values, 'krig_var': prior.variances,
            'grad_mag': grad_mag, 'local_std': local_std,
            'fallback': prior.fallback}))
    if not frames:
        raise InvalidArgument('build_prior_table needs at least one query')
    table = pd.concat(frames, ignore_index=True)
    if table['fallback'].any():
        logger.warning('%d prior rows fell back to IDW',
                       int(table['fallback'].sum()))
    return table


def save_prior_table(table: pd.DataFrame, path: str | Path) -> Path:
    path = Path(path)
    table[PRIOR_COLUMNS].to_csv(path, index=False, float_format='%.6f',
                                lineterminator='\n')
    return path


def load_prior_table(path: str | Path) -> pd.DataFrame:
    """Read a prior table CSV; the fallback flags are not persisted."""
    path = Path(path)
    try:
        table = pd.read_csv(path)
    except pd.errors.ParserError as ex:
        raise DatasetParseError(str(ex), path=path) from ex
    if list(table.columns) != PRIOR_COLUMNS:
        raise DatasetParseError(f'expected columns {PRIOR_COLUMNS}',
                                path=path, lineno=1)
    for column in PRIOR_COLUMNS:
        table[column] = pd.to_numeric(table[column], errors='coerce')
    bad = table.isna().any(axis=1).to_numpy()
    if bad.any():
        raise DatasetParseError('missing or malformed value', path=path,
                                lineno=int(np.flatnonzero(bad)[0]) + 2)
    table['fallback'] = False
    return table
