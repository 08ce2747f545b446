"""
Scenario data model and the measurement pipeline.

A :class:`Scenario` is a synthetic ground-truth generator: log-distance path
loss, a fixed penetration loss per blocking rectangle and spatially correlated
shadowing. Its samples are binned into a :data:`GridTable`, the sites are
partitioned into seen and held-out sets, and every site's bins are split into
sparse observations, supervised training queries and an evaluation pool.

Tables are ``pandas.DataFrame`` objects with these columns:

==============  ==========================================================
Table           Columns
==============  ==========================================================
GridTable       site, bin_row, bin_col, x, y, rss_dbm, los
ObservationSet  site, bin_row, bin_col, x, y, rss_dbm, los
QuerySet        site, target_id, bin_row, bin_col, x, y, rss_dbm, los, role
==============  ==========================================================

``rss_dbm`` is the label of a query. ``role`` is ``train`` or ``eval``.
"""
from __future__ import annotations

import dataclasses
import logging
import math
from pathlib import Path
from typing import Any, Iterable, Optional, Sequence

import numpy as np
import pandas as pd
from scipy.interpolate import RegularGridInterpolator
from scipy.special import logsumexp

from .utils import (DatasetParseError, InvalidArgument, NotFound, read_json,
                    round_half_up)

logger = logging.getLogger(__name__)

GRID_COLUMNS = ['site', 'bin_row', 'bin_col', 'x', 'y', 'rss_dbm', 'los']
QUERY_COLUMNS = ['site', 'target_id', 'bin_row', 'bin_col', 'x', 'y',
                 'rss_dbm', 'los', 'role']
CSV_COLUMNS = ['site', 'role', 'x', 'y', 'rss_dbm', 'los', 'bin_row',
               'bin_col']
ROLES = ('obs', 'train', 'eval', 'grid')
LN10_OVER_10 = math.log(10.0) / 10.0


@dataclasses.dataclass(frozen=True)
class Transmitter:
    site: int
    x: float
    y: float
    power_dbm: float = 30.0

    @property
    def position(self) -> tuple[float, float]:
        return (self.x, self.y)


@dataclasses.dataclass(frozen=True)
class Blocker:
    """Axis-aligned rectangle that attenuates every segment crossing it."""
    xmin: float
    ymin: float
    xmax: float
    ymax: float

    def contains(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float).reshape(-1, 2)
        return ((points[:, 0] >= self.xmin) & (points[:, 0] <= self.xmax)
                & (points[:, 1] >= self.ymin) & (points[:, 1] <= self.ymax))

    def crossed_by(self, start: np.ndarray, end: np.ndarray) -> np.ndarray:
        """
        Whether each segment ``start[i] -> end`` touches the rectangle.

        Liang-Barsky clipping of the parametric segment against the box.
        """
        start = np.asarray(start, dtype=float).reshape(-1, 2)
        delta = np.asarray(end, dtype=float).reshape(-1, 2) - start
        t_enter = np.zeros(start.shape[0])
        t_exit = np.ones(start.shape[0])
        hit = np.ones(start.shape[0], dtype=bool)
        bounds = ((self.xmin, self.xmax), (self.ymin, self.ymax))
        for axis, (low, high) in enumerate(bounds):
            step = delta[:, axis]
            origin = start[:, axis]
            parallel = step == 0.0
            hit &= ~(parallel & ((origin < low) | (origin > high)))
            with np.errstate(divide='ignore', invalid='ignore'):
                t_low = (low - origin) / step
                t_high = (high - origin) / step
            near = np.where(parallel, -np.inf, np.minimum(t_low, t_high))
            far = np.where(parallel, np.inf, np.maximum(t_low, t_high))
            t_enter = np.maximum(t_enter, near)
            t_exit = np.minimum(t_exit, far)
        return hit & (t_enter <= t_exit)


@dataclasses.dataclass(frozen=True)
class Scenario:
    """
    Synthetic radio environment.

    Parameters
    ----------
    bounding_box : tuple of float
        ``(xmin, ymin, xmax, ymax)`` in meters.
    transmitters : tuple of Transmitter
        Isotropic single-antenna transmitters, one per site.
    blockers : tuple of Blocker
    bin_size_m : float
        Edge of the square measurement bins.
    shadow_std_db : float
        Standard deviation of the shadowing field.
    shadow_corr_m : float
        Spacing of the shadowing lattice, i.e. its correlation length.
    pathloss_exp : float
        Log-distance path-loss exponent.
    wall_loss_db : float
        Loss per blocker crossed by the transmitter-receiver segment.
    seed : int
    ues_per_bin : float
        Mean number of raw measurements per bin drawn by
        :func:`generate_measurements`.
    """
    bounding_box: tuple[float, float, float, float]
    transmitters: tuple[Transmitter, ...]
    blockers: tuple[Blocker, ...] = ()
    bin_size_m: float = 2.0
    shadow_std_db: float = 6.0
    shadow_corr_m: float = 20.0
    pathloss_exp: float = 3.0
    wall_loss_db: float = 20.0
    seed: int = 0
    ues_per_bin: float = 1.5
    _shadow: dict = dataclasses.field(init=False, repr=False, compare=False,
                                      default=None)

    def __post_init__(self):
        xmin, ymin, xmax, ymax = self.bounding_box
        if not (xmax > xmin and ymax > ymin):
            raise InvalidArgument(f'Degenerate bounding box {self.bounding_box}')
        if self.bin_size_m <= 0:
            raise InvalidArgument('bin_size_m must be positive')
        if self.shadow_std_db < 0:
            raise InvalidArgument('shadow_std_db must be non-negative')
        if self.shadow_corr_m <= 0:
            raise InvalidArgument('shadow_corr_m must be positive')
        sites = [tx.site for tx in self.transmitters]
        if len(set(sites)) != len(sites):
            raise InvalidArgument(f'Duplicate site ids in {sites}')
        if not sites:
            raise InvalidArgument('A scenario needs at least one transmitter')
        # The lattice is drawn once so sample_field is a pure lookup
        object.__setattr__(self, '_shadow', {
            tx.site: self._shadow_interpolator(tx.site)
            for tx in self.transmitters})

    @classmethod
    def from_dict(cls, document: dict[str, Any]) -> Scenario:
        """Build a scenario from its JSON document form."""
        try:
            transmitters = tuple(
                Transmitter(site=int(tx['site']), x=float(tx['x']),
                            y=float(tx['y']),
                            power_dbm=float(tx.get('power_dbm', 30.0)))
                for tx in document['transmitters'])
            blockers = tuple(Blocker(*map(float, box))
                             for box in document.get('blockers', []))
            options = {key: document[key] for key in
                       ('bin_size_m', 'shadow_std_db', 'shadow_corr_m',
                        'pathloss_exp', 'wall_loss_db', 'seed', 'ues_per_bin')
                       if key in document}
            return cls(bounding_box=tuple(map(float, document['bounding_box'])),
                       transmitters=transmitters, blockers=blockers,
                       **options)
        except (KeyError, TypeError) as ex:
            raise InvalidArgument(f'Malformed scenario document: {ex!r}') from ex

    @classmethod
    def load(cls, path: str | Path) -> Scenario:
        return cls.from_dict(read_json(path))

    def to_dict(self) -> dict[str, Any]:
        return {
            'bounding_box': list(self.bounding_box),
            'bin_size_m': self.bin_size_m,
            'transmitters': [dataclasses.asdict(tx) for tx in self.transmitters],
            'blockers': [[b.xmin, b.ymin, b.xmax, b.ymax]
                         for b in self.blockers],
            'shadow_std_db': self.shadow_std_db,
            'shadow_corr_m': self.shadow_corr_m,
            'pathloss_exp': self.pathloss_exp,
            'wall_loss_db': self.wall_loss_db,
            'seed': self.seed,
            'ues_per_bin': self.ues_per_bin,
        }

    @property
    def site_ids(self) -> list[int]:
        return sorted(tx.site for tx in self.transmitters)

    @property
    def grid_shape(self) -> tuple[int, int]:
        """Number of bin rows and columns covering the bounding box."""
        xmin, ymin, xmax, ymax = self.bounding_box
        return (math.ceil((ymax - ymin) / self.bin_size_m),
                math.ceil((xmax - xmin) / self.bin_size_m))

    @property
    def diagonal(self) -> float:
        xmin, ymin, xmax, ymax = self.bounding_box
        return math.hypot(xmax - xmin, ymax - ymin)

    def transmitter(self, site: int) -> Transmitter:
        for tx in self.transmitters:
            if tx.site == site:
                return tx
        raise NotFound(f'Unknown site id {site}')

    def _shadow_interpolator(self, site: int) -> RegularGridInterpolator:
        xmin, ymin, xmax, ymax = self.bounding_box
        step = self.shadow_corr_m
        xs = xmin + step * np.arange(math.ceil((xmax - xmin) / step) + 1)
        ys = ymin + step * np.arange(math.ceil((ymax - ymin) / step) + 1)
        rng = np.random.default_rng([self.seed, site])
        values = rng.normal(0.0, 1.0, size=(xs.size, ys.size))
        return RegularGridInterpolator((xs, ys), self.shadow_std_db * values,
                                       method='linear')

    def crossings(self, site: int, points: np.ndarray) -> np.ndarray:
        """Number of blockers between the site's transmitter and each point."""
        points = np.asarray(points, dtype=float).reshape(-1, 2)
        tx = np.asarray(self.transmitter(site).position)
        count = np.zeros(points.shape[0], dtype=int)
        for blocker in self.blockers:
            count += blocker.crossed_by(points, tx)
        return count

    def inside(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float).reshape(-1, 2)
        xmin, ymin, xmax, ymax = self.bounding_box
        return ((points[:, 0] >= xmin) & (points[:, 0] <= xmax)
                & (points[:, 1] >= ymin) & (points[:, 1] <= ymax))

    def field(self, site: int, points: np.ndarray) -> tuple[np.ndarray,
                                                          np.ndarray]:
        """
        Vectorized ground truth for one site.

        Returns
        -------
        rss : np.ndarray
            Received signal strength in dBm.
        los : np.ndarray of str
            ``'L'`` where no blocker is crossed, ``'N'`` otherwise.
        """
        points = np.asarray(points, dtype=float).reshape(-1, 2)
        if not np.all(self.inside(points)):
            raise InvalidArgument('Field locations must lie inside the '
                                  'bounding box')
        tx = self.transmitter(site)
        delta = points - np.asarray(tx.position)
        distance = np.maximum(np.hypot(delta[:, 0], delta[:, 1]), 1.0)
        blocked = self.crossings(site, points)
        rss = (tx.power_dbm
               - 10.0 * self.pathloss_exp * np.log10(distance)
               - self.wall_loss_db * blocked
               + self._shadow[site](points))
        los = np.where(blocked == 0, 'L', 'N')
        return rss, los

    def bin_of(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Row and column index of the bin holding each point."""
        points = np.asarray(points, dtype=float).reshape(-1, 2)
        xmin, ymin, _, _ = self.bounding_box
        n_rows, n_cols = self.grid_shape
        cols = np.floor((points[:, 0] - xmin) / self.bin_size_m).astype(int)
        rows = np.floor((points[:, 1] - ymin) / self.bin_size_m).astype(int)
        return np.clip(rows, 0, n_rows - 1), np.clip(cols, 0, n_cols - 1)


def sample_field(scenario: Scenario, site: int,
                 location: Sequence[float]) -> tuple[float, str]:
    """
    Ground-truth RSS and LoS flag of ``site`` at ``location``.

    Parameters
    ----------
    scenario : Scenario
    site : int
    location : Point2 or sequence of two floats

    Returns
    -------
    rss : float
        dBm.
    los : str
        ``'L'`` or ``'N'``.
    """
    rss, los = scenario.field(site, np.asarray(location, dtype=float))
    return float(rss[0]), str(los[0])


def generate_measurements(scenario: Scenario) -> pd.DataFrame:
    """
    Draw raw user-equipment measurements of every site.

    UE positions are uniform over the bounding box, excluding blocker
    interiors, and shared by all sites.

    Returns
    -------
    pd.DataFrame
        Columns ``site, x, y, rss_dbm, los``.
    """
    xmin, ymin, xmax, ymax = scenario.bounding_box
    n_rows, n_cols = scenario.grid_shape
    count = round_half_up(n_rows * n_cols, scenario.ues_per_bin)
    rng = np.random.default_rng([scenario.seed, 0x0e])
    points = np.column_stack([rng.uniform(xmin, xmax, count),
                              rng.uniform(ymin, ymax, count)])
    indoors = np.zeros(count, dtype=bool)
    for blocker in scenario.blockers:
        indoors |= blocker.contains(points)
    points = points[~indoors]
    frames = []
    for site in scenario.site_ids:
        rss, los = scenario.field(site, points)
        frames.append(pd.DataFrame({'site': site, 'x': points[:, 0],
                                    'y': points[:, 1], 'rss_dbm': rss,
                                    'los': los}))
    raw = pd.concat(frames, ignore_index=True)
    logger.info('Generated %d raw measurements for %d sites',
                len(raw), len(scenario.site_ids))
    return raw


def bin_measurements(raw, bin_size: float,
                     origin: Sequence[float] = (0.0, 0.0)) -> pd.DataFrame:
    """
    Aggregate raw measurements into square bins.

    Powers are averaged in the linear domain and converted back to dBm; the
    LoS flag of a bin is the majority vote of its samples with ties going to
    ``'N'``.

    Parameters
    ----------
    raw : pd.DataFrame or iterable of (site, Point2, dBm, los)
    bin_size : float
        Bin edge in meters.
    origin : sequence of two floats
        Lower-left corner of bin ``(0, 0)``.

    Returns
    -------
    pd.DataFrame
        A GridTable sorted by ``site, bin_row, bin_col``.
    """
    if bin_size <= 0:
        raise InvalidArgument(f'bin_size must be positive, got {bin_size}')
    if not isinstance(raw, pd.DataFrame):
        records = [(int(site), float(point[0]), float(point[1]), float(dbm),
                    str(los)) for site, point, dbm, los in raw]
        raw = pd.DataFrame.from_records(
            records, columns=['site', 'x', 'y', 'rss_dbm', 'los'])
    if raw.empty:
        return pd.DataFrame({
            'site': pd.Series(dtype=int), 'bin_row': pd.Series(dtype=int),
            'bin_col': pd.Series(dtype=int), 'x': pd.Series(dtype=float),
            'y': pd.Series(dtype=float), 'rss_dbm': pd.Series(dtype=float),
            'los': pd.Series(dtype=object)})[GRID_COLUMNS]
    frame = pd.DataFrame({
        'site': raw['site'].astype(int).to_numpy(),
        'bin_row': np.floor((raw['y'].to_numpy(float) - origin[1])
                            / bin_size).astype(int),
        'bin_col': np.floor((raw['x'].to_numpy(float) - origin[0])
                            / bin_size).astype(int),
        'rss_dbm': raw['rss_dbm'].to_numpy(float),
        'is_los': (raw['los'].to_numpy() == 'L').astype(int),
    })
    # Sorting on the value as well makes the sums independent of input order
    frame = frame.sort_values(['site', 'bin_row', 'bin_col', 'rss_dbm',
                               'is_los'], kind='mergesort')
    frame['power'] = np.power(10.0, frame['rss_dbm'] / 10.0)
    grouped = frame.groupby(['site', 'bin_row', 'bin_col'], sort=True)
    table = grouped.agg(power=('power', 'sum'), n=('power', 'size'),
                        n_los=('is_los', 'sum')).reset_index()
    table['rss_dbm'] = 10.0 * np.log10(table['power'] / table['n'])
    table['los'] = np.where(2 * table['n_los'] > table['n'], 'L', 'N')
    table['x'] = origin[0] + (table['bin_col'] + 0.5) * bin_size
    table['y'] = origin[1] + (table['bin_row'] + 0.5) * bin_size
    return table[GRID_COLUMNS].reset_index(drop=True)


def split_sites(site_ids: Iterable[int]) -> tuple[list[int], list[int]]:
    """
    Odd site ids are seen (supervised), even ones are held out.

    Returns
    -------
    seen, held_out : list of int
    """
    site_ids = sorted({int(site) for site in site_ids})
    if not site_ids:
        raise InvalidArgument('split_sites needs at least one site')
    seen = [site for site in site_ids if site % 2 == 1]
    held_out = [site for site in site_ids if site % 2 == 0]
    if not seen:
        logger.warning('No odd site ids in %s: nothing provides supervision',
                       site_ids)
    return seen, held_out


def stratified_pick(rows: np.ndarray, cols: np.ndarray, count: int,
                    rng: np.random.Generator) -> np.ndarray:
    """
    Spatially uniform selection of ``count`` cells.

    The occupied row/column extent is cut into ``S x S`` strata with
    ``S = ceil(sqrt(count))``; one cell is drawn uniformly from every
    non-empty stratum, then the draw is trimmed or topped up uniformly to hit
    ``count`` exactly.

    Returns
    -------
    np.ndarray
        Sorted positions into ``rows``/``cols``.
    """
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    n = rows.size
    if count >= n:
        return np.arange(n)
    strata = math.ceil(math.sqrt(count))
    row_span = rows.max() - rows.min() + 1
    col_span = cols.max() - cols.min() + 1
    stratum = (((rows - rows.min()) * strata) // row_span) * strata \
        + ((cols - cols.min()) * strata) // col_span
    order = np.lexsort((rng.random(n), stratum))
    ordered = stratum[order]
    first = np.ones(n, dtype=bool)
    first[1:] = ordered[1:] != ordered[:-1]
    picked = np.sort(order[first])
    if picked.size > count:
        picked = np.sort(rng.choice(picked, size=count, replace=False))
    elif picked.size < count:
        rest = np.setdiff1d(np.arange(n), picked)
        extra = rng.choice(rest, size=count - picked.size, replace=False)
        picked = np.sort(np.concatenate([picked, extra]))
    return picked


def _site_rows(grid: pd.DataFrame, site: int) -> pd.DataFrame:
    rows = grid[grid['site'] == site]
    if rows.empty:
        raise NotFound(f'Site {site} has no bins in the grid table')
    return rows.sort_values(['bin_row', 'bin_col'], kind='mergesort')


def sample_observations(grid: pd.DataFrame, site: int, fraction: float,
                        seed: int) -> pd.DataFrame:
    """
    Spatially uniform sparse observations of one site.

    Parameters
    ----------
    grid : pd.DataFrame
        GridTable.
    site : int
    fraction : float
        Share of the site's occupied bins to observe, ``0 < fraction < 1``.
    seed : int

    Returns
    -------
    pd.DataFrame
        ObservationSet rows, sorted by bin.
    """
    if not 0.0 < fraction < 1.0:
        raise InvalidArgument(f'fraction must be in (0, 1), got {fraction}')
    rows = _site_rows(grid, site)
    count = round_half_up(len(rows), fraction)
    if count == 0:
        raise InvalidArgument(
            f'fraction {fraction} of {len(rows)} bins selects no observation')
    rng = np.random.default_rng([seed, site, 0])
    picked = stratified_pick(rows['bin_row'].to_numpy(),
                             rows['bin_col'].to_numpy(), count, rng)
    return rows.iloc[picked][GRID_COLUMNS].reset_index(drop=True)


def allocate_queries(remaining: pd.DataFrame, fraction: float, seed: int,
                     supervised: bool = True) -> pd.DataFrame:
    """
    Split the non-observed bins of one site into train and eval queries.

    Parameters
    ----------
    remaining : pd.DataFrame
        GridTable rows of a single site minus its observations.
    fraction : float
        Share of ``remaining`` that becomes training queries.
    seed : int
    supervised : bool, optional
        Held-out sites pass False: every query is then an eval query.

    Returns
    -------
    pd.DataFrame
        QuerySet with ``role`` and per-site ``target_id``.
    """
    if not 0.0 < fraction < 1.0:
        raise InvalidArgument(f'fraction must be in (0, 1), got {fraction}')
    if remaining.empty:
        raise InvalidArgument('No bins left to allocate as queries')
    sites = remaining['site'].unique()
    if sites.size != 1:
        raise InvalidArgument(f'allocate_queries takes one site, got {sites}')
    site = int(sites[0])
    queries = remaining.sort_values(['bin_row', 'bin_col'], kind='mergesort')
    queries = queries[GRID_COLUMNS].reset_index(drop=True)
    role = np.full(len(queries), 'eval', dtype=object)
    if supervised:
        count = round_half_up(len(queries), fraction)
        rng = np.random.default_rng([seed, site, 1])
        role[rng.choice(len(queries), size=count, replace=False)] = 'train'
    queries['role'] = role
    queries['target_id'] = np.arange(len(queries))
    return queries[QUERY_COLUMNS]


def aggregate_fields(values: Sequence[float]) -> float:
    """
    Superpose per-transmitter received powers.

    ``10 log10(sum 10^(v/10))``, evaluated in the log domain.
    """
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise InvalidArgument('aggregate_fields needs at least one value')
    return float(logsumexp(values * LN10_OVER_10) / LN10_OVER_10)


def aggregate_grid(grid: pd.DataFrame) -> pd.DataFrame:
    """
    Aggregate map over the bins that every site covers.

    Returns
    -------
    pd.DataFrame
        Columns ``bin_row, bin_col, x, y, rss_dbm, n_sites``.
    """
    n_sites = grid['site'].nunique()
    grouped = grid.groupby(['bin_row', 'bin_col'], sort=True)
    table = grouped.agg(x=('x', 'first'), y=('y', 'first'),
                        n_sites=('site', 'nunique'),
                        rss_dbm=('rss_dbm', aggregate_fields)).reset_index()
    return table[table['n_sites'] == n_sites].reset_index(drop=True)


@dataclasses.dataclass
class Dataset:
    """
    Grid, observations and queries of one scenario.

    Attributes
    ----------
    grid : pd.DataFrame
        Every occupied bin of every site.
    observations : pd.DataFrame
    queries : pd.DataFrame
    """
    grid: pd.DataFrame
    observations: pd.DataFrame
    queries: pd.DataFrame

    @property
    def sites(self) -> list[int]:
        return sorted(int(site) for site in self.grid['site'].unique())

    @property
    def seen_sites(self) -> list[int]:
        return [site for site in self.sites if site % 2 == 1]

    @property
    def held_out_sites(self) -> list[int]:
        return [site for site in self.sites if site % 2 == 0]

    def observations_for(self, site: int) -> pd.DataFrame:
        rows = self.observations[self.observations['site'] == site]
        if rows.empty:
            raise NotFound(f'Site {site} has no observations')
        return rows.reset_index(drop=True)

    def queries_for(self, site: Optional[int] = None,
                    role: Optional[str] = None) -> pd.DataFrame:
        rows = self.queries
        if site is not None:
            rows = rows[rows['site'] == site]
        if role is not None:
            rows = rows[rows['role'] == role]
        return rows.reset_index(drop=True)

    def counts(self) -> dict[str, dict[str, int]]:
        """Per-site number of grid, obs, train and eval rows."""
        summary = {}
        for site in self.sites:
            queries = self.queries[self.queries['site'] == site]
            summary[str(site)] = {
                'grid': int((self.grid['site'] == site).sum()),
                'obs': int((self.observations['site'] == site).sum()),
                'train': int((queries['role'] == 'train').sum()),
                'eval': int((queries['role'] == 'eval').sum()),
            }
        return summary


def build_dataset(scenario: Scenario, obs_fraction: float = 0.05,
                  train_fraction: float = 0.15,
                  seed: Optional[int] = None) -> Dataset:
    """
    Run the whole data pipeline for ``scenario``.

    Measurements are generated and binned, sites are split odd/even, every
    site gets ``obs_fraction`` of its bins as observations, and seen sites
    get ``train_fraction`` of the rest as training queries.
    """
    seed = scenario.seed if seed is None else seed
    raw = generate_measurements(scenario)
    xmin, ymin, _, _ = scenario.bounding_box
    grid = bin_measurements(raw, scenario.bin_size_m, origin=(xmin, ymin))
    grid = grid.round({'x': 6, 'y': 6, 'rss_dbm': 6})
    seen, held_out = split_sites(grid['site'].unique())
    observations, queries = [], []
    for site in sorted(seen + held_out):
        obs = sample_observations(grid, site, obs_fraction, seed)
        rows = grid[grid['site'] == site]
        observed = pd.MultiIndex.from_frame(obs[['bin_row', 'bin_col']])
        keys = pd.MultiIndex.from_frame(rows[['bin_row', 'bin_col']])
        remaining = rows[~keys.isin(observed)]
        queries.append(allocate_queries(remaining, train_fraction, seed,
                                        supervised=site in seen))
        observations.append(obs)
    dataset = Dataset(
        grid=grid,
        observations=pd.concat(observations, ignore_index=True),
        queries=pd.concat(queries, ignore_index=True))
    logger.info('Built dataset: %s (seen %s, held-out %s)', dataset.counts(),
                seen, held_out)
    return dataset


def save_dataset(dataset: Dataset, path: str | Path) -> Path:
    """
    Write the dataset as one CSV file.

    Each occupied bin appears once, tagged with its role; bins that are
    neither observed nor queried carry role ``grid``.
    """
    obs = dataset.observations.assign(role='obs')
    queries = dataset.queries.drop(columns='target_id')
    tagged = pd.concat([obs, queries], ignore_index=True)
    keys = ['site', 'bin_row', 'bin_col']
    grid = dataset.grid.merge(tagged[keys + ['role']], on=keys, how='left')
    grid['role'] = grid['role'].fillna('grid')
    grid = grid.sort_values(keys, kind='mergesort')
    path = Path(path)
    grid[CSV_COLUMNS].to_csv(path, index=False, float_format='%.6f',
                             lineterminator='\n')
    logger.info('Wrote %d rows to %s', len(grid), path)
    return path


def _check_field_counts(path: Path) -> None:
    with open(path) as fd:
        header = fd.readline().rstrip('\r\n')
        if header.split(',') != CSV_COLUMNS:
            raise DatasetParseError(
                f'expected header {",".join(CSV_COLUMNS)!r}, got {header!r}',
                path=path, lineno=1)
        for lineno, line in enumerate(fd, start=2):
            line = line.rstrip('\r\n')
            if not line:
                continue
            fields = line.count(',') + 1
            if fields != len(CSV_COLUMNS):
                raise DatasetParseError(
                    f'expected {len(CSV_COLUMNS)} fields, found {fields}',
                    path=path, lineno=lineno)


def _parse_column(frame: pd.DataFrame, column: str, kind: type,
                  path: Path, lines: list[int]) -> np.ndarray:
    # float() keeps the decimal to double conversion exact for round-trips
    values = np.empty(len(frame), dtype=kind)
    for position, text in enumerate(frame[column].tolist()):
        try:
            value = kind(text)
        except ValueError:
            value = None
        if value is None or (kind is float and not math.isfinite(value)):
            raise DatasetParseError(f'invalid {column} value {text!r}',
                                    path=path, lineno=lines[position])
        values[position] = value
    return values


def load_dataset(path: str | Path) -> Dataset:
    """
    Read a dataset written by :func:`save_dataset`.

    Raises
    ------
    DatasetParseError
        Naming the first malformed line.
    """
    path = Path(path)
    _check_field_counts(path)
    frame = pd.read_csv(path, dtype=str, keep_default_na=False,
                        skip_blank_lines=True)
    # read_csv drops blank lines, so line numbers come from the raw scan
    lines = _data_line_numbers(path)
    for column, allowed in (('role', ROLES), ('los', ('L', 'N'))):
        bad = np.flatnonzero(~frame[column].isin(allowed).to_numpy())
        if bad.size:
            raise DatasetParseError(
                f'invalid {column} value {frame[column].iloc[bad[0]]!r}',
                path=path, lineno=lines[bad[0]])
    grid = pd.DataFrame({
        column: _parse_column(frame, column, kind, path, lines)
        for column, kind in (('site', int), ('bin_row', int),
                             ('bin_col', int), ('x', float), ('y', float),
                             ('rss_dbm', float))})
    grid['los'] = frame['los'].astype(object).to_numpy()
    role = frame['role'].to_numpy()
    observations = grid[role == 'obs'][GRID_COLUMNS].reset_index(drop=True)
    queried = (role == 'train') | (role == 'eval')
    queries = grid[queried].assign(role=role[queried])
    queries = queries.sort_values(['site', 'bin_row', 'bin_col'],
                                  kind='mergesort')
    queries['target_id'] = queries.groupby('site').cumcount().astype(np.int64)
    grid = grid.sort_values(['site', 'bin_row', 'bin_col'],
                            kind='mergesort')[GRID_COLUMNS]
    return Dataset(grid=grid.reset_index(drop=True),
                   observations=observations,
                   queries=queries[QUERY_COLUMNS].reset_index(drop=True))


def _data_line_numbers(path: Path) -> list[int]:
    with open(path) as fd:
        next(fd, None)
        return [lineno for lineno, line in enumerate(fd, start=2)
                if line.strip()]
