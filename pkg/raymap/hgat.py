"""
Hierarchical graph attention encoder.

The local stage attends over the reference pages of a target: every page
bundles a scaffold reference's embedding with the geometry of the triad
(target, reference, transmitter). The global stage lets a target attend over
the local embeddings of its nearest same-site targets. The concatenated state
feeds the direct or the residual readout head.

All stages are batched: rows of a page batch or of an edge batch carry a
segment id naming the target they belong to.
"""
from __future__ import annotations

import dataclasses
import logging
from typing import Callable, Optional

import numpy as np
import pandas as pd

from .datahub import stratified_pick
from .encoders import (EncoderConfig, dense_shapes, f_edge_global,
                       f_edge_local, f_ref, f_tx, init_arrays, linear)
from .geo_index import PairGeometry, SpatialIndex, build_index, pair_geometry_many
from .numcore import ModelParams, Node, Tape
from .utils import InvalidArgument

logger = logging.getLogger(__name__)


@dataclasses.dataclass(frozen=True)
class HgatConfig:
    """
    Attributes
    ----------
    d : int
        Latent width of both stages.
    k_ref : int
        Reference pages per target.
    k_g : int
        Global neighbors per target.
    heads : int
        Attention heads; only single-head attention exists.
    n_ref : int, optional
        Scaffold budget; every observation when None.
    head_hidden : int
        Hidden width of the readout heads.
    """
    d: int = 128
    k_ref: int = 16
    k_g: int = 4
    heads: int = 1
    n_ref: Optional[int] = None
    head_hidden: int = 128

    def __post_init__(self):
        if min(self.d, self.k_ref, self.k_g, self.head_hidden) < 1:
            raise InvalidArgument(f'HgatConfig counts must be positive: {self}')
        if self.heads != 1:
            raise InvalidArgument('Only single-head attention is supported')
        if self.n_ref is not None and self.n_ref < 1:
            raise InvalidArgument('n_ref must be positive')


@dataclasses.dataclass(frozen=True)
class ReferenceScaffold:
    """Retained references of one site with their spatial index."""
    site: int
    points: np.ndarray
    rss: np.ndarray
    los: np.ndarray
    index: SpatialIndex = dataclasses.field(repr=False, compare=False)

    def __len__(self):
        return self.rss.shape[0]


def build_scaffold(obs: pd.DataFrame, budget: Optional[int] = None,
                   seed: int = 0) -> ReferenceScaffold:
    """
    Stratified subsample of a site's observations, at most ``budget`` of
    them.
    """
    if obs.empty:
        raise InvalidArgument('Cannot build a scaffold without observations')
    sites = obs['site'].unique()
    if sites.size != 1:
        raise InvalidArgument(f'A scaffold covers one site, got {sites}')
    if budget is not None and budget < 1:
        raise InvalidArgument(f'budget must be positive, got {budget}')
    site = int(sites[0])
    obs = obs.sort_values(['bin_row', 'bin_col'], kind='mergesort')
    if budget is not None and budget < len(obs):
        rng = np.random.default_rng([seed, site, 2])
        keep = stratified_pick(obs['bin_row'].to_numpy(),
                               obs['bin_col'].to_numpy(), budget, rng)
        obs = obs.iloc[keep]
    points = obs[['x', 'y']].to_numpy(float)
    logger.debug('Scaffold for site %d keeps %d references', site, len(obs))
    return ReferenceScaffold(site=site, points=points,
                             rss=obs['rss_dbm'].to_numpy(float),
                             los=obs['los'].to_numpy().astype(str),
                             index=build_index(points))


@dataclasses.dataclass(frozen=True)
class PageDescriptor:
    """Triad geometry and LoS agreement of one reference page."""
    tr: PairGeometry
    rb: PairGeometry
    tb: PairGeometry
    s_t: str
    s_r: str


@dataclasses.dataclass
class PageBatch:
    """
    Reference pages of a batch of targets of one site.

    Row ``i`` is a page of target ``segments[i]``. ``distance`` and
    ``bearing`` columns are the relations ``(t, r)``, ``(r, b)``,
    ``(t, b)``.
    """
    segments: np.ndarray
    n_targets: int
    displacement: np.ndarray
    rss: np.ndarray
    distance: np.ndarray
    bearing: np.ndarray
    target_los: np.ndarray
    reference_los: np.ndarray
    tx_position: np.ndarray
    reference_ids: np.ndarray

    def __len__(self):
        return self.segments.shape[0]

    def descriptor(self, row: int) -> PageDescriptor:
        geometry = [PairGeometry(float(self.distance[row, col]),
                                 float(self.bearing[row, col]))
                    for col in range(3)]
        return PageDescriptor(*geometry, s_t=str(self.target_los[row]),
                              s_r=str(self.reference_los[row]))

    def take(self, rows) -> PageBatch:
        """A batch with the pages reordered or subset by ``rows``."""
        rows = np.asarray(rows, dtype=np.intp)
        return dataclasses.replace(
            self, segments=self.segments[rows],
            displacement=self.displacement[rows], rss=self.rss[rows],
            distance=self.distance[rows], bearing=self.bearing[rows],
            target_los=self.target_los[rows],
            reference_los=self.reference_los[rows],
            reference_ids=self.reference_ids[rows])


def build_pages(targets, target_los, scaffold: ReferenceScaffold,
                tx_position, k_ref: int,
                standardize: Optional[Callable] = None) -> PageBatch:
    """
    Pages of the ``k_ref`` references nearest to each target.

    Parameters
    ----------
    targets : array of shape (n, 2)
    target_los : array of str
    scaffold : ReferenceScaffold
    tx_position : Point2
    k_ref : int
    standardize : callable, optional
        Applied to the reference RSS before it reaches the encoder.
    """
    if len(scaffold) == 0:
        raise InvalidArgument('Scaffold is empty')
    targets = np.asarray(targets, dtype=float).reshape(-1, 2)
    target_los = np.asarray(target_los).astype(str).reshape(-1)
    tx = np.asarray(tx_position, dtype=float).reshape(2)
    ids = scaffold.index.knn_batch(targets, k_ref)
    per_target = ids.shape[1]
    segments = np.repeat(np.arange(targets.shape[0]), per_target)
    flat = ids.reshape(-1)
    target_pts = targets[segments]
    ref_pts = scaffold.points[flat]
    tx_pts = np.broadcast_to(tx, ref_pts.shape)
    distance = np.empty((flat.size, 3))
    bearing = np.empty((flat.size, 3))
    for column, (u, v) in enumerate(((target_pts, ref_pts),
                                     (ref_pts, tx_pts),
                                     (target_pts, tx_pts))):
        distance[:, column], bearing[:, column] = pair_geometry_many(u, v)
    rss = scaffold.rss[flat]
    return PageBatch(
        segments=segments, n_targets=targets.shape[0],
        displacement=ref_pts - tx, rss=standardize(rss) if standardize else rss,
        distance=distance, bearing=bearing,
        target_los=target_los[segments], reference_los=scaffold.los[flat],
        tx_position=tx, reference_ids=flat)


@dataclasses.dataclass
class StageResult:
    """Embedding node of a stage with its attention weights."""
    z: Node
    attention: np.ndarray


def local_stage(tape: Tape, params: ModelParams, config: EncoderConfig,
                pages: PageBatch) -> StageResult:
    """
    Pair-conditioned attention over reference pages.

    ``z_local = tanh(W_b h_b + sum_r alpha_r W_m u_r)`` where ``u_r`` joins
    the reference embedding with the page edge embedding and ``alpha`` is
    the per-target softmax of ``a^T leaky_relu(W_l u_r)``.
    """
    if len(pages) == 0:
        raise InvalidArgument('local_stage needs at least one page')
    h_r = f_ref(tape, params, config, pages.displacement, pages.rss)
    g = f_edge_local(tape, params, config, pages.distance, pages.bearing,
                     pages.target_los, pages.reference_los)
    u = tape.concat([h_r, g])
    hidden = tape.leaky_relu(linear(tape, params, 'hgat.local.score', u,
                                    bias=False))
    scores = tape.matmul(hidden, tape.param(params, 'hgat.local.attn'))
    alpha = tape.segment_softmax(scores, pages.segments, pages.n_targets)
    messages = linear(tape, params, 'hgat.local.message', u, bias=False)
    pooled = tape.segment_sum(messages, alpha, pages.segments,
                              pages.n_targets)
    h_b = f_tx(tape, params, config, pages.tx_position)
    center = linear(tape, params, 'hgat.local.center', h_b, bias=False)
    z = tape.tanh(tape.add(pooled, center))
    return StageResult(z, alpha.value[:, 0].copy())


@dataclasses.dataclass
class EdgeBatch:
    """
    Global edges: row ``i`` links target ``segments[i]`` to neighbor row
    ``neighbors[i]`` of the embedding table.
    """
    segments: np.ndarray
    neighbors: np.ndarray
    distance: np.ndarray
    bearing: np.ndarray
    n_targets: int

    def __len__(self):
        return self.segments.shape[0]


def global_edges(positions, k_g: int, targets=None,
                 target_ids=None) -> EdgeBatch:
    """
    Edges from each target to its ``k_g`` nearest other targets.

    Parameters
    ----------
    positions : array of shape (m, 2)
        The same-site target set ``T_b`` whose members can be neighbors.
    k_g : int
    targets : array of shape (n, 2), optional
        Centers; ``positions`` themselves when None.
    target_ids : array of int, optional
        Row of each center inside ``positions``, excluded from its own
        neighborhood; ``arange(m)`` when ``targets`` is None.
    """
    positions = np.asarray(positions, dtype=float).reshape(-1, 2)
    if targets is None:
        targets = positions
        target_ids = np.arange(positions.shape[0])
    targets = np.asarray(targets, dtype=float).reshape(-1, 2)
    segments, neighbors = [], []
    if positions.shape[0] > 0:
        index = build_index(positions)
        for row, center in enumerate(targets):
            skip = None if target_ids is None else int(target_ids[row])
            found = index.knn(center, k_g, exclude=skip)
            segments.extend([row] * len(found))
            neighbors.extend(found)
    segments = np.asarray(segments, dtype=np.intp)
    neighbors = np.asarray(neighbors, dtype=np.intp)
    distance, bearing = pair_geometry_many(targets[segments],
                                           positions[neighbors])
    return EdgeBatch(segments, neighbors, distance, bearing,
                     targets.shape[0])


def global_stage(tape: Tape, params: ModelParams, config: EncoderConfig,
                 centers: Node, table: Node, edges: EdgeBatch) -> StageResult:
    """
    Same-site refinement.

    Scores see the center, the neighbor and the edge; messages see only the
    neighbor and the edge. ``z_global = sum_j beta_j m_j`` with no self term,
    so a target without neighbors gets the zero vector.

    Parameters
    ----------
    centers : Node
        ``(n, d)`` local embeddings of the targets being encoded.
    table : Node
        Local embeddings that ``edges.neighbors`` index into.
    edges : EdgeBatch
    """
    g = f_edge_global(tape, params, config, edges.distance, edges.bearing)
    neighbor = tape.take_rows(table, edges.neighbors)
    center = tape.take_rows(centers, edges.segments)
    u = tape.concat([center, neighbor, g])
    hidden = tape.leaky_relu(linear(tape, params, 'hgat.global.score', u,
                                    bias=False))
    scores = tape.matmul(hidden, tape.param(params, 'hgat.global.attn'))
    beta = tape.segment_softmax(scores, edges.segments, edges.n_targets)
    messages = linear(tape, params, 'hgat.global.message',
                      tape.concat([neighbor, g]), bias=False)
    z = tape.segment_sum(messages, beta, edges.segments, edges.n_targets)
    return StageResult(z, beta.value[:, 0].copy())


@dataclasses.dataclass
class EncoderOutput:
    """Local and global embeddings with their concatenation ``s``."""
    z_local: np.ndarray
    z_global: np.ndarray
    s: np.ndarray


def encode_pair(params: ModelParams, config: EncoderConfig, target,
                target_los: str, scaffold: ReferenceScaffold, tx_position,
                neighbors: list[tuple[np.ndarray, tuple[float, float]]],
                k_ref: int = 16,
                standardize: Optional[Callable] = None) -> EncoderOutput:
    """
    Encode one (target, site) pair given its neighbors' local embeddings.

    Parameters
    ----------
    neighbors : list of (z_local, (x, y))
        Embedding and location of each global neighbor.
    """
    tape = Tape()
    pages = build_pages([target], [target_los], scaffold, tx_position, k_ref,
                        standardize)
    local = local_stage(tape, params, config, pages)
    if neighbors:
        table = tape.leaf(np.vstack([np.asarray(z, dtype=float).reshape(1, -1)
                                     for z, _ in neighbors]))
        spots = np.asarray([loc for _, loc in neighbors], dtype=float)
    else:
        table = tape.leaf(np.zeros((0, local.z.shape[1])))
        spots = np.zeros((0, 2))
    edges = global_edges(spots, len(neighbors) or 1,
                         targets=np.asarray(target, dtype=float).reshape(1, 2))
    glob = global_stage(tape, params, config, local.z, table, edges)
    s = np.concatenate([local.z.value, glob.z.value], axis=1)
    return EncoderOutput(local.z.value[0].copy(), glob.z.value[0].copy(), s[0])


def head_direct(tape: Tape, params: ModelParams, s: Node) -> Node:
    """Standardized RSS estimate from the state ``s``."""
    hidden = tape.tanh(linear(tape, params, 'head.direct.hidden', s))
    return linear(tape, params, 'head.direct.out', hidden)


def head_residual(tape: Tape, params: ModelParams, s: Node,
                  prior) -> Node:
    """Standardized residual estimate from ``s`` and the standardized prior."""
    prior = tape.leaf(np.asarray(prior, dtype=float).reshape(-1, 1))
    hidden = tape.tanh(linear(tape, params, 'head.residual.hidden',
                              tape.concat([s, prior])))
    return linear(tape, params, 'head.residual.out', hidden)


def hgat_shapes(config: HgatConfig,
                encoder: EncoderConfig) -> dict[str, tuple[int, int]]:
    """Name and shape of every stage and head parameter."""
    d = config.d
    page = encoder.d_model + encoder.edge_width
    shapes = {}
    shapes.update(dense_shapes('hgat.local.score', page, d, bias=False))
    shapes['hgat.local.attn'] = (d, 1)
    shapes.update(dense_shapes('hgat.local.message', page, d, bias=False))
    shapes.update(dense_shapes('hgat.local.center', encoder.d_model, d,
                               bias=False))
    shapes.update(dense_shapes('hgat.global.score', 2 * d + encoder.edge_width,
                               d, bias=False))
    shapes['hgat.global.attn'] = (d, 1)
    shapes.update(dense_shapes('hgat.global.message', d + encoder.edge_width,
                               d, bias=False))
    shapes.update(dense_shapes('head.direct.hidden', 2 * d,
                               config.head_hidden))
    shapes.update(dense_shapes('head.direct.out', config.head_hidden, 1))
    shapes.update(dense_shapes('head.residual.hidden', 2 * d + 1,
                               config.head_hidden))
    shapes.update(dense_shapes('head.residual.out', config.head_hidden, 1))
    return shapes


def init_hgat_params(config: HgatConfig, encoder: EncoderConfig, seed: int,
                     params: Optional[ModelParams] = None) -> ModelParams:
    """
    Seeded stage and head parameters; the residual head's output layer
    starts at zero so an untrained residual model returns the prior.
    """
    params = params if params is not None else ModelParams()
    arrays = init_arrays(hgat_shapes(config, encoder), seed,
                         zero=('head.residual.out.W',))
    for name, value in arrays.items():
        params[name] = value
    return params


def encoder_cost(k_ref: int, k_g: int, d: int, cached: bool = True) -> int:
    """
    Dominant per-query multiply count of the encoder.

    With cached neighbor embeddings a query pays for its own pages and its
    global edges, ``(k_ref + k_g) d^2``; without the cache every neighbor's
    local stage is recomputed, adding ``k_g k_ref d^2``.
    """
    cost = (k_ref + k_g) * d * d
    if not cached:
        cost += k_g * k_ref * d * d
    return cost
