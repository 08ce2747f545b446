"""
Training and inference regimes.

``direct``
    The encoder and the direct head estimate the RSS.
``residual``
    The kriging prior plus a learned residual, ``y = prior + e_hat``.
``gated``
    The residual attenuated by a post-hoc gate, ``y = prior + gamma e_hat``
    with ``gamma`` in ``[0, 1]``.

The baselines ``prior`` (ordinary kriging), ``uk`` and ``idw`` are available
wherever a regime name is accepted.

All learned quantities live in standardized units: ``(y - mean) / std`` for
RSS values and ``e / std`` for residuals.
"""
from __future__ import annotations

import dataclasses
import logging
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import pandas as pd

from .datahub import Dataset
from .encoders import (EncoderConfig, dense_shapes, init_arrays,
                       init_encoder_params, linear)
from .hgat import (HgatConfig, ReferenceScaffold, build_pages,
                   build_scaffold, global_edges, global_stage, head_direct,
                   head_residual, init_hgat_params, local_stage)
from .kriging_prior import (KrigingConfig, PointData, fit_site_variogram,
                            idw_predict, uk_predict)
from .numcore import (AdamState, ModelParams, Node, Tape, adam_step, grad,
                      load_checkpoint, save_checkpoint)
from .utils import InvalidArgument, InvalidState, NotFound

logger = logging.getLogger(__name__)

LEARNED = ('direct', 'residual', 'gated')
BASELINES = ('prior', 'uk', 'idw')
REGIMES = LEARNED + BASELINES
GATE_COLUMNS = ['site', 'target_id', 'prior', 'ehat', 'abs_ehat', 'grad_mag',
                'local_std', 'label', 'gamma_star', 'gamma_fit']
METRIC_COLUMNS = ['site', 'split', 'regime', 'rmse_db', 'mae_db', 'n']
GRAD_SCALE = 1.0
STD_SCALE = 1.0
_CHUNK = 512


@dataclasses.dataclass(frozen=True)
class Standardizer:
    """Affine map of dBm values to zero mean and unit spread."""
    mean: float
    std: float

    def __post_init__(self):
        if not self.std > 0:
            raise InvalidArgument(f'Standardizer std must be positive, got '
                                  f'{self.std}')

    @classmethod
    def from_observations(cls, observations: pd.DataFrame,
                          sites) -> Standardizer:
        """Fit on the observations of ``sites`` only."""
        values = observations.loc[observations['site'].isin(list(sites)),
                                  'rss_dbm'].to_numpy(float)
        if values.size == 0:
            raise InvalidArgument('No observations to standardize with')
        std = float(values.std())
        if std == 0.0:
            logger.warning('Observation RSS is constant, using unit std')
            std = 1.0
        return cls(float(values.mean()), std)

    def standardize(self, value):
        return (np.asarray(value, dtype=float) - self.mean) / self.std

    def destandardize(self, value):
        return np.asarray(value, dtype=float) * self.std + self.mean


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    """
    Attributes
    ----------
    epochs, batch : int
    loss : str
        Only ``huber`` is implemented.
    delta : float
        Huber threshold on standardized targets.
    optimizer : str
        Only ``adam`` is implemented.
    lr, beta1, beta2, eps : float
        Adam settings.
    seed : int
        Drives initialization, scaffolds and shuffling.
    val_fraction : float
        Share of the training pairs held back to select the best epoch;
        0 trains on all of them and returns the last epoch.
    """
    epochs: int = 20
    batch: int = 128
    loss: str = 'huber'
    delta: float = 1.0
    optimizer: str = 'adam'
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    val_fraction: float = 0.0

    def __post_init__(self):
        if self.epochs < 1 or self.batch < 1:
            raise InvalidArgument('epochs and batch must be positive')
        if self.loss != 'huber' or self.optimizer != 'adam':
            raise InvalidArgument(f'Unsupported loss/optimizer '
                                  f'{self.loss}/{self.optimizer}')
        if not 0.0 <= self.val_fraction < 1.0:
            raise InvalidArgument('val_fraction must be in [0, 1)')


@dataclasses.dataclass(frozen=True)
class GateConfig:
    """
    Attributes
    ----------
    eps_e : float
        Residuals with ``|e_hat|`` at or below this (standardized) get
        ``gamma* = 0``.
    delta_gate : float
        Huber threshold of the gate fit.
    hidden : int
    epochs : int
        Full-batch Adam steps.
    lr : float
    seed : int
    loss : str
        ``huber`` for the weighted Huber fit on ``gamma*``, or
        ``recomposition`` for the mean squared recomposition error.
    """
    eps_e: float = 1e-3
    delta_gate: float = 0.25
    hidden: int = 32
    epochs: int = 300
    lr: float = 1e-2
    seed: int = 0
    loss: str = 'huber'

    def __post_init__(self):
        if not self.eps_e > 0:
            raise InvalidArgument('eps_e must be positive')
        if self.loss not in ('huber', 'recomposition'):
            raise InvalidArgument(f'Unknown gate loss {self.loss!r}')


@dataclasses.dataclass
class RegimeModel:
    """
    A trained encoder with one readout head and everything needed to run it.

    Scaffolds are rebuilt from the dataset with ``seed``; they are not part
    of the checkpoint.
    """
    regime: str
    params: ModelParams
    encoder: EncoderConfig
    hgat: HgatConfig
    standardizer: Standardizer
    transmitters: dict[int, tuple[float, float]]
    seed: int = 0
    scaffolds: dict[int, ReferenceScaffold] = dataclasses.field(
        default_factory=dict, repr=False)

    def meta(self) -> dict:
        return {
            'regime': self.regime,
            'encoder': dataclasses.asdict(self.encoder),
            'hgat': dataclasses.asdict(self.hgat),
            'standardizer': dataclasses.asdict(self.standardizer),
            'transmitters': {str(site): list(pos)
                             for site, pos in sorted(self.transmitters.items())},
            'seed': self.seed,
        }

    def attach(self, dataset: Dataset) -> RegimeModel:
        """Build the scaffold of every site of ``dataset``."""
        self.scaffolds = build_scaffolds(dataset, self.hgat, self.seed)
        return self

    def scaffold(self, site: int) -> ReferenceScaffold:
        try:
            return self.scaffolds[site]
        except KeyError:
            raise NotFound(f'No scaffold for site {site}') from None

    def transmitter(self, site: int) -> tuple[float, float]:
        try:
            return self.transmitters[site]
        except KeyError:
            raise NotFound(f'No transmitter position for site {site}') from None


@dataclasses.dataclass
class GateModel:
    params: ModelParams
    config: GateConfig

    def gamma(self, features: np.ndarray) -> np.ndarray:
        tape = Tape()
        return gate_forward(tape, self.params, features).value[:, 0]


def save_model(path, model: RegimeModel) -> Path:
    return save_checkpoint(path, model.params, model.regime, model.meta())


def load_model(path, kind: Optional[str] = None) -> RegimeModel:
    """Load a regime checkpoint, optionally insisting on its regime."""
    params, found, meta = load_checkpoint(path)
    if found not in ('direct', 'residual'):
        raise InvalidState(f'{path} holds a {found!r} checkpoint, not a '
                           f'trained regime model')
    if kind is not None and found != kind:
        raise InvalidState(f'{path} holds a {found!r} model, {kind!r} needed')
    return RegimeModel(
        regime=found, params=params,
        encoder=EncoderConfig(**meta['encoder']),
        hgat=HgatConfig(**meta['hgat']),
        standardizer=Standardizer(**meta['standardizer']),
        transmitters={int(site): tuple(pos)
                      for site, pos in meta['transmitters'].items()},
        seed=int(meta.get('seed', 0)))


def save_gate(path, gate: GateModel) -> Path:
    return save_checkpoint(path, gate.params, 'gate',
                           {'gate': dataclasses.asdict(gate.config)})


def load_gate(path) -> GateModel:
    params, kind, meta = load_checkpoint(path)
    if kind != 'gate':
        raise InvalidState(f'{path} holds a {kind!r} checkpoint, not a gate')
    return GateModel(params, GateConfig(**meta['gate']))


def build_scaffolds(dataset: Dataset, config: HgatConfig,
                    seed: int) -> dict[int, ReferenceScaffold]:
    return {site: build_scaffold(dataset.observations_for(site), config.n_ref,
                                 seed)
            for site in dataset.sites}


def new_model(regime: str, dataset: Dataset,
              transmitters: dict[int, tuple[float, float]],
              encoder: EncoderConfig = EncoderConfig(),
              hgat: HgatConfig = HgatConfig(), seed: int = 0) -> RegimeModel:
    """Freshly initialized model for ``direct`` or ``residual`` training."""
    if regime not in ('direct', 'residual'):
        raise InvalidArgument(f'Cannot train regime {regime!r}')
    seen = [site for site in dataset.seen_sites
            if not dataset.queries_for(site, 'train').empty]
    if not seen:
        raise InvalidArgument('No seen site has training queries')
    params = init_encoder_params(encoder, seed)
    init_hgat_params(hgat, encoder, seed, params)
    drop = 'head.residual.' if regime == 'direct' else 'head.direct.'
    params = ModelParams({name: value for name, value in params.items()
                          if not name.startswith(drop)})
    model = RegimeModel(
        regime=regime, params=params, encoder=encoder, hgat=hgat,
        standardizer=Standardizer.from_observations(dataset.observations,
                                                    dataset.seen_sites),
        transmitters={int(site): tuple(map(float, pos))
                      for site, pos in transmitters.items()},
        seed=seed)
    return model.attach(dataset)


@dataclasses.dataclass
class PairSet:
    """
    Columnar (target, site) pairs.

    ``prior`` and the descriptors are NaN when no prior table was joined.
    """
    site: np.ndarray
    target_id: np.ndarray
    xy: np.ndarray
    los: np.ndarray
    label: np.ndarray
    prior: np.ndarray
    grad_mag: np.ndarray
    local_std: np.ndarray

    def __len__(self):
        return self.site.shape[0]

    @classmethod
    def from_queries(cls, queries: pd.DataFrame,
                     prior_table: Optional[pd.DataFrame] = None,
                     require_prior: bool = False) -> PairSet:
        queries = queries.sort_values(['site', 'target_id'], kind='mergesort')
        n = len(queries)
        prior = np.full(n, np.nan)
        grad_mag = np.full(n, np.nan)
        local_std = np.full(n, np.nan)
        if prior_table is not None:
            joined = queries[['site', 'target_id']].merge(
                prior_table[['site', 'target_id', 'prior_dbm', 'grad_mag',
                             'local_std']],
                on=['site', 'target_id'], how='left')
            prior = joined['prior_dbm'].to_numpy(float)
            grad_mag = joined['grad_mag'].to_numpy(float)
            local_std = joined['local_std'].to_numpy(float)
        if require_prior and np.any(np.isnan(prior)):
            row = int(np.flatnonzero(np.isnan(prior))[0])
            raise InvalidArgument(
                f'Prior table has no row for site '
                f'{int(queries["site"].iloc[row])} target '
                f'{int(queries["target_id"].iloc[row])}')
        return cls(site=queries['site'].to_numpy(int),
                   target_id=queries['target_id'].to_numpy(int),
                   xy=queries[['x', 'y']].to_numpy(float),
                   los=queries['los'].to_numpy().astype(str),
                   label=queries['rss_dbm'].to_numpy(float),
                   prior=prior, grad_mag=grad_mag, local_std=local_std)

    def take(self, rows) -> PairSet:
        rows = np.asarray(rows, dtype=np.intp)
        return PairSet(*(getattr(self, field.name)[rows]
                         for field in dataclasses.fields(self)))

    @property
    def sites(self) -> list[int]:
        return sorted(int(site) for site in np.unique(self.site))


BatchHook = Callable[[int, np.ndarray, np.ndarray, np.ndarray], None]


def _head(tape: Tape, model: RegimeModel, s: Node, pairs: PairSet,
          rows: np.ndarray) -> Node:
    if model.regime == 'direct':
        return head_direct(tape, model.params, s)
    return head_residual(tape, model.params, s,
                         model.standardizer.standardize(pairs.prior[rows]))


def _targets(model: RegimeModel, pairs: PairSet, rows: np.ndarray):
    if model.regime == 'direct':
        return model.standardizer.standardize(pairs.label[rows])
    return (pairs.label[rows] - pairs.prior[rows]) / model.standardizer.std


def batch_forward(tape: Tape, model: RegimeModel, pairs: PairSet,
                  rows: np.ndarray,
                  on_batch: Optional[BatchHook] = None
                  ) -> list[tuple[np.ndarray, Node]]:
    """
    Head outputs of the pairs ``rows``, grouped by site.

    Each target's global neighbors are its ``k_g`` nearest same-site targets
    among ``rows``. ``on_batch(site, group, centers, neighbors)`` receives
    the pair rows of every group and edge.

    Returns
    -------
    list of (rows, Node)
        Pair rows and the ``(len(rows), 1)`` head output, one per site.
    """
    rows = np.asarray(rows, dtype=np.intp)
    outputs = []
    for site in sorted(int(site) for site in np.unique(pairs.site[rows])):
        group = rows[pairs.site[rows] == site]
        points = pairs.xy[group]
        pages = build_pages(points, pairs.los[group], model.scaffold(site),
                            model.transmitter(site), model.hgat.k_ref,
                            model.standardizer.standardize)
        local = local_stage(tape, model.params, model.encoder, pages)
        edges = global_edges(points, model.hgat.k_g)
        if on_batch is not None:
            on_batch(site, group, group[edges.segments],
                     group[edges.neighbors])
        glob = global_stage(tape, model.params, model.encoder, local.z,
                            local.z, edges)
        s = tape.concat([local.z, glob.z])
        outputs.append((group, _head(tape, model, s, pairs, group)))
    return outputs


def batch_loss(tape: Tape, model: RegimeModel, pairs: PairSet,
               rows: np.ndarray, delta: float = 1.0,
               on_batch: Optional[BatchHook] = None) -> Node:
    """Mean Huber loss of the batch ``rows`` on standardized targets."""
    total = None
    for group, out in batch_forward(tape, model, pairs, rows, on_batch):
        loss = tape.sum(tape.huber(out, _targets(model, pairs, group), delta))
        total = loss if total is None else tape.add(total, loss)
    return tape.scale(total, 1.0 / len(rows))


def _trainable(model: RegimeModel) -> list[str]:
    return model.params.names('enc.') + model.params.names('hgat.') \
        + model.params.names(f'head.{model.regime}.')


def _epoch_loss(model, pairs, order, config) -> float:
    total = 0.0
    for start in range(0, len(order), config.batch):
        rows = order[start:start + config.batch]
        total += batch_loss(Tape(), model, pairs, rows,
                            config.delta).value[0, 0] * len(rows)
    return total / len(order)


def fit(model: RegimeModel, pairs: PairSet, config: TrainConfig,
        on_batch: Optional[BatchHook] = None
        ) -> tuple[RegimeModel, pd.DataFrame]:
    """
    Seeded mini-batch Adam on the Huber loss of ``pairs``.

    Returns
    -------
    model : RegimeModel
        Trained in place.
    trace : pd.DataFrame
        ``epoch, loss`` with the mean batch loss of each epoch, plus
        ``val_loss`` when validation is enabled.
    """
    if len(pairs) == 0:
        raise InvalidArgument('No training pairs')
    rng = np.random.default_rng([config.seed, 3])
    train_rows = np.arange(len(pairs))
    val_rows = np.zeros(0, dtype=np.intp)
    if config.val_fraction > 0:
        shuffled = rng.permutation(len(pairs))
        n_val = max(1, int(round(config.val_fraction * len(pairs))))
        val_rows, train_rows = np.sort(shuffled[:n_val]), np.sort(shuffled[n_val:])
        if train_rows.size == 0:
            raise InvalidArgument('val_fraction leaves no training pairs')
    names = _trainable(model)
    state = AdamState.zeros(model.params, names)
    records = []
    best = (np.inf, None)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(train_rows)
        total = 0.0
        for start in range(0, order.size, config.batch):
            rows = order[start:start + config.batch]
            tape = Tape()
            loss = batch_loss(tape, model, pairs, rows, config.delta, on_batch)
            grads = grad(tape, loss)
            adam_step(model.params, {name: grads[name] for name in names
                                     if name in grads},
                      state, config.lr, config.beta1, config.beta2, config.eps)
            total += loss.value[0, 0] * rows.size
        record = {'epoch': epoch, 'loss': total / order.size}
        if val_rows.size:
            record['val_loss'] = _epoch_loss(model, pairs, val_rows, config)
            if record['val_loss'] < best[0]:
                best = (record['val_loss'], model.params.copy())
        logger.info('Epoch %d/%d: %s', epoch, config.epochs, record)
        records.append(record)
    if best[1] is not None:
        model.params = best[1]
    return model, pd.DataFrame.from_records(records)


def train_direct(dataset: Dataset,
                 transmitters: dict[int, tuple[float, float]],
                 config: TrainConfig = TrainConfig(),
                 encoder: EncoderConfig = EncoderConfig(),
                 hgat: HgatConfig = HgatConfig(),
                 scaffolds: Optional[dict[int, ReferenceScaffold]] = None,
                 on_batch: Optional[BatchHook] = None
                 ) -> tuple[RegimeModel, pd.DataFrame]:
    """Train the encoder and the direct head on the seen-site train pairs."""
    model = new_model('direct', dataset, transmitters, encoder, hgat,
                      config.seed)
    if scaffolds is not None:
        model.scaffolds = dict(scaffolds)
    pairs = PairSet.from_queries(_train_queries(dataset))
    return fit(model, pairs, config, on_batch)


def train_residual(dataset: Dataset, prior_table: pd.DataFrame,
                   transmitters: dict[int, tuple[float, float]],
                   config: TrainConfig = TrainConfig(),
                   encoder: EncoderConfig = EncoderConfig(),
                   hgat: HgatConfig = HgatConfig(),
                   scaffolds: Optional[dict[int, ReferenceScaffold]] = None,
                   on_batch: Optional[BatchHook] = None
                   ) -> tuple[RegimeModel, pd.DataFrame]:
    """Train the encoder and the residual head against ``y - prior``."""
    pairs = PairSet.from_queries(_train_queries(dataset), prior_table,
                                 require_prior=True)
    model = new_model('residual', dataset, transmitters, encoder, hgat,
                      config.seed)
    if scaffolds is not None:
        model.scaffolds = dict(scaffolds)
    return fit(model, pairs, config, on_batch)


def _train_queries(dataset: Dataset) -> pd.DataFrame:
    queries = dataset.queries_for(role='train')
    queries = queries[queries['site'].isin(dataset.seen_sites)]
    if queries.empty:
        raise InvalidArgument('The dataset has no training queries')
    return queries


class LocalEmbeddingCache:
    """
    Local embeddings per ``(site, target_id)``, computed once.

    Attributes
    ----------
    evaluations : int
        Number of targets run through the local stage.
    """
    def __init__(self, model: RegimeModel):
        self.model = model
        self.evaluations = 0
        self._store: dict[tuple[int, int], np.ndarray] = {}

    def __len__(self):
        return len(self._store)

    def __contains__(self, key) -> bool:
        return key in self._store

    def get(self, site: int, target_ids, positions, los) -> np.ndarray:
        """``(n, d)`` embeddings, running the local stage on misses only."""
        target_ids = np.asarray(target_ids, dtype=int).reshape(-1)
        positions = np.asarray(positions, dtype=float).reshape(-1, 2)
        los = np.asarray(los).astype(str).reshape(-1)
        missing = [row for row, tid in enumerate(target_ids)
                   if (site, int(tid)) not in self._store]
        for start in range(0, len(missing), _CHUNK):
            chunk = np.asarray(missing[start:start + _CHUNK], dtype=np.intp)
            z = local_embeddings(self.model, site, positions[chunk], los[chunk])
            self.evaluations += chunk.size
            for row, value in zip(chunk, z):
                value.setflags(write=False)
                self._store[(site, int(target_ids[row]))] = value
        if target_ids.size == 0:
            return np.zeros((0, self.model.hgat.d))
        return np.vstack([self._store[(site, int(tid))] for tid in target_ids])


def local_embeddings(model: RegimeModel, site: int, positions,
                     los) -> np.ndarray:
    """Uncached local stage of targets of ``site``."""
    tape = Tape()
    pages = build_pages(positions, los, model.scaffold(site),
                        model.transmitter(site), model.hgat.k_ref,
                        model.standardizer.standardize)
    return local_stage(tape, model.params, model.encoder, pages).z.value


def cache_local_embeddings(model: RegimeModel, site: int, target_ids,
                           positions, los,
                           cache: Optional[LocalEmbeddingCache] = None
                           ) -> LocalEmbeddingCache:
    """Fill ``cache`` (a new one when None) for the given targets."""
    cache = cache if cache is not None else LocalEmbeddingCache(model)
    cache.get(site, target_ids, positions, los)
    return cache


def encode_queries(tape: Tape, model: RegimeModel, site: int, positions, los,
                   table: np.ndarray, table_positions,
                   table_rows: Optional[np.ndarray] = None) -> Node:
    """
    States ``s`` of queries whose global neighbors come from a table of
    cached local embeddings.

    Parameters
    ----------
    positions, los : arrays
        The queries.
    table, table_positions : arrays
        Cached embeddings of the target set and their locations.
    table_rows : array of int, optional
        Row of each query inside the table, excluded from its neighbors.
    """
    pages = build_pages(positions, los, model.scaffold(site),
                        model.transmitter(site), model.hgat.k_ref,
                        model.standardizer.standardize)
    local = local_stage(tape, model.params, model.encoder, pages)
    edges = global_edges(table_positions, model.hgat.k_g,
                         targets=np.asarray(positions, dtype=float),
                         target_ids=table_rows)
    glob = global_stage(tape, model.params, model.encoder, local.z,
                        tape.leaf(table), edges)
    return tape.concat([local.z, glob.z])


def _states(model: RegimeModel, pairs: PairSet, rows: np.ndarray,
            cache: LocalEmbeddingCache) -> np.ndarray:
    """States of the pairs ``rows`` of one site over the target set ``rows``."""
    site = int(pairs.site[rows[0]])
    z_local = cache.get(site, pairs.target_id[rows], pairs.xy[rows],
                        pairs.los[rows])
    edges = global_edges(pairs.xy[rows], model.hgat.k_g)
    tape = Tape()
    table = tape.leaf(z_local)
    glob = global_stage(tape, model.params, model.encoder, table, table,
                        edges)
    return np.concatenate([z_local, glob.z.value], axis=1)


def head_outputs(model: RegimeModel, pairs: PairSet,
                 cache: Optional[LocalEmbeddingCache] = None) -> np.ndarray:
    """
    Standardized head output of every pair; each site's pairs form its
    target set.
    """
    result = np.empty(len(pairs))
    for site in pairs.sites:
        rows = np.flatnonzero(pairs.site == site)
        cache = cache_local_embeddings(model, site, pairs.target_id[rows],
                                       pairs.xy[rows], pairs.los[rows], cache)
        states = _states(model, pairs, rows, cache)
        for start in range(0, rows.size, _CHUNK):
            chunk = rows[start:start + _CHUNK]
            tape = Tape()
            s = tape.leaf(states[start:start + _CHUNK])
            result[chunk] = _head(tape, model, s, pairs, chunk).value[:, 0]
    return result


def oracle_gamma(e: float, ehat: float, eps_e: float = 1e-3) -> float:
    """
    Attenuation in ``[0, 1]`` minimizing ``(prior + gamma e_hat - y)^2``.
    """
    if abs(ehat) <= eps_e:
        return 0.0
    return float(min(max(e / ehat, 0.0), 1.0))


def oracle_gamma_many(e, ehat, eps_e: float = 1e-3) -> np.ndarray:
    e = np.asarray(e, dtype=float)
    ehat = np.asarray(ehat, dtype=float)
    small = np.abs(ehat) <= eps_e
    ratio = np.divide(e, ehat, out=np.zeros_like(e), where=~small)
    return np.where(small, 0.0, np.clip(ratio, 0.0, 1.0))


def gate_features(prior, ehat, grad_mag, local_std) -> np.ndarray:
    """
    Gate inputs ``[prior, e_hat, |e_hat|, grad_mag, local_std]`` row-wise.

    ``prior`` and ``ehat`` are standardized; the descriptors are in dB/m and
    dB divided by fixed unit scales.
    """
    ehat = np.asarray(ehat, dtype=float).reshape(-1)
    return np.column_stack([np.asarray(prior, dtype=float).reshape(-1), ehat,
                            np.abs(ehat),
                            np.asarray(grad_mag, dtype=float).reshape(-1)
                            / GRAD_SCALE,
                            np.asarray(local_std, dtype=float).reshape(-1)
                            / STD_SCALE])


def gate_forward(tape: Tape, params: ModelParams, features) -> Node:
    hidden = tape.tanh(linear(tape, params, 'gate.hidden',
                              tape.leaf(features)))
    return tape.sigmoid(linear(tape, params, 'gate.out', hidden))


def build_gate_table(model: RegimeModel, dataset: Dataset,
                     prior_table: pd.DataFrame,
                     config: GateConfig = GateConfig()) -> pd.DataFrame:
    """
    Gate rows of every supervised training pair.

    ``e_hat`` comes from the frozen residual model with each site's training
    targets as its target set.
    """
    if model.regime != 'residual':
        raise InvalidState('The gate table needs a residual model')
    pairs = PairSet.from_queries(_train_queries(dataset), prior_table,
                                 require_prior=True)
    ehat_std = head_outputs(model, pairs)
    std = model.standardizer.std
    e_std = (pairs.label - pairs.prior) / std
    table = pd.DataFrame({
        'site': pairs.site, 'target_id': pairs.target_id,
        'prior': pairs.prior, 'ehat': ehat_std * std,
        'abs_ehat': np.abs(ehat_std) * std,
        'grad_mag': pairs.grad_mag, 'local_std': pairs.local_std,
        'label': pairs.label,
        'gamma_star': oracle_gamma_many(e_std, ehat_std, config.eps_e),
        'gamma_fit': np.nan})
    small = int((np.abs(ehat_std) <= config.eps_e).sum())
    if small:
        logger.warning('%d gate rows have |e_hat| under eps_e and target 0',
                       small)
    return table


def _gate_inputs(table: pd.DataFrame, standardizer: Standardizer):
    prior = standardizer.standardize(table['prior'].to_numpy(float))
    ehat = table['ehat'].to_numpy(float) / standardizer.std
    e = (table['label'].to_numpy(float)
         - table['prior'].to_numpy(float)) / standardizer.std
    features = gate_features(prior, ehat, table['grad_mag'].to_numpy(float),
                             table['local_std'].to_numpy(float))
    return features, ehat, e


def init_gate_params(config: GateConfig) -> ModelParams:
    shapes = {}
    shapes.update(dense_shapes('gate.hidden', 5, config.hidden))
    shapes.update(dense_shapes('gate.out', config.hidden, 1))
    return ModelParams(init_arrays(shapes, config.seed))


def fit_gate(model: RegimeModel, table: pd.DataFrame,
             config: GateConfig = GateConfig()) -> GateModel:
    """
    Fit the gate MLP with the residual model frozen.

    The default objective is the ``e_hat^2``-weighted Huber loss between the
    gate output and ``gamma*``; ``config.loss = 'recomposition'`` minimizes
    the mean squared recomposition error instead. ``table['gamma_fit']`` is
    filled in place.
    """
    if table.empty:
        raise InvalidArgument('Cannot fit a gate on an empty table')
    features, ehat, e = _gate_inputs(table, model.standardizer)
    target = oracle_gamma_many(e, ehat, config.eps_e)
    weight = ehat * ehat
    if weight.sum() > 0:
        weight = weight / weight.sum()
    else:
        weight = np.full_like(weight, 1.0 / weight.size)
    gate = GateModel(init_gate_params(config), config)
    state = AdamState.zeros(gate.params)
    # Every encoder and head array is read-only while the gate trains
    with model.params.frozen(('enc.', 'hgat.', 'head.')):
        for epoch in range(config.epochs):
            tape = Tape()
            gamma = gate_forward(tape, gate.params, features)
            if config.loss == 'huber':
                per_row = tape.huber(gamma, target, config.delta_gate)
                loss = tape.sum(tape.mul(per_row,
                                         tape.leaf(weight.reshape(-1, 1))))
            else:
                miss = tape.sub(tape.mul(gamma,
                                         tape.leaf(ehat.reshape(-1, 1))),
                                tape.leaf(e.reshape(-1, 1)))
                loss = tape.mean(tape.mul(miss, miss))
            adam_step(gate.params, grad(tape, loss), state, lr=config.lr)
            if epoch % 50 == 0:
                logger.debug('Gate epoch %d loss %.6g', epoch,
                             loss.value[0, 0])
    table['gamma_fit'] = gate.gamma(features)
    logger.info('Fitted gate on %d rows', len(table))
    return gate


def save_gate_table(table: pd.DataFrame, path) -> Path:
    path = Path(path)
    table[GATE_COLUMNS].to_csv(path, index=False, float_format='%.6f',
                               lineterminator='\n')
    return path


def predict(regime: str, direct: Optional[float] = None,
            prior: Optional[float] = None, ehat: Optional[float] = None,
            gamma: Optional[float] = None) -> float:
    """
    Compose an estimate in dBm from destandardized parts.

    ``direct`` returns the direct head output, ``residual`` is
    ``prior + ehat`` and ``gated`` is ``prior + gamma * ehat``.
    """
    if regime == 'direct':
        if direct is None:
            raise InvalidState('The direct regime needs a direct model')
        return float(direct)
    if prior is None:
        raise InvalidArgument(f'The {regime} regime needs a prior')
    if regime == 'prior':
        return float(prior)
    if ehat is None:
        raise InvalidState(f'The {regime} regime needs a residual model')
    if regime == 'residual':
        return float(prior + ehat)
    if regime == 'gated':
        if gamma is None:
            raise InvalidState('The gated regime needs a fitted gate')
        return float(prior + gamma * ehat)
    raise InvalidArgument(f'Unknown regime {regime!r}')


def predict_pairs(regime: str, pairs: PairSet,
                  model: Optional[RegimeModel] = None,
                  gate: Optional[GateModel] = None,
                  observations: Optional[pd.DataFrame] = None,
                  kriging: KrigingConfig = KrigingConfig(),
                  cache: Optional[LocalEmbeddingCache] = None) -> np.ndarray:
    """
    Estimates in dBm for every pair under ``regime``.

    Learned regimes use each site's pairs as its target set; ``uk`` and
    ``idw`` need ``observations``.
    """
    if regime not in REGIMES:
        raise InvalidArgument(f'Unknown regime {regime!r}')
    if regime == 'prior':
        return _require_prior(pairs).copy()
    if regime in ('uk', 'idw'):
        if observations is None:
            raise InvalidArgument(f'The {regime} baseline needs observations')
        return _baseline(regime, pairs, observations, kriging)
    if model is None:
        raise InvalidState(f'The {regime} regime needs a trained model')
    if regime == 'direct':
        if model.regime != 'direct':
            raise InvalidState('The direct regime needs a direct model')
        return model.standardizer.destandardize(
            head_outputs(model, pairs, cache))
    if model.regime != 'residual':
        raise InvalidState(f'The {regime} regime needs a residual model')
    prior = _require_prior(pairs)
    ehat_std = head_outputs(model, pairs, cache)
    ehat = ehat_std * model.standardizer.std
    if regime == 'residual':
        return prior + ehat
    if gate is None:
        raise InvalidState('The gated regime needs a fitted gate')
    features = gate_features(model.standardizer.standardize(prior), ehat_std,
                             pairs.grad_mag, pairs.local_std)
    return prior + gate.gamma(features) * ehat


def _require_prior(pairs: PairSet) -> np.ndarray:
    if np.any(np.isnan(pairs.prior)):
        row = int(np.flatnonzero(np.isnan(pairs.prior))[0])
        raise InvalidArgument(f'No prior for site {pairs.site[row]} target '
                              f'{pairs.target_id[row]}')
    return pairs.prior


def _baseline(regime, pairs, observations, kriging) -> np.ndarray:
    result = np.empty(len(pairs))
    for site in pairs.sites:
        rows = np.flatnonzero(pairs.site == site)
        data = PointData.from_frame(observations[observations['site'] == site])
        if regime == 'idw':
            result[rows] = [idw_predict(data, point, kriging.idw_power,
                                        kriging.k) for point in pairs.xy[rows]]
        else:
            variogram = fit_site_variogram(data, kriging)
            result[rows] = [uk_predict(data, variogram, point, kriging.k,
                                       kriging.idw_power).value
                            for point in pairs.xy[rows]]
    return result


def error_metrics(errors) -> tuple[float, float]:
    """RMSE and MAE of ``errors`` in dB."""
    errors = np.asarray(errors, dtype=float).reshape(-1)
    if errors.size == 0:
        raise InvalidArgument('Cannot score an empty pair set')
    return (float(np.sqrt(np.mean(errors * errors))),
            float(np.mean(np.abs(errors))))


def evaluate(pairs: PairSet, predictions, regime: str, split: str,
             seen_sites=()) -> pd.DataFrame:
    """
    Per-site RMSE and MAE plus pooled rows for the seen and held-out sites.

    Returns
    -------
    pd.DataFrame
        :data:`METRIC_COLUMNS`; pooled rows use ``seen`` and ``held_out`` as
        the site label.
    """
    errors = np.asarray(predictions, dtype=float) - pairs.label
    if errors.size == 0:
        raise InvalidArgument('Cannot score an empty pair set')
    seen_sites = set(int(site) for site in seen_sites)
    records = []
    for site in pairs.sites:
        rmse, mae = error_metrics(errors[pairs.site == site])
        records.append((str(site), split, regime, rmse, mae,
                        int((pairs.site == site).sum())))
    for label, members in (('seen', np.isin(pairs.site, list(seen_sites))),
                           ('held_out', ~np.isin(pairs.site,
                                                 list(seen_sites)))):
        if members.any():
            rmse, mae = error_metrics(errors[members])
            records.append((label, split, regime, rmse, mae,
                            int(members.sum())))
    return pd.DataFrame.from_records(records, columns=METRIC_COLUMNS)
