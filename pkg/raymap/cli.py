"""
``raymap`` command line.

Every command is a pure function of its inputs and seed: artifacts are
written with fixed float formats and sorted JSON, and each one gets a
``<stem>.provenance.json`` sidecar naming the command, its configuration hash,
the seed and the package version.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path
from typing import Any, Optional

import numpy as np
import pandas as pd

from . import __version__
from .datahub import (Dataset, Scenario, aggregate_grid, build_dataset,
                      load_dataset, save_dataset)
from .encoders import EncoderConfig, r0_for
from .hgat import HgatConfig
from .kriging_prior import (DEFAULT_STEP_M, KrigingConfig,
                            build_prior_table, load_prior_table,
                            save_prior_table)
from .regimes import (REGIMES, GateConfig, PairSet, TrainConfig,
                      build_gate_table, evaluate, fit_gate, load_gate,
                      load_model, predict_pairs, save_gate, save_gate_table,
                      save_model, train_direct, train_residual)
from .utils import (InvalidArgument, InvalidState, NotFound, apply_overrides,
                    config_hash, exit_code_for, parse_override, read_json,
                    write_json)

logger = logging.getLogger(__name__)

COMMANDS = ('gen', 'prior', 'train', 'gate', 'eval', 'map')
MAP_COLUMNS = ['row', 'col', 'x', 'y', 'truth', 'pred', 'error']


@dataclasses.dataclass(frozen=True)
class DataConfig:
    """Observation and training budgets of ``raymap gen``."""
    obs_fraction: float = 0.05
    train_fraction: float = 0.15


@dataclasses.dataclass
class RunConfig:
    """
    One command line invocation.

    Attributes
    ----------
    command : str
    config : Path, optional
        Scenario document.
    dataset, checkpoint, prior, gate : Path, optional
        Input artifacts.
    regime : str, optional
    seed : int, optional
        Replaces every configured seed when given.
    out : Path, optional
    site : int, optional
    aggregate : bool
    overrides : dict
        ``--set`` values; ``section.field`` keys target one configuration
        (``data``, ``kriging``, ``encoder``, ``hgat``, ``train``, ``gate``),
        plain keys the first configuration owning the field.
    """
    command: str
    config: Optional[Path] = None
    dataset: Optional[Path] = None
    checkpoint: Optional[Path] = None
    prior: Optional[Path] = None
    gate: Optional[Path] = None
    regime: Optional[str] = None
    seed: Optional[int] = None
    out: Optional[Path] = None
    site: Optional[int] = None
    aggregate: bool = False
    overrides: dict[str, Any] = dataclasses.field(default_factory=dict)

    def __post_init__(self):
        if self.command not in COMMANDS:
            raise InvalidArgument(f'Unknown command {self.command!r}')
        for name in ('config', 'dataset', 'prior', 'gate'):
            path = getattr(self, name)
            if path is not None and not Path(path).exists():
                raise FileNotFoundError(f'--{name} {path} does not exist')
        if self.regime is not None and self.regime not in REGIMES:
            raise InvalidArgument(f'Unknown regime {self.regime!r}')

    def require(self, name: str) -> Any:
        value = getattr(self, name)
        if value is None:
            raise InvalidArgument(f'raymap {self.command} needs --{name}')
        return value

    def configs(self, encoder: EncoderConfig = EncoderConfig()
                ) -> dict[str, Any]:
        """Section name to configuration with seed and overrides applied."""
        sections = {'data': DataConfig(), 'kriging': KrigingConfig(),
                    'encoder': encoder, 'hgat': HgatConfig(),
                    'train': TrainConfig(), 'gate': GateConfig()}
        if self.seed is not None:
            for name in ('train', 'gate'):
                sections[name] = dataclasses.replace(sections[name],
                                                     seed=self.seed)
        plain = {}
        for key, value in self.overrides.items():
            section, _, field = key.rpartition('.')
            if not section:
                plain[key] = value
            elif section in sections:
                sections[section], = apply_overrides([sections[section]],
                                                     {field: value})
            else:
                raise InvalidArgument(f'Unknown configuration section '
                                      f'{section!r}')
        names = list(sections)
        for name, config in zip(names, apply_overrides(
                [sections[name] for name in names], plain)):
            sections[name] = config
        return sections


def provenance_path(path: Path) -> Path:
    return path.with_name(f'{path.stem}.provenance.json')


def sibling(path: Path, suffix: str) -> Path:
    """``out.ckpt`` with suffix ``.trace.csv`` becomes ``out.trace.csv``."""
    return path.with_name(f'{path.stem}{suffix}')


def write_provenance(run: RunConfig, out: Path, configs: dict[str, Any],
                     **extra) -> Path:
    document = {
        'command': run.command,
        'git_describe': str(__version__),
        'seed': run.seed,
        'config': {name: dataclasses.asdict(config)
                   for name, config in configs.items()},
        'inputs': {name: Path(getattr(run, name)).name
                   for name in ('config', 'dataset', 'checkpoint', 'prior',
                                'gate')
                   if getattr(run, name) is not None},
        **extra,
    }
    document['config_hash'] = config_hash(document['config'])
    return write_json(provenance_path(out), document)


def scenario_for(run: RunConfig) -> Scenario:
    """The ``--config`` scenario, or the one recorded beside the dataset."""
    if run.config is not None:
        return Scenario.load(run.config)
    sidecar = provenance_path(Path(run.require('dataset')))
    if not sidecar.exists():
        raise InvalidArgument(f'No --config given and no {sidecar.name} '
                              f'beside the dataset')
    document = read_json(sidecar)
    if 'scenario' not in document:
        raise InvalidArgument(f'{sidecar} records no scenario')
    return Scenario.from_dict(document['scenario'])


def cmd_gen(run: RunConfig) -> Path:
    """Sample, bin, split and allocate a dataset from a scenario."""
    scenario = Scenario.load(run.require('config'))
    if run.seed is not None:
        scenario = dataclasses.replace(scenario, seed=run.seed)
    configs = run.configs()
    data = configs['data']
    dataset = build_dataset(scenario, data.obs_fraction, data.train_fraction,
                            seed=scenario.seed)
    out = save_dataset(dataset, run.require('out'))
    write_provenance(run, out, {'data': data}, scenario=scenario.to_dict(),
                     counts=dataset.counts(), seen_sites=dataset.seen_sites,
                     held_out_sites=dataset.held_out_sites)
    return out


def cmd_prior(run: RunConfig) -> Path:
    """Ordinary kriging prior of every query pair."""
    dataset = load_dataset(run.require('dataset'))
    kriging = run.configs()['kriging']
    try:
        step = scenario_for(run).bin_size_m
    except InvalidArgument as ex:
        step = DEFAULT_STEP_M
        logger.warning('%s, using a %.3g m descriptor step', ex, step)
    table = build_prior_table(dataset.queries, dataset.observations,
                              config=kriging, step=step)
    out = save_prior_table(table, run.require('out'))
    write_provenance(run, out, {'kriging': kriging}, rows=len(table),
                     step_m=kriging.step_m or step,
                     fallback=int(table['fallback'].sum()))
    logger.info('Wrote %d prior rows to %s', len(table), out)
    return out


def _model_configs(run: RunConfig, scenario: Scenario) -> dict[str, Any]:
    return run.configs(EncoderConfig(r0=r0_for(scenario.bounding_box)))


def _transmitters(scenario: Scenario) -> dict[int, tuple[float, float]]:
    return {tx.site: tx.position for tx in scenario.transmitters}


def cmd_train(run: RunConfig) -> Path:
    """Train the direct or residual regime; writes checkpoint and trace."""
    regime = run.regime or 'direct'
    if regime not in ('direct', 'residual'):
        raise InvalidArgument(f'raymap train supports direct and residual, '
                              f'not {regime!r}')
    dataset = load_dataset(run.require('dataset'))
    scenario = scenario_for(run)
    configs = _model_configs(run, scenario)
    options = dict(config=configs['train'], encoder=configs['encoder'],
                   hgat=configs['hgat'])
    if regime == 'direct':
        model, trace = train_direct(dataset, _transmitters(scenario),
                                    **options)
    else:
        prior = load_prior_table(run.require('prior'))
        model, trace = train_residual(dataset, prior, _transmitters(scenario),
                                      **options)
    out = save_model(run.require('out'), model)
    trace.to_csv(sibling(out, '.trace.csv'), index=False,
                 float_format='%.9g', lineterminator='\n')
    write_provenance(run, out, {key: configs[key] for key in
                                ('encoder', 'hgat', 'train')},
                     regime=regime, final_loss=float(trace['loss'].iloc[-1]))
    logger.info('Trained %s model: loss %.6g -> %.6g', regime,
                trace['loss'].iloc[0], trace['loss'].iloc[-1])
    return out


def _residual_model(run: RunConfig, dataset: Dataset):
    checkpoint = run.checkpoint
    if checkpoint is None or not Path(checkpoint).exists():
        raise InvalidState(f'raymap {run.command} needs a trained residual '
                           f'checkpoint, got {checkpoint}')
    return load_model(checkpoint, kind='residual').attach(dataset)


def cmd_gate(run: RunConfig) -> Path:
    """Fit the post-hoc gate on the training pairs of the seen sites."""
    dataset = load_dataset(run.require('dataset'))
    model = _residual_model(run, dataset)
    prior = load_prior_table(run.require('prior'))
    gate_config = run.configs()['gate']
    table = build_gate_table(model, dataset, prior, gate_config)
    gate = fit_gate(model, table, gate_config)
    out = save_gate(run.require('out'), gate)
    save_gate_table(table, sibling(out, '.table.csv'))
    write_provenance(run, out, {'gate': gate_config}, rows=len(table))
    return out


def _learned_model(run: RunConfig, dataset: Dataset):
    if run.regime == 'direct':
        checkpoint = run.checkpoint
        if checkpoint is None or not Path(checkpoint).exists():
            raise InvalidState(f'The direct regime needs a trained direct '
                               f'checkpoint, got {checkpoint}')
        return load_model(checkpoint, kind='direct').attach(dataset), None
    model = _residual_model(run, dataset)
    if run.regime != 'gated':
        return model, None
    if run.gate is None:
        raise InvalidState('The gated regime needs a fitted gate (--gate)')
    return model, load_gate(run.gate)


def _predict(run: RunConfig, regime: str, pairs: PairSet, dataset: Dataset,
             kriging: KrigingConfig, model=None, gate=None) -> np.ndarray:
    return predict_pairs(regime, pairs, model=model, gate=gate,
                         observations=dataset.observations, kriging=kriging)


def cmd_eval(run: RunConfig) -> Path:
    """
    Per site, per split RMSE and MAE of a regime, with the kriging prior
    rows always included.
    """
    regime = run.require('regime')
    dataset = load_dataset(run.require('dataset'))
    prior = load_prior_table(run.require('prior'))
    kriging = run.configs()['kriging']
    model = gate = None
    if regime in ('direct', 'residual', 'gated'):
        model, gate = _learned_model(run, dataset)
    regimes = [regime] if regime == 'prior' else ['prior', regime]
    frames = []
    for split in ('train', 'eval'):
        queries = dataset.queries_for(role=split)
        if queries.empty:
            continue
        pairs = PairSet.from_queries(queries, prior)
        for name in regimes:
            predictions = _predict(run, name, pairs, dataset, kriging, model,
                                   gate)
            frames.append(evaluate(pairs, predictions, name, split,
                                   dataset.seen_sites))
    if not frames:
        raise InvalidArgument('The dataset has no query pairs to evaluate')
    metrics = pd.concat(frames, ignore_index=True)
    out = Path(run.require('out'))
    metrics.to_csv(out, index=False, float_format='%.6f', lineterminator='\n')
    write_provenance(run, out, {'kriging': kriging}, regime=regime)
    for row in metrics.itertuples():
        logger.info('%s %s site %s: RMSE %.3f dB, MAE %.3f dB (n=%d)',
                    row.regime, row.split, row.site, row.rmse_db, row.mae_db,
                    row.n)
    return out


def site_map(run: RunConfig, dataset: Dataset, site: int, regime: str,
             kriging: KrigingConfig, model=None, gate=None) -> pd.DataFrame:
    """
    Truth and estimate at every occupied bin of ``site``.

    Observed bins carry their measured value as the estimate.
    """
    if site not in dataset.sites:
        raise NotFound(f'Site {site} is not in the dataset')
    grid = dataset.grid[dataset.grid['site'] == site].sort_values(
        ['bin_row', 'bin_col'], kind='mergesort').reset_index(drop=True)
    observed = dataset.observations_for(site)
    keys = pd.MultiIndex.from_frame(grid[['bin_row', 'bin_col']])
    seen = keys.isin(pd.MultiIndex.from_frame(observed[['bin_row',
                                                        'bin_col']]))
    queries = grid[~seen].reset_index(drop=True)
    queries = queries.assign(target_id=np.arange(len(queries)))
    prior = None
    if regime in ('prior', 'residual', 'gated'):
        prior = build_prior_table(queries, observed, config=kriging)
    pairs = PairSet.from_queries(queries, prior)
    pred = grid['rss_dbm'].to_numpy(float).copy()
    pred[~seen] = _predict(run, regime, pairs, dataset, kriging, model, gate)
    truth = grid['rss_dbm'].to_numpy(float)
    return pd.DataFrame({'row': grid['bin_row'], 'col': grid['bin_col'],
                         'x': grid['x'], 'y': grid['y'], 'truth': truth,
                         'pred': pred, 'error': pred - truth})


def aggregate_map(frames: list[pd.DataFrame]) -> pd.DataFrame:
    """Aggregate per-site maps over the bins every site covers."""
    stacked = pd.concat([frame.assign(site=number)
                         for number, frame in enumerate(frames)],
                        ignore_index=True).rename(
        columns={'row': 'bin_row', 'col': 'bin_col'})
    keys = ['site', 'bin_row', 'bin_col', 'x', 'y']
    truth, pred = (aggregate_grid(stacked[keys + [column]].rename(
        columns={column: 'rss_dbm'})) for column in ('truth', 'pred'))
    table = pd.DataFrame({'row': truth['bin_row'], 'col': truth['bin_col'],
                          'x': truth['x'], 'y': truth['y'],
                          'truth': truth['rss_dbm'], 'pred': pred['rss_dbm']})
    table['error'] = table['pred'] - table['truth']
    return table[MAP_COLUMNS]


def write_pgm(path: Path, table: pd.DataFrame,
              shape: tuple[int, int]) -> dict[str, Any]:
    """
    8-bit grayscale image of ``table['pred']``, top row at the largest y.

    Values map linearly from ``[min, max]`` onto ``[0, 255]``; bins without
    data are black. Returns the scaling.
    """
    rows, cols = shape
    pred = table['pred'].to_numpy(float)
    low, high = float(pred.min()), float(pred.max())
    span = high - low if high > low else 1.0
    image = np.zeros((rows, cols), dtype=np.uint8)
    levels = np.rint((pred - low) / span * 255.0).astype(np.uint8)
    image[rows - 1 - table['row'].to_numpy(int),
          table['col'].to_numpy(int)] = levels
    with open(path, 'wb') as fd:
        fd.write(f'P5\n{cols} {rows}\n255\n'.encode('ascii'))
        fd.write(image.tobytes())
    return {'min_dbm': low, 'max_dbm': high, 'rows': rows, 'cols': cols}


def cmd_map(run: RunConfig) -> Path:
    """Heatmap CSV, PGM and scaling sidecar of one site or the aggregate."""
    regime = run.regime or 'prior'
    dataset = load_dataset(run.require('dataset'))
    kriging = run.configs()['kriging']
    model = gate = None
    if regime in ('direct', 'residual', 'gated'):
        model, gate = _learned_model(run, dataset)
    if run.aggregate:
        table = aggregate_map([site_map(run, dataset, site, regime, kriging,
                                        model, gate)
                               for site in dataset.sites])
        if table.empty:
            raise InvalidArgument('No bin is covered by every site')
    else:
        table = site_map(run, dataset, run.require('site'), regime, kriging,
                         model, gate)
    try:
        shape = scenario_for(run).grid_shape
    except InvalidArgument:
        shape = (int(table['row'].max()) + 1, int(table['col'].max()) + 1)
    out = Path(run.require('out'))
    table.to_csv(out, index=False, float_format='%.6f', lineterminator='\n')
    scaling = write_pgm(sibling(out, '.pgm'), table, shape)
    write_json(sibling(out, '.scale.json'),
               {'site': 'aggregate' if run.aggregate else run.site,
                'regime': regime, **scaling})
    write_provenance(run, out, {'kriging': kriging}, regime=regime)
    return out


HANDLERS = {'gen': cmd_gen, 'prior': cmd_prior, 'train': cmd_train,
            'gate': cmd_gate, 'eval': cmd_eval, 'map': cmd_map}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog='raymap',
        description='Transmitter-resolved radio map estimation from sparse '
                    'RSS measurements.')
    parser.add_argument('command', choices=COMMANDS)
    parser.add_argument('--config', type=Path, help='Scenario JSON document.')
    parser.add_argument('--dataset', type=Path, help='Dataset CSV.')
    parser.add_argument('--checkpoint', type=Path,
                        help='Trained direct or residual model.')
    parser.add_argument('--prior', type=Path, help='Prior table CSV.')
    parser.add_argument('--gate', type=Path, help='Fitted gate checkpoint.')
    parser.add_argument('--regime', choices=REGIMES)
    parser.add_argument('--seed', type=int)
    parser.add_argument('--out', type=Path, help='Output artifact path.')
    parser.add_argument('--site', type=int, help='Site to map.')
    parser.add_argument('--aggregate', action='store_true',
                        help='Map the aggregate of every site instead.')
    parser.add_argument('--set', dest='overrides', action='append',
                        default=[], metavar='KEY=VALUE',
                        help='Configuration override, repeatable.')
    parser.add_argument('--log-level', default='INFO',
                        choices=('DEBUG', 'INFO', 'WARNING', 'ERROR'))
    parser.add_argument('--version', action='version',
                        version=f'%(prog)s {__version__}')
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, stream=sys.stderr,
                        format='%(asctime)s %(levelname)s %(name)s: '
                               '%(message)s')
    try:
        run = RunConfig(
            command=args.command, config=args.config, dataset=args.dataset,
            checkpoint=args.checkpoint, prior=args.prior, gate=args.gate,
            regime=args.regime, seed=args.seed, out=args.out, site=args.site,
            aggregate=args.aggregate,
            overrides=dict(parse_override(text) for text in args.overrides))
        out = HANDLERS[run.command](run)
    except Exception as ex:
        code = exit_code_for(ex)
        if code == 1:
            logger.exception('raymap %s failed', args.command)
        else:
            logger.error('raymap %s: %s', args.command, ex)
        return code
    logger.info('raymap %s wrote %s', args.command, out)
    return 0
