import dataclasses
import logging

import numpy as np
import pandas as pd
import pytest

from raymap.cli import RunConfig, aggregate_map, build_parser, main
from raymap.datahub import aggregate_fields, aggregate_grid, load_dataset
from raymap.kriging_prior import build_prior_table, load_prior_table
from raymap.regimes import METRIC_COLUMNS, oracle_gamma_many
from raymap.utils import InvalidArgument, read_json, round_half_up, write_json

logger = logging.getLogger(__name__)

TINY = ['encoder.n_anchors=8', 'encoder.slot_width=4', 'encoder.d_model=8',
        'encoder.branch_width=4', 'encoder.edge_hidden=6',
        'encoder.edge_width=5', 'hgat.d=8', 'hgat.k_ref=4', 'hgat.k_g=3',
        'hgat.head_hidden=6', 'train.epochs=2', 'train.batch=64',
        'train.lr=0.01']


def overrides(*items):
    return [arg for item in items for arg in ('--set', item)]


def run_pipeline(scenario, folder):
    """gen, prior, train, gate and eval into ``folder``."""
    folder.mkdir(parents=True, exist_ok=True)
    config = write_json(folder / 'scenario.json', scenario.to_dict())
    paths = {name: folder / name for name in
             ('data.csv', 'prior.csv', 'residual.json', 'gate.json',
              'metrics.csv')}
    steps = [
        ['gen', '--config', config, '--out', paths['data.csv']],
        ['prior', '--dataset', paths['data.csv'], '--out', paths['prior.csv']],
        ['train', '--dataset', paths['data.csv'], '--prior', paths['prior.csv'],
         '--regime', 'residual', '--seed', '5', '--out',
         paths['residual.json'], *overrides(*TINY)],
        ['gate', '--dataset', paths['data.csv'], '--prior', paths['prior.csv'],
         '--checkpoint', paths['residual.json'], '--out', paths['gate.json'],
         *overrides('gate.epochs=15')],
        ['eval', '--dataset', paths['data.csv'], '--prior', paths['prior.csv'],
         '--checkpoint', paths['residual.json'], '--gate', paths['gate.json'],
         '--regime', 'gated', '--out', paths['metrics.csv']],
    ]
    for step in steps:
        assert main([str(arg) for arg in step]) == 0, step[0]
    return paths


@pytest.fixture(scope='module')
def pipeline(scenario, tmp_path_factory):
    return run_pipeline(scenario, tmp_path_factory.mktemp('first'))


def test_gen_records_split(pipeline):
    provenance = read_json(pipeline['data.csv'].with_name(
        'data.provenance.json'))
    assert provenance['seen_sites'] == [1, 3]
    assert provenance['held_out_sites'] == [2]
    assert provenance['command'] == 'gen'
    dataset = load_dataset(pipeline['data.csv'])
    assert provenance['counts'] == dataset.counts()
    for site, counts in provenance['counts'].items():
        assert counts['obs'] == round_half_up(counts['grid'], 0.05)
        if site == '2':
            assert counts['train'] == 0
        else:
            assert counts['train'] == round_half_up(
                counts['grid'] - counts['obs'], 0.15)


def test_prior_rows(pipeline):
    dataset = load_dataset(pipeline['data.csv'])
    prior = load_prior_table(pipeline['prior.csv'])
    assert len(prior) == len(dataset.queries)


def test_train_artifacts(pipeline):
    trace = pd.read_csv(pipeline['residual.json'].with_name(
        'residual.trace.csv'))
    assert list(trace['epoch']) == [1, 2]
    provenance = read_json(pipeline['residual.json'].with_name(
        'residual.provenance.json'))
    assert provenance['config']['train']['seed'] == 5
    assert provenance['config']['encoder']['d_model'] == 8
    assert provenance['regime'] == 'residual'


def test_gate_table_matches_oracle(pipeline):
    table = pd.read_csv(pipeline['gate.json'].with_name('gate.table.csv'))
    checkpoint = read_json(pipeline['residual.json'])
    std = checkpoint['meta']['standardizer']['std']
    expected = oracle_gamma_many((table['label'] - table['prior']) / std,
                                 table['ehat'] / std)
    # The table is written with six decimals
    np.testing.assert_allclose(table['gamma_star'], expected, atol=1e-3)
    assert table['gamma_fit'].between(0, 1).all()


def test_eval_rows(pipeline):
    metrics = pd.read_csv(pipeline['metrics.csv'], dtype={'site': str})
    assert list(metrics.columns) == METRIC_COLUMNS
    assert set(metrics['regime']) == {'prior', 'gated'}
    present = set(zip(metrics['site'], metrics['split']))
    assert {('1', 'train'), ('3', 'train'), ('1', 'eval'), ('2', 'eval'),
            ('3', 'eval'), ('seen', 'eval'), ('held_out', 'eval')} <= present
    assert np.all(metrics['rmse_db'] >= metrics['mae_db'] - 1e-6)


def test_pipeline_is_byte_identical(pipeline, scenario, tmp_path):
    again = run_pipeline(scenario, tmp_path / 'again')
    for name, path in pipeline.items():
        assert again[name].read_bytes() == path.read_bytes(), name
    for suffix in ('.trace.csv', '.provenance.json'):
        assert (again['residual.json'].with_name(f'residual{suffix}')
                .read_bytes()
                == pipeline['residual.json'].with_name(f'residual{suffix}')
                .read_bytes())


def test_map_exports(pipeline, tmp_path):
    out = tmp_path / 'site1.csv'
    assert main(['map', '--dataset', str(pipeline['data.csv']),
                 '--prior', str(pipeline['prior.csv']),
                 '--checkpoint', str(pipeline['residual.json']),
                 '--regime', 'residual', '--site', '1',
                 '--out', str(out)]) == 0
    table = pd.read_csv(out)
    assert list(table.columns) == ['row', 'col', 'x', 'y', 'truth', 'pred',
                                   'error']
    np.testing.assert_allclose(table['error'], table['pred'] - table['truth'],
                               atol=2e-6)
    dataset = load_dataset(pipeline['data.csv'])
    observed = dataset.observations_for(1)
    merged = table.merge(observed, left_on=['row', 'col'],
                         right_on=['bin_row', 'bin_col'])
    assert len(merged) == len(observed)
    np.testing.assert_allclose(merged['pred'], merged['truth'], atol=1e-6)
    scale = read_json(tmp_path / 'site1.scale.json')
    assert (scale['rows'], scale['cols']) == (20, 30)
    image = (tmp_path / 'site1.pgm').read_bytes()
    header = b'P5\n30 20\n255\n'
    assert image.startswith(header)
    assert len(image) == len(header) + 20 * 30


def test_aggregate_map(pipeline, tmp_path):
    out = tmp_path / 'all.csv'
    assert main(['map', '--dataset', str(pipeline['data.csv']), '--aggregate',
                 '--out', str(out)]) == 0
    table = pd.read_csv(out)
    expected = aggregate_grid(load_dataset(pipeline['data.csv']).grid)
    assert len(table) == len(expected) > 0
    np.testing.assert_array_equal(table['row'], expected['bin_row'])
    np.testing.assert_allclose(table['truth'], expected['rss_dbm'], atol=1e-6)
    assert read_json(tmp_path / 'all.scale.json')['site'] == 'aggregate'


@pytest.fixture
def inputs(pipeline):
    return ['--dataset', str(pipeline['data.csv']),
            '--prior', str(pipeline['prior.csv'])]


def test_gate_without_checkpoint_is_invalid_state(inputs, tmp_path):
    assert main(['gate', *inputs, '--out', str(tmp_path / 'g.json')]) == 4


def test_missing_dataset_is_io_error(tmp_path):
    assert main(['prior', '--dataset', str(tmp_path / 'missing.csv'),
                 '--out', str(tmp_path / 'p.csv')]) == 3


@pytest.mark.parametrize('override', ['nonsense', 'kriging.bogus=1',
                                      'bogus.k=1'])
def test_bad_override_is_invalid_argument(pipeline, tmp_path, override):
    assert main(['prior', '--dataset', str(pipeline['data.csv']),
                 '--out', str(tmp_path / 'p.csv'),
                 '--set', override]) == 2
    assert not (tmp_path / 'p.csv').exists()


def test_unknown_site_is_not_found(inputs, tmp_path):
    assert main(['map', *inputs, '--regime', 'prior', '--site', '9',
                 '--out', str(tmp_path / 'm.csv')]) == 2


def test_seed_override_reaches_configs():
    run = RunConfig(command='train', seed=11,
                    overrides={'train.epochs': 3, 'hidden': 8,
                               'encoder.r0': 2.5})
    configs = run.configs()
    assert configs['train'].seed == 11 and configs['gate'].seed == 11
    assert configs['train'].epochs == 3
    assert configs['gate'].hidden == 8
    assert configs['encoder'].r0 == 2.5


def test_run_config_validation(tmp_path):
    with pytest.raises(InvalidArgument):
        RunConfig(command='serve')
    with pytest.raises(InvalidArgument):
        RunConfig(command='eval', regime='kriged')
    with pytest.raises(FileNotFoundError):
        RunConfig(command='prior', dataset=tmp_path / 'nope.csv')
    with pytest.raises(InvalidArgument):
        RunConfig(command='prior').require('dataset')


def test_parser_rejects_unknown_regime():
    with pytest.raises(SystemExit):
        build_parser().parse_args(['eval', '--regime', 'kriged'])


def test_prior_descriptor_step_follows_bin_size(scenario, tmp_path):
    coarse = dataclasses.replace(scenario, bin_size_m=4.0)
    config = write_json(tmp_path / 'coarse.json', coarse.to_dict())
    data, prior = tmp_path / 'data.csv', tmp_path / 'prior.csv'
    assert main(['gen', '--config', str(config), '--out', str(data),
                 '--set', 'data.obs_fraction=0.2']) == 0
    assert main(['prior', '--dataset', str(data), '--out', str(prior)]) == 0
    assert read_json(tmp_path / 'prior.provenance.json')['step_m'] == 4.0
    dataset = load_dataset(data)
    expected = build_prior_table(dataset.queries, dataset.observations,
                                 step=4.0)
    table = load_prior_table(prior)
    np.testing.assert_allclose(table['grad_mag'], expected['grad_mag'],
                               atol=1e-5)
    np.testing.assert_allclose(table['local_std'], expected['local_std'],
                               atol=1e-5)


def test_aggregate_map_keeps_shared_bins():
    first = pd.DataFrame({'row': [0, 0, 1], 'col': [0, 1, 0],
                          'x': [1.0, 3.0, 1.0], 'y': [1.0, 1.0, 3.0],
                          'truth': [-60.0, -70.0, -80.0],
                          'pred': [-61.0, -70.0, -79.0]})
    second = first.iloc[:2].assign(truth=[-60.0, -75.0], pred=[-62.0, -75.0])
    table = aggregate_map([first, second])
    assert list(table.columns) == ['row', 'col', 'x', 'y', 'truth', 'pred',
                                   'error']
    assert list(zip(table['row'], table['col'])) == [(0, 0), (0, 1)]
    np.testing.assert_allclose(table['truth'],
                               [aggregate_fields([-60.0, -60.0]),
                                aggregate_fields([-70.0, -75.0])])
    np.testing.assert_allclose(table['pred'],
                               [aggregate_fields([-61.0, -62.0]),
                                aggregate_fields([-70.0, -75.0])])
    np.testing.assert_allclose(table['error'], table['pred'] - table['truth'])
