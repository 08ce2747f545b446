import math

import numpy as np
import pandas as pd
import pandas.testing as pdt
import pytest

from raymap.datahub import (CSV_COLUMNS, Blocker, Dataset, Scenario,
                            Transmitter, aggregate_fields, aggregate_grid,
                            allocate_queries, bin_measurements, build_dataset,
                            load_dataset, sample_field, sample_observations,
                            save_dataset, split_sites)
from raymap.utils import (DatasetParseError, InvalidArgument, NotFound,
                          round_half_up)


def quiet_scenario(**kwargs):
    options = dict(bounding_box=(0.0, 0.0, 200.0, 200.0),
                   transmitters=(Transmitter(1, 50.0, 50.0),),
                   shadow_std_db=0.0)
    options.update(kwargs)
    return Scenario(**options)


def full_grid(site=1, rows=40, cols=25):
    r, c = np.meshgrid(np.arange(rows), np.arange(cols), indexing='ij')
    n = rows * cols
    return pd.DataFrame({'site': site, 'bin_row': r.ravel(),
                         'bin_col': c.ravel(), 'x': c.ravel() * 2.0 + 1.0,
                         'y': r.ravel() * 2.0 + 1.0,
                         'rss_dbm': np.linspace(-100, -40, n),
                         'los': 'L'})


def test_sample_field_at_transmitter():
    rss, los = sample_field(quiet_scenario(), 1, (50.0, 50.0))
    assert rss == pytest.approx(30.0)
    assert los == 'L'


def test_sample_field_path_loss():
    rss, los = sample_field(quiet_scenario(), 1, (150.0, 50.0))
    assert rss == pytest.approx(-30.0)
    assert los == 'L'


def test_sample_field_wall_loss():
    open_rss, _ = sample_field(quiet_scenario(), 1, (150.0, 50.0))
    walled = quiet_scenario(blockers=(Blocker(90.0, 40.0, 100.0, 60.0),))
    rss, los = sample_field(walled, 1, (150.0, 50.0))
    assert los == 'N'
    assert rss == pytest.approx(open_rss - 20.0)


def test_sample_field_is_pure(scenario):
    first = sample_field(scenario, 2, (12.3, 31.7))
    assert all(sample_field(scenario, 2, (12.3, 31.7)) == first
               for _ in range(3))
    rebuilt = Scenario.from_dict(scenario.to_dict())
    assert sample_field(rebuilt, 2, (12.3, 31.7)) == first


def test_sample_field_errors(scenario):
    with pytest.raises(NotFound):
        sample_field(scenario, 9, (1.0, 1.0))
    with pytest.raises(InvalidArgument):
        sample_field(scenario, 1, (-5.0, 1.0))


def test_scenario_validation():
    with pytest.raises(InvalidArgument):
        quiet_scenario(transmitters=(Transmitter(1, 0, 0),
                                     Transmitter(1, 5, 5)))
    with pytest.raises(InvalidArgument):
        quiet_scenario(bin_size_m=0.0)
    with pytest.raises(InvalidArgument):
        quiet_scenario(shadow_std_db=-1.0)


@pytest.mark.parametrize('samples,expected',
                         [((-80.0,), -80.0),
                          ((-80.0, -90.0), -82.5963731),
                          ((-70.0, -70.0, -70.0), -70.0)],
                         ids=('single', 'pair', 'equal'))
def test_bin_measurements_linear_mean(samples, expected):
    raw = [(1, (0.5, 0.5), value, 'L') for value in samples]
    table = bin_measurements(raw, 2.0)
    assert len(table) == 1
    assert table['rss_dbm'].iloc[0] == pytest.approx(expected, abs=1e-6)
    assert (table['x'].iloc[0], table['y'].iloc[0]) == (1.0, 1.0)


def test_bin_measurements_los_vote():
    raw = [(1, (0.5, 0.5), -70.0, 'L'), (1, (0.7, 0.5), -71.0, 'N'),
           (1, (3.5, 0.5), -70.0, 'L'), (1, (3.7, 0.5), -71.0, 'L'),
           (1, (3.9, 0.5), -72.0, 'N')]
    table = bin_measurements(raw, 2.0)
    assert table['los'].tolist() == ['N', 'L']


def test_bin_measurements_permutation_invariant(rng):
    raw = pd.DataFrame({'site': rng.integers(1, 3, 300),
                        'x': rng.uniform(0, 20, 300),
                        'y': rng.uniform(0, 20, 300),
                        'rss_dbm': rng.uniform(-110, -40, 300),
                        'los': rng.choice(['L', 'N'], 300)})
    expected = bin_measurements(raw, 2.0)
    shuffled = raw.iloc[rng.permutation(300)].reset_index(drop=True)
    pdt.assert_frame_equal(bin_measurements(shuffled, 2.0), expected)


def test_bin_measurements_empty():
    assert bin_measurements([], 2.0).empty
    with pytest.raises(InvalidArgument):
        bin_measurements([], 0.0)


@pytest.mark.parametrize('sites,seen,held_out',
                         [((1, 2, 3), [1, 3], [2]),
                          ((2, 4), [], [2, 4]),
                          ((7,), [7], [])],
                         ids=('three', 'all_even', 'single'))
def test_split_sites(sites, seen, held_out):
    assert split_sites(sites) == (seen, held_out)


def test_split_sites_warns_without_seen(caplog):
    split_sites([2, 4])
    assert 'supervision' in caplog.text


def test_sample_observations_count_and_determinism():
    grid = full_grid()
    obs = sample_observations(grid, 1, 0.05, seed=3)
    assert len(obs) == 50
    again = sample_observations(grid, 1, 0.05, seed=3)
    pdt.assert_frame_equal(obs, again)
    assert not obs.duplicated(['bin_row', 'bin_col']).any()


def test_sample_observations_uniform():
    grid = full_grid(rows=50, cols=40)
    obs = sample_observations(grid, 1, 0.05, seed=11)
    strata_rows = obs['bin_row'] * 10 // 50
    strata_cols = obs['bin_col'] * 10 // 40
    occupancy = pd.Series(list(zip(strata_rows, strata_cols))).value_counts()
    assert occupancy.max() <= 2


def test_sample_observations_errors():
    grid = full_grid(rows=2, cols=2)
    with pytest.raises(InvalidArgument):
        sample_observations(grid, 1, 0.05, seed=0)
    with pytest.raises(InvalidArgument):
        sample_observations(grid, 1, 1.5, seed=0)
    with pytest.raises(NotFound):
        sample_observations(grid, 5, 0.5, seed=0)


def test_allocate_queries_counts():
    remaining = full_grid(rows=38, cols=25)
    queries = allocate_queries(remaining, 0.15, seed=1)
    assert len(queries) == 950
    assert (queries['role'] == 'train').sum() == 143
    assert (queries['role'] == 'eval').sum() == 807
    again = allocate_queries(remaining, 0.15, seed=1)
    pdt.assert_frame_equal(queries, again)
    assert queries['target_id'].tolist() == list(range(950))


def test_allocate_queries_unsupervised_and_empty():
    queries = allocate_queries(full_grid(rows=4, cols=4), 0.15, seed=1,
                               supervised=False)
    assert set(queries['role']) == {'eval'}
    with pytest.raises(InvalidArgument):
        allocate_queries(full_grid().iloc[:0], 0.15, seed=1)


@pytest.mark.parametrize('values,expected',
                         [((-80.0,), -80.0),
                          ((-80.0, -80.0), -76.9897),
                          ((-60.0, -90.0), -59.99957)],
                         ids=('single', 'doubling', 'dominant'))
def test_aggregate_fields(values, expected):
    assert aggregate_fields(values) == pytest.approx(expected, abs=1e-4)


def test_aggregate_fields_bounds(rng):
    for _ in range(50):
        values = rng.uniform(-120, -30, rng.integers(1, 6))
        assert aggregate_fields(values) >= values.max()
    with pytest.raises(InvalidArgument):
        aggregate_fields([])


def test_aggregate_grid(dataset):
    table = aggregate_grid(dataset.grid)
    assert (table['n_sites'] == len(dataset.sites)).all()
    row = table.iloc[0]
    values = dataset.grid[(dataset.grid['bin_row'] == row['bin_row'])
                          & (dataset.grid['bin_col'] == row['bin_col'])]
    assert row['rss_dbm'] == pytest.approx(aggregate_fields(values['rss_dbm']))


def test_build_dataset_partition(dataset):
    assert dataset.seen_sites == [1, 3]
    assert dataset.held_out_sites == [2]
    keys = ['site', 'bin_row', 'bin_col']
    obs = dataset.observations[keys]
    queries = dataset.queries[keys]
    assert not obs.merge(queries, on=keys).shape[0]
    assert len(obs) + len(queries) == len(dataset.grid)
    for site, counts in dataset.counts().items():
        assert counts['obs'] == round_half_up(counts['grid'], 0.1)
        if int(site) % 2 == 0:
            assert counts['train'] == 0


def test_build_dataset_deterministic(scenario, dataset):
    again = build_dataset(scenario, obs_fraction=0.1, train_fraction=0.15)
    for name in ('grid', 'observations', 'queries'):
        pdt.assert_frame_equal(getattr(dataset, name), getattr(again, name))


def test_dataset_round_trip(dataset, tmp_path):
    path = save_dataset(dataset, tmp_path / 'dataset.csv')
    loaded = load_dataset(path)
    for name in ('grid', 'observations', 'queries'):
        pdt.assert_frame_equal(getattr(loaded, name), getattr(dataset, name),
                               check_dtype=False)
    assert path.read_text().splitlines()[0] == ','.join(CSV_COLUMNS)


def test_dataset_bytes_stable(dataset, tmp_path):
    first = save_dataset(dataset, tmp_path / 'a.csv').read_bytes()
    second = save_dataset(load_dataset(tmp_path / 'a.csv'),
                          tmp_path / 'b.csv').read_bytes()
    assert first == second


def test_load_dataset_short_row(dataset, tmp_path):
    path = save_dataset(dataset, tmp_path / 'dataset.csv')
    lines = path.read_text().splitlines()
    lines[3] = ','.join(lines[3].split(',')[:5])
    path.write_text('\n'.join(lines) + '\n')
    with pytest.raises(DatasetParseError) as info:
        load_dataset(path)
    assert info.value.lineno == 4
    assert ':4' in str(info.value)


@pytest.mark.parametrize('column,value',
                         [('los', 'X'), ('role', 'test'), ('rss_dbm', 'abc')],
                         ids=('los', 'role', 'rss'))
def test_load_dataset_bad_value(dataset, tmp_path, column, value):
    path = save_dataset(dataset, tmp_path / 'dataset.csv')
    lines = path.read_text().splitlines()
    fields = lines[5].split(',')
    fields[CSV_COLUMNS.index(column)] = value
    lines[5] = ','.join(fields)
    path.write_text('\n'.join(lines) + '\n')
    with pytest.raises(DatasetParseError) as info:
        load_dataset(path)
    assert info.value.lineno == 6


def test_load_dataset_header_only(tmp_path):
    path = tmp_path / 'empty.csv'
    path.write_text(','.join(CSV_COLUMNS) + '\n')
    loaded = load_dataset(path)
    assert isinstance(loaded, Dataset)
    assert loaded.grid.empty and loaded.observations.empty
    assert loaded.queries.empty


def test_dataset_accessors(dataset):
    obs = dataset.observations_for(1)
    assert set(obs['site']) == {1}
    with pytest.raises(NotFound):
        dataset.observations_for(42)
    train = dataset.queries_for(3, 'train')
    assert set(train['role']) == {'train'} and set(train['site']) == {3}
    assert math.isfinite(dataset.grid['rss_dbm'].max())
