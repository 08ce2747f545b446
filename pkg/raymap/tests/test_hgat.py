import numpy as np
import pandas as pd
import pytest

from raymap.encoders import EncoderConfig, init_encoder_params
from raymap.hgat import (EdgeBatch, HgatConfig, build_pages, build_scaffold,
                         encode_pair, encoder_cost, global_edges,
                         global_stage, head_direct, head_residual,
                         hgat_shapes, init_hgat_params, local_stage)
from raymap.numcore import ModelParams, Tape, finite_diff_check
from raymap.utils import InvalidArgument

TX = (30.0, 20.0)


def observation_frame(n, rng, site=1, extent=(60.0, 40.0)):
    x = rng.uniform(0, extent[0], n)
    y = rng.uniform(0, extent[1], n)
    return pd.DataFrame({
        'site': site, 'bin_row': (y // 2).astype(int),
        'bin_col': (x // 2).astype(int), 'x': x, 'y': y,
        'rss_dbm': rng.normal(-70, 8, n),
        'los': rng.choice(['L', 'N'], n)})


@pytest.fixture(scope='module')
def params(tiny_encoder, tiny_hgat):
    params = init_encoder_params(tiny_encoder, seed=5)
    return init_hgat_params(tiny_hgat, tiny_encoder, seed=5, params=params)


@pytest.fixture
def scaffold(rng):
    return build_scaffold(observation_frame(40, rng))


def zeroed(params, *names):
    params = params.copy()
    for name in names:
        params[name] = np.zeros_like(params[name])
    return params


def test_scaffold_budget(rng):
    obs = observation_frame(500, rng)
    assert len(build_scaffold(obs, budget=50, seed=1)) == 50
    assert len(build_scaffold(obs, budget=600, seed=1)) == 500
    assert len(build_scaffold(obs)) == 500
    first = build_scaffold(obs, budget=50, seed=1)
    again = build_scaffold(obs, budget=50, seed=1)
    assert np.array_equal(first.points, again.points)
    assert first.site == 1


def test_scaffold_errors(rng):
    with pytest.raises(InvalidArgument):
        build_scaffold(observation_frame(0, rng))
    with pytest.raises(InvalidArgument):
        build_scaffold(pd.concat([observation_frame(5, rng, site=1),
                                  observation_frame(5, rng, site=2)]))
    with pytest.raises(InvalidArgument):
        build_scaffold(observation_frame(5, rng), budget=0)


def test_pages_share_anchor_relation(scaffold, rng, tiny_hgat):
    pages = build_pages(rng.uniform(0, 40, size=(3, 2)), ['L', 'N', 'L'],
                        scaffold, TX, tiny_hgat.k_ref)
    assert len(pages) == 3 * tiny_hgat.k_ref
    for target in range(3):
        rows = pages.segments == target
        assert np.unique(pages.distance[rows, 2]).size == 1
        assert np.unique(pages.bearing[rows, 2]).size == 1
        descriptor = pages.descriptor(int(np.flatnonzero(rows)[0]))
        assert descriptor.tb.distance == pages.distance[rows, 2][0]
    assert set(pages.target_los[pages.segments == 1]) == {'N'}


def test_local_stage_page_permutation(tiny_encoder, params):
    for seed in range(100):
        rng = np.random.default_rng(seed)
        scaffold = build_scaffold(observation_frame(12, rng))
        n = int(rng.integers(1, 5))
        pages = build_pages(rng.uniform(0, 60, size=(n, 2)),
                            rng.choice(['L', 'N'], n), scaffold, TX,
                            int(rng.integers(1, 16)))
        base = local_stage(Tape(), params, tiny_encoder, pages).z.value
        shuffled = pages.take(rng.permutation(len(pages)))
        z = local_stage(Tape(), params, tiny_encoder, shuffled).z.value
        assert np.max(np.abs(z - base)) <= 1e-12, seed


def test_single_page_weight(tiny_encoder, params, scaffold):
    pages = build_pages([[5.0, 5.0], [50.0, 35.0]], ['L', 'L'], scaffold,
                        TX, 1)
    assert np.array_equal(local_stage(Tape(), params, tiny_encoder,
                                      pages).attention, [1.0, 1.0])


def test_identical_pages_share_weight(tiny_encoder, params, scaffold):
    pages = build_pages([[5.0, 5.0]], ['L'], scaffold, TX, 1)
    repeated = pages.take([0, 0, 0, 0])
    result = local_stage(Tape(), params, tiny_encoder, repeated)
    assert np.array_equal(result.attention, np.full(4, 0.25))


def test_local_attention_sums_to_one(tiny_encoder, params):
    for seed in range(100):
        rng = np.random.default_rng(seed)
        scaffold = build_scaffold(observation_frame(12, rng))
        n = int(rng.integers(1, 5))
        pages = build_pages(rng.uniform(0, 60, size=(n, 2)),
                            rng.choice(['L', 'N'], n), scaffold, TX,
                            int(rng.integers(1, 16)))
        alpha = local_stage(Tape(), params, tiny_encoder, pages).attention
        assert np.all(alpha >= 0)
        totals = np.bincount(pages.segments, weights=alpha, minlength=n)
        np.testing.assert_allclose(totals, 1.0, atol=1e-12)


def test_global_stage_without_neighbors(tiny_encoder, params, tiny_hgat):
    tape = Tape()
    centers = tape.leaf(np.ones((2, tiny_hgat.d)))
    edges = global_edges(np.zeros((0, 2)), tiny_hgat.k_g,
                         targets=np.array([[1.0, 1.0], [2.0, 2.0]]))
    assert len(edges) == 0
    result = global_stage(tape, params, tiny_encoder, centers,
                          tape.leaf(np.zeros((0, tiny_hgat.d))), edges)
    assert np.array_equal(result.z.value, np.zeros((2, tiny_hgat.d)))


def test_global_stage_single_neighbor(tiny_encoder, params, tiny_hgat, rng):
    tape = Tape()
    neighbor = rng.normal(size=(1, tiny_hgat.d))
    edges = global_edges([[3.0, 4.0]], tiny_hgat.k_g, targets=[[0.0, 0.0]])
    assert list(edges.neighbors) == [0]
    assert edges.distance[0] == pytest.approx(5.0)
    result = global_stage(tape, params, tiny_encoder,
                          tape.leaf(rng.normal(size=(1, tiny_hgat.d))),
                          tape.leaf(neighbor), edges)
    assert np.array_equal(result.attention, [1.0])
    # With beta = 1 the output is the message of the neighbor alone
    other_tape = Tape()
    other = global_stage(other_tape, params, tiny_encoder,
                         other_tape.leaf(np.zeros((1, tiny_hgat.d))),
                         other_tape.leaf(neighbor), edges)
    np.testing.assert_allclose(result.z.value, other.z.value, atol=1e-15)


def test_global_stage_zero_messages(tiny_encoder, params, tiny_hgat, rng):
    silent = zeroed(params, 'hgat.global.message.W')
    positions = rng.uniform(0, 50, size=(6, 2))
    tape = Tape()
    table = tape.leaf(rng.normal(size=(6, tiny_hgat.d)))
    result = global_stage(tape, silent, tiny_encoder, table, table,
                          global_edges(positions, tiny_hgat.k_g))
    assert not np.any(result.z.value)


def test_global_edges_exclude_self(rng):
    positions = rng.uniform(0, 10, size=(7, 2))
    edges = global_edges(positions, 3)
    assert isinstance(edges, EdgeBatch)
    assert len(edges) == 21
    assert not np.any(edges.segments == edges.neighbors)
    assert np.array_equal(np.bincount(edges.segments), np.full(7, 3))


def test_encode_pair(tiny_encoder, params, tiny_hgat, scaffold, rng):
    neighbors = [(rng.normal(size=tiny_hgat.d), (float(x), float(y)))
                 for x, y in rng.uniform(0, 40, size=(3, 2))]
    first = encode_pair(params, tiny_encoder, (12.0, 7.0), 'L', scaffold, TX,
                        neighbors, k_ref=tiny_hgat.k_ref)
    again = encode_pair(params, tiny_encoder, (12.0, 7.0), 'L', scaffold, TX,
                        neighbors, k_ref=tiny_hgat.k_ref)
    assert np.array_equal(first.s, again.s)
    assert np.array_equal(first.s, np.concatenate([first.z_local,
                                                   first.z_global]))
    assert first.s.shape == (2 * tiny_hgat.d,)


def test_encode_pair_zero_model(tiny_encoder, params, tiny_hgat, scaffold):
    zero = ModelParams({name: np.zeros_like(value)
                        for name, value in params.items()})
    out = encode_pair(zero, tiny_encoder, (12.0, 7.0), 'N', scaffold, TX, [],
                      k_ref=tiny_hgat.k_ref)
    assert not np.any(out.z_local) and not np.any(out.z_global)
    assert np.all(np.isfinite(out.s))


def test_heads(params, tiny_hgat, rng):
    s = rng.normal(size=(4, 2 * tiny_hgat.d))
    tape = Tape()
    silent = zeroed(params, 'head.direct.out.W', 'head.residual.out.W')
    assert not np.any(head_direct(tape, silent, tape.leaf(s)).value)
    assert not np.any(head_residual(tape, silent, tape.leaf(s),
                                    np.ones(4)).value)
    wired = params.copy()
    wired['head.residual.out.W'] = rng.normal(size=wired[
        'head.residual.out.W'].shape)
    low = head_residual(tape, wired, tape.leaf(s), np.zeros(4)).value
    high = head_residual(tape, wired, tape.leaf(s), np.ones(4)).value
    assert not np.allclose(low, high)


def test_residual_head_starts_at_zero(params):
    assert not np.any(params['head.residual.out.W'])
    assert not np.any(params['head.residual.out.b'])


@pytest.mark.parametrize('seed', range(5))
@pytest.mark.parametrize('head', ['direct', 'residual'])
def test_full_encoder_gradient(tiny_encoder, params, tiny_hgat, head, seed):
    rng = np.random.default_rng(seed)
    scaffold = build_scaffold(observation_frame(40, rng))
    model = params.copy()
    model['head.residual.out.W'] = rng.normal(
        scale=0.5, size=model['head.residual.out.W'].shape)
    targets = rng.uniform(0, 50, size=(5, 2))
    pages = build_pages(targets, rng.choice(['L', 'N'], 5), scaffold, TX,
                        tiny_hgat.k_ref,
                        standardize=lambda rss: (rss + 70.0) / 8.0)
    edges = global_edges(targets, tiny_hgat.k_g)
    label = rng.normal(size=(5, 1))
    prior = rng.normal(size=5)

    def loss(tape, params):
        local = local_stage(tape, params, tiny_encoder, pages)
        glob = global_stage(tape, params, tiny_encoder, local.z, local.z,
                            edges)
        s = tape.concat([local.z, glob.z])
        out = head_direct(tape, params, s) if head == 'direct' \
            else head_residual(tape, params, s, prior)
        return tape.mean(tape.huber(out, label, 1.0))

    assert finite_diff_check(loss, model, max_coords=8, seed=seed) <= 1e-4


def test_cost_bounded_by_neighbourhood(tiny_encoder, params, tiny_hgat):
    counts = []
    for n_obs in (1000, 10000):
        rng = np.random.default_rng(n_obs)
        scaffold = build_scaffold(observation_frame(n_obs, rng))
        targets = rng.uniform(0, 60, size=(4, 2))
        tape = Tape()
        pages = build_pages(targets, ['L'] * 4, scaffold, TX, tiny_hgat.k_ref)
        local = local_stage(tape, params, tiny_encoder, pages)
        global_stage(tape, params, tiny_encoder, local.z, local.z,
                     global_edges(targets, tiny_hgat.k_g))
        counts.append((tape.n_ops, tape.work))
    assert counts[0] == counts[1]


def test_encoder_cost():
    assert encoder_cost(16, 4, 128) == 20 * 128 * 128
    assert encoder_cost(16, 4, 128, cached=False) == (20 + 64) * 128 * 128


def test_shapes(tiny_encoder, tiny_hgat):
    shapes = hgat_shapes(tiny_hgat, tiny_encoder)
    page = tiny_encoder.d_model + tiny_encoder.edge_width
    assert shapes['hgat.local.score.W'] == (page, tiny_hgat.d)
    assert shapes['hgat.global.message.W'] == (
        tiny_hgat.d + tiny_encoder.edge_width, tiny_hgat.d)
    assert shapes['head.residual.hidden.W'] == (2 * tiny_hgat.d + 1,
                                                tiny_hgat.head_hidden)
    default = hgat_shapes(HgatConfig(), EncoderConfig())
    assert default['head.direct.hidden.W'] == (256, 128)
    assert default['head.residual.hidden.W'] == (257, 128)


@pytest.mark.parametrize('kwargs', [{'d': 0}, {'k_ref': 0}, {'heads': 2},
                                    {'n_ref': 0}])
def test_config_validation(kwargs):
    with pytest.raises(InvalidArgument):
        HgatConfig(**kwargs)
