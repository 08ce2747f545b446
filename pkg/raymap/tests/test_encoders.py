import math

import numpy as np
import pytest

from raymap.encoders import (LOS_STATES, EncoderConfig, distance_slots,
                             encode_bearing, encode_distance, encoder_shapes,
                             f_edge_global, f_edge_local, f_ref, f_tx,
                             init_encoder_params, los_embed, los_index, r0_for)
from raymap.numcore import ModelParams, Tape, finite_diff_check
from raymap.utils import InvalidArgument


@pytest.fixture
def codebook(rng):
    return rng.normal(size=(256, 16))


@pytest.fixture(scope='module')
def small_params(tiny_encoder):
    return init_encoder_params(tiny_encoder, seed=11)


def test_distance_zero_is_first_anchor(codebook):
    assert np.array_equal(encode_distance(0.0, codebook), codebook[0])


def test_unit_distance_squashes_to_half(codebook):
    low, high, frac = distance_slots([1.0], 256)
    assert (low[0], high[0], frac[0]) == (127, 128, 0.5)
    np.testing.assert_allclose(encode_distance(1.0, codebook),
                               0.5 * (codebook[127] + codebook[128]),
                               atol=1e-15)


def test_distance_normalized_by_r0(codebook):
    np.testing.assert_array_equal(encode_distance(50.0, codebook, r0=50.0),
                                  encode_distance(1.0, codebook))


def test_distance_midway_between_anchors():
    codebook = np.arange(40.0).reshape(10, 4)
    # s = 0.5 / 9 sits halfway between anchors 0 and 1
    s = 0.5 / 9
    np.testing.assert_allclose(encode_distance(s / (1 - s), codebook),
                               0.5 * (codebook[0] + codebook[1]), atol=1e-12)


def test_distance_slots_monotone():
    low, high, frac = distance_slots(np.linspace(0, 1e6, 2001), 256)
    assert np.all(np.diff(low) >= 0)
    assert np.all(high == low + 1) and high.max() <= 255
    assert np.all((frac >= 0) & (frac <= 1))


@pytest.mark.parametrize('distance', [-1e-9, -3.0, np.nan])
def test_distance_rejects_invalid(codebook, distance):
    with pytest.raises(InvalidArgument):
        encode_distance(distance, codebook)


def test_bearing_at_anchor(codebook):
    for k in (0, 5, 128, 255):
        angle = -math.pi + 2 * math.pi * k / 256
        np.testing.assert_allclose(encode_bearing(angle, codebook),
                                   codebook[k], atol=1e-12)


def test_bearing_midway(codebook):
    angle = -math.pi + 2 * math.pi * 10.5 / 256
    np.testing.assert_allclose(encode_bearing(angle, codebook),
                               0.5 * (codebook[10] + codebook[11]), atol=1e-12)


def test_bearing_circular_continuity(codebook):
    below = encode_bearing(math.pi - 1e-9, codebook)
    assert np.max(np.abs(below - encode_bearing(-math.pi, codebook))) <= 1e-6
    np.testing.assert_array_equal(encode_bearing(math.pi, codebook),
                                  codebook[0])


@pytest.mark.parametrize('angle', [-3.0, -0.4, 0.0, 1.1, 3.1])
def test_bearing_periodic(codebook, angle):
    np.testing.assert_allclose(encode_bearing(angle + 2 * math.pi, codebook),
                               encode_bearing(angle, codebook), atol=1e-12)


def test_los_selection(small_params):
    assert list(los_index(['L', 'N'], ['L', 'L'])) == [0, 3]
    tape = Tape()
    rows = los_embed(tape, small_params, list('LNLN'), list('LNNL')).value
    np.testing.assert_array_equal(rows, small_params['enc.los'])
    assert len({tuple(row) for row in rows}) == len(LOS_STATES)


def test_los_rejects_unknown_flag():
    with pytest.raises(InvalidArgument):
        los_index(['L'], ['X'])


def test_f_tx_linear(tiny_encoder, small_params, rng):
    position = rng.uniform(0, 60, size=(1, 2))
    base = f_tx(Tape(), small_params, tiny_encoder, position).value
    doubled = f_tx(Tape(), small_params, tiny_encoder, 2.5 * position).value
    np.testing.assert_allclose(doubled, 2.5 * base, rtol=1e-12)
    unit = EncoderConfig(8, 4, 8, 4, 6, 5, r0=1.0)
    np.testing.assert_array_equal(
        base, f_tx(Tape(), small_params, unit,
                   position / tiny_encoder.r0).value)
    zero = small_params.copy()
    zero['enc.tx.W'] = np.zeros_like(zero['enc.tx.W'])
    assert not np.any(f_tx(Tape(), zero, tiny_encoder, position).value)


def test_f_ref_bounded(tiny_encoder, small_params, rng):
    out = f_ref(Tape(), small_params, tiny_encoder,
                rng.normal(scale=40, size=(30, 2)), rng.normal(size=30)).value
    assert out.shape == (30, tiny_encoder.d_model)
    assert np.all(np.abs(out) < 1)


def _edge_inputs(rng, n=6):
    return (rng.uniform(0, 80, size=(n, 3)),
            rng.uniform(-math.pi, math.pi, size=(n, 3)),
            rng.choice(['L', 'N'], size=n), rng.choice(['L', 'N'], size=n))


def test_f_edge_local_pure_and_ordered(tiny_encoder, small_params, rng):
    distance, bearing, target_los, ref_los = _edge_inputs(rng)
    first = f_edge_local(Tape(), small_params, tiny_encoder, distance,
                         bearing, target_los, ref_los).value
    again = f_edge_local(Tape(), small_params, tiny_encoder, distance,
                         bearing, target_los, ref_los).value
    assert first.shape == (6, tiny_encoder.edge_width)
    assert np.array_equal(first, again)
    swapped = f_edge_local(Tape(), small_params, tiny_encoder,
                           distance[:, [1, 0, 2]], bearing[:, [1, 0, 2]],
                           target_los, ref_los).value
    assert not np.allclose(swapped, first)


def test_f_edge_global_degenerate(tiny_encoder, small_params):
    out = f_edge_global(Tape(), small_params, tiny_encoder, [0.0], [0.0]).value
    assert out.shape == (1, tiny_encoder.edge_width)
    assert np.all(np.isfinite(out))


@pytest.mark.parametrize('encoder', ['ref', 'edge_local', 'edge_global'])
def test_encoder_gradients(tiny_encoder, small_params, rng, encoder):
    distance, bearing, target_los, ref_los = _edge_inputs(rng)
    rss = rng.normal(size=6)
    params = small_params.copy()

    def loss(tape, params):
        if encoder == 'ref':
            out = f_ref(tape, params, tiny_encoder, distance[:, :2], rss)
        elif encoder == 'edge_local':
            out = f_edge_local(tape, params, tiny_encoder, distance, bearing,
                               target_los, ref_los)
        else:
            out = f_edge_global(tape, params, tiny_encoder, distance[:, 0],
                                bearing[:, 0])
        return tape.sum(tape.mul(out, out))

    assert finite_diff_check(loss, params, max_coords=12) <= 1e-5


def test_default_shapes():
    config = EncoderConfig()
    assert config.local_edge_inputs == 112
    shapes = encoder_shapes(config)
    assert shapes['enc.tx.W'] == (2, 128)
    assert shapes['enc.edge_local.fuse1.W'] == (112, 64)
    assert shapes['enc.edge_local.fuse2.W'] == (64, 32)
    assert shapes['enc.edge_global.fuse1.W'] == (32, 64)
    assert shapes['enc.edge_local.tr.bear'] == (256, 16)
    assert shapes['enc.los'] == (4, 16)
    assert 'enc.tx.b' not in shapes


def test_init_is_seeded(tiny_encoder):
    first = init_encoder_params(tiny_encoder, seed=3)
    assert first.equal(init_encoder_params(tiny_encoder, seed=3))
    assert not first.equal(init_encoder_params(tiny_encoder, seed=4))
    assert isinstance(first, ModelParams)


def test_config_validation():
    with pytest.raises(InvalidArgument):
        EncoderConfig(r0=0.0)
    with pytest.raises(InvalidArgument):
        EncoderConfig(n_anchors=1)


def test_r0_is_half_diagonal():
    assert r0_for((0, 0, 60, 80)) == 50.0
