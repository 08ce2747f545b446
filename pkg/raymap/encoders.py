"""
Learnable lifting of raw geometry, link state and measurements into latent
vectors.

Distances are normalized by ``R0``, squashed with ``d / (1 + d)`` and read
from a uniform codebook by linear interpolation; bearings are read from a
circular codebook. Each function records its computation on a
:class:`~raymap.numcore.Tape` and works on whole batches of rows.
"""
from __future__ import annotations

import dataclasses
import logging
import math
from typing import Optional

import numpy as np

from .geo_index import wrap_bearings
from .numcore import ModelParams, Node, Tape, init_params, name_seed
from .utils import InvalidArgument

logger = logging.getLogger(__name__)

LOS_STATES = ('LL', 'NN', 'LN', 'NL')
RELATIONS = ('tr', 'rb', 'tb')


@dataclasses.dataclass(frozen=True)
class EncoderConfig:
    """
    Widths of the node and edge encoders.

    Attributes
    ----------
    n_anchors : int
        Anchors per codebook.
    slot_width : int
        Embedding width of one geometric component and of a LoS prototype.
    d_model : int
        Width of transmitter and reference embeddings.
    branch_width : int
        Width of each input branch of the reference encoder.
    edge_hidden : int
        Hidden width of the edge fusion MLPs.
    edge_width : int
        Output width of the edge encoders.
    r0 : float
        Coordinate normalization radius in meters.
    """
    n_anchors: int = 256
    slot_width: int = 16
    d_model: int = 128
    branch_width: int = 64
    edge_hidden: int = 64
    edge_width: int = 32
    r0: float = 1.0

    def __post_init__(self):
        if self.n_anchors < 2:
            raise InvalidArgument('A codebook needs at least two anchors')
        if self.r0 <= 0:
            raise InvalidArgument(f'r0 must be positive, got {self.r0}')

    @property
    def local_edge_inputs(self) -> int:
        return 2 * len(RELATIONS) * self.slot_width + self.slot_width


def r0_for(bounding_box) -> float:
    """Half the diagonal of ``(xmin, ymin, xmax, ymax)``."""
    xmin, ymin, xmax, ymax = bounding_box
    return 0.5 * math.hypot(xmax - xmin, ymax - ymin)


def distance_slots(distance, n_anchors: int, r0: float = 1.0):
    """
    Bracketing anchors and blend weight of normalized distances.

    Returns
    -------
    low, high : np.ndarray of int
    frac : np.ndarray
        Weight of ``high``.
    """
    distance = np.asarray(distance, dtype=float).reshape(-1) / r0
    if np.any(distance < 0) or not np.all(np.isfinite(distance)):
        raise InvalidArgument('Distances must be finite and non-negative')
    squashed = distance / (1.0 + distance)
    position = squashed * (n_anchors - 1)
    low = np.minimum(np.floor(position).astype(np.intp), n_anchors - 2)
    return low, low + 1, position - low


def bearing_slots(bearing, n_anchors: int):
    """Circularly adjacent anchors and blend weight of bearings."""
    wrapped = wrap_bearings(np.asarray(bearing, dtype=float).reshape(-1))
    position = (wrapped + math.pi) / (2.0 * math.pi) * n_anchors
    base = np.floor(position)
    low = base.astype(np.intp) % n_anchors
    return low, (low + 1) % n_anchors, position - base


def encode_distance(distance: float, codebook: np.ndarray,
                    r0: float = 1.0) -> np.ndarray:
    """Codebook embedding of one distance in meters, normalized by ``r0``."""
    low, high, frac = distance_slots([distance], codebook.shape[0], r0)
    return (1.0 - frac[0]) * codebook[low[0]] + frac[0] * codebook[high[0]]


def encode_bearing(bearing: float, codebook: np.ndarray) -> np.ndarray:
    """Circular codebook embedding of one bearing."""
    low, high, frac = bearing_slots([bearing], codebook.shape[0])
    return (1.0 - frac[0]) * codebook[low[0]] + frac[0] * codebook[high[0]]


def los_index(target_los, reference_los) -> np.ndarray:
    """Row of the agreement prototype for each pair of LoS flags."""
    states = np.char.add(np.asarray(target_los, dtype='U1').reshape(-1),
                         np.asarray(reference_los, dtype='U1').reshape(-1))
    index = np.full(states.shape, -1, dtype=np.intp)
    for row, state in enumerate(LOS_STATES):
        index[states == state] = row
    if np.any(index < 0):
        raise InvalidArgument(f'LoS flags must be L or N, got {set(states)}')
    return index


def los_embed(tape: Tape, params: ModelParams, target_los,
              reference_los) -> Node:
    return tape.take_rows(tape.param(params, 'enc.los'),
                          los_index(target_los, reference_los))


def linear(tape: Tape, params: ModelParams, prefix: str, x: Node,
           bias: bool = True) -> Node:
    """``x @ W`` plus the optional bias row, parameters ``prefix.W/.b``."""
    out = tape.matmul(x, tape.param(params, f'{prefix}.W'))
    if bias:
        out = tape.add(out, tape.param(params, f'{prefix}.b'))
    return out


def _distance_embedding(tape, params, name, distance, config):
    low, high, frac = distance_slots(distance, config.n_anchors, config.r0)
    return tape.lerp_rows(tape.param(params, name), low, high, frac)


def _bearing_embedding(tape, params, name, bearing, config):
    low, high, frac = bearing_slots(bearing, config.n_anchors)
    return tape.lerp_rows(tape.param(params, name), low, high, frac)


def f_tx(tape: Tape, params: ModelParams, config: EncoderConfig,
         position) -> Node:
    """Bias-free projection of the normalized transmitter coordinates."""
    x = tape.leaf(np.asarray(position, dtype=float).reshape(-1, 2) / config.r0)
    return linear(tape, params, 'enc.tx', x, bias=False)


def f_ref(tape: Tape, params: ModelParams, config: EncoderConfig,
          displacement, rss) -> Node:
    """
    Reference node embedding from its displacement to the transmitter and
    its standardized RSS.
    """
    displacement = np.asarray(displacement, dtype=float).reshape(-1, 2)
    rss = np.asarray(rss, dtype=float).reshape(-1, 1)
    position = linear(tape, params, 'enc.ref.pos',
                      tape.leaf(displacement / config.r0))
    power = linear(tape, params, 'enc.ref.rss', tape.leaf(rss))
    hidden = tape.tanh(linear(tape, params, 'enc.ref.fuse1',
                              tape.concat([position, power])))
    return tape.tanh(linear(tape, params, 'enc.ref.fuse2', hidden))


def f_edge_local(tape: Tape, params: ModelParams, config: EncoderConfig,
                 distance, bearing, target_los, reference_los) -> Node:
    """
    Page edge embedding.

    Parameters
    ----------
    distance, bearing : array of shape (n, 3)
        Columns are the ordered relations ``(t, r)``, ``(r, b)``, ``(t, b)``.
    target_los, reference_los : array of str
    """
    distance = np.asarray(distance, dtype=float).reshape(-1, 3)
    bearing = np.asarray(bearing, dtype=float).reshape(-1, 3)
    slots = []
    for column, relation in enumerate(RELATIONS):
        slots.append(_distance_embedding(
            tape, params, f'enc.edge_local.{relation}.dist',
            distance[:, column], config))
        slots.append(_bearing_embedding(
            tape, params, f'enc.edge_local.{relation}.bear',
            bearing[:, column], config))
    slots.append(los_embed(tape, params, target_los, reference_los))
    hidden = tape.tanh(linear(tape, params, 'enc.edge_local.fuse1',
                              tape.concat(slots)))
    return linear(tape, params, 'enc.edge_local.fuse2', hidden)


def f_edge_global(tape: Tape, params: ModelParams, config: EncoderConfig,
                  distance, bearing) -> Node:
    """Target to target edge embedding."""
    slots = [_distance_embedding(tape, params, 'enc.edge_global.dist',
                                 distance, config),
             _bearing_embedding(tape, params, 'enc.edge_global.bear',
                                bearing, config)]
    hidden = tape.tanh(linear(tape, params, 'enc.edge_global.fuse1',
                              tape.concat(slots)))
    return linear(tape, params, 'enc.edge_global.fuse2', hidden)


def dense_shapes(prefix: str, n_in: int, n_out: int,
                 bias: bool = True) -> dict[str, tuple[int, int]]:
    shapes = {f'{prefix}.W': (n_in, n_out)}
    if bias:
        shapes[f'{prefix}.b'] = (1, n_out)
    return shapes


def encoder_shapes(config: EncoderConfig) -> dict[str, tuple[int, int]]:
    """Name and shape of every encoder parameter."""
    width = config.slot_width
    shapes = {'enc.los': (len(LOS_STATES), width)}
    for relation in RELATIONS:
        shapes[f'enc.edge_local.{relation}.dist'] = (config.n_anchors, width)
        shapes[f'enc.edge_local.{relation}.bear'] = (config.n_anchors, width)
    shapes['enc.edge_global.dist'] = (config.n_anchors, width)
    shapes['enc.edge_global.bear'] = (config.n_anchors, width)
    shapes.update(dense_shapes('enc.tx', 2, config.d_model, bias=False))
    shapes.update(dense_shapes('enc.ref.pos', 2, config.branch_width))
    shapes.update(dense_shapes('enc.ref.rss', 1, config.branch_width))
    shapes.update(dense_shapes('enc.ref.fuse1', 2 * config.branch_width,
                               config.d_model))
    shapes.update(dense_shapes('enc.ref.fuse2', config.d_model,
                               config.d_model))
    shapes.update(dense_shapes('enc.edge_local.fuse1',
                               config.local_edge_inputs, config.edge_hidden))
    shapes.update(dense_shapes('enc.edge_local.fuse2', config.edge_hidden,
                               config.edge_width))
    shapes.update(dense_shapes('enc.edge_global.fuse1', 2 * width,
                               config.edge_hidden))
    shapes.update(dense_shapes('enc.edge_global.fuse2', config.edge_hidden,
                               config.edge_width))
    return shapes


def init_arrays(shapes: dict[str, tuple[int, int]], seed: int,
                zero: tuple[str, ...] = ()) -> dict[str, np.ndarray]:
    """
    Seeded initialization: biases and names in ``zero`` start at zero,
    codebooks and prototypes use their width as fan-in, weight matrices their
    input width.
    """
    arrays = {}
    for name, shape in shapes.items():
        if name.endswith('.b') or name in zero:
            arrays[name] = np.zeros(shape)
        else:
            table = name == 'enc.los' or name.endswith(('.dist', '.bear'))
            fan_in = shape[1] if table else shape[0]
            arrays[name] = init_params(shape, fan_in, name_seed(seed, name))
    return arrays


def init_encoder_params(config: EncoderConfig, seed: int,
                        params: Optional[ModelParams] = None) -> ModelParams:
    params = params if params is not None else ModelParams()
    for name, value in init_arrays(encoder_shapes(config), seed).items():
        params[name] = value
    return params
