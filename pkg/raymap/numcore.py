"""
Dense reverse-mode differentiation on 2-D float64 numpy arrays.

A :class:`Tape` records every primitive as a :class:`Node` in creation order,
which is a topological order, so the backward pass is a single reverse sweep.
Parameters live in :class:`ModelParams` and enter a tape through
:meth:`Tape.param`; :func:`grad` returns their gradients keyed by name.
"""
from __future__ import annotations

import contextlib
import dataclasses
import logging
import zlib
from pathlib import Path
from typing import Callable, Iterable, Iterator, Optional, Sequence

import numpy as np
from scipy.special import expit

from .utils import (CheckpointError, InvalidArgument, canonical_json,
                    read_json)

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
LEAKY_SLOPE = 0.2


class Node:
    """One recorded value with its gradient slot and backward rule."""
    __slots__ = ('value', 'grad', 'parents', 'backward', 'op', 'name')

    def __init__(self, value: np.ndarray, parents: tuple = (),
                 backward: Optional[Callable] = None, op: str = 'leaf',
                 name: Optional[str] = None):
        self.value = value
        self.grad = None
        self.parents = parents
        self.backward = backward
        self.op = op
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def accumulate(self, grad: np.ndarray):
        if self.grad is None:
            self.grad = np.array(grad, dtype=float, copy=True)
        else:
            self.grad += grad

    def __repr__(self):
        return f'<Node {self.op} {self.name or ""} shape={self.shape}>'


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tape:
    """
    Recorder of primitive operations.

    Attributes
    ----------
    nodes : list of Node
        In creation order.
    n_ops : int
        Number of recorded primitives, leaves excluded.
    work : int
        Scalar multiply-adds (matmul) or elements touched (others).
    """
    def __init__(self):
        self.nodes: list[Node] = []
        self.n_ops = 0
        self.work = 0
        self._params: dict[str, Node] = {}

    def _record(self, value, parents, backward, op, work=None) -> Node:
        node = Node(value, parents, backward, op)
        self.nodes.append(node)
        self.n_ops += 1
        self.work += int(value.size if work is None else work)
        return node

    def leaf(self, value, name: Optional[str] = None) -> Node:
        """A constant input, promoted to a 2-D float array."""
        value = np.asarray(value, dtype=float)
        if value.ndim == 0:
            value = value.reshape(1, 1)
        elif value.ndim == 1:
            value = value.reshape(1, -1)
        node = Node(value, name=name)
        self.nodes.append(node)
        return node

    def param(self, params: ModelParams, name: str) -> Node:
        """The leaf of parameter ``name``, created once per tape."""
        if name not in self._params:
            self._params[name] = self.leaf(params[name], name=name)
        return self._params[name]

    @property
    def param_nodes(self) -> dict[str, Node]:
        return dict(self._params)

    # Linear algebra
    def matmul(self, a: Node, b: Node) -> Node:
        def backward(out):
            a.accumulate(out.grad @ b.value.T)
            b.accumulate(a.value.T @ out.grad)
        m, k = a.shape
        return self._record(a.value @ b.value, (a, b), backward, 'matmul',
                            work=m * k * b.shape[1])

    def add(self, a: Node, b: Node) -> Node:
        def backward(out):
            a.accumulate(_unbroadcast(out.grad, a.shape))
            b.accumulate(_unbroadcast(out.grad, b.shape))
        return self._record(a.value + b.value, (a, b), backward, 'add')

    def sub(self, a: Node, b: Node) -> Node:
        def backward(out):
            a.accumulate(_unbroadcast(out.grad, a.shape))
            b.accumulate(-_unbroadcast(out.grad, b.shape))
        return self._record(a.value - b.value, (a, b), backward, 'sub')

    def mul(self, a: Node, b: Node) -> Node:
        def backward(out):
            a.accumulate(_unbroadcast(out.grad * b.value, a.shape))
            b.accumulate(_unbroadcast(out.grad * a.value, b.shape))
        return self._record(a.value * b.value, (a, b), backward, 'mul')

    def scale(self, a: Node, factor: float) -> Node:
        def backward(out):
            a.accumulate(factor * out.grad)
        return self._record(factor * a.value, (a,), backward, 'scale')

    def concat(self, nodes: Sequence[Node]) -> Node:
        """Column-wise concatenation."""
        nodes = tuple(nodes)
        edges = np.cumsum([0] + [node.shape[1] for node in nodes])

        def backward(out):
            for node, start, stop in zip(nodes, edges[:-1], edges[1:]):
                node.accumulate(out.grad[:, start:stop])
        value = np.concatenate([node.value for node in nodes], axis=1)
        return self._record(value, nodes, backward, 'concat')

    def slice_cols(self, a: Node, start: int, stop: int) -> Node:
        def backward(out):
            grad = np.zeros_like(a.value)
            grad[:, start:stop] = out.grad
            a.accumulate(grad)
        return self._record(a.value[:, start:stop].copy(), (a,), backward,
                            'slice')

    def take_rows(self, a: Node, rows: np.ndarray) -> Node:
        """Gather rows; repeated indices are allowed."""
        rows = np.asarray(rows, dtype=np.intp)

        def backward(out):
            grad = np.zeros_like(a.value)
            np.add.at(grad, rows, out.grad)
            a.accumulate(grad)
        return self._record(a.value[rows], (a,), backward, 'take')

    # Nonlinearities
    def tanh(self, a: Node) -> Node:
        value = np.tanh(a.value)

        def backward(out):
            a.accumulate(out.grad * (1.0 - value * value))
        return self._record(value, (a,), backward, 'tanh')

    def leaky_relu(self, a: Node, slope: float = LEAKY_SLOPE) -> Node:
        positive = a.value > 0.0

        def backward(out):
            a.accumulate(np.where(positive, out.grad, slope * out.grad))
        return self._record(np.where(positive, a.value, slope * a.value),
                            (a,), backward, 'leaky_relu')

    def sigmoid(self, a: Node) -> Node:
        value = expit(a.value)

        def backward(out):
            a.accumulate(out.grad * value * (1.0 - value))
        return self._record(value, (a,), backward, 'sigmoid')

    # Grouped attention
    def segment_softmax(self, scores: Node, segments: np.ndarray,
                        n_segments: int) -> Node:
        """
        Softmax of the ``(n, 1)`` scores within each segment.

        ``segments[i]`` is the segment id of row ``i``; segments may be
        empty.
        """
        segments = np.asarray(segments, dtype=np.intp)
        s = scores.value[:, 0]
        peak = np.full(n_segments, -np.inf)
        np.maximum.at(peak, segments, s)
        expo = np.exp(s - peak[segments])
        total = np.zeros(n_segments)
        np.add.at(total, segments, expo)
        prob = (expo / total[segments])[:, None]

        def backward(out):
            weighted = np.zeros(n_segments)
            np.add.at(weighted, segments, prob[:, 0] * out.grad[:, 0])
            scores.accumulate(prob * (out.grad - weighted[segments][:, None]))
        return self._record(prob, (scores,), backward, 'segment_softmax')

    def segment_sum(self, values: Node, weights: Node, segments: np.ndarray,
                    n_segments: int) -> Node:
        """``out[s] = sum of weights[i] * values[i] over rows i in s``."""
        segments = np.asarray(segments, dtype=np.intp)
        result = np.zeros((n_segments, values.shape[1]))
        np.add.at(result, segments, weights.value * values.value)

        def backward(out):
            upstream = out.grad[segments]
            values.accumulate(weights.value * upstream)
            weights.accumulate((values.value * upstream).sum(axis=1,
                                                             keepdims=True))
        return self._record(result, (values, weights), backward,
                            'segment_sum', work=values.value.size)

    def lerp_rows(self, table: Node, low: np.ndarray, high: np.ndarray,
                  frac: np.ndarray) -> Node:
        """
        ``(1 - frac) * table[low] + frac * table[high]`` row by row.
        """
        low = np.asarray(low, dtype=np.intp)
        high = np.asarray(high, dtype=np.intp)
        frac = np.asarray(frac, dtype=float).reshape(-1, 1)
        value = (1.0 - frac) * table.value[low] + frac * table.value[high]

        def backward(out):
            grad = np.zeros_like(table.value)
            np.add.at(grad, low, (1.0 - frac) * out.grad)
            np.add.at(grad, high, frac * out.grad)
            table.accumulate(grad)
        return self._record(value, (table,), backward, 'lerp')

    # Reductions and losses
    def sum(self, a: Node) -> Node:
        def backward(out):
            a.accumulate(np.full(a.shape, out.grad[0, 0]))
        return self._record(np.array([[a.value.sum()]]), (a,), backward,
                            'sum', work=a.value.size)

    def mean(self, a: Node) -> Node:
        return self.scale(self.sum(a), 1.0 / a.value.size)

    def huber(self, pred: Node, target, delta: float = 1.0) -> Node:
        """Elementwise Huber loss of ``pred - target``."""
        if delta <= 0:
            raise InvalidArgument(f'huber delta must be positive, got {delta}')
        target = np.asarray(target, dtype=float).reshape(pred.shape)
        residual = pred.value - target
        small = np.abs(residual) <= delta
        value = np.where(small, 0.5 * residual * residual,
                         delta * (np.abs(residual) - 0.5 * delta))

        def backward(out):
            slope = np.where(small, residual, delta * np.sign(residual))
            pred.accumulate(out.grad * slope)
        return self._record(value, (pred,), backward, 'huber')

    def backward(self, root: Node):
        """Reverse sweep from the scalar ``root``."""
        if root.value.size != 1:
            raise InvalidArgument(
                f'grad needs a scalar output, got shape {root.shape}')
        if not np.all(np.isfinite(root.value)):
            raise InvalidArgument('grad needs a finite output')
        for node in self.nodes:
            node.grad = None
        root.grad = np.ones_like(root.value)
        for node in reversed(self.nodes):
            if node.backward is not None and node.grad is not None:
                node.backward(node)


def huber(pred: float, target: float, delta: float = 1.0) -> float:
    """Scalar Huber loss, ``0.5 r^2`` inside ``delta`` and linear outside."""
    if delta <= 0:
        raise InvalidArgument(f'huber delta must be positive, got {delta}')
    r = abs(pred - target)
    return 0.5 * r * r if r <= delta else delta * (r - 0.5 * delta)


def grad(tape: Tape, root: Node) -> dict[str, np.ndarray]:
    """
    Gradients of the scalar ``root`` with respect to every parameter used on
    ``tape``.
    """
    tape.backward(root)
    return {name: (node.grad if node.grad is not None
                   else np.zeros_like(node.value))
            for name, node in sorted(tape.param_nodes.items())}


class ModelParams:
    """
    Named trainable arrays.

    Parameters
    ----------
    arrays : dict, optional
        Name to array; copied into fresh float64 arrays.
    """
    def __init__(self, arrays: Optional[dict[str, np.ndarray]] = None):
        self._arrays: dict[str, np.ndarray] = {}
        for name, value in (arrays or {}).items():
            self[name] = value

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self._arrays[name]
        except KeyError:
            raise InvalidArgument(f'No parameter named {name!r}') from None

    def __setitem__(self, name: str, value):
        value = np.array(value, dtype=float)
        if value.ndim != 2:
            raise InvalidArgument(f'Parameter {name!r} must be 2-D, got '
                                  f'shape {value.shape}')
        self._arrays[name] = value

    def __contains__(self, name: str) -> bool:
        return name in self._arrays

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self._arrays))

    def __len__(self):
        return len(self._arrays)

    def items(self):
        return [(name, self._arrays[name]) for name in self]

    def names(self, prefix: str = '') -> list[str]:
        return [name for name in self if name.startswith(prefix)]

    @property
    def size(self) -> int:
        return sum(value.size for value in self._arrays.values())

    def copy(self) -> ModelParams:
        return ModelParams({name: value.copy() for name, value in self.items()})

    def update(self, other: ModelParams):
        for name, value in other.items():
            self[name] = value

    def subset(self, prefixes: Iterable[str]) -> ModelParams:
        prefixes = tuple(prefixes)
        return ModelParams({name: value for name, value in self.items()
                            if name.startswith(prefixes)})

    @contextlib.contextmanager
    def frozen(self, prefixes: Iterable[str]):
        """Make the matching arrays read-only for the duration."""
        prefixes = tuple(prefixes)
        locked = [value for name, value in self.items()
                  if name.startswith(prefixes)]
        for value in locked:
            value.setflags(write=False)
        try:
            yield self
        finally:
            for value in locked:
                value.setflags(write=True)

    def equal(self, other: ModelParams) -> bool:
        """Bitwise equality of names, shapes and values."""
        return (list(self) == list(other)
                and all(np.array_equal(self[name], other[name])
                        for name in self))

    def to_document(self, kind: str, meta: Optional[dict] = None) -> dict:
        return {
            'version': CHECKPOINT_VERSION,
            'kind': kind,
            'meta': meta or {},
            'params': {name: {'shape': list(value.shape),
                              'values': value.ravel().tolist()}
                       for name, value in self.items()},
        }

    @classmethod
    def from_document(cls, document: dict) -> tuple[ModelParams, str, dict]:
        if not isinstance(document, dict):
            raise CheckpointError('Checkpoint is not a JSON object')
        version = document.get('version')
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f'Unsupported checkpoint version {version!r}')
        try:
            arrays = {
                name: np.asarray(entry['values'], dtype=float).reshape(
                    entry['shape'])
                for name, entry in document['params'].items()}
        except (KeyError, TypeError, ValueError) as ex:
            raise CheckpointError(f'Malformed checkpoint: {ex!r}') from ex
        return cls(arrays), document.get('kind', ''), document.get('meta', {})


def save_checkpoint(path: str | Path, params: ModelParams, kind: str,
                    meta: Optional[dict] = None) -> Path:
    """Write ``params`` as a versioned JSON document."""
    path = Path(path)
    path.write_text(canonical_json(params.to_document(kind, meta)) + '\n')
    logger.info('Saved %s checkpoint with %d arrays to %s', kind, len(params),
                path)
    return path


def load_checkpoint(path: str | Path) -> tuple[ModelParams, str, dict]:
    """
    Returns
    -------
    params : ModelParams
    kind : str
    meta : dict
    """
    try:
        document = read_json(path)
    except ValueError as ex:
        raise CheckpointError(f'{path} is not valid JSON: {ex}') from ex
    return ModelParams.from_document(document)


@dataclasses.dataclass
class AdamState:
    """First and second moments per parameter name and the step count."""
    m: dict[str, np.ndarray] = dataclasses.field(default_factory=dict)
    v: dict[str, np.ndarray] = dataclasses.field(default_factory=dict)
    step: int = 0

    @classmethod
    def zeros(cls, params: ModelParams,
              names: Optional[Iterable[str]] = None) -> AdamState:
        names = list(params) if names is None else sorted(names)
        return cls(m={name: np.zeros_like(params[name]) for name in names},
                   v={name: np.zeros_like(params[name]) for name in names})


def adam_step(params: ModelParams, grads: dict[str, np.ndarray],
              state: AdamState, lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8
              ) -> tuple[ModelParams, AdamState]:
    """
    One bias-corrected Adam update of the parameters tracked by ``state``.

    Parameters are updated in place; a tracked parameter without a gradient
    entry sees a zero gradient.
    """
    for name, g in grads.items():
        if name not in state.m:
            raise InvalidArgument(f'Gradient for untracked parameter {name!r}')
        if np.shape(g) != params[name].shape:
            raise InvalidArgument(
                f'Gradient shape {np.shape(g)} does not match parameter '
                f'{name!r} of shape {params[name].shape}')
    state.step += 1
    correct1 = 1.0 - beta1 ** state.step
    correct2 = 1.0 - beta2 ** state.step
    for name in sorted(state.m):
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(state.m[name])
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        value = params[name]
        value -= lr * (m / correct1) / (np.sqrt(v / correct2) + eps)
    return params, state


def init_params(shape: Sequence[int], fan_in: int, seed) -> np.ndarray:
    """
    Seeded uniform draw in ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]``.

    ``seed`` is anything ``numpy.random.default_rng`` accepts.
    """
    if fan_in < 1:
        raise InvalidArgument(f'fan_in must be positive, got {fan_in}')
    bound = 1.0 / np.sqrt(fan_in)
    return np.random.default_rng(seed).uniform(-bound, bound, size=tuple(shape))


def name_seed(seed: int, name: str) -> list[int]:
    """Per-parameter seed sequence, stable across runs and platforms."""
    return [int(seed), zlib.crc32(name.encode('utf-8'))]


def finite_diff_check(loss_fn: Callable[[Tape, ModelParams], Node],
                      params: ModelParams, h: float = 1e-5,
                      names: Optional[Iterable[str]] = None,
                      max_coords: int = 24, seed: int = 0,
                      floor: float = 1e-3,
                      analytic: Optional[dict[str, np.ndarray]] = None
                      ) -> float:
    """
    Largest relative disagreement between :func:`grad` and central
    differences.

    Parameters
    ----------
    loss_fn : callable
        ``loss_fn(tape, params)`` records the loss and returns its scalar
        node.
    params : ModelParams
        Perturbed in place and restored.
    h : float
        Difference step.
    names : iterable of str, optional
        Parameters to check; all of them by default.
    max_coords : int
        Coordinates perturbed per array, drawn with ``seed`` for larger arrays.
    floor : float
        Lower bound of the denominator ``max(|a|, |n|, floor)``.
    analytic : dict, optional
        Gradients to test instead of those computed here.

    Returns
    -------
    float
    """
    if h <= 0:
        raise InvalidArgument(f'h must be positive, got {h}')
    if analytic is None:
        tape = Tape()
        analytic = grad(tape, loss_fn(tape, params))
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name in (sorted(names) if names is not None else list(params)):
        value = params[name]
        flat = value.reshape(-1)
        if flat.size <= max_coords:
            coords = np.arange(flat.size)
        else:
            coords = np.sort(rng.choice(flat.size, size=max_coords,
                                        replace=False))
        exact = analytic.get(name, np.zeros_like(value)).reshape(-1)
        for coord in coords:
            saved = flat[coord]
            flat[coord] = saved + h
            plus = loss_fn(Tape(), params).value[0, 0]
            flat[coord] = saved - h
            minus = loss_fn(Tape(), params).value[0, 0]
            flat[coord] = saved
            numeric = (plus - minus) / (2.0 * h)
            error = abs(exact[coord] - numeric) / max(abs(exact[coord]),
                                                      abs(numeric), floor)
            worst = max(worst, error)
    logger.debug('Finite difference check: max relative error %.3g', worst)
    return worst
