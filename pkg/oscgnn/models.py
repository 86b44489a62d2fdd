"""
End-to-end oscillator GNNs: encoder, stacked stepper layers, decoder and
graph-level readout for the baseline, GraphCON, Kuramoto and Stuart-Landau
families.
"""
from __future__ import annotations

import logging
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from .couplings import CouplingGraphs, CouplingWeights, Features, prepare_graphs
from .errors import ContractError, DimensionError, PoolingError
from .graph import GraphBatch, SparseGraph
from .schemas import ModelConfig
from .solvers import OscillatorTensors, euler_skip_step, imex_sl_step, kuramoto_circle_step, symplectic_step
from .tensor import (
    ComplexMatrix,
    RealTensor,
    add,
    atan2,
    cos,
    hadamard,
    matmul,
    segment_max,
    segment_mean,
    sin,
    slice_cols,
)
from .utils.reproducibility import make_rng

logger = logging.getLogger(__name__)

State = Union[RealTensor, ComplexMatrix, Tuple[RealTensor, RealTensor]]


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int, name: str) -> RealTensor:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return RealTensor(rng.uniform(-limit, limit, size=(fan_in, fan_out)), requires_grad=True, name=name)


def _bias(width: int, name: str) -> RealTensor:
    return RealTensor(np.zeros((1, width)), requires_grad=True, name=name)


def dropout_apply(X: Features, p: float, training: bool, rng: Optional[np.random.Generator]) -> Features:
    """Inverted dropout; complex planes share one mask."""
    if not 0.0 <= p < 1.0:
        raise ContractError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return X
    if rng is None:
        raise ContractError("training-mode dropout needs a random generator")
    shape = X.shape
    mask = RealTensor._wrap((rng.random(shape) >= p) / (1.0 - p))
    if isinstance(X, ComplexMatrix):
        return ComplexMatrix(hadamard(X.re, mask), hadamard(X.im, mask))
    return hadamard(X, mask)


def readout(H: RealTensor, graph_ids: np.ndarray, num_graphs: int, mode: str = "mean") -> RealTensor:
    """Pool node rows into one row per graph."""
    ids = np.asarray(graph_ids, dtype=np.int64)
    if ids.shape[0] != H.rows:
        raise PoolingError("graph membership must cover every node", nodes=H.rows, ids=int(ids.shape[0]))
    counts = np.bincount(ids, minlength=num_graphs)
    if np.any(counts[:num_graphs] == 0):
        empty = int(np.argmax(counts[:num_graphs] == 0))
        raise PoolingError(f"graph {empty} has no nodes", graph=empty)
    if mode == "max":
        return segment_max(H, ids, num_graphs)
    return segment_mean(H, ids, num_graphs)


class OscillatorGNN:
    """Encoder, ``layers`` coupled stepper layers and a real affine decoder.

    Parameters live in ``params`` in a fixed order so checkpoints and
    optimizers see the same layout on every run.
    """

    def __init__(self, cfg: ModelConfig, in_dim: int, out_dim: int, seed: int = 0):
        self.cfg = cfg
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.seed = seed
        self.params: Dict[str, RealTensor] = {}
        self.oscillator: Optional[OscillatorTensors] = None
        self._graph_cache: Optional[Tuple[SparseGraph, Optional[np.ndarray], CouplingGraphs]] = None

        rng = make_rng(seed, "init")
        h = cfg.hidden_dim
        if cfg.family == "slgnn":
            self._add(_glorot(rng, in_dim, h, "enc.W_re"))
            self._add(_glorot(rng, in_dim, h, "enc.W_im"))
            self._add(_bias(h, "enc.b_re"))
            self._add(_bias(h, "enc.b_im"))
        elif cfg.family == "kuramoto":
            self._add(_glorot(rng, in_dim, 2 * h, "enc.W"))
            self._add(_bias(2 * h, "enc.b"))
        else:
            self._add(_glorot(rng, in_dim, h, "enc.W"))
            self._add(_bias(h, "enc.b"))

        complex_input = cfg.family in ("slgnn", "kuramoto")
        count = 1 if cfg.coupling.tied else cfg.layers
        self.couplings: List[CouplingWeights] = []
        for layer in range(count):
            weights = CouplingWeights.init(cfg.coupling, rng, complex_input=complex_input, prefix=f"layer{layer}.")
            for tensor in weights.params.values():
                self._add(tensor)
            self.couplings.append(weights)

        self._add(_glorot(rng, h, out_dim, "dec.W"))
        self._add(_bias(out_dim, "dec.b"))

        if cfg.train_oscillator and cfg.family == "slgnn":
            self.oscillator = OscillatorTensors.from_params(cfg.sl_params())
            for key in ("alpha", "beta", "omega", "gamma"):
                tensor = getattr(self.oscillator, key)
                tensor.name = f"osc.{key}"
                self._add(tensor)

        logger.debug("Built %s-%s with %d layers and %d parameter tensors", cfg.family, cfg.coupling.kind, cfg.layers, len(self.params))

    def _add(self, tensor: RealTensor) -> None:
        self.params[tensor.name] = tensor

    # -- parameters --------------------------------------------------------

    def parameters(self) -> List[RealTensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise ContractError("state dict does not match the model", missing=sorted(missing), unexpected=sorted(extra))
        for name, values in state.items():
            self.params[name].assign(values)

    def coupling_at(self, layer: int) -> CouplingWeights:
        return self.couplings[0 if self.cfg.coupling.tied else layer]

    # -- forward pass ------------------------------------------------------

    def _graphs(self, batch: GraphBatch) -> CouplingGraphs:
        cache = self._graph_cache
        if cache is None or cache[0] is not batch.graph or cache[1] is not batch.graph_ids:
            graphs = prepare_graphs(batch.graph, batch.graph_ids, batch.num_graphs)
            self._graph_cache = cache = (batch.graph, batch.graph_ids, graphs)
        return cache[2]

    def encode(self, X0: RealTensor) -> State:
        if X0.cols != self.in_dim:
            raise DimensionError(f"model expects {self.in_dim} input features, got {X0.cols}", expected=self.in_dim, got=X0.cols)
        family = self.cfg.family
        p = self.params
        if family == "slgnn":
            re = add(matmul(X0, p["enc.W_re"]), p["enc.b_re"])
            im = add(matmul(X0, p["enc.W_im"]), p["enc.b_im"])
            return ComplexMatrix(re, im)
        encoded = add(matmul(X0, p["enc.W"]), p["enc.b"])
        if family == "kuramoto":
            h = self.cfg.hidden_dim
            phase = atan2(slice_cols(encoded, h, 2 * h), slice_cols(encoded, 0, h))
            return ComplexMatrix(cos(phase), sin(phase))
        if family == "graphcon":
            return encoded, RealTensor._wrap(np.zeros(encoded.shape))
        return encoded

    def _layer(self, state: State, layer: int, graphs: CouplingGraphs, training: bool, rng) -> State:
        cfg = self.cfg
        coupling = self.coupling_at(layer)
        features = state[0] if cfg.family == "graphcon" else state
        F_out = dropout_apply(coupling(features, graphs), cfg.dropout, training, rng)
        if cfg.family == "slgnn":
            return imex_sl_step(state, F_out, cfg.sl_params(), cfg.step_config(), self.oscillator)
        if cfg.family == "kuramoto":
            return kuramoto_circle_step(state, F_out, cfg.omega, cfg.dt)
        if cfg.family == "graphcon":
            return symplectic_step(state[0], state[1], F_out, cfg.alpha, cfg.gamma, cfg.dt)
        return euler_skip_step(state, F_out, cfg.dt)

    def hidden(self, state: State) -> RealTensor:
        """Real node features handed to the decoder."""
        if isinstance(state, ComplexMatrix):
            return state.re
        if isinstance(state, tuple):
            return state[0]
        return state

    def decode(self, H: RealTensor) -> RealTensor:
        return add(matmul(H, self.params["dec.W"]), self.params["dec.b"])

    def forward(self, batch: GraphBatch, training: bool = False, rng: Optional[np.random.Generator] = None) -> RealTensor:
        """Node outputs, or one output row per graph when the batch carries membership."""
        graphs = self._graphs(batch)
        X0 = dropout_apply(batch.features, self.cfg.input_dropout, training, rng)
        state = self.encode(X0)
        for layer in range(self.cfg.layers):
            state = self._layer(state, layer, graphs, training, rng)
        H = self.hidden(state)
        if batch.graph_ids is not None:
            H = readout(H, batch.graph_ids, batch.num_graphs, self.cfg.readout)
        return self.decode(H)

    __call__ = forward

    def final_state(self, batch: GraphBatch) -> State:
        """Evaluation-mode state after the last layer, before decoding."""
        graphs = self._graphs(batch)
        state = self.encode(batch.features)
        for layer in range(self.cfg.layers):
            state = self._layer(state, layer, graphs, False, None)
        return state


def first_layer_grad_norm(model: OscillatorGNN) -> float:
    """Norm of the gradients on the first layer's coupling weights."""
    total = 0.0
    for tensor in model.coupling_at(0).params.values():
        if tensor.grad is not None:
            total += float(np.sum(tensor.grad ** 2))
    return float(np.sqrt(total))
