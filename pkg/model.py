"""
The toy classifier whose MLP rows are the neurons.

embed -> n_layers x (up, activation, down, residual add) -> mean over tokens -> head
"""

from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterator, NamedTuple, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

import tensor_engine as te
import utils
from constants import (
    EMBED,
    HEAD,
    NUMPY_DTYPES,
    TRACE_TOKEN_CAP,
    Activation,
    DType,
    Role,
    RoleOrder,
)
from errors import ConfigError, EmptyDatasetError, LabelRangeError, MaskError, TokenRangeError

# largest parameter count init_params will allocate
MAX_PARAMETERS = 1 << 28


class ModelConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    vocab_size: int = Field(ge=1)
    d_model: int = Field(ge=1)
    d_hidden: int = Field(ge=1)
    n_layers: int = Field(ge=1)
    n_classes: int = Field(ge=1)
    activation: Activation = Activation.SILU
    seed: int = Field(default=0, ge=0, lt=1 << 64)

    @classmethod
    def checked(cls, **fields) -> "ModelConfig":
        try:
            return cls(**fields)
        except ValidationError as e:
            first = e.errors()[0]
            raise ConfigError(f"invalid model config: {first['msg']} {first['loc']}") from None

    def same_shapes(self, other: "ModelConfig") -> bool:
        dims = ("vocab_size", "d_model", "d_hidden", "n_layers", "n_classes")
        return all(getattr(self, d) == getattr(other, d) for d in dims)

    def tensor_shapes(self) -> dict[str, tuple[int, int]]:
        shapes = {EMBED: (self.vocab_size, self.d_model)}
        for i in range(self.n_layers):
            shapes[f"up.{i}"] = (self.d_hidden, self.d_model)
            shapes[f"down.{i}"] = (self.d_model, self.d_hidden)
        shapes[HEAD] = (self.n_classes, self.d_model)
        return shapes

    def parameter_count(self) -> int:
        return sum(r * c for r, c in self.tensor_shapes().values())


class NeuronId(NamedTuple):
    layer: int
    role: Role
    row: int

    def key(self) -> tuple[int, int, int]:
        return (self.layer, RoleOrder[Role(self.role).name], self.row)

    def as_list(self) -> list:
        return [self.layer, str(self.role), self.row]


def sort_neurons(ids) -> tuple[NeuronId, ...]:
    return tuple(sorted(ids, key=NeuronId.key))


@dataclass(frozen=True)
class NeuronLayout:
    """Flat canonical index <-> NeuronId; index order is (layer, up<down, row) order"""

    config: ModelConfig

    @property
    def per_layer(self) -> int:
        return self.config.d_hidden + self.config.d_model

    @property
    def total(self) -> int:
        return self.config.n_layers * self.per_layer

    def group_size(self, role: Role) -> int:
        return self.config.d_hidden if role == Role.UP else self.config.d_model

    def index(self, nid: NeuronId) -> int:
        layer, role, row = nid
        try:
            role = Role(role)
        except ValueError:
            raise MaskError(f"unknown neuron role {role!r}") from None
        if not 0 <= layer < self.config.n_layers:
            raise MaskError(f"neuron {tuple(nid)}: layer out of range")
        if not 0 <= row < self.group_size(role):
            raise MaskError(f"neuron {tuple(nid)}: row out of range for role {role}")
        offset = 0 if role == Role.UP else self.config.d_hidden
        return layer * self.per_layer + offset + row

    def indices(self, ids: Sequence[NeuronId]) -> np.ndarray:
        return np.array([self.index(n) for n in ids], dtype=np.int64)

    def neuron(self, index: int) -> NeuronId:
        if not 0 <= index < self.total:
            raise MaskError(f"neuron index {index} out of range")
        layer, rest = divmod(int(index), self.per_layer)
        if rest < self.config.d_hidden:
            return NeuronId(layer, Role.UP, rest)
        return NeuronId(layer, Role.DOWN, rest - self.config.d_hidden)

    def neurons(self, indices: Sequence[int] | None = None) -> tuple[NeuronId, ...]:
        if indices is None:
            indices = range(self.total)
        return tuple(self.neuron(int(i)) for i in indices)

    def groups(self) -> Iterator[tuple[int, Role, slice]]:
        """(layer, role, flat slice) for every same-layer same-role group"""
        for layer in range(self.config.n_layers):
            base = layer * self.per_layer
            yield layer, Role.UP, slice(base, base + self.config.d_hidden)
            yield layer, Role.DOWN, slice(base + self.config.d_hidden, base + self.per_layer)

    @staticmethod
    def matrix_name(layer: int, role: Role) -> str:
        return f"{Role(role)}.{layer}"


@dataclass(frozen=True, eq=False)
class ParameterSet:
    config: ModelConfig
    tensors: dict[str, np.ndarray]

    def __post_init__(self):
        expected = self.config.tensor_shapes()
        if list(self.tensors) != list(expected):
            raise ConfigError(f"tensor names {list(self.tensors)} do not match config")
        for name, shape in expected.items():
            if self.tensors[name].shape != shape:
                raise ConfigError(
                    f"{name}: shape {self.tensors[name].shape} != expected {shape}"
                )
        for arr in self.tensors.values():
            arr.flags.writeable = False

    @cached_property
    def content_hash(self) -> str:
        return utils.hash_arrays(self.tensors.values())

    @property
    def dtype(self) -> DType:
        return DType.F64 if self.tensors[EMBED].dtype == np.float64 else DType.F32

    @property
    def embed(self) -> np.ndarray:
        return self.tensors[EMBED]

    @property
    def head(self) -> np.ndarray:
        return self.tensors[HEAD]

    def up(self, layer: int) -> np.ndarray:
        return self.tensors[f"up.{layer}"]

    def down(self, layer: int) -> np.ndarray:
        return self.tensors[f"down.{layer}"]

    def replace(self, **updates: np.ndarray) -> "ParameterSet":
        tensors = dict(self.tensors)
        for name, arr in updates.items():
            if name not in tensors:
                raise ConfigError(f"unknown tensor {name}")
            tensors[name] = arr
        return ParameterSet(self.config, tensors)


def init_params(config: ModelConfig, dtype: DType = DType.F32) -> ParameterSet:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights from a generator seeded by config.seed"""
    if config.parameter_count() > MAX_PARAMETERS:
        raise ConfigError(
            f"{config.parameter_count()} parameters exceeds the {MAX_PARAMETERS} limit"
        )
    rng = np.random.default_rng(config.seed)
    np_dtype = np.dtype(NUMPY_DTYPES[DType(dtype)])
    tensors = {}
    for name, (rows, fan_in) in config.tensor_shapes().items():
        bound = 1.0 / np.sqrt(fan_in)
        tensors[name] = rng.uniform(-bound, bound, size=(rows, fan_in)).astype(np_dtype)
    return ParameterSet(config, tensors)


@dataclass(frozen=True, eq=False)
class Batch:
    """Ragged token sequences flattened row-wise; segments[i] is the example of token i"""

    tokens: np.ndarray
    segments: np.ndarray
    size: int
    labels: np.ndarray | None = None
    indices: tuple[int, ...] = ()


def make_batch(sequences, labels=None, indices: Sequence[int] = ()) -> Batch:
    if isinstance(sequences, np.ndarray) and sequences.ndim == 2:
        sequences = list(sequences)
    if len(sequences) == 0:
        raise EmptyDatasetError("batch is empty")
    lengths = [len(s) for s in sequences]
    if min(lengths) == 0:
        raise EmptyDatasetError(f"example {lengths.index(0)} has no tokens")
    tokens = np.concatenate([np.asarray(s, dtype=np.int64) for s in sequences])
    segments = np.repeat(np.arange(len(sequences), dtype=np.int64), lengths)
    y = None if labels is None else np.asarray(labels, dtype=np.int64)
    return Batch(tokens, segments, len(sequences), y, tuple(indices))


def check_tokens(batch: Batch, vocab_size: int):
    bad = np.flatnonzero((batch.tokens < 0) | (batch.tokens >= vocab_size))
    if bad.size:
        i = int(bad[0])
        example = int(batch.segments[i])
        position = i - int(np.searchsorted(batch.segments, example))
        raise TokenRangeError(
            f"token id {int(batch.tokens[i])} at example {example}, position {position} "
            f"is not below vocab_size {vocab_size}"
        )


@dataclass(frozen=True, eq=False)
class Dataset:
    sequences: tuple[np.ndarray, ...]
    labels: np.ndarray
    dataset_hash: str = ""

    def __post_init__(self):
        if not self.dataset_hash:
            object.__setattr__(self, "dataset_hash", utils.fnv1a_64(self.to_jsonl()))

    @classmethod
    def from_records(cls, sequences, labels) -> "Dataset":
        seqs = tuple(np.asarray(s, dtype=np.int64) for s in sequences)
        return cls(seqs, np.asarray(labels, dtype=np.int64))

    def __len__(self) -> int:
        return len(self.sequences)

    def to_jsonl(self) -> bytes:
        return b"".join(
            utils.dumps({"label": int(y), "tokens": s.tolist()}) + b"\n"
            for s, y in zip(self.sequences, self.labels)
        )

    def batch(self, indices: Sequence[int]) -> Batch:
        idx = [int(i) for i in indices]
        return make_batch([self.sequences[i] for i in idx], self.labels[idx], idx)

    def batches(self, batch_size: int) -> Iterator[Batch]:
        for start in range(0, len(self), batch_size):
            yield self.batch(range(start, min(start + batch_size, len(self))))

    def validate(self, config: ModelConfig):
        if len(self) == 0:
            raise EmptyDatasetError("dataset has no examples")
        for i, seq in enumerate(self.sequences):
            if seq.size == 0:
                raise EmptyDatasetError(f"example {i} has no tokens")
            bad = np.flatnonzero((seq < 0) | (seq >= config.vocab_size))
            if bad.size:
                p = int(bad[0])
                raise TokenRangeError(
                    f"token id {int(seq[p])} at example {i}, position {p} "
                    f"is not below vocab_size {config.vocab_size}"
                )
        bad = np.flatnonzero((self.labels < 0) | (self.labels >= config.n_classes))
        if bad.size:
            i = int(bad[0])
            raise LabelRangeError(
                f"label {int(self.labels[i])} at example {i} not in [0, {config.n_classes})"
            )


@dataclass(frozen=True, eq=False)
class ActivationTrace:
    """samples[t, j]: activation of canonical neuron j on sampled token t"""

    config: ModelConfig
    samples: np.ndarray
    dataset_hash: str = ""
    params_hash: str = ""
    trace_hash: str = field(default="", compare=False)

    def __post_init__(self):
        layout = NeuronLayout(self.config)
        if self.samples.ndim != 2 or self.samples.shape[1] != layout.total:
            raise ConfigError(
                f"trace shape {self.samples.shape} does not cover {layout.total} neurons"
            )
        if not self.trace_hash:
            object.__setattr__(self, "trace_hash", utils.hash_arrays([self.samples]))

    @property
    def token_count(self) -> int:
        return self.samples.shape[0]


def _as_batch(batch) -> Batch:
    return batch if isinstance(batch, Batch) else make_batch(batch)


def _run(params: ParameterSet, batch: Batch, leaves, record: bool, pooled: bool):
    config = params.config
    check_tokens(batch, config.vocab_size)
    w = leaves or {name: te.Tensor(arr) for name, arr in params.tensors.items()}

    h = te.gather_rows(w[EMBED], batch.tokens)
    columns, states = [], []
    for layer in range(config.n_layers):
        if pooled:
            states.append(te.segment_mean(h, batch.segments, batch.size).data)
        a = te.activation(te.matmul(h, te.transpose(w[f"up.{layer}"])), config.activation)
        out = te.matmul(a, te.transpose(w[f"down.{layer}"]))
        if record:
            columns += [a.data, out.data]
        h = te.add(h, out)
    pooled_h = te.segment_mean(h, batch.segments, batch.size)
    if pooled:
        states.append(pooled_h.data)
    logits = te.matmul(pooled_h, te.transpose(w[HEAD]))
    samples = np.concatenate(columns, axis=1) if record else None
    return logits, samples, states


def forward(
    params: ParameterSet,
    batch,
    record: bool = False,
    leaves: dict[str, te.Tensor] | None = None,
) -> tuple[te.Tensor, ActivationTrace | None]:
    """
    Logits for a batch, optionally with the per-neuron activation trace.

    Up neuron r emits act(up[l][r] . h_token); down neuron r emits
    (down[l] . a)[r] before the residual add. Pass `leaves` (tape-watched
    tensors keyed by name) to differentiate through the pass.
    """
    batch = _as_batch(batch)
    logits, samples, _ = _run(params, batch, leaves, record, pooled=False)
    trace = None
    if record:
        trace = ActivationTrace(params.config, samples, params_hash=params.content_hash)
    return logits, trace


def loss(logits: te.Tensor, labels) -> te.Tensor:
    return te.softmax_cross_entropy(logits, labels)


def pooled_hidden_states(params: ParameterSet, batch) -> list[np.ndarray]:
    """Token-averaged residual stream: entry l feeds block l, the last entry feeds the head"""
    _, _, states = _run(params, _as_batch(batch), None, record=False, pooled=True)
    return states


def dataset_hidden_states(
    params: ParameterSet, dataset: Dataset, layer: int, batch_size: int = 64
) -> np.ndarray:
    if not 0 <= layer <= params.config.n_layers:
        raise ConfigError(f"hidden-state layer {layer} not in [0, {params.config.n_layers}]")
    return np.concatenate(
        [pooled_hidden_states(params, b)[layer] for b in dataset.batches(batch_size)]
    )


def collect_trace(
    params: ParameterSet,
    dataset: Dataset,
    batch_size: int = 64,
    max_tokens: int = TRACE_TOKEN_CAP,
    seed: int = 0,
) -> ActivationTrace:
    """Trace every token of the dataset, then keep a seeded uniform subsample of max_tokens"""
    dataset.validate(params.config)
    parts = [forward(params, b, record=True)[1].samples for b in dataset.batches(batch_size)]
    samples = np.concatenate(parts)
    if samples.shape[0] > max_tokens:
        rng = np.random.default_rng(seed)
        keep = np.sort(rng.choice(samples.shape[0], size=max_tokens, replace=False))
        samples = samples[keep]
    return ActivationTrace(
        params.config,
        np.ascontiguousarray(samples),
        dataset_hash=dataset.dataset_hash,
        params_hash=params.content_hash,
    )
