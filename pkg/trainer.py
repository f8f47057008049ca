"""
Mini-batch training with neuron-level gradient masking.

Gradients of rows outside the trainable set are zeroed before the
optimizer sees them, so frozen rows keep their initial bytes and Adam
moments for them stay at zero.
"""

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

import tensor_engine as te
from constants import (
    ADAM_BETA1,
    ADAM_BETA2,
    ADAM_EPS,
    DEFAULT_LEARNING_RATE,
    EMBED,
    HEAD,
    OptimizerKind,
    Regime,
)
from errors import ConfigError, EmptyDatasetError, MaskError, NonFiniteLossError
from model import (
    Dataset,
    ModelConfig,
    NeuronLayout,
    ParameterSet,
    forward,
    loss,
)
from selector import NeuronMask
from state import EvalResult, TrainStep


class TrainOptions(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    max_steps: int = Field(ge=1)
    batch_size: int = Field(default=16, ge=1)
    learning_rate: float = Field(default=DEFAULT_LEARNING_RATE, ge=0)
    optimizer: OptimizerKind = OptimizerKind.ADAM
    beta1: float = Field(default=ADAM_BETA1, ge=0, lt=1)
    beta2: float = Field(default=ADAM_BETA2, ge=0, lt=1)
    eps: float = Field(default=ADAM_EPS, gt=0)
    seed: int = Field(default=0, ge=0, lt=1 << 64)
    shuffle: bool = True
    epochs: int | None = Field(default=None, ge=1)

    @classmethod
    def checked(cls, **fields) -> "TrainOptions":
        try:
            return cls(**fields)
        except ValidationError as e:
            first = e.errors()[0]
            raise ConfigError(f"invalid train options: {first['msg']} {first['loc']}") from None

    def total_steps(self, n_examples: int) -> int:
        per_epoch = math.ceil(n_examples / self.batch_size)
        epochs = self.epochs or math.ceil(self.max_steps / per_epoch)
        return min(self.max_steps, epochs * per_epoch)


@dataclass
class TrainLog:
    steps: list[TrainStep] = field(default_factory=list)
    evals: list[EvalResult] = field(default_factory=list)
    regime: Regime = Regime.FULL
    trainable: int = 0
    best_step: int | None = None
    best_eval_loss: float | None = None

    def to_lines(self) -> list[str]:
        return [f"step={s['step']} loss={s['loss']!r}" for s in self.steps]

    @property
    def initial_loss(self) -> float:
        return self.steps[0]["loss"]

    @property
    def final_loss(self) -> float:
        return self.steps[-1]["loss"]

    def summary(self) -> dict:
        final_eval = self.evals[-1] if self.evals else None
        return {
            "steps": len(self.steps),
            "regime": str(self.regime),
            "trainable": self.trainable,
            "initial_loss": self.initial_loss if self.steps else None,
            "final_loss": self.final_loss if self.steps else None,
            "eval": final_eval,
            "best_step": self.best_step,
            "best_eval_loss": self.best_eval_loss,
        }


def _shape_config(tensors: dict[str, np.ndarray]) -> ModelConfig:
    """Recover model dims from a name -> array map"""
    vocab, d_model = tensors[EMBED].shape
    n_layers = sum(1 for name in tensors if name.startswith("up."))
    return ModelConfig(
        vocab_size=vocab,
        d_model=d_model,
        d_hidden=tensors["up.0"].shape[0],
        n_layers=n_layers,
        n_classes=tensors[HEAD].shape[0],
    )


def _row_gates(
    config: ModelConfig,
    regime: Regime,
    mask: NeuronMask | None,
    unfreeze_embed_head: bool,
) -> dict[str, np.ndarray | bool]:
    """Per tensor: True (all rows train), False (frozen) or a boolean row vector"""
    layout = NeuronLayout(config)
    names = list(config.tensor_shapes())
    if regime == Regime.FULL:
        return {name: True for name in names}
    if regime == Regime.EMBED:
        return {name: name == EMBED for name in names}

    gates: dict[str, np.ndarray | bool] = {name: unfreeze_embed_head for name in names}
    if regime == Regime.MLP:
        for layer, role, _ in layout.groups():
            gates[layout.matrix_name(layer, role)] = True
        return gates

    flat = np.zeros(layout.total, dtype=bool)
    flat[mask.indices(layout)] = True
    for layer, role, span in layout.groups():
        gates[layout.matrix_name(layer, role)] = flat[span]
    return gates


def _gate(g: np.ndarray, gate: np.ndarray | bool) -> np.ndarray:
    if gate is True:
        return g
    out = np.zeros_like(g)
    if gate is not False:
        out[gate] = g[gate]
    return out


def apply_gradient_mask(
    grads: dict[str, np.ndarray],
    mask: NeuronMask,
    unfreeze_embed_head: bool = False,
) -> dict[str, np.ndarray]:
    """
    Keep masked up/down rows bit-exactly and zero everything else.

    Embed and head gradients are zeroed unless unfreeze_embed_head is set.
    """
    config = _shape_config(grads)
    gates = _row_gates(config, Regime.NEFT, mask, unfreeze_embed_head)
    return {name: _gate(g, gates[name]) for name, g in grads.items()}


def resolve_regime(regime: Regime | None, mask: NeuronMask | None) -> Regime:
    if regime is None:
        return Regime.NEFT if mask is not None else Regime.FULL
    regime = Regime(regime)
    if regime == Regime.NEFT and mask is None:
        raise MaskError("regime 'neft' needs a neuron mask")
    if regime != Regime.NEFT and mask is not None:
        raise ConfigError(f"regime '{regime}' does not take a neuron mask")
    return regime


def count_trainable(
    config: ModelConfig,
    mask: NeuronMask | None = None,
    regime: Regime | None = None,
    unfreeze_embed_head: bool = False,
) -> dict:
    """Trainable scalar count under a regime, and its share of all parameters"""
    regime = resolve_regime(regime, mask)
    gates = _row_gates(config, regime, mask, unfreeze_embed_head)
    shapes = config.tensor_shapes()
    trainable = 0
    for name, (rows, cols) in shapes.items():
        gate = gates[name]
        if gate is True:
            trainable += rows * cols
        elif gate is not False:
            trainable += int(gate.sum()) * cols
    total = config.parameter_count()
    return {
        "regime": str(regime),
        "trainable": trainable,
        "total": total,
        "fraction": trainable / total,
    }


class SGD:
    def __init__(self, opts: TrainOptions):
        self.lr = opts.learning_rate

    def tick(self):
        pass

    def update(self, name: str, p: np.ndarray, g: np.ndarray) -> np.ndarray:
        return p - self.lr * g


class Adam:
    def __init__(self, opts: TrainOptions):
        self.lr = opts.learning_rate
        self.beta1 = opts.beta1
        self.beta2 = opts.beta2
        self.eps = opts.eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def tick(self):
        self.t += 1

    def update(self, name: str, p: np.ndarray, g: np.ndarray) -> np.ndarray:
        m = self.m.get(name, np.zeros_like(p))
        v = self.v.get(name, np.zeros_like(p))
        m = self.beta1 * m + (1 - self.beta1) * g
        v = self.beta2 * v + (1 - self.beta2) * (g * g)
        self.m[name], self.v[name] = m, v
        m_hat = m / (1 - self.beta1**self.t)
        v_hat = v / (1 - self.beta2**self.t)
        return p - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(opts: TrainOptions) -> SGD | Adam:
    if opts.optimizer == OptimizerKind.SGD:
        return SGD(opts)
    return Adam(opts)


def evaluate(params: ParameterSet, dataset: Dataset, batch_size: int = 64) -> tuple[float, float]:
    """(mean cross-entropy, argmax accuracy) over the whole dataset"""
    dataset.validate(params.config)
    total_loss, correct = 0.0, 0
    for batch in dataset.batches(batch_size):
        logits, _ = forward(params, batch)
        total_loss += loss(logits, batch.labels).item() * batch.size
        correct += int(np.sum(np.argmax(logits.data, axis=1) == batch.labels))
    return total_loss / len(dataset), correct / len(dataset)


def batch_order(n: int, seed: int, epoch: int, shuffle: bool) -> np.ndarray:
    if not shuffle:
        return np.arange(n)
    return np.random.default_rng([seed, epoch]).permutation(n)


def gradients(params: ParameterSet, batch) -> tuple[float, dict[str, np.ndarray]]:
    """Batch loss and the gradient of every parameter tensor"""
    with te.Tape() as tape:
        leaves = {name: tape.watch(arr) for name, arr in params.tensors.items()}
        logits, _ = forward(params, batch, leaves=leaves)
        value = loss(logits, batch.labels)
    grads = te.backward(tape, value.tid)
    return value.item(), {name: grads[leaf.tid] for name, leaf in leaves.items()}


def train(
    params: ParameterSet,
    dataset: Dataset,
    opts: TrainOptions,
    mask: NeuronMask | None = None,
    *,
    regime: Regime | None = None,
    unfreeze_embed_head: bool = False,
    eval_dataset: Dataset | None = None,
    on_checkpoint: Callable[[str, ParameterSet, EvalResult | None], None] | None = None,
    progress: Callable[[int, float], None] | None = None,
) -> tuple[ParameterSet, TrainLog]:
    config = params.config
    if len(dataset) == 0:
        raise EmptyDatasetError("training dataset has no examples")
    dataset.validate(config)
    if eval_dataset is not None:
        eval_dataset.validate(config)

    regime = resolve_regime(regime, mask)
    gates = _row_gates(config, regime, mask, unfreeze_embed_head)
    optimizer = make_optimizer(opts)
    log = TrainLog(
        regime=regime,
        trainable=count_trainable(config, mask, regime, unfreeze_embed_head)["trainable"],
    )

    n = len(dataset)
    per_epoch = math.ceil(n / opts.batch_size)
    total = opts.total_steps(n)
    best_params, best_eval = None, None
    last_eval: EvalResult | None = None

    def run_eval(epoch: int) -> EvalResult | None:
        nonlocal best_params, best_eval, last_eval
        if eval_dataset is None:
            return None
        if last_eval is not None and last_eval["step"] == step:
            return last_eval
        eval_loss, accuracy = evaluate(current, eval_dataset, opts.batch_size)
        last_eval = EvalResult(step=step, epoch=epoch, loss=eval_loss, accuracy=accuracy)
        log.evals.append(last_eval)
        if log.best_eval_loss is None or eval_loss < log.best_eval_loss:
            log.best_eval_loss, log.best_step = eval_loss, step
            best_params, best_eval = current, last_eval
        return last_eval

    current = params
    step = 0
    epoch = 0
    while step < total:
        order = batch_order(n, opts.seed, epoch, opts.shuffle)
        for b in range(per_epoch):
            if step == total:
                break
            idx = order[b * opts.batch_size : (b + 1) * opts.batch_size]
            batch = dataset.batch(idx)
            value, grads = gradients(current, batch)
            if not math.isfinite(value):
                raise NonFiniteLossError(step + 1, [int(i) for i in idx], value)

            optimizer.tick()
            updates = {}
            for name, g in grads.items():
                gate = gates[name]
                if gate is False:
                    continue
                updates[name] = optimizer.update(name, current.tensors[name], _gate(g, gate))
            current = current.replace(**updates)

            step += 1
            log.steps.append(TrainStep(step=step, loss=value))
            if progress is not None:
                progress(step, value)
        else:
            result = run_eval(epoch)
            if on_checkpoint is not None:
                on_checkpoint(f"epoch-{epoch + 1}", current, result)
        epoch += 1

    result = run_eval(epoch - 1)
    if on_checkpoint is not None:
        on_checkpoint("final", current, result)
        if best_params is not None:
            on_checkpoint("best", best_params, best_eval)
    return current, log
