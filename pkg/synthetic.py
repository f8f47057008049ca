"""
Synthetic classification tasks for the toy model.

blobs: each class draws its tokens from its own disjoint vocabulary pool,
so token-averaged embeddings cluster by class.

planted-neurons: built against `planted_reference`, a relu model whose
layers past the first are switched off. Each class gets its own signal
tokens; the planted set is every layer-0 up row that fires on at least one
signal token, and every other layer-0 up row is silent on every token the
task uses.
"""

import numpy as np

from constants import PLANTED_DOWN_GAIN, Activation, DType, SyntheticKind
from errors import ConfigError
from model import Dataset, ModelConfig, NeuronLayout, ParameterSet, init_params
from selector import NeuronMask, mask_from_indices


def _balanced_labels(rng: np.random.Generator, n: int, n_classes: int) -> np.ndarray:
    return rng.permutation(np.arange(n) % n_classes)


def make_blobs(
    config: ModelConfig,
    n: int,
    seed: int,
    seq_len: int = 8,
    pool_size: int | None = None,
    purity: float = 1.0,
) -> Dataset:
    """`purity` is the chance a token comes from its class pool instead of the whole vocab"""
    n_classes = config.n_classes
    pool_size = pool_size or max(1, config.vocab_size // (2 * n_classes))
    if pool_size * n_classes > config.vocab_size:
        raise ConfigError(
            f"{n_classes} pools of {pool_size} tokens do not fit in vocab {config.vocab_size}"
        )
    if not 0 <= purity <= 1:
        raise ConfigError(f"purity {purity} not in [0, 1]")

    rng = np.random.default_rng(seed)
    pools = rng.permutation(config.vocab_size)[: n_classes * pool_size].reshape(n_classes, pool_size)
    labels = _balanced_labels(rng, n, n_classes)
    sequences = []
    for y in labels:
        own = rng.choice(pools[y], size=seq_len)
        noise = rng.integers(0, config.vocab_size, size=seq_len)
        sequences.append(np.where(rng.random(seq_len) < purity, own, noise))
    return Dataset.from_records(sequences, labels)


def signal_tokens(active: np.ndarray, count: int) -> tuple[list[int], np.ndarray]:
    """
    Greedily pick `count` tokens that each fire at least one row while
    keeping the union of fired rows small; ties go to the lowest token id.
    """
    candidates = [t for t in range(active.shape[0]) if active[t].any()]
    if len(candidates) < count:
        raise ConfigError(
            f"only {len(candidates)} tokens fire a layer-0 up row; need {count}"
        )
    union = np.zeros(active.shape[1], dtype=bool)
    chosen = []
    for _ in range(count):
        best = min(candidates, key=lambda t: (int((union | active[t]).sum()), t))
        chosen.append(best)
        candidates.remove(best)
        union |= active[best]
    return chosen, union


def planted_reference(config: ModelConfig, dtype: DType = DType.F32) -> ParameterSet:
    """
    The seeded init with every up row past layer 0 zeroed and the layer-0
    down matrix scaled by PLANTED_DOWN_GAIN.

    Zeroed relu rows never fire, so later layers take no gradient in either
    role and the task's change lands on the layer-0 up rows.
    """
    if config.activation != Activation.RELU:
        raise ConfigError("planted-neurons needs a relu model so silent rows get no gradient")
    params = init_params(config, dtype)
    updates = {"down.0": params.down(0) * params.down(0).dtype.type(PLANTED_DOWN_GAIN)}
    for layer in range(1, config.n_layers):
        updates[f"up.{layer}"] = np.zeros_like(params.up(layer))
    return params.replace(**updates)


def make_planted(
    config: ModelConfig,
    n: int,
    seed: int,
    seq_len: int = 8,
    tokens_per_class: int = 2,
    dtype: DType = DType.F32,
) -> tuple[Dataset, NeuronMask]:
    reference = planted_reference(config, dtype)
    pre = reference.embed.astype(np.float64) @ reference.up(0).astype(np.float64).T
    chosen, planted_rows = signal_tokens(pre > 0, config.n_classes * tokens_per_class)

    rng = np.random.default_rng(seed)
    labels = _balanced_labels(rng, n, config.n_classes)
    pools = np.asarray(chosen).reshape(config.n_classes, tokens_per_class)
    sequences = [rng.choice(pools[y], size=seq_len) for y in labels]

    layout = NeuronLayout(config)
    # layer-0 up rows sit at canonical indices 0..d_hidden-1
    rows = np.flatnonzero(planted_rows)
    mask = mask_from_indices(
        layout, rows, rows.size / layout.total, "planted", reference.content_hash
    )
    return Dataset.from_records(sequences, labels), mask


def layer0_up_indices(config: ModelConfig) -> np.ndarray:
    return np.arange(config.d_hidden)


def make_synthetic_dataset(
    kind: SyntheticKind | str,
    config: ModelConfig,
    n: int,
    seed: int,
    **options,
) -> tuple[Dataset, NeuronMask | None]:
    """Dataset plus, for planted-neurons, the ground-truth planted mask"""
    try:
        kind = SyntheticKind(kind)
    except ValueError:
        choices = ", ".join(k.value for k in SyntheticKind)
        raise ConfigError(f"unknown synthetic kind {kind!r} (choose from {choices})") from None
    if n < 1:
        raise ConfigError(f"n must be >= 1, got {n}")
    if kind == SyntheticKind.BLOBS:
        return make_blobs(config, n, seed, **options), None
    return make_planted(config, n, seed, **options)
