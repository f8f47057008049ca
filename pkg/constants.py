from enum import Enum, IntEnum

try:
    from enum import StrEnum
except ImportError:  # Python < 3.11
    class StrEnum(str, Enum):
        __str__ = str.__str__
        __format__ = str.__format__

        @staticmethod
        def _generate_next_value_(name, start, count, last_values):
            return name.lower()


class Activation(StrEnum):
    SILU = "silu"
    GELU = "gelu"
    RELU = "relu"


class Role(StrEnum):
    UP = "up"
    DOWN = "down"


class RoleOrder(IntEnum):
    # canonical neuron order puts up rows before down rows
    UP = 0
    DOWN = 1


class DType(StrEnum):
    F32 = "f32"
    F64 = "f64"


class OptimizerKind(StrEnum):
    SGD = "sgd"
    ADAM = "adam"


class SelectionMode(StrEnum):
    SENSITIVE = "sensitive"
    REVERSED = "reversed"


class SyntheticKind(StrEnum):
    BLOBS = "blobs"
    PLANTED = "planted-neurons"


class Regime(StrEnum):
    FULL = "full"
    NEFT = "neft"  # masked rows only
    MLP = "mlp"  # every up/down row
    EMBED = "embed"  # embedding table only


class ArtifactKind(StrEnum):
    CHECKPOINT = "checkpoint"
    TRACE = "trace"
    MASK = "mask"
    SIMILARITY = "similarity"
    PROFILE = "profile"
    RANKDIFF = "rankdiff"
    CATEGORIES = "categories"
    PROBE = "probe"


class Env(StrEnum):
    THREADS = "NEFT_THREADS"


FORMAT_VERSION = 1
METADATA_KEY = "neft"

NUMPY_DTYPES = {DType.F32: "<f4", DType.F64: "<f8"}
SAFETENSORS_DTYPES = {DType.F32: "F32", DType.F64: "F64"}

EMBED = "embed"
HEAD = "head"

# selection checkpoints trained for a limited number of steps
DEFAULT_EARLY_STEPS = 800

# neuron budgets swept by the experiment runs
FRACTION_GRID = (0.004, 0.015, 0.03, 0.06, 0.09, 0.12)

# 100,000 strongly affected of 483,328 up/down rows in a 7b model
LLAMA_CATEGORY_THRESHOLD = 100_000
LLAMA_NEURON_COUNT = 32 * (11008 + 4096)
DEFAULT_CATEGORY_FRACTION = 0.207

TRACE_TOKEN_CAP = 10_000

# top-percentile bucket upper edges for rank-shift tables
DEFAULT_BUCKET_EDGES = (0.03, 0.1, 1.0, 5.0, 10.0, 25.0, 50.0, 100.0)

DEFAULT_LEARNING_RATE = 1e-3
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

COSINE_SLACK = 1e-6

# layer-0 down scale in the planted reference model
PLANTED_DOWN_GAIN = 4.0
