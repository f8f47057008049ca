from typing import TypedDict

try:
    from typing import NotRequired
except ImportError:  # Python < 3.11
    from typing_extensions import NotRequired


class TrainStep(TypedDict):
    step: int
    loss: float


class EvalResult(TypedDict):
    step: int
    epoch: int
    loss: float
    accuracy: float


class StageResult(TypedDict):
    """What every pipeline stage reports back (and logs)"""

    stage: str
    outputs: dict[str, str]  # artifact name -> path
    hashes: dict[str, str]  # artifact name -> content hash
    summary: dict
    error: NotRequired[str]


class NeftRunState(TypedDict):
    """State for the file-to-file NeFT pipeline graph"""

    # inputs
    config_path: str
    out_dir: str
    use_probe: bool

    # artifacts produced so far (name -> path)
    artifacts: dict[str, str]
    hashes: dict[str, str]

    # stage summaries in execution order
    stages: list[StageResult]
    error_messages: list[str]
