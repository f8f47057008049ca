"""
File-to-file stages of the NeFT workflow and the langgraph run that chains them.

Every stage reads its inputs from disk, writes its artifacts, prints a short
progress line and returns a StageResult with the artifact hashes.
"""

from pathlib import Path
from typing import Callable

import orjson
import toml
from dotenv import load_dotenv
from langfuse import observe
from langgraph.graph import END, StateGraph
from pydantic import BaseModel, ConfigDict, Field, ValidationError

import io_formats
import utils
from analysis import (
    categorize,
    category_counts,
    rank_diff,
    threshold_from_fraction,
    utilization_profile,
)
from constants import (
    DEFAULT_BUCKET_EDGES,
    DEFAULT_CATEGORY_FRACTION,
    DEFAULT_EARLY_STEPS,
    TRACE_TOKEN_CAP,
    DType,
    Regime,
    SelectionMode,
    SyntheticKind,
)
from errors import ConfigError, ModelHashMismatchError, NeftError
from model import ModelConfig, NeuronLayout, collect_trace, dataset_hidden_states, init_params
from selector import (
    budget,
    fit_probe,
    neuron_similarity,
    overlap,
    probe_select,
    select_hybrid,
    select_neurons,
    union_masks,
)
from state import NeftRunState, StageResult
from synthetic import make_synthetic_dataset, planted_reference
from trainer import TrainOptions, count_trainable, evaluate, train

load_dotenv()


def _result(stage: str, outputs: dict, hashes: dict, summary: dict) -> StageResult:
    return StageResult(
        stage=stage,
        outputs={k: str(v) for k, v in outputs.items()},
        hashes=hashes,
        summary=summary,
    )


def _sidecar(path, suffix: str) -> Path:
    return Path(f"{path}{suffix}")


@observe()
def init_stage(config: ModelConfig, out, dtype: DType = DType.F32, source=None) -> StageResult:
    """Seeded init, or a copy of `source` when the original model is given as a checkpoint"""
    if source is None:
        params = init_params(config, dtype)
    else:
        params = io_formats.read_checkpoint(source)
        if params.config != config:
            raise ConfigError(f"checkpoint {source} does not match the model config")
    digest = io_formats.write_checkpoint(out, params)
    print(f"   ✓ init: {config.parameter_count()} parameters -> {out} ({digest})")
    return _result(
        "init",
        {"checkpoint": out},
        {"checkpoint": digest},
        {"parameters": config.parameter_count(), "neurons": NeuronLayout(config).total},
    )


@observe()
def make_data_stage(
    kind: SyntheticKind,
    config: ModelConfig,
    n: int,
    seed: int,
    out,
    mask_out=None,
    reference_out=None,
    **options,
) -> StageResult:
    dataset, planted = make_synthetic_dataset(kind, config, n, seed, **options)
    outputs = {"dataset": out}
    hashes = {"dataset": io_formats.write_dataset(out, dataset)}
    summary = {"examples": len(dataset), "kind": str(kind)}
    if planted is not None:
        summary["planted"] = len(planted)
        if mask_out is not None:
            outputs["mask"] = mask_out
            hashes["mask"] = io_formats.write_mask(mask_out, planted)
        if reference_out is not None:
            reference = planted_reference(config, options.get("dtype", DType.F32))
            outputs["reference"] = reference_out
            hashes["reference"] = io_formats.write_checkpoint(reference_out, reference)
    print(f"   ✓ make-data: {len(dataset)} {kind} examples -> {out} ({hashes['dataset']})")
    return _result("make-data", outputs, hashes, summary)


@observe()
def train_stage(
    checkpoint,
    data,
    opts: TrainOptions,
    out,
    mask_path=None,
    regime: Regime | None = None,
    unfreeze_embed_head: bool = False,
    eval_data=None,
    checkpoint_dir=None,
    progress: Callable[[int, float], None] | None = None,
) -> StageResult:
    """Writes `out`, `<out>.log` (step lines) and `<out>.json` (summary)"""
    params = io_formats.read_checkpoint(checkpoint)
    dataset = io_formats.read_dataset(data)
    mask = io_formats.read_mask(mask_path) if mask_path else None
    if mask is not None and mask.model_hash != params.content_hash:
        raise ModelHashMismatchError(
            f"mask was selected on model {mask.model_hash}, checkpoint is {params.content_hash}"
        )
    eval_set = io_formats.read_dataset(eval_data) if eval_data else None

    outputs, hashes = {}, {}

    def save(tag, snapshot, result):
        if checkpoint_dir is None:
            return
        path = Path(checkpoint_dir) / f"{tag}.safetensors"
        outputs[tag] = path
        hashes[tag] = io_formats.write_checkpoint(path, snapshot)

    if checkpoint_dir is not None:
        Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
    final, log = train(
        params,
        dataset,
        opts,
        mask,
        regime=regime,
        unfreeze_embed_head=unfreeze_embed_head,
        eval_dataset=eval_set,
        on_checkpoint=save,
        progress=progress,
    )
    outputs["checkpoint"] = out
    hashes["checkpoint"] = io_formats.write_checkpoint(out, final)
    _sidecar(out, ".log").write_text("\n".join(log.to_lines()) + "\n")
    summary = {**log.summary(), "dataset_hash": dataset.dataset_hash, "init_hash": params.content_hash}
    _sidecar(out, ".json").write_bytes(utils.dumps(summary))

    print(
        f"   ✓ train ({log.regime}): {len(log.steps)} steps, "
        f"loss {log.initial_loss:.4f} -> {log.final_loss:.4f} -> {out} ({hashes['checkpoint']})"
    )
    return _result("train", outputs, hashes, summary)


@observe()
def eval_stage(checkpoint, data, out=None, batch_size: int = 64) -> StageResult:
    params = io_formats.read_checkpoint(checkpoint)
    loss, accuracy = evaluate(params, io_formats.read_dataset(data), batch_size)
    summary = {"loss": loss, "accuracy": accuracy, "checkpoint_hash": params.content_hash}
    outputs, hashes = {}, {}
    if out is not None:
        raw = utils.dumps(summary)
        Path(out).write_bytes(raw)
        outputs["eval"], hashes["eval"] = out, utils.hash_bytes(raw)
    print(f"   ✓ eval: loss {loss:.4f}, accuracy {accuracy:.3f}")
    return _result("eval", outputs, hashes, summary)


@observe()
def diff_stage(org, ft, out) -> StageResult:
    report = neuron_similarity(io_formats.read_checkpoint(org), io_formats.read_checkpoint(ft))
    digest = io_formats.write_similarity(out, report)
    summary = {
        "neurons": int(report.scores.size),
        "mean": float(report.scores.mean()),
        "min": float(report.scores.min()),
    }
    print(f"   ✓ diff: {summary['neurons']} neurons, mean cosine {summary['mean']:.6f} -> {out}")
    return _result("diff", {"similarity": out}, {"similarity": digest}, summary)


def _mask_result(stage: str, mask, out) -> StageResult:
    digest = io_formats.write_mask(out, mask)
    print(f"   ✓ {stage}: {len(mask)} of {mask.total} neurons ({mask.provenance}) -> {out}")
    return _result(
        stage,
        {"mask": out},
        {"mask": digest},
        {"neurons": len(mask), "total": mask.total, "provenance": mask.provenance},
    )


@observe()
def select_stage(similarity, fraction: float, mode: SelectionMode, out) -> StageResult:
    mask = select_neurons(io_formats.read_similarity(similarity), fraction, mode)
    return _mask_result("select", mask, out)


@observe()
def hybrid_stage(similarity, base_fraction: float, reversed_fraction: float, out) -> StageResult:
    mask = select_hybrid(io_formats.read_similarity(similarity), base_fraction, reversed_fraction)
    return _mask_result("hybrid", mask, out)


@observe()
def union_stage(a, b, out) -> StageResult:
    mask = union_masks(io_formats.read_mask(a), io_formats.read_mask(b))
    return _mask_result("union", mask, out)


@observe()
def overlap_stage(a, b) -> StageResult:
    value = overlap(io_formats.read_mask(a), io_formats.read_mask(b))
    print(f"   ✓ overlap: {value:.6f}")
    return _result("overlap", {}, {}, {"overlap": value})


@observe()
def probe_fit_stage(
    checkpoint, data, out, lam: float = 1e-3, layer: int | None = None, fit_intercept: bool = False
) -> StageResult:
    """Ridge probe on token-averaged hidden states (default: the input to the head)"""
    params = io_formats.read_checkpoint(checkpoint)
    dataset = io_formats.read_dataset(data)
    dataset.validate(params.config)
    layer = params.config.n_layers if layer is None else layer
    X = dataset_hidden_states(params, dataset, layer)
    probe = fit_probe(X, dataset.labels, lam, fit_intercept, params.config.n_classes, layer)
    accuracy = probe.accuracy(X, dataset.labels)
    digest = io_formats.write_probe(out, probe)
    print(f"   ✓ probe-fit: layer {layer}, lambda {lam:g}, train accuracy {accuracy:.3f} -> {out}")
    return _result("probe-fit", {"probe": out}, {"probe": digest}, {"accuracy": accuracy, "layer": layer})


@observe()
def probe_select_stage(checkpoint, probe_path, k: int, out) -> StageResult:
    mask = probe_select(io_formats.read_checkpoint(checkpoint), io_formats.read_probe(probe_path), k)
    return _mask_result("probe-select", mask, out)


@observe()
def trace_stage(checkpoint, data, out, max_tokens: int = TRACE_TOKEN_CAP, seed: int = 0) -> StageResult:
    params = io_formats.read_checkpoint(checkpoint)
    trace = collect_trace(params, io_formats.read_dataset(data), max_tokens=max_tokens, seed=seed)
    digest = io_formats.write_trace(out, trace)
    print(f"   ✓ trace: {trace.token_count} tokens x {trace.samples.shape[1]} neurons -> {out}")
    return _result("trace", {"trace": out}, {"trace": digest}, {"tokens": trace.token_count})


@observe()
def profile_stage(trace, out) -> StageResult:
    profile = utilization_profile(io_formats.read_trace(trace))
    digest = io_formats.write_profile(out, profile)
    print(f"   ✓ profile: {profile.ranks.size} neurons ranked -> {out}")
    return _result(
        "profile",
        {"profile": out},
        {"profile": digest},
        {"mean_max_pearson": float(profile.max_pearson.mean())},
    )


@observe()
def rankdiff_stage(a, b, out, bucket_edges=DEFAULT_BUCKET_EDGES) -> StageResult:
    report = rank_diff(io_formats.read_profile(a), io_formats.read_profile(b), bucket_edges)
    digest = io_formats.write_rankdiff(out, report)
    print(f"   ✓ rankdiff: Avg(|dRank|) {report.avg_abs_delta:.3f} -> {out}")
    return _result(
        "rankdiff",
        {"rankdiff": out, "plot": io_formats.plot_path(out)},
        {"rankdiff": digest},
        {"avg_abs_delta": report.avg_abs_delta, "buckets": report.buckets},
    )


@observe()
def categorize_stage(
    rankdiff, mask_path, out, threshold: int | None = None, fraction: float = DEFAULT_CATEGORY_FRACTION
) -> StageResult:
    report = io_formats.read_rankdiff(rankdiff)
    if threshold is None:
        threshold = threshold_from_fraction(NeuronLayout(report.config).total, fraction)
    categories = categorize(report, io_formats.read_mask(mask_path), threshold)
    digest = io_formats.write_categories(out, categories)
    counts = category_counts(categories)
    print(
        f"   ✓ categorize: threshold {threshold}, strongly {counts['strongly_affected']}, "
        f"suppressed {counts['suppressed']}, indirect {counts['indirectly_affected']} -> {out}"
    )
    return _result("categorize", {"categories": out}, {"categories": digest}, counts)


@observe()
def params_stage(
    config: ModelConfig,
    mask_path=None,
    regime: Regime | None = None,
    unfreeze_embed_head: bool = False,
) -> StageResult:
    mask = io_formats.read_mask(mask_path) if mask_path else None
    counts = count_trainable(config, mask, regime, unfreeze_embed_head)
    print(
        f"   ✓ params ({counts['regime']}): {counts['trainable']} of {counts['total']} "
        f"trainable ({counts['fraction'] * 100:.4f}%)"
    )
    return _result("params", {}, {}, counts)


# pipeline config


class SelectionSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    fraction: float = Field(default=0.03, gt=0, le=1)
    mode: SelectionMode = SelectionMode.SENSITIVE


class ProbeSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    lam: float = Field(default=1e-3, ge=0)
    layer: int | None = Field(default=None, ge=0)
    k: int | None = Field(default=None, ge=0)


class AnalysisSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    bucket_edges: list[float] = Field(default_factory=lambda: list(DEFAULT_BUCKET_EDGES))
    category_threshold: int | None = Field(default=None, ge=1)
    category_fraction: float = Field(default=DEFAULT_CATEGORY_FRACTION, gt=0, le=1)
    trace_tokens: int = Field(default=TRACE_TOKEN_CAP, ge=2)
    trace_seed: int = 0


class PipelineConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    model: ModelConfig
    train_data: Path
    eval_data: Path | None = None
    init_checkpoint: Path | None = None
    train: TrainOptions
    early_steps: int = Field(default=DEFAULT_EARLY_STEPS, ge=1)
    selection: SelectionSettings = Field(default_factory=SelectionSettings)
    probe: ProbeSettings = Field(default_factory=ProbeSettings)
    analysis: AnalysisSettings = Field(default_factory=AnalysisSettings)
    out_dir: Path = Path("neft-out")
    use_probe: bool = False


def read_config_file(path) -> dict:
    """Raw TOML or JSON mapping; the format is picked by file suffix"""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        if path.suffix == ".json":
            return orjson.loads(path.read_bytes())
        return toml.load(path)
    except (orjson.JSONDecodeError, toml.TomlDecodeError) as e:
        raise ConfigError(f"cannot parse {path}: {e}") from None


def load_pipeline_config(path) -> PipelineConfig:
    path = Path(path)
    raw = read_config_file(path)
    base = path.resolve().parent
    for key in ("train_data", "eval_data", "init_checkpoint", "out_dir"):
        if raw.get(key) is not None and not Path(raw[key]).is_absolute():
            raw[key] = str(base / raw[key])
    try:
        config = PipelineConfig(**raw)
    except ValidationError as e:
        first = e.errors()[0]
        raise ConfigError(f"invalid pipeline config: {first['msg']} {first['loc']}") from None
    for data in (config.train_data, config.eval_data, config.init_checkpoint):
        if data is not None and not data.exists():
            raise ConfigError(f"input file {data} does not exist")
    return config


# langgraph run


def _node(name: str, state: NeftRunState, fn: Callable[[PipelineConfig, Path], list[StageResult]]):
    if state["error_messages"]:
        print(f"{name} skipped")
        return state
    print(f"{name}")
    try:
        config = load_pipeline_config(state["config_path"])
        for result in fn(config, Path(state["out_dir"])):
            state["stages"] = state["stages"] + [result]
            # keyed by file name
            named = {k: Path(p).name for k, p in result["outputs"].items()}
            artifacts = {named[k]: p for k, p in result["outputs"].items()}
            hashes = {named[k]: h for k, h in result["hashes"].items()}
            state["artifacts"] = {**state["artifacts"], **artifacts}
            state["hashes"] = {**state["hashes"], **hashes}
    except NeftError as e:
        print(f"{name} failed: {e}")
        state["error_messages"] = state["error_messages"] + [
            f"{name} error: {type(e).__name__}: {e}"
        ]
    return state


def init_node(state: NeftRunState) -> NeftRunState:
    return _node(
        "prepare original model",
        state,
        lambda cfg, out: [init_stage(cfg.model, out / "org.safetensors", source=cfg.init_checkpoint)],
    )


def early_train_node(state: NeftRunState) -> NeftRunState:
    def run(cfg: PipelineConfig, out: Path):
        opts = cfg.train.model_copy(update={"max_steps": cfg.early_steps})
        return [train_stage(out / "org.safetensors", cfg.train_data, opts, out / "ft.safetensors")]

    return _node("train selection checkpoint", state, run)


def diff_node(state: NeftRunState) -> NeftRunState:
    def run(cfg: PipelineConfig, out: Path):
        return [
            diff_stage(out / "org.safetensors", out / "ft.safetensors", out / "similarity.json"),
            select_stage(
                out / "similarity.json", cfg.selection.fraction, cfg.selection.mode, out / "mask.json"
            ),
        ]

    return _node("select neurons by cosine similarity", state, run)


def probe_node(state: NeftRunState) -> NeftRunState:
    def run(cfg: PipelineConfig, out: Path):
        fit = probe_fit_stage(
            out / "org.safetensors", cfg.train_data, out / "probe.json", cfg.probe.lam, cfg.probe.layer
        )
        eligible = cfg.model.n_layers * cfg.model.d_hidden
        k = cfg.probe.k
        if k is None:
            k = min(eligible, budget(cfg.selection.fraction, NeuronLayout(cfg.model).total))
        return [fit, probe_select_stage(out / "org.safetensors", out / "probe.json", k, out / "mask.json")]

    return _node("select neurons by probe", state, run)


def neft_train_node(state: NeftRunState) -> NeftRunState:
    def run(cfg: PipelineConfig, out: Path):
        return [
            train_stage(
                out / "org.safetensors",
                cfg.train_data,
                cfg.train,
                out / "neft.safetensors",
                mask_path=out / "mask.json",
                eval_data=cfg.eval_data,
                checkpoint_dir=out / "checkpoints",
            )
        ]

    return _node("train selected neurons", state, run)


def eval_node(state: NeftRunState) -> NeftRunState:
    def run(cfg: PipelineConfig, out: Path):
        data = cfg.eval_data or cfg.train_data
        return [eval_stage(out / "neft.safetensors", data, out / "eval.json", cfg.train.batch_size)]

    return _node("evaluate", state, run)


def analysis_node(state: NeftRunState) -> NeftRunState:
    def run(cfg: PipelineConfig, out: Path):
        data = cfg.eval_data or cfg.train_data
        a = cfg.analysis
        results = []
        for tag in ("org", "neft"):
            results.append(
                trace_stage(out / f"{tag}.safetensors", data, out / f"{tag}.trace", a.trace_tokens, a.trace_seed)
            )
            results.append(profile_stage(out / f"{tag}.trace", out / f"{tag}.profile.json"))
        results.append(
            rankdiff_stage(
                out / "org.profile.json", out / "neft.profile.json", out / "rankdiff.json", a.bucket_edges
            )
        )
        results.append(
            categorize_stage(
                out / "rankdiff.json",
                out / "mask.json",
                out / "categories.json",
                a.category_threshold,
                a.category_fraction,
            )
        )
        return results

    return _node("analyze utilization", state, run)


def create_neft_graph():
    workflow = StateGraph(NeftRunState)

    workflow.add_node("init", init_node)
    workflow.add_node("early_train", early_train_node)
    workflow.add_node("diff", diff_node)
    workflow.add_node("probe", probe_node)
    workflow.add_node("neft_train", neft_train_node)
    workflow.add_node("evaluate", eval_node)
    workflow.add_node("analysis", analysis_node)

    # init → (early train → diff | probe) → neft train → evaluate → analysis
    workflow.set_entry_point("init")
    workflow.add_conditional_edges(
        "init", lambda s: "probe" if s["use_probe"] else "early_train", ["probe", "early_train"]
    )
    workflow.add_edge("early_train", "diff")
    workflow.add_edge("diff", "neft_train")
    workflow.add_edge("probe", "neft_train")
    workflow.add_edge("neft_train", "evaluate")
    workflow.add_edge("evaluate", "analysis")
    workflow.add_edge("analysis", END)

    return workflow.compile()


def run_pipeline(config_path, use_probe: bool | None = None) -> NeftRunState:
    config = load_pipeline_config(config_path)
    config.out_dir.mkdir(parents=True, exist_ok=True)
    initial_state: NeftRunState = {
        "config_path": str(config_path),
        "out_dir": str(config.out_dir),
        "use_probe": config.use_probe if use_probe is None else use_probe,
        "artifacts": {},
        "hashes": {},
        "stages": [],
        "error_messages": [],
    }
    result = create_neft_graph().invoke(initial_state)
    summary = {
        "artifacts": result["artifacts"],
        "hashes": result["hashes"],
        "errors": result["error_messages"],
    }
    (config.out_dir / "run.json").write_bytes(utils.dumps(summary))
    return result
