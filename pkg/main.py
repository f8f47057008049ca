import sys

import click
import orjson
from tqdm import tqdm

import io_formats
import pipeline
from constants import (
    ADAM_BETA1,
    ADAM_BETA2,
    ADAM_EPS,
    DEFAULT_CATEGORY_FRACTION,
    DEFAULT_LEARNING_RATE,
    TRACE_TOKEN_CAP,
    Activation,
    DType,
    OptimizerKind,
    Regime,
    SelectionMode,
    SyntheticKind,
)
from errors import ConfigError, NeftError, PipelineError
from model import ModelConfig
from trainer import TrainOptions


class NeftGroup(click.Group):
    """Library errors become exit 1 with one `error=<Class> message=<json>` line on stderr"""

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except (NeftError, OSError) as e:
            message = orjson.dumps(str(e)).decode()
            click.echo(f"error={type(e).__name__} message={message}", err=True)
            ctx.exit(1)


def _drop_none(d: dict) -> dict:
    return {k: v for k, v in d.items() if v is not None}


def default_map_from(raw: dict) -> dict:
    """Pipeline config sections -> per-subcommand flag defaults"""
    model = raw.get("model", {})
    train = raw.get("train", {})
    selection = raw.get("selection", {})
    probe = raw.get("probe", {})
    analysis = raw.get("analysis", {})
    edges = analysis.get("bucket_edges")
    data_model = {k: v for k, v in model.items() if k != "seed"}
    return {
        "init": dict(model),
        "make-data": _drop_none({**data_model, "model_seed": model.get("seed")}),
        "train": dict(train),
        "eval": _drop_none({"batch_size": train.get("batch_size")}),
        "select": dict(selection),
        "hybrid": _drop_none({"fraction": selection.get("fraction")}),
        "probe-fit": _drop_none({"lam": probe.get("lam"), "layer": probe.get("layer")}),
        "probe-select": _drop_none({"k": probe.get("k")}),
        "trace": _drop_none(
            {"max_tokens": analysis.get("trace_tokens"), "seed": analysis.get("trace_seed")}
        ),
        "rankdiff": _drop_none(
            {"bucket_edges": ",".join(str(e) for e in edges) if edges else None}
        ),
        "categorize": _drop_none(
            {
                "threshold": analysis.get("category_threshold"),
                "fraction": analysis.get("category_fraction"),
            }
        ),
    }


@click.group(cls=NeftGroup)
@click.option(
    "--config",
    "config_path",
    type=click.Path(dir_okay=False),
    help="pipeline TOML/JSON whose sections provide flag defaults",
)
@click.pass_context
def cli(ctx, config_path):
    """Neuron-level fine-tuning: train, diff, select and analyze MLP neurons."""
    ctx.ensure_object(dict)
    ctx.obj["config_path"] = config_path
    if config_path:
        try:
            ctx.default_map = default_map_from(pipeline.read_config_file(config_path))
        except ConfigError as e:
            raise click.BadParameter(str(e), param_hint="--config")


def model_options(seed_name: str):
    options = [
        click.option("--vocab-size", type=int, required=True),
        click.option("--d-model", type=int, required=True),
        click.option("--d-hidden", type=int, required=True),
        click.option("--n-layers", type=int, required=True),
        click.option("--n-classes", type=int, required=True),
        click.option(
            "--activation",
            type=click.Choice([a.value for a in Activation]),
            default=Activation.SILU.value,
        ),
        click.option(f"--{seed_name.replace('_', '-')}", seed_name, type=int, required=True),
    ]

    def decorate(fn):
        for option in reversed(options):
            fn = option(fn)
        return fn

    return decorate


@cli.command()
@model_options("seed")
@click.option("--dtype", type=click.Choice([d.value for d in DType]), default=DType.F32.value)
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def init(vocab_size, d_model, d_hidden, n_layers, n_classes, activation, seed, dtype, out):
    """Seeded initial checkpoint for a model config."""
    config = ModelConfig.checked(
        vocab_size=vocab_size,
        d_model=d_model,
        d_hidden=d_hidden,
        n_layers=n_layers,
        n_classes=n_classes,
        activation=activation,
        seed=seed,
    )
    pipeline.init_stage(config, out, DType(dtype))


@cli.command("make-data")
@model_options("model_seed")
@click.option("--kind", type=click.Choice([k.value for k in SyntheticKind]), required=True)
@click.option("--n", "n_examples", type=int, required=True)
@click.option("--seed", type=int, required=True)
@click.option("--seq-len", type=int, default=8)
@click.option("--tokens-per-class", type=int, default=2, help="planted-neurons only")
@click.option("--pool-size", type=int, default=None, help="blobs only")
@click.option("--purity", type=float, default=1.0, help="blobs only")
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--mask-out", type=click.Path(dir_okay=False), help="planted mask (planted-neurons)")
@click.option(
    "--reference-out",
    type=click.Path(dir_okay=False),
    help="reference checkpoint the planted task is built on (planted-neurons)",
)
def make_data(
    vocab_size, d_model, d_hidden, n_layers, n_classes, activation, model_seed,
    kind, n_examples, seed, seq_len, tokens_per_class, pool_size, purity, out, mask_out,
    reference_out,
):
    """Synthetic JSONL dataset (blobs or planted-neurons)."""
    config = ModelConfig.checked(
        vocab_size=vocab_size,
        d_model=d_model,
        d_hidden=d_hidden,
        n_layers=n_layers,
        n_classes=n_classes,
        activation=activation,
        seed=model_seed,
    )
    if kind == SyntheticKind.BLOBS:
        options = {"seq_len": seq_len, "pool_size": pool_size, "purity": purity}
    else:
        options = {"seq_len": seq_len, "tokens_per_class": tokens_per_class}
    pipeline.make_data_stage(
        kind, config, n_examples, seed, out, mask_out, reference_out, **options
    )


@cli.command()
@click.option("--checkpoint", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--data", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--seed", type=int, required=True)
@click.option("--max-steps", type=int, required=True)
@click.option("--batch-size", type=int, default=16)
@click.option("--learning-rate", type=float, default=DEFAULT_LEARNING_RATE)
@click.option(
    "--optimizer",
    type=click.Choice([o.value for o in OptimizerKind]),
    default=OptimizerKind.ADAM.value,
)
@click.option("--beta1", type=float, default=ADAM_BETA1)
@click.option("--beta2", type=float, default=ADAM_BETA2)
@click.option("--eps", type=float, default=ADAM_EPS)
@click.option("--shuffle/--no-shuffle", default=True)
@click.option("--epochs", type=int, default=None)
@click.option("--mask", "mask_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--regime", type=click.Choice([r.value for r in Regime]), default=None)
@click.option("--unfreeze-embed-head", is_flag=True)
@click.option("--eval-data", type=click.Path(exists=True, dir_okay=False))
@click.option("--checkpoint-dir", type=click.Path(file_okay=False))
def train(
    checkpoint, data, out, seed, max_steps, batch_size, learning_rate, optimizer,
    beta1, beta2, eps, shuffle, epochs, mask_path, regime, unfreeze_embed_head,
    eval_data, checkpoint_dir,
):
    """Train a checkpoint, optionally updating only the rows of a neuron mask."""
    opts = TrainOptions.checked(
        max_steps=max_steps,
        batch_size=batch_size,
        learning_rate=learning_rate,
        optimizer=optimizer,
        beta1=beta1,
        beta2=beta2,
        eps=eps,
        seed=seed,
        shuffle=shuffle,
        epochs=epochs,
    )
    with tqdm(total=max_steps if epochs is None else None, file=sys.stderr, disable=None) as bar:

        def progress(step, loss):
            bar.update(1)
            bar.set_postfix(loss=f"{loss:.4f}")

        pipeline.train_stage(
            checkpoint,
            data,
            opts,
            out,
            mask_path=mask_path,
            regime=Regime(regime) if regime else None,
            unfreeze_embed_head=unfreeze_embed_head,
            eval_data=eval_data,
            checkpoint_dir=checkpoint_dir,
            progress=progress,
        )


@cli.command("eval")
@click.option("--checkpoint", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--data", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", type=click.Path(dir_okay=False))
@click.option("--batch-size", type=int, default=64)
def eval_cmd(checkpoint, data, out, batch_size):
    """Mean loss and accuracy of a checkpoint on a dataset."""
    pipeline.eval_stage(checkpoint, data, out, batch_size)


@cli.command()
@click.option("--org", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--ft", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def diff(org, ft, out):
    """Per-neuron cosine similarity between two checkpoints."""
    pipeline.diff_stage(org, ft, out)


@cli.command()
@click.option("--similarity", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--fraction", type=float, required=True)
@click.option(
    "--mode",
    type=click.Choice([m.value for m in SelectionMode]),
    default=SelectionMode.SENSITIVE.value,
)
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def select(similarity, fraction, mode, out):
    """Lowest (sensitive) or highest (reversed) similarity neurons."""
    pipeline.select_stage(similarity, fraction, SelectionMode(mode), out)


@cli.command()
@click.option("--similarity", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--fraction", type=float, required=True)
@click.option("--reversed-fraction", type=float, required=True)
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def hybrid(similarity, fraction, reversed_fraction, out):
    """Sensitive selection plus a reversed selection."""
    pipeline.hybrid_stage(similarity, fraction, reversed_fraction, out)


@cli.command("probe-fit")
@click.option("--checkpoint", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--data", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--lam", type=float, default=1e-3)
@click.option("--layer", type=int, default=None, help="hidden-state layer (default: final)")
@click.option("--intercept/--no-intercept", default=False, help="center columns and fit an unpenalized bias")
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def probe_fit(checkpoint, data, lam, layer, intercept, out):
    """Ridge probe on token-averaged hidden states."""
    pipeline.probe_fit_stage(checkpoint, data, out, lam, layer, intercept)


@cli.command("probe-select")
@click.option("--checkpoint", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--probe", "probe_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--k", type=int, required=True)
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def probe_select(checkpoint, probe_path, k, out):
    """Top-k up neurons aligned with the probe directions."""
    pipeline.probe_select_stage(checkpoint, probe_path, k, out)


@cli.command()
@click.argument("a", type=click.Path(exists=True, dir_okay=False))
@click.argument("b", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def union(a, b, out):
    """Union of two masks."""
    pipeline.union_stage(a, b, out)


@cli.command()
@click.argument("a", type=click.Path(exists=True, dir_okay=False))
@click.argument("b", type=click.Path(exists=True, dir_okay=False))
def overlap(a, b):
    """Overlap proportion |a & b| / min(|a|, |b|)."""
    pipeline.overlap_stage(a, b)


@cli.command()
@click.option("--checkpoint", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--data", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--max-tokens", type=int, default=TRACE_TOKEN_CAP)
@click.option("--seed", type=int, default=0)
def trace(checkpoint, data, out, max_tokens, seed):
    """Per-token activation trace of every neuron."""
    pipeline.trace_stage(checkpoint, data, out, max_tokens, seed)


@cli.command()
@click.option("--trace", "trace_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def profile(trace_path, out):
    """Max pairwise Pearson score and utilization rank per neuron."""
    pipeline.profile_stage(trace_path, out)


@cli.command()
@click.argument("a", type=click.Path(exists=True, dir_okay=False))
@click.argument("b", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--bucket-edges", default=None, help="comma-separated top-percentile edges")
def rankdiff(a, b, out, bucket_edges):
    """Rank shift between two profiles (writes a .tsv plot companion)."""
    if bucket_edges:
        try:
            edges = [float(e) for e in bucket_edges.split(",")]
        except ValueError:
            raise click.BadParameter(bucket_edges, param_hint="--bucket-edges")
        pipeline.rankdiff_stage(a, b, out, edges)
    else:
        pipeline.rankdiff_stage(a, b, out)


@cli.command()
@click.option("--rankdiff", "rankdiff_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--mask", "mask_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--threshold", type=int, default=None, help="absolute |dRank| threshold")
@click.option("--fraction", type=float, default=DEFAULT_CATEGORY_FRACTION)
def categorize(rankdiff_path, mask_path, out, threshold, fraction):
    """Strongly affected, suppressed and indirectly affected neurons."""
    pipeline.categorize_stage(rankdiff_path, mask_path, out, threshold, fraction)


@cli.command()
@click.option("--checkpoint", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--mask", "mask_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--regime", type=click.Choice([r.value for r in Regime]), default=None)
@click.option("--unfreeze-embed-head", is_flag=True)
def params(checkpoint, mask_path, regime, unfreeze_embed_head):
    """Trainable parameter count under a regime."""
    config = io_formats.read_checkpoint(checkpoint).config
    pipeline.params_stage(config, mask_path, Regime(regime) if regime else None, unfreeze_embed_head)


@cli.command()
@click.argument("config_file", required=False, type=click.Path(exists=True, dir_okay=False))
@click.option("--probe/--no-probe", "use_probe", default=None, help="override use_probe")
@click.pass_context
def run(ctx, config_file, use_probe):
    """Whole pipeline from a config: init, select, train, evaluate, analyze."""
    config_file = config_file or ctx.obj.get("config_path")
    if not config_file:
        raise click.UsageError("run needs a pipeline config file")
    result = pipeline.run_pipeline(config_file, use_probe)
    if result["error_messages"]:
        raise PipelineError("; ".join(result["error_messages"]))
    for name, digest in sorted(result["hashes"].items()):
        click.echo(f"{name}\t{digest}")


if __name__ == "__main__":
    cli()
