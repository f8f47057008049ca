import tempfile
from pathlib import Path

import numpy as np
import toml
from click.testing import CliRunner

import io_formats
import utils
from constants import Role
from main import cli
from model import NeuronLayout

MODEL_FLAGS = ["--vocab-size", "16", "--d-model", "8", "--d-hidden", "16", "--n-layers", "2", "--n-classes", "2"]


def invoke(*args, expect: int = 0):
    result = CliRunner().invoke(cli, [str(a) for a in args])
    assert result.exit_code == expect, (result.exit_code, result.output, result.exception)
    return result


def last_line(text: str) -> str:
    return text.strip().splitlines()[-1]


def prepare(tmp: Path, kind: str = "blobs", activation: str = "silu"):
    """org checkpoint plus a 48-example dataset in tmp"""
    invoke("init", *MODEL_FLAGS, "--activation", activation, "--seed", 0, "--out", tmp / "org.safetensors")
    invoke(
        "make-data", *MODEL_FLAGS, "--activation", activation, "--model-seed", 0,
        "--kind", kind, "--n", 48, "--seed", 1, "--out", tmp / "data.jsonl", "--mask-out", tmp / "planted.json",
    )


def test_diff_of_identical_checkpoints():
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        prepare(tmp)
        result = invoke("diff", "--org", tmp / "org.safetensors", "--ft", tmp / "org.safetensors", "--out", tmp / "sim.json")
        assert "✓ diff" in result.output
        report = io_formats.read_similarity(tmp / "sim.json")
        assert np.all(report.scores == 1.0)


def test_full_mask_training_matches_plain_training():
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        prepare(tmp)
        invoke("diff", "--org", tmp / "org.safetensors", "--ft", tmp / "org.safetensors", "--out", tmp / "sim.json")
        invoke("select", "--similarity", tmp / "sim.json", "--fraction", 1.0, "--out", tmp / "all.json")
        common = ["--checkpoint", tmp / "org.safetensors", "--data", tmp / "data.jsonl", "--seed", 3, "--max-steps", 12]
        invoke("train", *common, "--out", tmp / "plain.safetensors")
        invoke("train", *common, "--mask", tmp / "all.json", "--unfreeze-embed-head", "--out", tmp / "masked.safetensors")
        assert (tmp / "plain.safetensors").read_bytes() == (tmp / "masked.safetensors").read_bytes()
        assert (tmp / "plain.safetensors.log").read_text() == (tmp / "masked.safetensors.log").read_text()


def test_neft_training_touches_only_selected_rows():
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        prepare(tmp)
        org = tmp / "org.safetensors"
        invoke("train", "--checkpoint", org, "--data", tmp / "data.jsonl", "--seed", 0, "--max-steps", 30,
               "--learning-rate", 0.01, "--out", tmp / "ft.safetensors")
        invoke("diff", "--org", org, "--ft", tmp / "ft.safetensors", "--out", tmp / "sim.json")
        invoke("select", "--similarity", tmp / "sim.json", "--fraction", 0.1, "--out", tmp / "mask.json")
        invoke("train", "--checkpoint", org, "--data", tmp / "data.jsonl", "--seed", 0, "--max-steps", 20,
               "--learning-rate", 0.05, "--mask", tmp / "mask.json", "--out", tmp / "neft.safetensors")

        before = io_formats.read_checkpoint(org)
        after = io_formats.read_checkpoint(tmp / "neft.safetensors")
        mask = io_formats.read_mask(tmp / "mask.json")
        layout = NeuronLayout(before.config)
        assert len(mask) == 5
        assert after.embed.tobytes() == before.embed.tobytes()
        assert after.head.tobytes() == before.head.tobytes()
        changed = 0
        for nid in layout.neurons():
            name = layout.matrix_name(nid.layer, nid.role)
            same = after.tensors[name][nid.row].tobytes() == before.tensors[name][nid.row].tobytes()
            if nid in mask:
                changed += not same
            else:
                assert same
        assert changed > 0

        summary = utils.loads((tmp / "neft.safetensors.json").read_bytes())
        assert summary["regime"] == "neft"
        assert summary["steps"] == 20


def test_mask_commands():
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        prepare(tmp)
        org = tmp / "org.safetensors"
        invoke("train", "--checkpoint", org, "--data", tmp / "data.jsonl", "--seed", 0, "--max-steps", 10,
               "--out", tmp / "ft.safetensors")
        invoke("diff", "--org", org, "--ft", tmp / "ft.safetensors", "--out", tmp / "sim.json")
        invoke("select", "--similarity", tmp / "sim.json", "--fraction", 0.06, "--out", tmp / "low.json")
        invoke("select", "--similarity", tmp / "sim.json", "--fraction", 0.03, "--mode", "reversed", "--out", tmp / "high.json")
        invoke("hybrid", "--similarity", tmp / "sim.json", "--fraction", 0.06, "--reversed-fraction", 0.03, "--out", tmp / "hybrid.json")
        invoke("union", tmp / "low.json", tmp / "high.json", "--out", tmp / "union.json")

        hybrid = io_formats.read_mask(tmp / "hybrid.json")
        assert hybrid.neurons == io_formats.read_mask(tmp / "union.json").neurons
        assert len(hybrid) == 3 + 1

        result = invoke("overlap", tmp / "low.json", tmp / "low.json")
        assert "overlap: 1.000000" in result.output
        result = invoke("overlap", tmp / "low.json", tmp / "high.json")
        assert "overlap: 0.000000" in result.output

        result = invoke("params", "--checkpoint", org, "--mask", tmp / "low.json")
        assert "params (neft)" in result.output
        result = invoke("params", "--checkpoint", org, "--regime", "mlp")
        assert f"{2 * 2 * 8 * 16} of" in result.output


def test_probe_commands():
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        prepare(tmp)
        org = tmp / "org.safetensors"
        invoke("probe-fit", "--checkpoint", org, "--data", tmp / "data.jsonl", "--lam", 0.1, "--out", tmp / "probe.json")
        invoke("probe-select", "--checkpoint", org, "--probe", tmp / "probe.json", "--k", 5, "--out", tmp / "mask.json")
        mask = io_formats.read_mask(tmp / "mask.json")
        assert len(mask) == 5
        assert all(nid.role == Role.UP for nid in mask.neurons)
        assert mask.provenance == "probe@5"
        invoke("probe-select", "--checkpoint", org, "--probe", tmp / "probe.json", "--k", 33, "--out", tmp / "bad.json", expect=1)


def test_analysis_commands():
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        prepare(tmp)
        org = tmp / "org.safetensors"
        invoke("train", "--checkpoint", org, "--data", tmp / "data.jsonl", "--seed", 0, "--max-steps", 20,
               "--learning-rate", 0.01, "--out", tmp / "ft.safetensors")
        for tag in ("org", "ft"):
            invoke("trace", "--checkpoint", tmp / f"{tag}.safetensors", "--data", tmp / "data.jsonl", "--out", tmp / f"{tag}.trace")
            invoke("profile", "--trace", tmp / f"{tag}.trace", "--out", tmp / f"{tag}.profile.json")

        invoke("rankdiff", tmp / "org.profile.json", tmp / "org.profile.json", "--out", tmp / "self.json")
        assert io_formats.read_rankdiff(tmp / "self.json").avg_abs_delta == 0.0

        invoke("rankdiff", tmp / "org.profile.json", tmp / "ft.profile.json", "--out", tmp / "diff.json",
               "--bucket-edges", "10,50,100")
        report = io_formats.read_rankdiff(tmp / "diff.json")
        assert [b["bucket"] for b in report.buckets] == ["0-10%", "10-50%", "50-100%"]
        assert (tmp / "diff.json.tsv").exists()

        invoke("diff", "--org", org, "--ft", tmp / "ft.safetensors", "--out", tmp / "sim.json")
        invoke("select", "--similarity", tmp / "sim.json", "--fraction", 0.1, "--out", tmp / "mask.json")
        result = invoke("categorize", "--rankdiff", tmp / "diff.json", "--mask", tmp / "mask.json", "--out", tmp / "cat.json")
        # 0.207 of 48 neurons
        assert "threshold 10" in result.output
        categories = io_formats.read_categories(tmp / "cat.json")
        assert set(categories.suppressed) <= set(categories.strongly_affected)


def test_planted_data_marks_layer0_up_rows():
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        invoke(
            "make-data", *MODEL_FLAGS, "--activation", "relu", "--model-seed", 0,
            "--kind", "planted-neurons", "--n", 48, "--seed", 1, "--out", tmp / "data.jsonl",
            "--mask-out", tmp / "planted.json", "--reference-out", tmp / "reference.safetensors",
        )
        mask = io_formats.read_mask(tmp / "planted.json")
        assert len(mask) > 0
        assert all(nid.layer == 0 and nid.role == Role.UP for nid in mask.neurons)
        assert (tmp / "data.jsonl").read_bytes().count(b"\n") == 48
        reference = io_formats.read_checkpoint(tmp / "reference.safetensors")
        assert mask.model_hash == reference.content_hash

        invoke(
            "train", "--checkpoint", tmp / "reference.safetensors", "--data", tmp / "data.jsonl",
            "--seed", 0, "--max-steps", 10, "--mask", tmp / "planted.json", "--out", tmp / "neft.safetensors",
        )
        trained = io_formats.read_checkpoint(tmp / "neft.safetensors")
        assert trained.up(1).tobytes() == reference.up(1).tobytes()

        model_section = {"vocab_size": 16, "d_model": 8, "d_hidden": 16, "n_layers": 2, "n_classes": 2, "seed": 0, "activation": "relu"}
        cfg = write_run_config(tmp, tmp / "data.jsonl", model=model_section, init_checkpoint="reference.safetensors")
        invoke("run", cfg)
        assert (tmp / "out" / "org.safetensors").read_bytes() == (tmp / "reference.safetensors").read_bytes()


def test_init_checkpoint_must_match_the_model():
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        prepare(tmp)
        cfg = write_run_config(tmp, tmp / "data.jsonl", model={"vocab_size": 16, "d_model": 8, "d_hidden": 8, "n_layers": 2, "n_classes": 2, "seed": 0}, init_checkpoint="org.safetensors")
        invoke("run", cfg, expect=1)
        run = utils.loads((tmp / "out" / "run.json").read_bytes())
        assert "does not match" in run["errors"][0]


def test_errors_exit_with_one_line():
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        prepare(tmp)
        invoke("diff", "--org", tmp / "org.safetensors", "--ft", tmp / "org.safetensors", "--out", tmp / "sim.json")
        result = invoke("select", "--similarity", tmp / "sim.json", "--fraction", 0, "--out", tmp / "m.json", expect=1)
        assert last_line(result.stderr).startswith("error=MaskError message=")

        result = invoke(
            "make-data", *MODEL_FLAGS, "--model-seed", 0, "--kind", "planted-neurons",
            "--n", 4, "--seed", 0, "--out", tmp / "p.jsonl", expect=1,
        )
        assert last_line(result.stderr).startswith("error=ConfigError")

        doc = utils.loads((tmp / "sim.json").read_bytes())
        del doc["scores"]
        (tmp / "noscores.json").write_bytes(utils.dumps(doc))
        result = invoke("select", "--similarity", tmp / "noscores.json", "--fraction", 0.1, "--out", tmp / "m.json", expect=1)
        assert last_line(result.stderr).startswith("error=FormatError message=")

        (tmp / "bad.jsonl").write_bytes(b'{"tokens": 5, "label": 0}\n')
        result = invoke("eval", "--checkpoint", tmp / "org.safetensors", "--data", tmp / "bad.jsonl", expect=1)
        assert last_line(result.stderr).startswith("error=FormatError")

        (tmp / "broken.safetensors").write_bytes((tmp / "org.safetensors").read_bytes()[:-4])
        result = invoke("diff", "--org", tmp / "org.safetensors", "--ft", tmp / "broken.safetensors", "--out", tmp / "x.json", expect=1)
        assert last_line(result.stderr).startswith("error=TruncatedPayloadError")


def test_unknown_command_is_a_usage_error():
    invoke("bogus", expect=2)
    invoke("select", "--fraction", 0.1, expect=2)


def test_config_file_supplies_flag_defaults():
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        prepare(tmp)
        cfg = tmp / "neft.toml"
        cfg.write_text(toml.dumps({
            "model": {"vocab_size": 16, "d_model": 8, "d_hidden": 16, "n_layers": 2, "n_classes": 2, "seed": 0},
            "train": {"max_steps": 7, "seed": 2, "batch_size": 8},
        }))
        invoke("--config", cfg, "init", "--out", tmp / "again.safetensors")
        assert (tmp / "again.safetensors").read_bytes() == (tmp / "org.safetensors").read_bytes()

        invoke("--config", cfg, "train", "--checkpoint", tmp / "org.safetensors", "--data", tmp / "data.jsonl", "--out", tmp / "ft.safetensors")
        assert len((tmp / "ft.safetensors.log").read_text().splitlines()) == 7


def write_run_config(tmp: Path, data: Path, **extra) -> Path:
    cfg = tmp / "run.toml"
    body = {
        "train_data": str(data),
        "early_steps": 15,
        "out_dir": "out",
        "model": {"vocab_size": 16, "d_model": 8, "d_hidden": 16, "n_layers": 2, "n_classes": 2, "seed": 0},
        "train": {"max_steps": 15, "seed": 4, "batch_size": 16, "learning_rate": 0.01},
        "selection": {"fraction": 0.1},
        "analysis": {"bucket_edges": [10.0, 50.0, 100.0]},
        **extra,
    }
    cfg.write_text(toml.dumps(body))
    return cfg


def test_run_is_reproducible():
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        prepare(tmp)
        outputs = []
        for name in ("first", "second"):
            run_dir = tmp / name
            run_dir.mkdir()
            result = invoke("run", write_run_config(run_dir, tmp / "data.jsonl"))
            outputs.append(result.stdout.splitlines()[-len(utils.loads((run_dir / "out" / "run.json").read_bytes())["hashes"]):])
            for artifact in ("org.safetensors", "ft.safetensors", "mask.json", "neft.safetensors", "eval.json", "categories.json"):
                assert (run_dir / "out" / artifact).exists()
        assert outputs[0] == outputs[1]
        assert any(line.startswith("neft.safetensors\t") for line in outputs[0])


def test_run_with_probe_selection():
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        prepare(tmp)
        cfg = write_run_config(tmp, tmp / "data.jsonl", probe={"lam": 0.1})
        invoke("run", cfg, "--probe")
        mask = io_formats.read_mask(tmp / "out" / "mask.json")
        # budget(0.1, 48) up rows
        assert mask.provenance == "probe@5"
        assert not (tmp / "out" / "ft.safetensors").exists()
        run = utils.loads((tmp / "out" / "run.json").read_bytes())
        assert run["errors"] == []


def test_run_reports_stage_failures():
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        prepare(tmp)
        cfg = write_run_config(tmp, tmp / "data.jsonl", analysis={"bucket_edges": [50.0, 10.0]})
        invoke("run", cfg, expect=1)
        run = utils.loads((tmp / "out" / "run.json").read_bytes())
        assert run["errors"] and "analyze utilization" in run["errors"][0]


if __name__ == "__main__":
    tests = [v for k, v in list(globals().items()) if k.startswith("test_")]
    for test in tests:
        test()
        print(f"✓ {test.__name__}")
