import struct
import tempfile
from pathlib import Path

import numpy as np
import pandas as pd
from safetensors.numpy import save as st_save

import io_formats
import model
import utils
from analysis import categorize, rank_diff, utilization_profile
from constants import METADATA_KEY, DType
from errors import (
    ConfigError,
    FormatError,
    HashMismatchError,
    TruncatedPayloadError,
    UnknownFormatVersionError,
)
from model import Dataset, ModelConfig, NeuronLayout
from selector import fit_probe, neuron_similarity, select_neurons
from synthetic import layer0_up_indices, make_synthetic_dataset, planted_reference


def small_params(dtype=DType.F32):
    config = ModelConfig.checked(vocab_size=10, d_model=4, d_hidden=6, n_layers=2, n_classes=3, seed=1)
    return model.init_params(config, dtype)


def header_of(data: bytes) -> dict:
    (n,) = struct.unpack("<Q", data[:8])
    return utils.loads(data[8 : 8 + n])


def manifest_of(data: bytes) -> dict:
    return utils.loads(header_of(data)["__metadata__"][METADATA_KEY])


def test_checkpoint_round_trip_is_byte_stable():
    for dtype in DType:
        params = small_params(dtype)
        data = io_formats.save_checkpoint(params)
        loaded = io_formats.load_checkpoint(data)
        assert io_formats.save_checkpoint(loaded) == data
        assert loaded.config == params.config
        assert loaded.content_hash == params.content_hash
        for name in params.tensors:
            assert loaded.tensors[name].tobytes() == params.tensors[name].tobytes()
            assert loaded.tensors[name].dtype == params.tensors[name].dtype


def test_manifest_offsets_cover_the_payload():
    data = io_formats.save_checkpoint(small_params())
    header = header_of(data)
    manifest = manifest_of(data)
    assert manifest["format_version"] == 1
    assert manifest["kind"] == "checkpoint"

    entries = sorted(manifest["tensors"], key=lambda e: e["byte_offset"])
    cursor = 0
    for entry in entries:
        assert entry["byte_offset"] == cursor
        assert header[entry["name"]]["data_offsets"] == [cursor, cursor + entry["byte_len"]]
        cursor += entry["byte_len"]
    (n,) = struct.unpack("<Q", data[:8])
    assert cursor == len(data) - 8 - n


def test_content_hash_is_fnv1a_over_the_payload():
    assert utils.fnv1a_64(b"") == "cbf29ce484222325"
    assert utils.fnv1a_64(b"a") == "af63dc4c8601ec8c"
    assert utils.fnv1a_64(b"foo", b"bar") == "85944171f73967e8"

    params = small_params()
    data = io_formats.save_checkpoint(params)
    manifest = manifest_of(data)
    (n,) = struct.unpack("<Q", data[:8])
    payload = data[8 + n :]
    ordered = [params.tensors[name].tobytes() for name in params.tensors]
    assert manifest["content_hash"] == utils.fnv1a_64(*ordered) == params.content_hash
    assert sorted(ordered) == sorted(
        payload[e["byte_offset"] : e["byte_offset"] + e["byte_len"]] for e in manifest["tensors"]
    )

    dataset = Dataset.from_records([[1, 2]], [0])
    assert dataset.dataset_hash == utils.fnv1a_64(b'{"label":0,"tokens":[1,2]}\n')


def test_flipped_byte_fails_the_hash():
    data = bytearray(io_formats.save_checkpoint(small_params()))
    data[-1] ^= 0xFF
    try:
        io_formats.load_checkpoint(bytes(data))
        assert False, "expected HashMismatchError"
    except HashMismatchError:
        pass


def test_truncated_checkpoint():
    data = io_formats.save_checkpoint(small_params())
    for cut in (data[:5], data[:20], data[:-10]):
        try:
            io_formats.load_checkpoint(cut)
            assert False, "expected TruncatedPayloadError"
        except TruncatedPayloadError:
            pass


def container_with(manifest: dict) -> bytes:
    arrays = {"x": np.zeros(2, dtype=np.float32)}
    return st_save(arrays, metadata={METADATA_KEY: utils.dumps(manifest).decode()})


def test_manifest_without_tensors():
    data = container_with({"format_version": 1, "kind": "checkpoint", "tensors": []})
    try:
        io_formats.load_checkpoint(data)
        assert False, "expected FormatError"
    except FormatError as e:
        assert not isinstance(e, UnknownFormatVersionError)


def test_unknown_format_version():
    data = container_with({"format_version": 2, "kind": "checkpoint", "tensors": []})
    try:
        io_formats.load_checkpoint(data)
        assert False, "expected UnknownFormatVersionError"
    except UnknownFormatVersionError:
        pass

    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "mask.json"
        path.write_bytes(utils.dumps({"format_version": 2, "kind": "mask"}))
        try:
            io_formats.read_mask(path)
            assert False, "expected UnknownFormatVersionError"
        except UnknownFormatVersionError:
            pass


def test_wrong_artifact_kind():
    data = io_formats.save_checkpoint(small_params())
    try:
        io_formats.load_trace(data)
        assert False, "expected FormatError"
    except FormatError:
        pass


def tiny_dataset(config: ModelConfig, n: int = 12) -> Dataset:
    rng = np.random.default_rng(0)
    return Dataset.from_records(
        [rng.integers(0, config.vocab_size, size=5) for _ in range(n)],
        rng.integers(0, config.n_classes, size=n),
    )


def test_trace_round_trip():
    params = small_params()
    trace = model.collect_trace(params, tiny_dataset(params.config))
    data = io_formats.save_trace(trace)
    loaded = io_formats.load_trace(data)
    assert loaded.samples.tobytes() == trace.samples.tobytes()
    assert loaded.trace_hash == trace.trace_hash
    assert loaded.dataset_hash == trace.dataset_hash
    assert io_formats.save_trace(loaded) == data


def test_json_artifacts_round_trip():
    params = small_params()
    moved = params.replace(head=params.head * 2, **{"up.0": params.up(0)[::-1].copy()})
    data = tiny_dataset(params.config)
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)

        report = neuron_similarity(params, moved)
        io_formats.write_similarity(tmp / "sim.json", report)
        again = io_formats.read_similarity(tmp / "sim.json")
        assert np.array_equal(again.scores, report.scores)
        assert again.org_hash == params.content_hash

        mask = select_neurons(report, 0.25)
        digest = io_formats.write_mask(tmp / "mask.json", mask)
        assert io_formats.read_mask(tmp / "mask.json") == mask
        assert digest == io_formats.write_mask(tmp / "copy.json", mask)

        a = utilization_profile(model.collect_trace(params, data))
        b = utilization_profile(model.collect_trace(moved, data))
        io_formats.write_profile(tmp / "a.json", a)
        loaded = io_formats.read_profile(tmp / "a.json")
        assert np.array_equal(loaded.ranks, a.ranks)
        assert np.array_equal(loaded.max_pearson, a.max_pearson)

        diff = rank_diff(a, b)
        io_formats.write_rankdiff(tmp / "diff.json", diff)
        assert np.array_equal(io_formats.read_rankdiff(tmp / "diff.json").delta_rank, diff.delta_rank)
        table = pd.read_csv(io_formats.plot_path(tmp / "diff.json"), sep="\t")
        assert list(table.columns) == ["bucket", "avg_abs_delta"]
        assert len(table) == len(diff.buckets)

        categories = categorize(diff, mask, threshold=2)
        io_formats.write_categories(tmp / "cat.json", categories)
        assert io_formats.read_categories(tmp / "cat.json") == categories

        X = np.random.default_rng(1).normal(size=(20, 4))
        probe = fit_probe(X, np.arange(20) % 3, lam=0.1, layer=2)
        io_formats.write_probe(tmp / "probe.json", probe)
        back = io_formats.read_probe(tmp / "probe.json")
        assert np.array_equal(back.weights, probe.weights)
        assert back.layer == 2 and back.lam == 0.1


def test_mask_file_layout():
    params = small_params()
    report = neuron_similarity(params, params)
    mask = select_neurons(report, 0.1)
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "mask.json"
        io_formats.write_mask(path, mask)
        doc = utils.loads(path.read_bytes())
    assert doc["kind"] == "mask"
    assert doc["total"] == NeuronLayout(params.config).total
    assert doc["neurons"][0] == [0, "up", 0]
    assert doc["model_hash"] == params.content_hash


def test_dataset_round_trip_and_hash():
    config = ModelConfig.checked(vocab_size=10, d_model=2, d_hidden=2, n_layers=1, n_classes=3)
    data = tiny_dataset(config)
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "data.jsonl"
        digest = io_formats.write_dataset(path, data)
        loaded = io_formats.read_dataset(path)
        assert loaded.dataset_hash == digest == data.dataset_hash
        assert len(loaded) == len(data)
        assert all(np.array_equal(a, b) for a, b in zip(loaded.sequences, data.sequences))

        single = Path(tmp) / "one.jsonl"
        io_formats.write_dataset(single, Dataset.from_records([[1, 2]], [0]))
        assert single.read_bytes().count(b"\n") == 1


def test_malformed_dataset_line():
    raw = b'{"label": 0, "tokens": [1, 2]}\n{"label": 1}\n'
    try:
        io_formats.parse_dataset(raw, "data.jsonl")
        assert False, "expected FormatError"
    except FormatError as e:
        assert "data.jsonl:2" in str(e)


def test_malformed_dataset_values():
    for raw in (b'{"tokens": 5, "label": 0}\n', b'{"tokens": [1, 2], "label": true}\n', b'{"tokens": {"a": 1}, "label": 0}\n'):
        try:
            io_formats.parse_dataset(raw, "data.jsonl")
            assert False, f"expected FormatError for {raw!r}"
        except FormatError as e:
            assert "data.jsonl:1" in str(e)


def test_malformed_json_artifacts():
    config = {"vocab_size": 4, "d_model": 2, "d_hidden": 2, "n_layers": 1, "n_classes": 2}
    broken = {
        (io_formats.read_similarity, "similarity"): {"config": config, "org_hash": "a", "ft_hash": "b"},
        (io_formats.read_profile, "profile"): {"config": config, "max_pearson": [0.1] * 4, "ranks": "abcd"},
        (io_formats.read_rankdiff, "rankdiff"): {"config": config, "delta_rank": [0, 0, 0, 0]},
        (io_formats.read_categories, "categories"): {"strongly_affected": [[0, "up"]], "suppressed": [], "indirectly_affected": []},
        (io_formats.read_probe, "probe"): {"weights": [[1.0, 0.0]], "lambda": 0.1},
        (io_formats.read_mask, "mask"): {"neurons": [[0, "sideways", 0]], "fraction": 0.1, "provenance": "x", "model_hash": "h", "total": 4},
    }
    with tempfile.TemporaryDirectory() as tmp:
        for (reader, kind), body in broken.items():
            path = Path(tmp) / f"{kind}.json"
            path.write_bytes(utils.dumps({"format_version": 1, "kind": kind, **body}))
            try:
                reader(path)
                assert False, f"expected FormatError for {kind}"
            except FormatError:
                pass


def test_malformed_manifest_entries():
    data = container_with({"format_version": 1, "kind": "checkpoint", "tensors": [{"name": "x"}]})
    try:
        io_formats.load_checkpoint(data)
        assert False, "expected FormatError"
    except FormatError:
        pass


def test_blobs_are_linearly_separable():
    config = ModelConfig.checked(vocab_size=16, d_model=8, d_hidden=16, n_layers=2, n_classes=3)
    params = model.init_params(config, DType.F64)
    for seed in range(3):
        data, planted = make_synthetic_dataset("blobs", config, 60, seed, pool_size=2)
        assert planted is None
        X = model.dataset_hidden_states(params, data, 0)
        probe = fit_probe(X, data.labels, lam=1e-6, fit_intercept=True, n_classes=3)
        assert probe.accuracy(X, data.labels) >= 0.99


def test_planted_rows_are_the_only_active_ones():
    config = ModelConfig.checked(
        vocab_size=16, d_model=8, d_hidden=16, n_layers=2, n_classes=2, activation="relu", seed=4
    )
    data, planted = make_synthetic_dataset("planted-neurons", config, 40, 0)
    again, _ = make_synthetic_dataset("planted-neurons", config, 40, 0)
    assert data.dataset_hash == again.dataset_hash

    trace = model.collect_trace(planted_reference(config), data)
    layout = NeuronLayout(config)
    rows = planted.indices(layout)
    silent = np.setdiff1d(layer0_up_indices(config), rows)
    assert not np.any(trace.samples[:, silent])
    assert not np.any(trace.samples[:, layout.per_layer :])
    assert np.all(trace.samples[:, rows].max(axis=0) > 0)


def test_synthetic_argument_errors():
    config = ModelConfig.checked(vocab_size=16, d_model=4, d_hidden=4, n_layers=1, n_classes=2)
    for kind, n in (("spirals", 10), ("blobs", 0), ("planted-neurons", 10)):
        try:
            make_synthetic_dataset(kind, config, n, 0)
            assert False, f"expected ConfigError for {kind}/{n}"
        except ConfigError:
            pass
    one, _ = make_synthetic_dataset("blobs", config, 1, 0)
    assert one.to_jsonl().count(b"\n") == 1


if __name__ == "__main__":
    tests = [v for k, v in list(globals().items()) if k.startswith("test_")]
    for test in tests:
        test()
        print(f"✓ {test.__name__}")
