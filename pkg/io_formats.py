"""
File formats for every pipeline artifact.

Checkpoints and traces are safetensors containers whose `__metadata__`
holds one key, "neft", with the JSON manifest. Everything else is sorted-key
JSON; datasets are JSONL.
"""

import struct
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import pandas as pd
from safetensors import SafetensorError
from safetensors.numpy import load as st_load
from safetensors.numpy import save as st_save

import utils
from analysis import CategoryReport, RankDiffReport, UtilizationProfile, category_counts
from constants import FORMAT_VERSION, METADATA_KEY, NUMPY_DTYPES, ArtifactKind, DType
from errors import (
    ConfigError,
    FormatError,
    HashMismatchError,
    NeftError,
    TruncatedPayloadError,
    UnknownFormatVersionError,
)
from model import ActivationTrace, Dataset, ModelConfig, NeuronId, ParameterSet
from selector import NeuronMask, ProbeModel, SimilarityReport

_DTYPE_NAMES = {np.dtype(v): k for k, v in NUMPY_DTYPES.items()}


def _config_dict(config: ModelConfig) -> dict:
    return config.model_dump(mode="json")


def _config_from(raw) -> ModelConfig:
    if not isinstance(raw, dict):
        raise FormatError("manifest has no model config")
    try:
        return ModelConfig.checked(**raw)
    except ConfigError as e:
        raise FormatError(str(e)) from None


def _check_version(doc: dict, kind: ArtifactKind):
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise UnknownFormatVersionError(
            f"{kind} format_version {version!r} is not supported (expected {FORMAT_VERSION})"
        )
    if doc.get("kind", kind) != kind:
        raise FormatError(f"expected a {kind} artifact, found {doc.get('kind')!r}")


# safetensors container


def _read_header(data: bytes) -> tuple[dict, int]:
    """Parsed header JSON and the byte offset where the payload starts"""
    if len(data) < 8:
        raise TruncatedPayloadError(f"file is {len(data)} bytes; header length missing")
    (n,) = struct.unpack("<Q", data[:8])
    if len(data) < 8 + n:
        raise TruncatedPayloadError(f"header needs {n} bytes, file has {len(data) - 8}")
    try:
        header = utils.loads(data[8 : 8 + n])
    except ValueError:
        raise FormatError("container header is not valid JSON") from None
    if not isinstance(header, dict):
        raise FormatError("container header is not a JSON object")
    return header, 8 + n


def _layout(arrays: dict[str, np.ndarray]) -> dict[str, tuple[int, int]]:
    """name -> (byte_offset, byte_len) as safetensors lays the payload out"""
    header, _ = _read_header(st_save(arrays))
    spans = {}
    for name, entry in header.items():
        if name == "__metadata__":
            continue
        start, end = entry["data_offsets"]
        spans[name] = (int(start), int(end - start))
    return spans


def _pack(kind: ArtifactKind, arrays: dict[str, np.ndarray], extra: dict, content_hash: str) -> bytes:
    arrays = {name: np.ascontiguousarray(arr) for name, arr in arrays.items()}
    offsets = _layout(arrays)
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": str(kind),
        "tensors": [
            {
                "name": name,
                "dtype": str(_DTYPE_NAMES[arr.dtype]),
                "shape": list(arr.shape),
                "byte_offset": offsets[name][0],
                "byte_len": offsets[name][1],
            }
            for name, arr in arrays.items()
        ],
        "content_hash": content_hash,
        **extra,
    }
    return st_save(arrays, metadata={METADATA_KEY: utils.dumps(manifest).decode()})


def _unpack(data: bytes, kind: ArtifactKind) -> tuple[dict, dict[str, np.ndarray]]:
    header, payload_start = _read_header(data)
    raw = (header.get("__metadata__") or {}).get(METADATA_KEY)
    if raw is None:
        raise FormatError(f"container has no '{METADATA_KEY}' manifest")
    with _fields("container", "manifest"):
        manifest = utils.loads(raw)
        _check_version(manifest, kind)
        entries = manifest.get("tensors") or []
        if not entries:
            raise FormatError("manifest lists no tensors")
        spans = sorted((int(e["byte_offset"]), int(e["byte_len"])) for e in entries)
    cursor = 0
    for offset, length in spans:
        if offset != cursor:
            raise FormatError("tensor byte ranges are not contiguous")
        cursor += length
    if len(data) < payload_start + cursor:
        raise TruncatedPayloadError(
            f"payload needs {cursor} bytes, file has {len(data) - payload_start}"
        )

    try:
        loaded = st_load(data)
    except SafetensorError as e:
        raise FormatError(f"unreadable safetensors container: {e}") from None
    arrays = {}
    with _fields("container", "manifest"):
        for e in entries:
            name = e["name"]
            if name not in loaded:
                raise FormatError(f"tensor {name} is listed but not stored")
            arr = loaded[name]
            if list(arr.shape) != list(e["shape"]) or _DTYPE_NAMES.get(arr.dtype) != DType(e["dtype"]):
                raise FormatError(f"tensor {name} does not match its manifest entry")
            arrays[name] = arr
    return manifest, arrays


def save_checkpoint(params: ParameterSet) -> bytes:
    return _pack(
        ArtifactKind.CHECKPOINT,
        params.tensors,
        {"config": _config_dict(params.config)},
        params.content_hash,
    )


def load_checkpoint(data: bytes) -> ParameterSet:
    manifest, arrays = _unpack(data, ArtifactKind.CHECKPOINT)
    config = _config_from(manifest.get("config"))
    try:
        params = ParameterSet(config, {name: arrays[name] for name in config.tensor_shapes()})
    except (KeyError, ConfigError) as e:
        raise FormatError(f"checkpoint tensors do not match its config ({e})") from None
    if params.content_hash != manifest.get("content_hash"):
        raise HashMismatchError(
            f"content hash {params.content_hash} != manifest {manifest.get('content_hash')}"
        )
    return params


def write_checkpoint(path, params: ParameterSet) -> str:
    Path(path).write_bytes(save_checkpoint(params))
    return params.content_hash


def read_checkpoint(path) -> ParameterSet:
    return load_checkpoint(Path(path).read_bytes())


def save_trace(trace: ActivationTrace) -> bytes:
    return _pack(
        ArtifactKind.TRACE,
        {"samples": trace.samples},
        {
            "config": _config_dict(trace.config),
            "dataset_hash": trace.dataset_hash,
            "params_hash": trace.params_hash,
        },
        trace.trace_hash,
    )


def load_trace(data: bytes) -> ActivationTrace:
    manifest, arrays = _unpack(data, ArtifactKind.TRACE)
    trace = ActivationTrace(
        _config_from(manifest.get("config")),
        arrays["samples"],
        dataset_hash=manifest.get("dataset_hash", ""),
        params_hash=manifest.get("params_hash", ""),
    )
    if trace.trace_hash != manifest.get("content_hash"):
        raise HashMismatchError(f"trace hash {trace.trace_hash} != manifest")
    return trace


def write_trace(path, trace: ActivationTrace) -> str:
    Path(path).write_bytes(save_trace(trace))
    return trace.trace_hash


def read_trace(path) -> ActivationTrace:
    return load_trace(Path(path).read_bytes())


# JSON artifacts


def _write_json(path, kind: ArtifactKind, body: dict) -> str:
    raw = utils.dumps({"format_version": FORMAT_VERSION, "kind": str(kind), **body})
    Path(path).write_bytes(raw)
    return utils.hash_bytes(raw)


def _read_json(path, kind: ArtifactKind) -> dict:
    raw = Path(path).read_bytes()
    try:
        doc = utils.loads(raw)
    except ValueError:
        raise FormatError(f"{path} is not valid JSON") from None
    if not isinstance(doc, dict):
        raise FormatError(f"{path} is not a JSON object")
    _check_version(doc, kind)
    return doc


@contextmanager
def _fields(path, what: str):
    """Missing keys or wrongly typed values in a JSON artifact raise FormatError"""
    try:
        yield
    except NeftError:
        raise
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"malformed {what} in {path}: {type(e).__name__} {e}") from None


def mask_to_dict(mask: NeuronMask) -> dict:
    return {
        "model_hash": mask.model_hash,
        "fraction": mask.fraction,
        "provenance": mask.provenance,
        "total": mask.total,
        "neurons": [n.as_list() for n in mask.neurons],
    }


def write_mask(path, mask: NeuronMask) -> str:
    return _write_json(path, ArtifactKind.MASK, mask_to_dict(mask))


def read_mask(path) -> NeuronMask:
    doc = _read_json(path, ArtifactKind.MASK)
    with _fields(path, "mask"):
        return NeuronMask(
            tuple(tuple(n) for n in doc["neurons"]),
            float(doc["fraction"]),
            doc["provenance"],
            doc["model_hash"],
            int(doc["total"]),
        )


def write_similarity(path, report: SimilarityReport) -> str:
    return _write_json(
        path,
        ArtifactKind.SIMILARITY,
        {
            "config": _config_dict(report.config),
            "org_hash": report.org_hash,
            "ft_hash": report.ft_hash,
            "scores": report.scores.tolist(),
        },
    )


def read_similarity(path) -> SimilarityReport:
    doc = _read_json(path, ArtifactKind.SIMILARITY)
    with _fields(path, "similarity"):
        return SimilarityReport(
            _config_from(doc.get("config")),
            np.asarray(doc["scores"], dtype=np.float64),
            doc["org_hash"],
            doc["ft_hash"],
        )


def write_profile(path, profile: UtilizationProfile) -> str:
    return _write_json(
        path,
        ArtifactKind.PROFILE,
        {
            "config": _config_dict(profile.config),
            "trace_hash": profile.trace_hash,
            "max_pearson": profile.max_pearson.tolist(),
            "ranks": profile.ranks.tolist(),
        },
    )


def read_profile(path) -> UtilizationProfile:
    doc = _read_json(path, ArtifactKind.PROFILE)
    with _fields(path, "profile"):
        return UtilizationProfile(
            _config_from(doc.get("config")),
            np.asarray(doc["max_pearson"], dtype=np.float64),
            np.asarray(doc["ranks"], dtype=np.int64),
            doc.get("trace_hash", ""),
        )


def write_rankdiff(path, report: RankDiffReport) -> str:
    """JSON report plus a tab-separated `<path>.tsv` of (bucket, avg_abs_delta) rows"""
    digest = _write_json(
        path,
        ArtifactKind.RANKDIFF,
        {
            "config": _config_dict(report.config),
            "convention": "delta_rank = rank_b - rank_a; rank 0 = highest max-Pearson",
            "delta_rank": report.delta_rank.tolist(),
            "avg_abs_delta": report.avg_abs_delta,
            "buckets": report.buckets,
        },
    )
    pd.DataFrame(report.plot_rows(), columns=["bucket", "avg_abs_delta"]).to_csv(
        plot_path(path), sep="\t", index=False
    )
    return digest


def plot_path(path) -> Path:
    return Path(f"{path}.tsv")


def read_rankdiff(path) -> RankDiffReport:
    doc = _read_json(path, ArtifactKind.RANKDIFF)
    with _fields(path, "rankdiff"):
        return RankDiffReport(
            _config_from(doc.get("config")),
            np.asarray(doc["delta_rank"], dtype=np.int64),
            float(doc["avg_abs_delta"]),
            doc["buckets"],
        )


def write_categories(path, report: CategoryReport) -> str:
    return _write_json(
        path,
        ArtifactKind.CATEGORIES,
        {
            "threshold": report.threshold,
            "mask_provenance": report.mask_provenance,
            "mask_hash": report.mask_hash,
            "counts": category_counts(report),
            "strongly_affected": [n.as_list() for n in report.strongly_affected],
            "suppressed": [n.as_list() for n in report.suppressed],
            "indirectly_affected": [n.as_list() for n in report.indirectly_affected],
        },
    )


def read_categories(path) -> CategoryReport:
    doc = _read_json(path, ArtifactKind.CATEGORIES)

    def ids(key):
        return tuple(NeuronId(int(l), r, int(w)) for l, r, w in doc[key])

    with _fields(path, "categories"):
        return CategoryReport(
            ids("strongly_affected"),
            ids("suppressed"),
            ids("indirectly_affected"),
            int(doc["threshold"]),
            doc["mask_provenance"],
            doc["mask_hash"],
        )


def write_probe(path, probe: ProbeModel) -> str:
    return _write_json(
        path,
        ArtifactKind.PROBE,
        {
            "weights": probe.weights.tolist(),
            "bias": probe.bias.tolist(),
            "lambda": probe.lam,
            "fit_intercept": probe.fit_intercept,
            "layer": probe.layer,
        },
    )


def read_probe(path) -> ProbeModel:
    doc = _read_json(path, ArtifactKind.PROBE)
    with _fields(path, "probe"):
        weights = np.asarray(doc["weights"], dtype=np.float64)
        bias = np.asarray(doc["bias"], dtype=np.float64)
        lam = float(doc["lambda"])
        layer = doc.get("layer")
        if layer is not None:
            layer = int(layer)
    if weights.ndim != 2 or not np.all(np.isfinite(weights)):
        raise FormatError("probe weights must be a finite class x d_model matrix")
    if bias.shape != (weights.shape[0],):
        raise FormatError(f"probe bias has shape {list(bias.shape)} for {weights.shape[0]} classes")
    return ProbeModel(weights, bias, lam, bool(doc.get("fit_intercept", False)), layer)


# datasets


def _is_int(value) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


def parse_dataset(raw: bytes, source: str = "<bytes>") -> Dataset:
    sequences, labels = [], []
    for lineno, line in enumerate(raw.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = utils.loads(line)
            tokens, label = rec["tokens"], rec["label"]
            well_typed = (
                isinstance(tokens, list)
                and _is_int(label)
                and all(_is_int(t) for t in tokens)
            )
        except (ValueError, KeyError, TypeError):
            raise FormatError(f"{source}:{lineno}: expected {{tokens, label}} JSON") from None
        if not well_typed:
            raise FormatError(f"{source}:{lineno}: tokens must be a list of integers, label an integer")
        sequences.append(np.asarray(tokens, dtype=np.int64))
        labels.append(label)
    return Dataset(tuple(sequences), np.asarray(labels, dtype=np.int64), utils.fnv1a_64(raw))


def read_dataset(path) -> Dataset:
    return parse_dataset(Path(path).read_bytes(), str(path))


def write_dataset(path, dataset: Dataset) -> str:
    raw = dataset.to_jsonl()
    Path(path).write_bytes(raw)
    return utils.fnv1a_64(raw)
