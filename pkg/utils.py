import math
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, Sequence

import numpy as np
import orjson
import xxhash
from dotenv import load_dotenv

from constants import Env

load_dotenv()


def round_half_away(x: float) -> int:
    """Round to nearest int, halves away from zero (0.5 -> 1, -2.5 -> -3)"""
    return int(math.copysign(math.floor(abs(x) + 0.5), x))


_FNV64_OFFSET = 0xCBF29CE484222325
_FNV64_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


def hash_bytes(*chunks: bytes) -> str:
    """xxh64 digest of an artifact file, as recorded in run.json"""
    h = xxhash.xxh64()
    for chunk in chunks:
        h.update(chunk)
    return h.hexdigest()


def fnv1a_64(*chunks: bytes) -> str:
    """64-bit FNV-1a as 16 hex digits; content_hash and dataset_hash use it"""
    h = _FNV64_OFFSET
    for chunk in chunks:
        for byte in chunk:
            h = ((h ^ byte) * _FNV64_PRIME) & _MASK64
    return f"{h:016x}"


def hash_arrays(arrays: Iterable[np.ndarray]) -> str:
    """FNV-1a over the little-endian row-major bytes of each array, in order"""
    return fnv1a_64(*(np.ascontiguousarray(arr).tobytes() for arr in arrays))


def dumps(obj) -> bytes:
    return orjson.dumps(
        obj, option=orjson.OPT_SORT_KEYS | orjson.OPT_SERIALIZE_NUMPY
    )


def loads(raw: bytes | str):
    return orjson.loads(raw)


def worker_threads() -> int:
    raw = os.getenv(Env.THREADS, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def ordered_map(fn: Callable, items: Sequence) -> list:
    """Map fn over items with up to NEFT_THREADS workers; results keep input order"""
    threads = worker_threads()
    if threads == 1 or len(items) < 2:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))
