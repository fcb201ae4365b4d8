import hashlib
import json
import os
import zlib
from pathlib import Path
from typing import Any, Union

import numpy as np


def create_dir_if_not_exists(directory: Union[str, Path]) -> Path:
    """Create a directory if it doesn't exist.

    Args:
        directory: The directory path to create

    Returns:
        The directory as a Path
    """
    os.makedirs(directory, exist_ok=True)
    return Path(directory)


def to_jsonable(obj: Any) -> Any:
    """Recursively convert numpy scalars/arrays and paths into JSON types."""
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        value = float(obj)
        return value if np.isfinite(value) else str(value)
    if isinstance(obj, float) and not np.isfinite(obj):
        return str(obj)
    if isinstance(obj, Path):
        return str(obj)
    if hasattr(obj, "model_dump"):
        return to_jsonable(obj.model_dump(mode="json"))
    return obj


def canonical_json(obj: Any) -> str:
    return json.dumps(to_jsonable(obj), sort_keys=True, separators=(",", ":"))


def config_hash(obj: Any) -> str:
    """sha256 of the canonical JSON form of a configuration."""
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


def file_checksum(path: Union[str, Path], chunk_size: int = 1 << 20) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(chunk_size), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_json(path: Union[str, Path], payload: Any) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(to_jsonable(payload), handle, indent=2, sort_keys=True)
        handle.write("\n")
    return path


def read_json(path: Union[str, Path]) -> Any:
    with open(path, "r", encoding="utf-8") as handle:
        return json.load(handle)


def stream_key(label: Union[str, int]) -> int:
    """Integer key for a stream label; strings map through crc32."""
    if isinstance(label, (int, np.integer)):
        return int(label)
    return zlib.crc32(str(label).encode("utf-8"))


def spawn_rng(master_seed: int, *labels: Union[str, int]) -> np.random.Generator:
    """Counter-based random stream for (master_seed, *labels).

    The same labels always give the same stream; distinct label paths give
    statistically independent Philox streams.
    """
    keys = tuple(stream_key(label) for label in labels)
    seq = np.random.SeedSequence(entropy=int(master_seed) & ((1 << 64) - 1), spawn_key=keys)
    return np.random.Generator(np.random.Philox(seq))
