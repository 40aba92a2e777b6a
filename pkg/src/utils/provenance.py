import hashlib
from pathlib import Path
from typing import Dict, Mapping, Union

from .. import __version__


def sha256_file(path: Union[str, Path]) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def hash_mapping(values: Mapping[str, object]) -> str:
    """Short stable hash of a flat mapping (keys sorted, values via ``repr``)."""
    canonical = "\n".join(f"{key}={values[key]!r}" for key in sorted(values))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


def write_manifest(path: Union[str, Path], entries: Mapping[str, object]) -> Path:
    """Write a plain-text ``key = value`` manifest, one entry per line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"{key} = {value}" for key, value in entries.items()]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def read_manifest(path: Union[str, Path]) -> Dict[str, str]:
    entries: Dict[str, str] = {}
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        entries[key.strip()] = value.strip()
    return entries


def code_version() -> str:
    return f"projection-regret {__version__}"
