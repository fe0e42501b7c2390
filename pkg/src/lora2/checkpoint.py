"""Checkpoint, merged-weight and metrics files.

Checkpoints and weight files share one container::

    <magic line>\\n<manifest as one line of JSON>\\n<payload>

The payload is every declared array, in manifest order, as little-endian
float64.  Writes go to a temporary file that is renamed into place.
"""

from __future__ import annotations

import json
import os
import tempfile
import warnings
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .adapters import LORA2_FACTORS, Lora2Adapter, LoraAdapter
from .training import MetricsRecord

CHECKPOINT_MAGIC = b"LORA2-CHECKPOINT"
WEIGHTS_MAGIC = b"LORA2-WEIGHTS"
FORMAT_VERSION = 1
_LE = np.dtype("<f8")


class CheckpointError(ValueError):
    pass


class ConfigMismatchWarning(UserWarning):
    pass


def _atomic_write(path: Path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _pack(magic: bytes, manifest: dict, arrays: Iterable[np.ndarray]) -> bytes:
    chunks = []
    for a in arrays:
        a = np.asarray(a, dtype=np.float64)
        if not np.isfinite(a).all():
            raise CheckpointError("refusing to serialize non-finite values")
        chunks.append(a.astype(_LE).tobytes(order="C"))
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    return magic + b"\n" + head + b"\n" + b"".join(chunks)


def _unpack(path, magic: bytes) -> tuple[dict, bytes]:
    raw = Path(path).read_bytes()
    first = raw.find(b"\n")
    second = raw.find(b"\n", first + 1)
    if first < 0 or second < 0 or raw[:first] != magic:
        raise CheckpointError(f"{path} is not a {magic.decode()} file")
    manifest = json.loads(raw[first + 1 : second])
    if manifest.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported format version {manifest.get('version')!r}")
    return manifest, raw[second + 1 :]


def _read_arrays(payload: bytes, shapes: list[tuple[int, ...]]) -> list[np.ndarray]:
    expected = sum(int(np.prod(s)) for s in shapes) * 8
    if len(payload) != expected:
        raise CheckpointError(f"payload length mismatch: {len(payload)} bytes, expected {expected}")
    out, offset = [], 0
    for s in shapes:
        n = int(np.prod(s))
        a = np.frombuffer(payload, dtype=_LE, count=n, offset=offset).astype(np.float64).reshape(s)
        if not np.isfinite(a).all():
            raise CheckpointError("payload contains non-finite values")
        out.append(a)
        offset += n * 8
    return out


def _factors(ad) -> dict[str, np.ndarray]:
    if isinstance(ad, Lora2Adapter):
        return {f: (ad.lam if f == "lam" else getattr(ad, f)) for f in LORA2_FACTORS}
    if isinstance(ad, LoraAdapter):
        return {"b": ad.b, "a": ad.a}
    raise TypeError(f"cannot checkpoint {type(ad).__name__}")


def save_checkpoint(path, adapters: Mapping[str, object], step: int, cfg=None):
    """Write ``adapters`` (site -> adapter) at ``step``; ``cfg`` is an ExperimentConfig or None."""
    entries, arrays = [], []
    for site, ad in adapters.items():
        factors = _factors(ad)
        entry = {
            "site": site,
            "kind": "lora2" if isinstance(ad, Lora2Adapter) else "lora",
            "shapes": {f: list(a.shape) for f, a in factors.items()},
            "order": list(factors),
        }
        if isinstance(ad, Lora2Adapter):
            entry["mask"] = [bool(m) for m in ad.mask]
        entries.append(entry)
        arrays.extend(factors.values())
    manifest = {
        "format": "lora2-checkpoint",
        "version": FORMAT_VERSION,
        "step": int(step),
        "config_hash": None if cfg is None else cfg.hash(),
        "config": None if cfg is None else cfg.dumps(),
        "adapters": entries,
        "dtype": "float64-le",
    }
    _atomic_write(Path(path), _pack(CHECKPOINT_MAGIC, manifest, arrays))


def read_manifest(path) -> dict:
    return _unpack(path, CHECKPOINT_MAGIC)[0]


def load_checkpoint(path, cfg=None) -> tuple[dict[str, object], int, str | None]:
    """Return ``(adapters, step, config_hash)``; warns if ``cfg`` hashes differently."""
    manifest, payload = _unpack(path, CHECKPOINT_MAGIC)
    shapes = [tuple(e["shapes"][f]) for e in manifest["adapters"] for f in e["order"]]
    arrays = iter(_read_arrays(payload, shapes))
    adapters = {}
    for e in manifest["adapters"]:
        vals = {f: next(arrays) for f in e["order"]}
        if e["kind"] == "lora2":
            adapters[e["site"]] = Lora2Adapter(
                vals["u_out"], vals["u_in"], vals["lam"], vals["v_in"], vals["v_out"], np.array(e["mask"], dtype=bool)
            )
        elif e["kind"] == "lora":
            adapters[e["site"]] = LoraAdapter(vals["b"], vals["a"])
        else:
            raise CheckpointError(f"unknown adapter kind {e['kind']!r}")
    stored = manifest.get("config_hash")
    if cfg is not None and stored != cfg.hash():
        warnings.warn(f"checkpoint config hash {stored} does not match the given config", ConfigMismatchWarning)
    return adapters, manifest["step"], stored


def save_weights(path, weights: Mapping[str, np.ndarray]):
    manifest = {
        "format": "lora2-weights",
        "version": FORMAT_VERSION,
        "sites": [{"name": n, "shape": list(w.shape)} for n, w in weights.items()],
        "dtype": "float64-le",
    }
    _atomic_write(Path(path), _pack(WEIGHTS_MAGIC, manifest, weights.values()))


def load_weights(path) -> dict[str, np.ndarray]:
    manifest, payload = _unpack(path, WEIGHTS_MAGIC)
    shapes = [tuple(s["shape"]) for s in manifest["sites"]]
    return dict(zip((s["name"] for s in manifest["sites"]), _read_arrays(payload, shapes)))


class MetricsWriter:
    """Append-only JSON-lines sink, flushed per record."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "a")

    def __call__(self, rec: MetricsRecord):
        self._fh.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")
        self._fh.flush()

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_metrics(path) -> list[MetricsRecord]:
    """Parse every complete line; a torn final line is ignored."""
    out = []
    for line in Path(path).read_text().splitlines():
        try:
            out.append(MetricsRecord.from_dict(json.loads(line)))
        except json.JSONDecodeError:
            break
    return out
