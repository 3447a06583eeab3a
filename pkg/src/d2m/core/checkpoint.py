"""Generator checkpoints in the ``.d2m`` container.

A ``.d2m`` file is an uncompressed zip archive holding one ``.npy`` member
per parameter array and a JSON manifest (shapes, dtypes, per-array and
whole-archive SHA-256). The manifest is space-padded to a fixed block so the
file size depends only on the parameter shapes, never on metadata values.
"""

from __future__ import annotations

import datetime as _dt
import hashlib
import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MANIFEST_NAME = "manifest.json"
MANIFEST_BLOCK = 16384
FORMAT_VERSION = 1
STAGES = ("pretrained", "distilled")
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


class CheckpointError(RuntimeError):
    """Unreadable, truncated or tampered checkpoint."""


def _array_digest(name: str, arr: np.ndarray) -> str:
    h = hashlib.sha256()
    h.update(name.encode())
    h.update(str(arr.dtype).encode())
    h.update(repr(tuple(arr.shape)).encode())
    h.update(np.asarray(arr, order="C").tobytes())
    return h.hexdigest()


@dataclass
class GeneratorCheckpoint:
    params: dict[str, np.ndarray]
    latent_dim: int
    class_count: int
    image_shape: tuple[int, int, int]
    stage: str = "pretrained"
    config_digest: str = ""
    generator_width: int = 64
    created: str = field(default_factory=lambda: _dt.datetime.now(_dt.timezone.utc).isoformat())
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}, got {self.stage!r}")
        self.image_shape = tuple(int(v) for v in self.image_shape)

    @property
    def metadata(self) -> dict:
        return {
            "latent_dim": self.latent_dim,
            "class_count": self.class_count,
            "image_shape": list(self.image_shape),
            "stage": self.stage,
            "config_digest": self.config_digest,
            "generator_width": self.generator_width,
            "created": self.created,
            "extra": self.extra,
        }

    @property
    def param_count(self) -> int:
        return int(sum(a.size for a in self.params.values()))

    @property
    def nbytes(self) -> int:
        return int(sum(a.nbytes for a in self.params.values()))

    def digest(self) -> str:
        """Content hash of the parameter arrays (metadata excluded)."""
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(_array_digest(name, self.params[name]).encode())
        return h.hexdigest()

    def __eq__(self, other) -> bool:
        if not isinstance(other, GeneratorCheckpoint):
            return NotImplemented
        if self.metadata != other.metadata or list(self.params) != list(other.params):
            return False
        return all(
            a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()
            for a, b in zip(self.params.values(), other.params.values())
        )


def _member(name: str) -> zipfile.ZipInfo:
    info = zipfile.ZipInfo(name, date_time=_ZIP_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    return info


def save_checkpoint(ckpt: GeneratorCheckpoint, path: str | Path) -> None:
    arrays = []
    for i, (name, arr) in enumerate(ckpt.params.items()):
        buf = io.BytesIO()
        np.save(buf, np.asarray(arr, order="C"), allow_pickle=False)
        arrays.append({"name": name, "member": f"arrays/{i:05d}.npy",
                       "dtype": str(arr.dtype), "shape": list(arr.shape),
                       "sha256": _array_digest(name, arr), "data": buf.getvalue()})
    manifest = {
        "format": "d2m-checkpoint",
        "version": FORMAT_VERSION,
        "metadata": ckpt.metadata,
        "arrays": [{k: v for k, v in a.items() if k != "data"} for a in arrays],
        "digest": ckpt.digest(),
    }
    text = json.dumps(manifest, sort_keys=True).encode()
    if len(text) > MANIFEST_BLOCK:
        raise CheckpointError(f"manifest of {len(text)} bytes exceeds the {MANIFEST_BLOCK}-byte block")
    text = text + b" " * (MANIFEST_BLOCK - len(text))

    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr(_member(MANIFEST_NAME), text)
        for a in arrays:
            zf.writestr(_member(a["member"]), a["data"])
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> GeneratorCheckpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read(MANIFEST_NAME))
            params = {}
            for entry in manifest["arrays"]:
                arr = np.load(io.BytesIO(zf.read(entry["member"])), allow_pickle=False)
                if _array_digest(entry["name"], arr) != entry["sha256"]:
                    raise CheckpointError(f"{path}: digest mismatch for array {entry['name']!r}")
                params[entry["name"]] = arr
    except CheckpointError:
        raise
    except (zipfile.BadZipFile, KeyError, ValueError, OSError, EOFError) as e:
        raise CheckpointError(f"{path}: corrupted checkpoint ({e})") from e

    if manifest.get("format") != "d2m-checkpoint":
        raise CheckpointError(f"{path}: not a d2m checkpoint")
    meta = manifest["metadata"]
    ckpt = GeneratorCheckpoint(
        params=params,
        latent_dim=meta["latent_dim"],
        class_count=meta["class_count"],
        image_shape=tuple(meta["image_shape"]),
        stage=meta["stage"],
        config_digest=meta["config_digest"],
        generator_width=meta["generator_width"],
        created=meta["created"],
        extra=meta["extra"],
    )
    if ckpt.digest() != manifest["digest"]:
        raise CheckpointError(f"{path}: archive digest mismatch")
    return ckpt
