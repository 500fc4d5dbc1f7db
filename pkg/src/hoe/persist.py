"""Checkpoint container: a JSON manifest followed by a raw float32 little-endian blob.

Layout::

    b"HOECKPT\\n" | manifest length (uint64 LE) | manifest (UTF-8 JSON) | blob

The manifest lists every tensor's name and shape in blob order. Nothing
time-dependent is written, so saving the same object twice yields the same
bytes.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Union

import numpy as np

from hoe import __version__
from hoe.adapters import LoraExpert
from hoe.errors import CorruptCheckpoint, HoeError, InvalidInput
from hoe.policy import PluginLinear, PolicyNetwork
from hoe.router import HoeModel, RouterExpert, assemble
from hoe.simplex import PreferenceVector

MAGIC = b"HOECKPT\n"
FORMAT_VERSION = 1
KINDS = ("dense", "lora_expert", "router_expert", "hoe_model")
_LE_F32 = np.dtype("<f4")

Saveable = Union[PolicyNetwork, LoraExpert, RouterExpert, HoeModel]


def atomic_write(path, data: bytes) -> None:
    """Write to a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# --------------------------------------------------------------------------
# object <-> (manifest fields, ordered tensors)


def _dense_parts(net: PolicyNetwork, prefix: str = "") -> tuple[dict, list[tuple[str, np.ndarray]]]:
    tensors = []
    for layer in net.layers:
        tensors.append((f"{prefix}{layer.module_path}.weight", layer.w_pre))
        tensors.append((f"{prefix}{layer.module_path}.bias", layer.bias))
    tensors.append((f"{prefix}value_w", net.value_w))
    tensors.append((f"{prefix}value_b", net.value_b))
    if net.unembed is not None:
        tensors.append((f"{prefix}unembed", net.unembed))
    info = {"modules": net.module_paths(), "out_activation": net.out_activation, "unembed": net.unembed is not None}
    return info, tensors


def _dense_from(info: dict, t: dict[str, np.ndarray], prefix: str = "") -> PolicyNetwork:
    layers = [PluginLinear(m, t[f"{prefix}{m}.weight"], t[f"{prefix}{m}.bias"], []) for m in info["modules"]]
    return PolicyNetwork(
        layers=layers,
        value_w=t[f"{prefix}value_w"],
        value_b=t[f"{prefix}value_b"],
        unembed=t[f"{prefix}unembed"] if info["unembed"] else None,
        out_activation=info["out_activation"],
    )


def _lora_parts(e: LoraExpert, prefix: str = "") -> tuple[dict, list[tuple[str, np.ndarray]]]:
    tensors = []
    for m in e.modules():
        down, up = e.factors[m]
        tensors.append((f"{prefix}{m}.down", down))
        tensors.append((f"{prefix}{m}.up", up))
    info = {
        "id": e.id,
        "preference": list(e.preference.weights),
        "rank": e.rank,
        "rescale": e.rescale,
        "modules": e.modules(),
    }
    return info, tensors


def _lora_from(info: dict, t: dict[str, np.ndarray], prefix: str = "") -> LoraExpert:
    factors = {m: (t[f"{prefix}{m}.down"], t[f"{prefix}{m}.up"]) for m in info["modules"]}
    return LoraExpert(
        id=info["id"],
        preference=PreferenceVector(tuple(float(x) for x in info["preference"])),
        rank=int(info["rank"]),
        rescale=float(info["rescale"]),
        factors=factors,
    )


def _router_parts(r: RouterExpert, prefix: str = "") -> tuple[dict, list[tuple[str, np.ndarray]]]:
    tensors = []
    for m in r.modules():
        w, b = r.layers[m]
        tensors.append((f"{prefix}{m}.weight", w))
        tensors.append((f"{prefix}{m}.bias", b))
    info = {"id": r.id, "preference": list(r.preference.weights), "assigned": list(r.assigned), "modules": r.modules()}
    return info, tensors


def _router_from(info: dict, t: dict[str, np.ndarray], prefix: str = "") -> RouterExpert:
    layers = {m: (t[f"{prefix}{m}.weight"], t[f"{prefix}{m}.bias"]) for m in info["modules"]}
    return RouterExpert(
        id=info["id"],
        preference=PreferenceVector(tuple(float(x) for x in info["preference"])),
        assigned=tuple(info["assigned"]),
        layers=layers,
    )


def _parts(obj: Saveable) -> tuple[str, dict, list[tuple[str, np.ndarray]]]:
    if isinstance(obj, PolicyNetwork):
        return ("dense", *_dense_parts(obj.bare()))
    if isinstance(obj, LoraExpert):
        return ("lora_expert", *_lora_parts(obj))
    if isinstance(obj, RouterExpert):
        return ("router_expert", *_router_parts(obj))
    if isinstance(obj, HoeModel):
        info, tensors = _dense_parts(obj.base, "base/")
        info = {"base": info, "lora": [], "routers": []}
        for i, e in enumerate(obj.lora_registry):
            li, lt = _lora_parts(e, f"lora{i}/")
            info["lora"].append(li)
            tensors += lt
        for i, r in enumerate(obj.router_registry):
            ri, rt = _router_parts(r, f"router{i}/")
            info["routers"].append(ri)
            tensors += rt
        return "hoe_model", info, tensors
    raise InvalidInput(f"cannot checkpoint a {type(obj).__name__}")


def _build(kind: str, info: dict, t: dict[str, np.ndarray]) -> Saveable:
    if kind == "dense":
        return _dense_from(info, t)
    if kind == "lora_expert":
        return _lora_from(info, t)
    if kind == "router_expert":
        return _router_from(info, t)
    base = _dense_from(info["base"], t, "base/")
    loras = [_lora_from(li, t, f"lora{i}/") for i, li in enumerate(info["lora"])]
    routers = [_router_from(ri, t, f"router{i}/") for i, ri in enumerate(info["routers"])]
    return assemble(base, loras, routers)


# --------------------------------------------------------------------------
# encode / decode


def to_bytes(obj: Saveable, seed: int | None = None, metadata: dict | None = None) -> bytes:
    kind, info, tensors = _parts(obj)
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "seed": seed,
        "created_by": f"hoe {__version__}",
        "metadata": metadata or {},
        "info": info,
        "tensors": [{"name": n, "shape": list(np.shape(a))} for n, a in tensors],
    }
    if kind in ("lora_expert", "router_expert"):
        manifest["preference"] = info["preference"]
    if kind == "lora_expert":
        manifest["rank"], manifest["rescale"] = info["rank"], info["rescale"]
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    blob = b"".join(np.ascontiguousarray(a, dtype=_LE_F32).tobytes() for _, a in tensors)
    return MAGIC + struct.pack("<Q", len(head)) + head + blob


def from_bytes(data: bytes) -> tuple[Saveable, dict]:
    """Decode a checkpoint; returns the object and its manifest."""
    if not data.startswith(MAGIC) or len(data) < len(MAGIC) + 8:
        raise CorruptCheckpoint("missing checkpoint header")
    (n,) = struct.unpack_from("<Q", data, len(MAGIC))
    start = len(MAGIC) + 8
    if start + n > len(data):
        raise CorruptCheckpoint("manifest runs past the end of the file")
    try:
        manifest = json.loads(data[start:start + n].decode("utf-8"))
        version = manifest["format_version"]
        kind = manifest["kind"]
        specs = [(t["name"], tuple(int(d) for d in t["shape"])) for t in manifest["tensors"]]
        info = manifest["info"]
    except (ValueError, KeyError, TypeError) as exc:
        raise CorruptCheckpoint(f"unreadable manifest: {exc}") from exc
    if version != FORMAT_VERSION:
        raise CorruptCheckpoint(f"unsupported format_version {version!r}")
    if kind not in KINDS:
        raise CorruptCheckpoint(f"unknown checkpoint kind {kind!r}")
    blob = data[start + n:]
    expected = sum(int(np.prod(s, dtype=np.int64)) for _, s in specs) * 4
    if len(blob) != expected:
        raise CorruptCheckpoint(f"blob has {len(blob)} bytes, manifest declares {expected}")
    tensors, off = {}, 0
    for name, shape in specs:
        count = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(blob, dtype=_LE_F32, count=count, offset=off).reshape(shape)
        tensors[name] = arr.astype(np.float32)
        off += count * 4
    try:
        obj = _build(kind, info, tensors)
    except (KeyError, TypeError, ValueError, HoeError) as exc:
        raise CorruptCheckpoint(f"manifest does not describe a valid {kind}: {exc}") from exc
    return obj, manifest


def save(obj: Saveable, path, seed: int | None = None, metadata: dict | None = None) -> Path:
    atomic_write(path, to_bytes(obj, seed, metadata))
    return Path(path)


def load(path) -> Saveable:
    return from_bytes(Path(path).read_bytes())[0]


def load_with_manifest(path) -> tuple[Saveable, dict]:
    return from_bytes(Path(path).read_bytes())
