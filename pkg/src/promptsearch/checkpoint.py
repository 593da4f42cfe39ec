"""Versioned checkpoint container: a zip with a JSON manifest plus named
little-endian float64 arrays (one .npy entry per parameter or buffer).
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile

import numpy as np

FORMAT_VERSION = 1


def array_digest(arr):
    return hashlib.sha256(np.ascontiguousarray(arr, dtype="<f8").tobytes()).hexdigest()


def save_checkpoint(path, arrays, manifest):
    """arrays: name -> ndarray; manifest: JSON-serializable metadata."""
    manifest = dict(manifest)
    manifest["format_version"] = FORMAT_VERSION
    manifest["weight_digests"] = {name: array_digest(a) for name, a in arrays.items()}
    with zipfile.ZipFile(path, "w", zipfile.ZIP_DEFLATED) as zf:
        zf.writestr("manifest.json", json.dumps(manifest, indent=2, sort_keys=True))
        for name, arr in sorted(arrays.items()):
            buf = io.BytesIO()
            np.save(buf, np.ascontiguousarray(arr, dtype="<f8"))
            zf.writestr(f"arrays/{name}.npy", buf.getvalue())


def load_checkpoint(path):
    """Returns (arrays dict, manifest dict); verifies digests and version."""
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        if manifest.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint version {manifest.get('format_version')}")
        arrays = {}
        for info in zf.namelist():
            if info.startswith("arrays/") and info.endswith(".npy"):
                name = info[len("arrays/"):-len(".npy")]
                arrays[name] = np.load(io.BytesIO(zf.read(info)))
    for name, digest in manifest.get("weight_digests", {}).items():
        if name not in arrays:
            raise ValueError(f"checkpoint missing array {name}")
        if array_digest(arrays[name]) != digest:
            raise ValueError(f"digest mismatch for array {name}")
    return arrays, manifest
