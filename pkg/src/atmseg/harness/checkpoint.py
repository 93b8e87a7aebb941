"""Checkpoint archive: a zip holding ``manifest.json`` (name, shape, dtype
per tensor), ``config.json``, ``meta.json`` and ``params.npz``."""

from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path

import numpy as np
import torch


def save_checkpoint(path: str | Path, state: dict[str, torch.Tensor], config: dict, meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {name: t.detach().cpu().numpy() for name, t in state.items()}
    manifest = [
        {"name": name, "shape": list(a.shape), "dtype": str(a.dtype)} for name, a in arrays.items()
    ]
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_DEFLATED) as z:
        z.writestr("manifest.json", json.dumps(manifest, indent=1))
        z.writestr("config.json", json.dumps(config, indent=2, sort_keys=True))
        z.writestr("meta.json", json.dumps(meta or {}, indent=2, sort_keys=True))
        z.writestr("params.npz", buf.getvalue())
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path) -> tuple[dict[str, torch.Tensor], dict, dict]:
    with zipfile.ZipFile(path) as z:
        manifest = json.loads(z.read("manifest.json"))
        config = json.loads(z.read("config.json"))
        meta = json.loads(z.read("meta.json"))
        with np.load(io.BytesIO(z.read("params.npz"))) as npz:
            state = {}
            for entry in manifest:
                arr = npz[entry["name"]]
                if list(arr.shape) != entry["shape"] or str(arr.dtype) != entry["dtype"]:
                    raise ValueError(f"{path}: tensor {entry['name']} does not match its manifest entry")
                state[entry["name"]] = torch.from_numpy(arr.copy())
    return state, config, meta
