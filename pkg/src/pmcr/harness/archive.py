"""Model archive: a directory of ``.pmt`` tensors plus a JSON manifest."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Optional, Union

import numpy as np
import torch

from pmcr.core import DTYPE, Hyperparams, Rng, encode_tensor, read_tensor
from pmcr.harness.config import Flags

FORMAT = "pmcr-model-v1"


def _write(path: Path, arr) -> str:
    buf = encode_tensor(arr)
    path.write_bytes(buf)
    return hashlib.sha256(buf).hexdigest()


def save_model(model, out_dir: Union[str, Path], flags: Optional[Flags] = None, iteration: int = 0,
               extra: Optional[dict] = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tensors = {}
    for name, p in model.state_dict().items():
        fname = f"{name}.pmt"
        tensors[name] = {"file": fname, "shape": list(p.shape), "sha256": _write(out / fname, p.detach())}
    memory = {}
    for c in sorted(model.memory.buffers):
        buf = model.memory.buffers[c]
        if not buf:
            continue
        fname = f"memory.class{c}.pmt"
        arr = torch.stack(buf, dim=1)
        memory[str(c)] = {"file": fname, "count": len(buf), "sha256": _write(out / fname, arr)}
    manifest = {
        "format": FORMAT,
        "hyperparams": model.hp.to_dict(),
        "class_ids": model.class_ids,
        "seen_classes": sorted(model.seen_classes),
        "flags": None if flags is None else {"pcm_on": flags.pcm_on, "crr_on": flags.crr_on, "dcl_on": flags.dcl_on},
        "iteration": iteration,
        "tensors": tensors,
        "memory": memory,
        "rng": {"memory": model.memory.rng.get_state()},
    }
    if extra:
        manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def load_model(path: Union[str, Path]):
    from pmcr.harness.model import PMCRModel

    root = Path(path)
    manifest = json.loads((root / "manifest.json").read_text())
    if manifest.get("format") != FORMAT:
        raise ValueError(f"{root} is not a {FORMAT} archive")
    hp = Hyperparams.from_dict(manifest["hyperparams"])
    model = PMCRModel(hp, manifest["class_ids"])
    state = {name: torch.as_tensor(read_tensor(root / meta["file"]), dtype=DTYPE)
             for name, meta in manifest["tensors"].items()}
    model.load_state_dict(state)
    model.memory.rng = Rng.from_state(manifest["rng"]["memory"])
    for c, meta in manifest["memory"].items():
        arr = torch.as_tensor(read_tensor(root / meta["file"]), dtype=DTYPE)
        model.memory.buffers[int(c)] = [arr[:, j].clone() for j in range(arr.shape[1])]
    model.seen_classes = set(manifest["seen_classes"])
    flags = Flags(**manifest["flags"]) if manifest.get("flags") else Flags()
    return model, flags, manifest
