"""Checkpoint archive: a zip holding ``manifest.json`` and one binary blob per parameter.

Blob layout: a single JSON header line ``{"name", "shape", "dtype"}`` followed by
the raw little-endian array bytes. Entry timestamps are pinned, so saving a
loaded checkpoint reproduces the file byte for byte.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from sourcefree.deployment import DeploymentModel
from sourcefree.errors import DataError
from sourcefree.labels import NegativeClassTable
from sourcefree.models import ArchSpec, ProcurementModel
from sourcefree.procurement import ClassPrior

FORMAT_VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)
GROUPS = ("M", "Fs", "D", "G")


@dataclass
class Checkpoint:
    arch: ArchSpec
    num_positive: int
    num_outputs: int
    source_classes: list[str]
    negative_pairs: list[tuple[int, int]]
    priors: list[ClassPrior]
    params: dict[str, np.ndarray]  # "<group>.<param name>"
    procurement: dict = field(default_factory=dict)
    adaptation: dict | None = None

    @property
    def negative_table(self) -> NegativeClassTable | None:
        if not self.negative_pairs:
            return None
        return NegativeClassTable(self.num_positive, tuple(map(tuple, self.negative_pairs)))

    def group(self, name: str) -> dict[str, np.ndarray]:
        prefix = name + "."
        return {k[len(prefix):]: v for k, v in self.params.items() if k.startswith(prefix)}


def _module_params(prefix: str, module: torch.nn.Module) -> dict[str, np.ndarray]:
    return {f"{prefix}.{k}": v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}


def from_procurement(
    model: ProcurementModel,
    priors,
    source_classes,
    table: NegativeClassTable | None,
    procurement: dict | None = None,
) -> Checkpoint:
    params = {}
    for g in GROUPS:
        params.update(_module_params(g, getattr(model, g)))
    return Checkpoint(
        arch=model.arch,
        num_positive=model.num_positive,
        num_outputs=model.num_outputs,
        source_classes=list(source_classes),
        negative_pairs=[list(p) for p in table.pairs] if table is not None else [],
        priors=list(priors),
        params=params,
        procurement=dict(procurement or {}),
    )


def with_adaptation(ckpt: Checkpoint, model: DeploymentModel, adaptation: dict) -> Checkpoint:
    params = {k: v for k, v in ckpt.params.items() if not k.startswith("Ft.")}
    params.update(_module_params("Ft", model.Ft))
    return Checkpoint(
        ckpt.arch, ckpt.num_positive, ckpt.num_outputs, ckpt.source_classes, ckpt.negative_pairs,
        ckpt.priors, params, ckpt.procurement, dict(adaptation),
    )


def procurement_model(ckpt: Checkpoint) -> ProcurementModel:
    model = ProcurementModel(ckpt.arch, ckpt.num_positive, ckpt.num_outputs)
    for g in GROUPS:
        getattr(model, g).load_state_dict({k: torch.from_numpy(v.copy()) for k, v in ckpt.group(g).items()})
    return model


def deployment_model(ckpt: Checkpoint, beta: float = 0.1) -> DeploymentModel:
    """Frozen source path plus ``Ft`` (taken from the archive when present, else a copy of Fs)."""
    dm = DeploymentModel(procurement_model(ckpt), beta=beta)
    ft = ckpt.group("Ft")
    if ft:
        dm.Ft.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in ft.items()})
    return dm


def _blob(name: str, arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr)
    dtype = arr.dtype.newbyteorder("<")
    header = json.dumps({"name": name, "shape": list(arr.shape), "dtype": dtype.str}, sort_keys=True)
    return header.encode() + b"\n" + arr.astype(dtype, copy=False).tobytes()


def _unblob(data: bytes) -> tuple[str, np.ndarray]:
    head, _, body = data.partition(b"\n")
    meta = json.loads(head)
    arr = np.frombuffer(body, dtype=np.dtype(meta["dtype"])).reshape(meta["shape"])
    return meta["name"], arr.copy()


def _manifest(ckpt: Checkpoint) -> dict:
    return {
        "version": FORMAT_VERSION,
        "kind": "adapted" if ckpt.adaptation is not None else "procurement",
        "arch": ckpt.arch.to_dict(),
        "dims": {"v": ckpt.arch.v_dim, "u": ckpt.arch.u_dim, "K": ckpt.num_outputs},
        "num_positive": ckpt.num_positive,
        "source_classes": ckpt.source_classes,
        "negative_table": [[i, j, ckpt.num_positive + r] for r, (i, j) in enumerate(ckpt.negative_pairs)],
        "procurement": ckpt.procurement,
        "adaptation": ckpt.adaptation,
        "priors": [
            {"class_id": p.class_id, "mean": np.asarray(p.mean, np.float64).tolist(), "var": np.asarray(p.var, np.float64).tolist()}
            for p in ckpt.priors
        ],
        "params": sorted(ckpt.params),
    }


def _write_entry(zf: zipfile.ZipFile, name: str, data: bytes):
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def to_bytes(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        _write_entry(zf, "manifest.json", (json.dumps(_manifest(ckpt), indent=2, sort_keys=True) + "\n").encode())
        for name in sorted(ckpt.params):
            _write_entry(zf, f"params/{name}.bin", _blob(name, ckpt.params[name]))
    return buf.getvalue()


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(to_bytes(ckpt))
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    try:
        zf = zipfile.ZipFile(path)
    except (OSError, zipfile.BadZipFile) as exc:
        raise DataError(f"cannot open checkpoint {path}: {exc}") from exc
    with zf:
        try:
            m = json.loads(zf.read("manifest.json"))
        except KeyError:
            raise DataError(f"{path} has no manifest") from None
        if m.get("version") != FORMAT_VERSION:
            raise DataError(f"unsupported checkpoint version {m.get('version')!r}")
        params = {}
        for name in m["params"]:
            stored, arr = _unblob(zf.read(f"params/{name}.bin"))
            if stored != name:
                raise DataError(f"blob name mismatch: {stored} != {name}")
            params[name] = arr
    priors = [ClassPrior(p["class_id"], np.asarray(p["mean"], np.float64), np.asarray(p["var"], np.float64)) for p in m["priors"]]
    return Checkpoint(
        arch=ArchSpec.from_dict(m["arch"]),
        num_positive=m["num_positive"],
        num_outputs=m["dims"]["K"],
        source_classes=m["source_classes"],
        negative_pairs=[(i, j) for i, j, _ in m["negative_table"]],
        priors=priors,
        params=params,
        procurement=m["procurement"],
        adaptation=m["adaptation"],
    )
