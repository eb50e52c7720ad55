"""Experiment configs, checkpoints, manifests and CSV reports."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import os
import struct
import subprocess
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .calibrate import CalibLossConfig, OptConfig
from .looplm import ConfigError, LoopedModel, ModelConfig
from .methods.cta import TransitionAdapterParams
from .pipeline import ArmConfig, DataConfig
from .quant import GroupQuant, QuantScheme, QuantSpec, TransformParam

MAGIC = b"LOOPQLAB"
FORMAT_VERSION = 1
CSV_SCHEMA_VERSION = 1
OUT_ENV = "LOOPQLAB_OUT"

CSV_SCHEMAS: dict[str, list[str]] = {
    "trajectory": ["t", "layer", "rel_err", "eps_t", "eps_quant", "gamma"],
    "drift": ["t", "layer", "p99", "p99_norm", "top_eig_cos"],
    "calibration": ["step", "total", "kl", "hidden", "final", "transition", "lam",
                    "grad_norm", "lr_mult"],
    "pretrain": ["step", "loss"],
    "sweep": ["axis", "value", "seed", "arm", "final_loop_error", "calib_loss_initial",
              "calib_loss_final", "selected"],
    "report": ["run", "arm", "seed", "final_loop_error", "calib_loss_final"],
}


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------

@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    quant: QuantSpec = field(default_factory=QuantSpec)
    arm: ArmConfig = field(default_factory=ArmConfig)
    loss: CalibLossConfig = field(default_factory=CalibLossConfig)
    optim: OptConfig = field(default_factory=OptConfig)
    data: DataConfig = field(default_factory=DataConfig)
    seed: int = 0
    output_dir: str | None = None

    def validate(self) -> "ExperimentConfig":
        self.model.validate()
        for g in self.model.groups:
            self.quant.check_dim(self.model.group_in_dim(g))
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(canonical_json(self.to_dict())).hexdigest()

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return _build(cls, d, "config").validate()

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(raw)


def _build(cls, d: Any, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object, got {type(d).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls) if not f.name.startswith("_")}
    unknown = sorted(set(d) - set(fields))
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kwargs = {}
    for name, value in d.items():
        sub = _nested_type(cls, name)
        kwargs[name] = _build(sub, value, f"{where}.{name}") if sub else value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


_NESTED = {"model": ModelConfig, "quant": QuantSpec, "arm": ArmConfig, "loss": CalibLossConfig,
           "optim": OptConfig, "data": DataConfig}


def _nested_type(cls, name):
    return _NESTED.get(name) if cls is ExperimentConfig else None


def apply_overrides(d: dict, overrides: list[str]) -> dict:
    """Apply ``section.key=value`` overrides (value parsed as JSON, else string)."""
    d = json.loads(json.dumps(d))
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like key.path=value")
        path, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = d
        parts = path.split(".")
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ConfigError(f"override path {path!r} does not name a config section")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"override {path!r}: unknown key")
        node[parts[-1]] = value
    return d


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_json_default).encode()


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def output_root(explicit: str | None = None) -> Path:
    return Path(explicit or os.environ.get(OUT_ENV) or "runs")


# ---------------------------------------------------------------------------
# checkpoint
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    model: LoopedModel
    scheme: QuantScheme | None = None
    adapters: TransitionAdapterParams | None = None
    seeds: dict[str, int] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def tensors(self) -> dict[str, np.ndarray]:
        out = {f"model/{k}": v for k, v in self.model.weights.items()}
        if self.scheme is not None:
            for key, g in self.scheme.groups.items():
                out[f"scheme/{key}/c"] = g.act_scale
                for i, f in enumerate(g.transform.factors):
                    out[f"scheme/{key}/P{i}"] = f
                for t, tp in enumerate(g.loop_transforms or []):
                    for i, f in enumerate(tp.factors):
                        out[f"scheme/{key}/t{t}/P{i}"] = f
        if self.adapters is not None:
            for k in ("a", "b", "eta", "U", "V"):
                out[f"cta/{k}"] = getattr(self.adapters, k)
        return out

    def structure(self) -> dict:
        s: dict = {"model_config": asdict(self.model.config), "seeds": self.seeds,
                   "meta": self.meta, "scheme": None, "adapters": None}
        if self.scheme is not None:
            s["scheme"] = {
                "spec": asdict(self.scheme.spec), "T": self.scheme.T,
                "extrapolate": self.scheme.extrapolate,
                "groups": [{"key": k, "layer": g.layer, "group": g.group, "d_in": g.d_in,
                            "mode": g.transform.mode, "n_factors": len(g.transform.factors),
                            "loop_modes": None if g.loop_transforms is None
                            else [tp.mode for tp in g.loop_transforms]}
                           for k, g in self.scheme.groups.items()]}
        if self.adapters is not None:
            s["adapters"] = {"eps": self.adapters.eps, "extrapolate": self.adapters.extrapolate}
        return s


def save_checkpoint(path, ckpt: Checkpoint) -> str:
    """Write the binary checkpoint plus ``<path>.json`` sidecar; returns the file sha256."""
    path = Path(path)
    tensors = ckpt.tensors()
    index, blobs, offset = [], [], 0
    for name, arr in tensors.items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        index.append({"name": name, "shape": list(a.shape), "offset": offset})
        blobs.append(a.tobytes())
        offset += a.nbytes
    header = canonical_json({**ckpt.structure(), "tensors": index})
    payload = MAGIC + struct.pack("<BQ", FORMAT_VERSION, len(header)) + header + b"".join(blobs)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(payload)
    except OSError as exc:
        raise ConfigError(f"cannot write checkpoint {path}: {exc}") from exc
    digest = hashlib.sha256(payload).hexdigest()
    side = {**json.loads(header), "format_version": FORMAT_VERSION, "sha256": digest}
    side.pop("tensors")
    side["tensor_shapes"] = {e["name"]: e["shape"] for e in index}
    Path(str(path) + ".json").write_text(json.dumps(side, indent=2, sort_keys=True))
    return digest


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:len(MAGIC)] != MAGIC:
        raise ConfigError(f"{path}: not a checkpoint (bad magic)")
    pos = len(MAGIC)
    version, hlen = struct.unpack_from("<BQ", raw, pos)
    if version != FORMAT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {version}")
    pos += struct.calcsize("<BQ")
    header = json.loads(raw[pos:pos + hlen])
    base = pos + hlen
    tensors = {}
    for e in header["tensors"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        start = base + e["offset"]
        tensors[e["name"]] = np.frombuffer(raw, dtype="<f8", count=n, offset=start
                                           ).reshape(e["shape"]).astype(np.float64)
    cfg = ModelConfig(**header["model_config"])
    model = LoopedModel(cfg, {k[6:]: v for k, v in tensors.items() if k.startswith("model/")})
    scheme = None
    if header["scheme"] is not None:
        s = header["scheme"]
        groups = {}
        for g in s["groups"]:
            k = g["key"]
            factors = [tensors[f"scheme/{k}/P{i}"] for i in range(g["n_factors"])]
            loops = None
            if g["loop_modes"] is not None:
                loops = [TransformParam(m, [tensors[f"scheme/{k}/t{t}/P{i}"]
                                            for i in range(g["n_factors"])])
                         for t, m in enumerate(g["loop_modes"])]
            groups[k] = GroupQuant(g["layer"], g["group"], g["d_in"],
                                   TransformParam(g["mode"], factors), tensors[f"scheme/{k}/c"],
                                   loops)
        scheme = QuantScheme(QuantSpec(**s["spec"]), s["T"], groups, s["extrapolate"])
    adapters = None
    if header["adapters"] is not None:
        a = header["adapters"]
        adapters = TransitionAdapterParams(*(tensors[f"cta/{k}"] for k in ("a", "b", "eta", "U", "V")),
                                           eps=a["eps"], extrapolate=a["extrapolate"])
    return Checkpoint(model, scheme, adapters, header["seeds"], header["meta"])


def weights_hash(model: LoopedModel) -> str:
    h = hashlib.sha256()
    for k in sorted(model.weights):
        h.update(k.encode())
        h.update(np.ascontiguousarray(model.weights[k], dtype="<f8").tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

def write_csv(path, schema: str, rows: list[dict]) -> Path:
    cols = CSV_SCHEMAS[schema]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for r in rows:
            missing = [c for c in cols if c not in r]
            if missing:
                raise ValueError(f"{schema} row missing columns {missing}")
            w.writerow(r)
    return path


def read_csv(path) -> tuple[list[str], list[dict]]:
    with Path(path).open(newline="") as fh:
        r = csv.DictReader(fh)
        return list(r.fieldnames or []), list(r)


def write_json(path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default))
    return path


def _git_revision() -> str | None:
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"], capture_output=True, text=True,
                             cwd=Path(__file__).parent, timeout=5)
        return out.stdout.strip() or None
    except (OSError, subprocess.SubprocessError):
        return None


def write_manifest(out_dir, command: str, config: ExperimentConfig | dict | None,
                   seed: int | None, outputs: dict[str, str] | None = None) -> Path:
    """Config, its content hash, seed, schema versions and output file hashes."""
    out_dir = Path(out_dir)
    cfg = config.to_dict() if isinstance(config, ExperimentConfig) else config
    files = {}
    for name, p in (outputs or {}).items():
        files[name] = {"path": str(p), "sha256": hashlib.sha256(Path(p).read_bytes()).hexdigest()}
    manifest = {"command": command, "argv": sys.argv, "config": cfg,
                "config_sha256": hashlib.sha256(canonical_json(cfg)).hexdigest() if cfg else None,
                "seed": seed, "csv_schema_version": CSV_SCHEMA_VERSION,
                "csv_schemas": CSV_SCHEMAS, "checkpoint_format_version": FORMAT_VERSION,
                "git_revision": _git_revision(), "outputs": files}
    return write_json(out_dir / "manifest.json", manifest)
