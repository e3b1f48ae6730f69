"""Weight files, point-cloud CSV files and JSON run configurations."""

from __future__ import annotations

import csv
import io
import json
import math
import os
import struct
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import jsonschema
import numpy as np

from .geometry import DatasetSpec, PointCloud
from .layers import LAYER_KINDS, block_spec
from .models import EXPERIMENTS, READOUTS, ModelConfig, preset
from .tensor import MlpSpec
from .training import Hyper

MAGIC = b"PCGW"
VERSION = 1


class WeightFileError(ValueError):
    pass


# -- atomic writes -----------------------------------------------------------


def atomic_write(path, data: bytes | str) -> None:
    """Write ``data`` to ``path`` through a temporary file and a rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, mode, **({} if mode == "wb" else {"newline": "", "encoding": "utf-8"})) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# -- weights -----------------------------------------------------------------


def encode_weights(tensors: dict[str, np.ndarray]) -> bytes:
    out = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)))
        out.append(raw)
        out.append(struct.pack("<I", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(out)


def decode_weights(blob: bytes) -> dict[str, np.ndarray]:
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise WeightFileError("corrupt magic: not a PCGW weight file")
    pos = 4

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise WeightFileError("truncated payload")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise WeightFileError(f"unknown version {version} (expected {VERSION})")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(dims, dtype=np.int64))
        payload = np.frombuffer(take(4 * size), dtype="<f4").reshape(dims)
        if name in tensors:
            raise WeightFileError(f"duplicate tensor name {name!r}")
        tensors[name] = payload.astype(np.float32)
    if pos != len(blob):
        raise WeightFileError(f"{len(blob) - pos} trailing bytes after the last tensor")
    return tensors


def save_weights(model, path) -> None:
    atomic_write(path, encode_weights(model.state_dict()))


def load_weights(path) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"weight file not found: {path}")
    return decode_weights(path.read_bytes())


def load_into(model, path) -> None:
    """Load a weight file into ``model``; names must match exactly."""
    tensors = load_weights(path)
    model.load_state({k: v.astype(np.float64) for k, v in tensors.items()})


def round_to_f32(model) -> None:
    """Round every stored tensor to 32-bit, matching what a save/load would give."""
    model.load_state({k: np.asarray(v, dtype=np.float32).astype(np.float64)
                      for k, v in model.state_dict().items()})


# -- point clouds ------------------------------------------------------------


def read_point_cloud(path) -> PointCloud:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if header not in (["x", "y", "z"], ["x", "y", "z", "r", "g", "b"]):
        raise ValueError(f"{path}:1: header must be x,y,z or x,y,z,r,g,b, got {','.join(header)}")
    width = len(header)
    data = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != width:
            raise ValueError(f"{path}:{lineno}: expected {width} columns, got {len(row)}")
        try:
            vals = [float(c) for c in row]
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from None
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"{path}:{lineno}: non-finite value")
        data.append(vals)
    if not data:
        raise ValueError(f"{path}: no points")
    arr = np.array(data, dtype=np.float64)
    feats = arr[:, 3:] if width == 6 else None
    return PointCloud(arr[:, :3], feats)


def write_point_cloud(cloud: PointCloud, path) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    has_rgb = cloud.features is not None and cloud.features.shape[1] == 3
    w.writerow(["x", "y", "z", "r", "g", "b"] if has_rgb else ["x", "y", "z"])
    for i in range(len(cloud)):
        row = list(cloud.positions[i])
        if has_rgb:
            row += list(cloud.features[i])
        w.writerow([repr(float(v)) for v in row])
    atomic_write(path, buf.getvalue())


# -- run configuration -------------------------------------------------------

_BLOCK_SCHEMA = {
    "type": "object",
    "required": ["kind", "width"],
    "additionalProperties": False,
    "properties": {
        "kind": {"enum": list(LAYER_KINDS)},
        "width": {"type": "integer", "minimum": 1},
        "depth": {"type": "integer", "minimum": 1},
        "features": {"type": "array", "items": {"type": "string"}, "minItems": 1},
        "aggregators": {"type": "array", "items": {"enum": ["max", "min", "mean"]}, "minItems": 1},
        "linmem_weights": {"enum": ["shared", "separate"]},
        "sampling": {"enum": ["none", "fps", "random"]},
        "samples": {"type": "integer", "minimum": 1},
        "radius": {"type": "number", "exclusiveMinimum": 0},
        "cap": {"type": "integer", "minimum": 1},
    },
}

RUN_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "RunConfig",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "experiment": {"enum": list(EXPERIMENTS)},
        "linmem_weights": {"enum": ["shared", "separate"]},
        "model": {
            "type": "object",
            "required": ["blocks"],
            "additionalProperties": False,
            "properties": {
                "blocks": {"type": "array", "items": _BLOCK_SCHEMA, "minItems": 1},
                "head_hidden": {"type": "array", "items": {"type": "integer", "minimum": 1}},
                "readout": {"enum": list(READOUTS)},
                "k": {"type": "integer", "minimum": 1},
            },
        },
        "dataset": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "classes": {"type": "integer", "minimum": 2, "maximum": 8},
                "train_per_class": {"type": "integer", "minimum": 1},
                "test_per_class": {"type": "integer", "minimum": 1},
                "points": {"type": "integer", "minimum": 9},
                "noise": {"type": "number", "minimum": 0},
                "variation": {"type": "number", "minimum": 0},
            },
        },
        "hyper": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "epochs": {"type": "integer", "minimum": 1},
                "batch_size": {"type": "integer", "minimum": 2},
                "lr": {"type": "number", "minimum": 0},
                "optimizer": {"enum": ["adam", "sgd"]},
                "betas": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2},
                "eps": {"type": "number", "exclusiveMinimum": 0},
                "momentum": {"type": "number", "minimum": 0},
                "rotate": {"type": "boolean"},
                "jitter": {"type": "number", "minimum": 0},
                "drop_max": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "eval_every": {"type": "integer", "minimum": 1},
                "schedule": {"enum": ["constant", "cosine"]},
            },
        },
        "robustness": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "fractions": {"type": "array", "items": {"type": "number", "minimum": 0, "exclusiveMaximum": 1}},
            },
        },
        "seed": {"type": "integer", "minimum": 0},
        "out": {"type": "string"},
    },
    "not": {"required": ["experiment", "model"]},
}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    experiment: str | None = "baseline"
    linmem_weights: str = "separate"
    model: dict | None = None
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    hyper: Hyper = field(default_factory=Hyper)
    fractions: tuple[float, ...] = (0.0, 0.25, 0.5, 0.75, 0.9)
    seed: int = 0
    out: str = "runs"

    def model_config(self, experiment: str | None = None, seed: int | None = None) -> ModelConfig:
        seed = self.seed if seed is None else seed
        classes = self.dataset.classes
        if self.model is None or experiment is not None:
            return preset(experiment or self.experiment, classes,
                          linmem_weights=self.linmem_weights, seed=seed)
        return _explicit_model(self.model, classes, seed)

    def with_seed(self, seed: int) -> "RunConfig":
        hyper = Hyper(**{**asdict(self.hyper), "seed": seed})
        return RunConfig(self.experiment, self.linmem_weights, self.model, self.dataset, hyper,
                         self.fractions, seed, self.out)


def _explicit_model(doc: dict, classes: int, seed: int) -> ModelConfig:
    blocks = []
    width_in = 3
    for b in doc["blocks"]:
        extra = {k: b[k] for k in ("sampling", "samples", "radius", "cap") if k in b}
        spec = block_spec(b["kind"], width_in, b["width"], features=b.get("features"),
                          aggregators=tuple(b.get("aggregators", ("max",))),
                          linmem_weights=b.get("linmem_weights"), depth=b.get("depth", 1), **extra)
        blocks.append(spec)
        width_in = spec.out_width
    readout = doc.get("readout", "global-max")
    pooled = width_in * (2 if readout == "global-max||mean" else 1)
    head = MlpSpec((pooled, *doc.get("head_hidden", [64]), classes), activate_last=False)
    return ModelConfig(tuple(blocks), head, readout, doc.get("k", 16), seed)


def parse_run_config(doc: dict) -> RunConfig:
    """Validate ``doc`` against :data:`RUN_SCHEMA` and build a :class:`RunConfig`."""
    try:
        jsonschema.validate(doc, RUN_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"invalid config at {where}: {exc.message}") from None
    seed = doc.get("seed", 0)
    hyper_doc = dict(doc.get("hyper", {}))
    if "betas" in hyper_doc:
        hyper_doc["betas"] = tuple(hyper_doc["betas"])
    try:
        cfg = RunConfig(
            experiment=doc.get("experiment", None if "model" in doc else "baseline"),
            linmem_weights=doc.get("linmem_weights", "separate"),
            model=doc.get("model"),
            dataset=DatasetSpec(**doc.get("dataset", {})),
            hyper=Hyper(**hyper_doc, seed=seed),
            fractions=tuple(doc.get("robustness", {}).get("fractions", RunConfig.fractions)),
            seed=seed,
            out=doc.get("out", "runs"),
        )
        cfg.model_config()
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"invalid config: {exc}") from None
    return cfg


def load_run_config(path) -> RunConfig:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    return parse_run_config(doc)
