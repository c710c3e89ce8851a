"""Bit-exact file formats, run configuration, and output-directory locking.

Formats:

* Tensor files: one JSON header line
  ``{"magic": "CFT1", "dtype": "f32", "endian": "little", "layout": ..., "dims": [...]}``
  followed by raw little-endian float32 scalars in row-major order. Layout
  "LHQP" stores a full attention stack, "HW" a single heatmap.
* Checkpoints: one JSON header line with a named tensor table (name, dims,
  byte offset into the payload) plus optimizer step, RNG state, and
  hyperparameters, then the concatenated float32 payload. A loaded state
  resumes training bit-exactly.
* JSONL: one canonical JSON object per line (sorted keys, compact
  separators), so write(read(f)) reproduces f byte for byte.

Every run artifact embeds ``{config_hash, seed, tool_version}``.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from . import autodiff as ad
from . import boxes as bx
from . import detector as det
from . import synth
from .metrics import AttentionTensor, HeatMap

MAGIC = "CFT1"
_LAYOUT_NDIM = {"LHQP": 4, "HW": 2}
_HEADER_KEYS = {"magic", "dtype", "endian", "layout", "dims", "meta"}
CHECKPOINT_VERSION = 1


class FormatError(ValueError):
    """A file does not follow the declared format."""


# -- tensor files ---------------------------------------------------------------


def _canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def write_tensor(path, arr: np.ndarray, layout: str, meta: dict | None = None) -> None:
    if layout not in _LAYOUT_NDIM:
        raise FormatError(f"unknown layout {layout!r}")
    if arr.ndim != _LAYOUT_NDIM[layout]:
        raise FormatError(f"layout {layout} needs {_LAYOUT_NDIM[layout]} dims, "
                          f"got shape {arr.shape}")
    data = np.ascontiguousarray(arr, dtype="<f4")
    header = {"magic": MAGIC, "dtype": "f32", "endian": "little",
              "layout": layout, "dims": list(arr.shape)}
    if meta is not None:
        header["meta"] = meta
    with open(path, "wb") as f:
        f.write(_canonical_json(header).encode() + b"\n")
        f.write(data.tobytes())


def read_tensor(path) -> tuple[np.ndarray, str, dict]:
    with open(path, "rb") as f:
        line = f.readline()
        payload = f.read()
    try:
        header = json.loads(line)
    except json.JSONDecodeError as exc:
        raise FormatError(f"corrupt header: {exc}") from None
    if not isinstance(header, dict) or header.get("magic") != MAGIC:
        raise FormatError(f"unknown magic {header.get('magic')!r}"
                          if isinstance(header, dict) else "header is not an object")
    unknown = set(header) - _HEADER_KEYS
    if unknown:
        raise FormatError(f"unknown header keys {sorted(unknown)}")
    if header.get("dtype") != "f32":
        raise FormatError(f"unsupported dtype {header.get('dtype')!r}")
    if header.get("endian") != "little":
        raise FormatError(f"unsupported endian {header.get('endian')!r}")
    layout = header.get("layout")
    if layout not in _LAYOUT_NDIM:
        raise FormatError(f"unknown layout {layout!r}")
    dims = header.get("dims")
    if (not isinstance(dims, list) or len(dims) != _LAYOUT_NDIM[layout]
            or not all(isinstance(d, int) and d > 0 for d in dims)):
        raise FormatError(f"bad dims {dims!r} for layout {layout}")
    expected = 4 * int(np.prod(dims))
    if len(payload) != expected:
        raise FormatError(f"payload is {len(payload)} bytes, expected {expected}")
    arr = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    return arr, layout, header.get("meta", {})


def write_attention(path, tensor: AttentionTensor, meta: dict | None = None) -> None:
    m = {"grid": list(tensor.grid)}
    if meta:
        m.update(meta)
    write_tensor(path, tensor.weights, "LHQP", meta=m)


def read_attention(path) -> AttentionTensor:
    arr, layout, meta = read_tensor(path)
    if layout != "LHQP":
        raise FormatError(f"expected LHQP layout, got {layout}")
    grid = meta.get("grid")
    if (not isinstance(grid, list) or len(grid) != 2
            or grid[0] * grid[1] != arr.shape[-1]):
        raise FormatError(f"grid {grid!r} does not match {arr.shape[-1]} patches")
    return AttentionTensor(weights=arr.astype(np.float64), grid=tuple(grid))


def write_heatmap(path, heat: HeatMap, meta: dict | None = None) -> None:
    # the tensor format carries values only; heatmaps here have full masks
    if not heat.valid_mask.all():
        raise FormatError("heatmap files store fully valid grids only")
    write_tensor(path, heat.values, "HW", meta=meta)


def read_heatmap(path) -> HeatMap:
    arr, layout, _ = read_tensor(path)
    if layout != "HW":
        raise FormatError(f"expected HW layout, got {layout}")
    return HeatMap.full(arr.astype(np.float64))


# -- jsonl ----------------------------------------------------------------------


def write_jsonl(path, rows) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for row in rows:
            f.write(_canonical_json(row) + "\n")


def read_jsonl(path) -> list:
    rows = []
    with open(path, encoding="utf-8") as f:
        for i, line in enumerate(f, start=1):
            if line.strip() == "":
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{i}: bad JSON: {exc}") from None
    return rows


# -- checkpoints ----------------------------------------------------------------


def save_checkpoint(path, state: det.TrainState, meta: dict | None = None) -> None:
    groups = [("param", {k: t.data for k, t in state.params.items()}),
              ("adam_m", state.adam_m), ("adam_v", state.adam_v)]
    table, chunks, offset = [], [], 0
    for prefix, tensors in groups:
        for name in sorted(tensors):
            data = np.ascontiguousarray(tensors[name], dtype="<f4")
            table.append({"name": f"{prefix}/{name}",
                          "dims": list(data.shape), "offset": offset})
            chunks.append(data.tobytes())
            offset += len(chunks[-1])
    header = {"magic": MAGIC, "kind": "checkpoint",
              "format_version": CHECKPOINT_VERSION,
              "step": state.step,
              "hyper": asdict(state.hyper),
              "rng_state": state.rng_state,
              "running_losses": state.running_losses,
              "ntp_surrogate": state.ntp_surrogate,
              "tensors": table,
              "meta": meta or {}}
    with open(path, "wb") as f:
        f.write(_canonical_json(header).encode() + b"\n")
        for c in chunks:
            f.write(c)


def load_checkpoint(path) -> tuple[det.TrainState, dict]:
    with open(path, "rb") as f:
        line = f.readline()
        payload = f.read()
    try:
        header = json.loads(line)
    except json.JSONDecodeError as exc:
        raise FormatError(f"corrupt header: {exc}") from None
    if header.get("magic") != MAGIC or header.get("kind") != "checkpoint":
        raise FormatError("not a checkpoint file")
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported format_version {header.get('format_version')!r}")

    groups: dict[str, dict[str, np.ndarray]] = {"param": {}, "adam_m": {}, "adam_v": {}}
    end = 0
    for entry in header["tensors"]:
        dims = entry["dims"]
        size = 4 * int(np.prod(dims))
        start = entry["offset"]
        if start + size > len(payload):
            raise FormatError(f"tensor {entry['name']} needs bytes "
                              f"[{start}, {start + size}), payload has {len(payload)}")
        arr = np.frombuffer(payload, dtype="<f4", count=int(np.prod(dims)),
                            offset=start).reshape(dims).copy()
        prefix, _, name = entry["name"].partition("/")
        if prefix not in groups or not name:
            raise FormatError(f"bad tensor name {entry['name']!r}")
        groups[prefix][name] = arr
        end = max(end, start + size)
    if end != len(payload):
        raise FormatError(f"payload is {len(payload)} bytes, tensors cover {end}")
    if set(groups["param"]) != set(groups["adam_m"]) or \
            set(groups["param"]) != set(groups["adam_v"]):
        raise FormatError("param/adam tensor tables disagree")

    try:
        hyper = det.DetectorHyper(**header["hyper"])
    except TypeError as exc:
        raise FormatError(f"bad hyperparameters: {exc}") from None
    state = det.TrainState(
        params={k: ad.Tensor(v, requires_grad=True, name=k)
                for k, v in groups["param"].items()},
        hyper=hyper,
        step=header["step"],
        adam_m=groups["adam_m"],
        adam_v=groups["adam_v"],
        rng_state=header["rng_state"],
        running_losses=header.get("running_losses", {}),
        ntp_surrogate=header.get("ntp_surrogate", 0.0),
    )
    return state, header.get("meta", {})


# -- metrics and evaluation tables ----------------------------------------------


def write_metrics_csv(path, rows: list[det.LogRow]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "l1", "giou_term", "total"])
        for r in rows:
            w.writerow([r.step, repr(r.l1), repr(r.giou_term), repr(r.total)])


def read_metrics_csv(path) -> list[det.LogRow]:
    rows = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ["step", "l1", "giou_term", "total"]:
            raise FormatError(f"bad metrics header {header!r}")
        for rec in reader:
            rows.append(det.LogRow(step=int(rec[0]), l1=float(rec[1]),
                                   giou_term=float(rec[2]), total=float(rec[3])))
    return rows


def write_eval_csv(path, report: det.EvalReport) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["id", "iou", "giou", "grounding_error",
                    "pred_x1", "pred_y1", "pred_x2", "pred_y2",
                    "gt_x1", "gt_y1", "gt_x2", "gt_y2"])
        for r in report.per_sample:
            w.writerow([r["id"], repr(r["iou"]), repr(r["giou"]),
                        int(r["grounding_error"]), *map(repr, r["pred"]),
                        *map(repr, r["gt"])])


# -- datasets -------------------------------------------------------------------


def save_dataset(out_dir, samples, meta: dict) -> None:
    """Write a manifest plus one heatmap file (and optional attention file)
    per sample under ``out_dir``."""
    out = Path(out_dir)
    (out / "hm").mkdir(parents=True, exist_ok=True)
    rows = [{"_meta": {**meta, "n": len(samples)}}]
    have_attention = any(s.attention is not None for s in samples)
    if have_attention:
        (out / "at").mkdir(exist_ok=True)
    for s in samples:
        hm_rel = f"hm/{s.sample_id}.hmp"
        write_heatmap(out / hm_rel, s.heatmap)
        row = {"id": s.sample_id, "seed": int(s.seed), "split": s.split,
               "box": list(s.box.as_tuple()), "heatmap": hm_rel, "attention": None}
        if s.attention is not None:
            at_rel = f"at/{s.sample_id}.attn"
            write_attention(out / at_rel, s.attention)
            row["attention"] = at_rel
        rows.append(row)
    write_jsonl(out / "manifest.jsonl", rows)


def load_dataset(in_dir) -> tuple[list[synth.SynthSample], dict]:
    root = Path(in_dir)
    rows = read_jsonl(root / "manifest.jsonl")
    if not rows or "_meta" not in rows[0]:
        raise FormatError("manifest missing _meta header row")
    meta = rows[0]["_meta"]
    samples = []
    for row in rows[1:]:
        attention = None
        if row.get("attention"):
            attention = read_attention(root / row["attention"])
        samples.append(synth.SynthSample(
            sample_id=row["id"], seed=row["seed"],
            box=bx.BoxNorm(*row["box"]), heatmap=read_heatmap(root / row["heatmap"]),
            split=row["split"], attention=attention))
    return samples, meta


# -- run configuration ----------------------------------------------------------

_FROZEN_STEM = [64, 128, 256]


@dataclass
class DetectorSection:
    steps: int = 4000
    batch_size: int = 16
    lr: float = 1e-3
    warmup_steps: int = 100
    cosine_decay: bool = True
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    checkpoint_every: int = 1000
    canvas: int = det.CANVAS
    stem_channels: list[int] = field(default_factory=lambda: list(_FROZEN_STEM))

    def __post_init__(self):
        # the architecture is frozen in this build; the fields document it
        if self.canvas != det.CANVAS:
            raise ValueError(f"canvas is frozen at {det.CANVAS}")
        if list(self.stem_channels) != _FROZEN_STEM:
            raise ValueError(f"stem_channels is frozen at {_FROZEN_STEM}")

    def hyper(self) -> det.DetectorHyper:
        return det.DetectorHyper(
            steps=self.steps, batch_size=self.batch_size, lr=self.lr,
            warmup_steps=self.warmup_steps, cosine_decay=self.cosine_decay,
            beta1=self.beta1, beta2=self.beta2, eps=self.eps,
            checkpoint_every=self.checkpoint_every)


@dataclass
class CondenseSection:
    steps: int = 600
    batch_size: int = 32
    lr: float = 0.05
    train_n: int = 2000
    eval_n: int = 1000
    designated_layer: int | None = None  # None selects by mean concentration
    epoch_len: int = 100


@dataclass
class RunConfig:
    seed: int = 0
    alpha: float = 0.003
    tau: float = bx.DEFAULT_TAU
    synth: synth.SynthConfig = field(default_factory=synth.SynthConfig)
    detector: DetectorSection = field(default_factory=DetectorSection)
    condense: CondenseSection = field(default_factory=CondenseSection)

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        return hashlib.sha256(_canonical_json(self.to_dict()).encode()).hexdigest()


_SECTION_TYPES = {"synth": synth.SynthConfig, "detector": DetectorSection,
                  "condense": CondenseSection}


def _build_section(cls, data: dict, path: str):
    names = {f.name for f in fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise FormatError(f"unknown config key '{path}{sorted(unknown)[0]}'")
    # tuples round-trip as lists through JSON
    kwargs = {}
    for f in fields(cls):
        if f.name not in data:
            continue
        v = data[f.name]
        if isinstance(v, list) and f.name in ("grid",):
            v = tuple(v)
        kwargs[f.name] = v
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise FormatError(f"bad config section {path[:-1] or 'root'}: {exc}") from None


def config_from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise FormatError("config root must be an object")
    top = {f.name for f in fields(RunConfig)}
    unknown = set(data) - top
    if unknown:
        raise FormatError(f"unknown config key {sorted(unknown)[0]!r}")
    kwargs = {}
    for name, value in data.items():
        if name in _SECTION_TYPES:
            if not isinstance(value, dict):
                raise FormatError(f"config section {name!r} must be an object")
            kwargs[name] = _build_section(_SECTION_TYPES[name], value, f"{name}.")
        else:
            kwargs[name] = value
    try:
        return RunConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise FormatError(f"bad config: {exc}") from None


def load_config(path: str | None = None) -> RunConfig:
    """Load a config file, falling back to $CFT_CONFIG, then to defaults."""
    if path is None:
        path = os.environ.get("CFT_CONFIG") or None
    if path is None:
        return RunConfig()
    with open(path, encoding="utf-8") as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: bad JSON: {exc}") from None
    return config_from_dict(data)


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply ``section.key=value`` strings on top of a config."""
    data = cfg.to_dict()
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise FormatError(f"override must look like key=value, got {item!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw  # bare strings pass through
        node = data
        parts = key.split(".")
        for part in parts[:-1]:
            if not isinstance(node.get(part), dict):
                raise FormatError(f"unknown config key {key!r}")
            node = node[part]
        if parts[-1] not in node:
            raise FormatError(f"unknown config key {key!r}")
        node[parts[-1]] = value
    return config_from_dict(data)


def artifact_meta(cfg: RunConfig) -> dict:
    """The provenance triple embedded in every artifact."""
    return {"config_hash": cfg.config_hash(), "seed": cfg.seed,
            "tool_version": __version__}


# -- output directory lock -------------------------------------------------------


class OutDirLocked(RuntimeError):
    pass


@contextmanager
def locked_out_dir(out_dir):
    """Create ``out_dir`` and hold an exclusive lock file while inside.

    Concurrent runs must target disjoint directories; a second entrant gets
    OutDirLocked instead of silently interleaving artifacts.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lock = out / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise OutDirLocked(f"{out} is locked by another run "
                           f"(remove {lock} if that run is dead)") from None
    try:
        os.write(fd, f"{os.getpid()}\n".encode())
        os.close(fd)
        yield out
    finally:
        lock.unlink(missing_ok=True)
