"""
Persistence: model directories, checkpoints, feature archives, manifests, training logs and
prediction files.

Model directory::

    model.json   UTF-8 JSON metadata (format version, kind, sizes, flow settings, tensors)
    params.bin   "NMMH", u32 version, u32 count, then per tensor:
                 u32 name length, name, u32 rank, u32 dims..., float64 LE payload

Feature archive::

    "NMMF", u32 version, u32 count, then per utterance:
    u32 id length, id, u32 T, u32 D, float32 LE payload (row-major)

All integers are little-endian. Files are written to a temporary sibling and renamed.
"""

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from flowhmm.classify import Prediction
from flowhmm.config import ModelKind
from flowhmm.exceptions import (
    CorruptFileError,
    DataError,
    ModelFormatError,
    TruncatedFileError,
    VersionMismatchError,
)
from flowhmm.glow import GlowStack
from flowhmm.gmm import GmmEmission
from flowhmm.hmm import HmmModel, MarkovChain
from flowhmm.logger import get_logger
from flowhmm.networks import FlowStack
from flowhmm.nmm import NmmEmission
from flowhmm.numerics import FloatArray, restore_rng, rng_state
from flowhmm.realnvp import NvpStack
from flowhmm.trainer import AdamState, OuterRecord, TrainingState, TrainLog

logger = get_logger("model_io")

MODEL_MAGIC = b"NMMH"
MODEL_FORMAT_VERSION = 1
FEATURE_MAGIC = b"NMMF"
FEATURE_FORMAT_VERSION = 1
CHECKPOINT_FORMAT_VERSION = 1

MODEL_JSON = "model.json"
PARAMS_BIN = "params.bin"
ADAM_BIN = "adam.bin"
STATE_JSON = "state.json"

PathLike = Union[str, Path]
FeatureRecord = Tuple[str, FloatArray]

_U32 = struct.Struct("<I")
_FLOAT32_MAX = float(np.finfo(np.float32).max)


# ---------------------------------------------------------------------------
# Atomic writes


def _atomic_write(path: Path, data: bytes) -> None:
    """Write to a temporary sibling, then replace the target."""
    path.parent.mkdir(parents=True, exist_ok=True)
    temp_file = path.with_name(path.name + ".tmp")
    try:
        with open(temp_file, "wb") as f:
            f.write(data)
        temp_file.replace(path)
    except OSError:
        if temp_file.exists():
            try:
                temp_file.unlink()
            except OSError:
                pass
        raise


def _atomic_write_text(path: Path, text: str) -> None:
    _atomic_write(path, text.encode("utf-8"))


def _dump_json(data: Any) -> str:
    return json.dumps(data, indent=2, sort_keys=True, ensure_ascii=False) + "\n"


# ---------------------------------------------------------------------------
# Binary reader


class _Reader:
    def __init__(self, data: bytes, source: str) -> None:
        self.data = data
        self.offset = 0
        self.source = source

    def take(self, size: int) -> bytes:
        if self.offset + size > len(self.data):
            raise TruncatedFileError(
                f"{self.source}: needed {size} bytes at offset {self.offset}, "
                f"file has {len(self.data)}"
            )
        chunk = self.data[self.offset : self.offset + size]
        self.offset += size
        return chunk

    def remaining(self) -> int:
        return len(self.data) - self.offset

    def u32(self) -> int:
        return int(_U32.unpack(self.take(4))[0])

    def text(self) -> str:
        length = self.u32()
        try:
            return self.take(length).decode("utf-8")
        except UnicodeDecodeError as e:
            raise CorruptFileError(f"{self.source}: invalid UTF-8 name") from e

    def header(self, magic: bytes, version: int) -> None:
        found = self.take(len(magic))
        if found != magic:
            raise CorruptFileError(f"{self.source}: bad magic {found!r}, expected {magic!r}")
        found_version = self.u32()
        if found_version != version:
            raise VersionMismatchError(
                f"{self.source}: format version {found_version}, expected {version}"
            )

    def finish(self) -> None:
        if self.offset != len(self.data):
            raise CorruptFileError(
                f"{self.source}: {len(self.data) - self.offset} unexpected trailing bytes"
            )


def encode_tensors(tensors: Mapping[str, np.ndarray]) -> bytes:
    """Serialize named float64 tensors (insertion order kept)."""
    parts = [MODEL_MAGIC, _U32.pack(MODEL_FORMAT_VERSION), _U32.pack(len(tensors))]
    for name, value in tensors.items():
        array = np.asarray(value, dtype="<f8")
        encoded = name.encode("utf-8")
        parts.append(_U32.pack(len(encoded)))
        parts.append(encoded)
        parts.append(_U32.pack(array.ndim))
        parts.extend(_U32.pack(dim) for dim in array.shape)
        parts.append(np.ascontiguousarray(array).tobytes())
    return b"".join(parts)


def decode_tensors(data: bytes, source: str = PARAMS_BIN) -> Dict[str, np.ndarray]:
    """Inverse of :func:`encode_tensors`."""
    reader = _Reader(data, source)
    reader.header(MODEL_MAGIC, MODEL_FORMAT_VERSION)
    tensors: Dict[str, np.ndarray] = {}
    for _ in range(reader.u32()):
        name = reader.text()
        rank = reader.u32()
        shape = tuple(reader.u32() for _ in range(rank))
        size = math.prod(shape)
        if 8 * size > reader.remaining():
            raise TruncatedFileError(
                f"{source}: tensor {name!r} declares shape {list(shape)} but only "
                f"{reader.remaining()} bytes are left"
            )
        payload = reader.take(8 * size)
        if name in tensors:
            raise CorruptFileError(f"{source}: duplicate tensor {name!r}")
        tensors[name] = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)
    reader.finish()
    return tensors


# ---------------------------------------------------------------------------
# Models


class ModelMetadata(BaseModel):
    """Contents of ``model.json``."""

    model_config = ConfigDict(extra="forbid")

    format_version: int = MODEL_FORMAT_VERSION
    kind: ModelKind
    label: str = ""
    num_states: int = Field(ge=1)
    dim: int = Field(ge=1)
    num_mix: int = Field(ge=1)
    flows: List[Dict[str, Any]] = Field(default_factory=list)
    train: Dict[str, Any] = Field(default_factory=dict)
    seed: int = 0
    extra: Dict[str, Any] = Field(default_factory=dict)
    tensors: Dict[str, List[int]] = Field(default_factory=dict)


def _flow_prefix(state: int, component: int) -> str:
    return f"flow.s{state}.k{component}."


def model_tensors(model: HmmModel) -> Dict[str, np.ndarray]:
    """Every parameter of ``model`` under a stable name."""
    tensors: Dict[str, np.ndarray] = {
        "chain.log_q": model.chain.log_q,
        "chain.log_A": model.chain.log_A,
    }
    emission = model.emission
    if isinstance(emission, GmmEmission):
        tensors["gmm.log_weights"] = emission.log_weights
        tensors["gmm.means"] = emission.means
        tensors["gmm.log_variances"] = emission.log_variances
    elif isinstance(emission, NmmEmission):
        tensors["nmm.log_weights"] = emission.log_weights
        for s, k, flow in emission.iter_flows():
            for name in sorted(flow.params):
                tensors[_flow_prefix(s, k) + name] = flow.params[name]
    else:
        raise ModelFormatError(f"Cannot serialize emission of type {type(emission).__name__}")
    return tensors


def model_metadata(model: HmmModel) -> ModelMetadata:
    emission = model.emission
    flows = (
        [flow.config() for _, _, flow in emission.iter_flows()]
        if isinstance(emission, NmmEmission)
        else []
    )
    metadata = dict(model.metadata)
    return ModelMetadata(
        kind=model.kind,  # type: ignore[arg-type]
        label=model.label,
        num_states=emission.num_states,
        dim=emission.dim,
        num_mix=emission.num_mix,
        flows=flows,
        train=metadata.pop("train", {}),
        seed=int(metadata.pop("seed", 0)),
        extra=metadata,
        tensors={name: list(np.shape(value)) for name, value in model_tensors(model).items()},
    )


def _rebuild_flow(kind: str, config: Dict[str, Any], params: Dict[str, np.ndarray]) -> FlowStack:
    try:
        if kind == "nvp":
            template: FlowStack = NvpStack(**config)
        else:
            template = GlowStack(**config)
    except (TypeError, ValueError) as e:
        raise ModelFormatError(f"Invalid flow settings {config}: {e}") from e
    expected = {name: value.shape for name, value in template.params.items()}
    found = {name: value.shape for name, value in params.items()}
    if expected != found:
        raise ModelFormatError(f"Flow tensors do not match settings {config}")
    template.params = {name: params[name].copy() for name in sorted(params)}
    return template


def model_from_tensors(metadata: ModelMetadata, tensors: Mapping[str, np.ndarray]) -> HmmModel:
    """Rebuild a model from validated metadata and its tensors."""
    for name, shape in metadata.tensors.items():
        if name not in tensors:
            raise ModelFormatError(f"Tensor {name!r} listed in metadata is missing")
        if list(tensors[name].shape) != shape:
            raise ModelFormatError(
                f"Tensor {name!r} has shape {list(tensors[name].shape)}, metadata says {shape}"
            )
    unexpected = set(tensors) - set(metadata.tensors)
    if unexpected:
        raise ModelFormatError(f"Tensors not described by metadata: {sorted(unexpected)}")

    try:
        chain = MarkovChain(log_q=tensors["chain.log_q"], log_A=tensors["chain.log_A"])
        emission: Any
        if metadata.kind == "gmm":
            emission = GmmEmission(
                log_weights=tensors["gmm.log_weights"],
                means=tensors["gmm.means"],
                log_variances=tensors["gmm.log_variances"],
            )
        else:
            S, K = metadata.num_states, metadata.num_mix
            if len(metadata.flows) != S * K:
                raise ModelFormatError(
                    f"Expected {S * K} flow settings, found {len(metadata.flows)}"
                )
            flows: List[List[FlowStack]] = []
            for s in range(S):
                row = []
                for k in range(K):
                    prefix = _flow_prefix(s, k)
                    params = {
                        name[len(prefix) :]: value
                        for name, value in tensors.items()
                        if name.startswith(prefix)
                    }
                    row.append(_rebuild_flow(metadata.kind, metadata.flows[s * K + k], params))
                flows.append(row)
            emission = NmmEmission(tensors["nmm.log_weights"], flows, metadata.kind)
    except KeyError as e:
        raise ModelFormatError(f"Missing tensor {e}") from e
    except ModelFormatError:
        raise
    except ValueError as e:
        raise ModelFormatError(f"Inconsistent model parameters: {e}") from e

    if emission.dim != metadata.dim or emission.num_states != metadata.num_states:
        raise ModelFormatError("Model sizes do not match metadata")
    extra = dict(metadata.extra)
    if metadata.train:
        extra["train"] = metadata.train
    extra["seed"] = metadata.seed
    return HmmModel(chain=chain, emission=emission, label=metadata.label, metadata=extra)


def save_model(model: HmmModel, path: PathLike) -> None:
    """Write ``model.json`` and ``params.bin`` into directory ``path``."""
    directory = Path(path)
    directory.mkdir(parents=True, exist_ok=True)
    metadata = model_metadata(model)
    _atomic_write(directory / PARAMS_BIN, encode_tensors(model_tensors(model)))
    _atomic_write_text(directory / MODEL_JSON, _dump_json(metadata.model_dump()))
    logger.debug(f"Saved {model.kind} model {model.label!r} to {directory}")


def load_model(path: PathLike) -> HmmModel:
    """Read a model directory written by :func:`save_model`."""
    directory = Path(path)
    try:
        raw = json.loads((directory / MODEL_JSON).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise CorruptFileError(f"{directory / MODEL_JSON}: invalid JSON ({e})") from e
    if isinstance(raw, dict) and raw.get("format_version", MODEL_FORMAT_VERSION) != (
        MODEL_FORMAT_VERSION
    ):
        raise VersionMismatchError(
            f"{directory / MODEL_JSON}: format version {raw.get('format_version')}, "
            f"expected {MODEL_FORMAT_VERSION}"
        )
    try:
        metadata = ModelMetadata.model_validate(raw)
    except ValidationError as e:
        raise ModelFormatError(f"{directory / MODEL_JSON}: {e}") from e
    data = (directory / PARAMS_BIN).read_bytes()
    tensors = decode_tensors(data, str(directory / PARAMS_BIN))
    return model_from_tensors(metadata, tensors)


# ---------------------------------------------------------------------------
# Checkpoints


def train_log_to_dict(log: TrainLog) -> Dict[str, Any]:
    return {
        "class_label": log.class_label,
        "settings": log.settings,
        "records": [asdict(record) for record in log.records],
        "final_nll": log.final_nll,
        "converged": log.converged,
    }


def train_log_from_dict(data: Mapping[str, Any]) -> TrainLog:
    return TrainLog(
        class_label=data["class_label"],
        settings=dict(data["settings"]),
        records=[OuterRecord(**record) for record in data["records"]],
        final_nll=data["final_nll"],
        converged=bool(data["converged"]),
    )


def save_checkpoint(path: PathLike, state: TrainingState) -> None:
    """
    Persist a training state: the model, Adam moments, RNG counters, schedule and log.

    Loading it and continuing reproduces an uninterrupted run bit for bit.
    """
    directory = Path(path)
    save_model(state.model, directory)
    adam_tensors: Dict[str, np.ndarray] = {}
    for j, adam in enumerate(state.adam):
        for name in sorted(adam.m):
            adam_tensors[f"adam.{j}.m.{name}"] = adam.m[name]
            adam_tensors[f"adam.{j}.v.{name}"] = adam.v[name]
    _atomic_write(directory / ADAM_BIN, encode_tensors(adam_tensors))
    document = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "adam_steps": [adam.step for adam in state.adam],
        "rng": rng_state(state.rng),
        "learning_rate": state.learning_rate,
        "outer_iter": state.outer_iter,
        "streak": state.streak,
        "previous_nll": state.previous_nll,
        "done": state.done,
        "log": train_log_to_dict(state.log),
    }
    _atomic_write_text(directory / STATE_JSON, _dump_json(document))
    logger.debug(f"Checkpoint after outer iteration {state.outer_iter} written to {directory}")


def load_checkpoint(path: PathLike) -> TrainingState:
    """Read a checkpoint written by :func:`save_checkpoint`."""
    directory = Path(path)
    model = load_model(directory)
    try:
        document = json.loads((directory / STATE_JSON).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise CorruptFileError(f"{directory / STATE_JSON}: invalid JSON ({e})") from e
    if document.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise VersionMismatchError(
            f"{directory / STATE_JSON}: format version {document.get('format_version')}"
        )
    tensors = decode_tensors((directory / ADAM_BIN).read_bytes(), str(directory / ADAM_BIN))

    adam: List[AdamState] = []
    if isinstance(model.emission, NmmEmission):
        flows = [flow for _, _, flow in model.emission.iter_flows()]
        steps = document["adam_steps"]
        if len(steps) != len(flows):
            raise ModelFormatError("Adam state count does not match the number of flows")
        for j, flow in enumerate(flows):
            try:
                m = {name: tensors[f"adam.{j}.m.{name}"] for name in flow.params}
                v = {name: tensors[f"adam.{j}.v.{name}"] for name in flow.params}
            except KeyError as e:
                raise ModelFormatError(f"Missing Adam tensor {e}") from e
            adam.append(AdamState(m=m, v=v, step=int(steps[j])))

    try:
        return TrainingState(
            model=model,
            adam=adam,
            rng=restore_rng(document["rng"]),
            learning_rate=float(document["learning_rate"]),
            outer_iter=int(document["outer_iter"]),
            streak=int(document["streak"]),
            previous_nll=document["previous_nll"],
            log=train_log_from_dict(document["log"]),
            done=bool(document["done"]),
        )
    except (KeyError, TypeError, DataError) as e:
        raise ModelFormatError(f"{directory / STATE_JSON}: malformed checkpoint ({e})") from e


# ---------------------------------------------------------------------------
# Feature archives


def encode_features(records: Sequence[FeatureRecord]) -> bytes:
    parts = [FEATURE_MAGIC, _U32.pack(FEATURE_FORMAT_VERSION), _U32.pack(len(records))]
    for utt_id, feat in records:
        frames = np.atleast_2d(np.asarray(feat, dtype=np.float64))
        if frames.ndim != 2:
            raise DataError(f"Features of {utt_id!r} must be a T x D matrix")
        if not np.all(np.isfinite(frames)) or np.any(np.abs(frames) > _FLOAT32_MAX):
            raise DataError(f"Features of {utt_id!r} are not representable as 32-bit floats")
        encoded = utt_id.encode("utf-8")
        parts.append(_U32.pack(len(encoded)))
        parts.append(encoded)
        parts.append(_U32.pack(frames.shape[0]))
        parts.append(_U32.pack(frames.shape[1]))
        parts.append(np.ascontiguousarray(frames, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_features(data: bytes, source: str = "features") -> List[FeatureRecord]:
    reader = _Reader(data, source)
    reader.header(FEATURE_MAGIC, FEATURE_FORMAT_VERSION)
    records: List[FeatureRecord] = []
    for _ in range(reader.u32()):
        utt_id = reader.text()
        T, D = reader.u32(), reader.u32()
        payload = reader.take(4 * T * D)
        frames = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(T, D)
        records.append((utt_id, frames))
    reader.finish()
    return records


def write_features(path: PathLike, records: Sequence[FeatureRecord]) -> None:
    """Write a feature archive; order is preserved."""
    _atomic_write(Path(path), encode_features(records))
    logger.debug(f"Wrote {len(records)} feature records to {path}")


def read_features(path: PathLike) -> List[FeatureRecord]:
    """Read a feature archive as ``(id, T x D float64 array)`` pairs."""
    return decode_features(Path(path).read_bytes(), str(path))


# ---------------------------------------------------------------------------
# Manifests


@dataclass(frozen=True)
class ManifestEntry:
    utterance_id: str
    path: str
    label: str


@dataclass
class Manifest:
    """Labeled list of utterances; paths are relative to the manifest's directory."""

    labels: List[str]
    entries: List[ManifestEntry]

    def __post_init__(self) -> None:
        ids = [entry.utterance_id for entry in self.entries]
        if len(set(ids)) != len(ids):
            duplicates = sorted({i for i in ids if ids.count(i) > 1})
            raise DataError(f"Duplicate utterance ids in manifest: {duplicates}")
        if len(set(self.labels)) != len(self.labels):
            raise DataError("Duplicate labels in the manifest header")
        unknown = sorted({entry.label for entry in self.entries} - set(self.labels))
        if unknown:
            raise DataError(f"Labels not declared in the manifest header: {unknown}")

    def by_label(self) -> Dict[str, List[ManifestEntry]]:
        groups: Dict[str, List[ManifestEntry]] = {label: [] for label in self.labels}
        for entry in self.entries:
            groups[entry.label].append(entry)
        return groups

    def counts(self) -> Dict[str, int]:
        return {label: len(entries) for label, entries in self.by_label().items()}


def format_manifest(manifest: Manifest) -> str:
    lines = [f"#labels: {','.join(manifest.labels)}"]
    lines += [f"{e.utterance_id}\t{e.path}\t{e.label}" for e in manifest.entries]
    return "\n".join(lines) + "\n"


def parse_manifest(text: str, source: str = "manifest") -> Manifest:
    labels: Optional[List[str]] = None
    entries: List[ManifestEntry] = []
    for number, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        if labels is None:
            if not line.startswith("#labels:"):
                raise CorruptFileError(f"{source}: first line must be a '#labels:' header")
            labels = [label.strip() for label in line[len("#labels:") :].split(",")]
            labels = [label for label in labels if label]
            continue
        fields = line.split("\t")
        if len(fields) != 3 or not all(fields):
            raise CorruptFileError(f"{source}:{number}: expected 'id<TAB>path<TAB>label'")
        entries.append(ManifestEntry(*fields))
    if labels is None:
        raise CorruptFileError(f"{source}: missing '#labels:' header")
    return Manifest(labels, entries)


def write_manifest(path: PathLike, manifest: Manifest) -> None:
    _atomic_write_text(Path(path), format_manifest(manifest))


def read_manifest(path: PathLike) -> Manifest:
    return parse_manifest(Path(path).read_text(encoding="utf-8"), str(path))


def load_dataset(path: PathLike) -> Tuple[Manifest, List[Tuple[str, FloatArray, str]]]:
    """
    Resolve a manifest whose paths point at feature archives.

    Returns:
        The manifest and ``(id, features, label)`` per entry, in manifest order
    """
    manifest_path = Path(path)
    manifest = read_manifest(manifest_path)
    archives: Dict[str, Dict[str, FloatArray]] = {}
    dataset = []
    for entry in manifest.entries:
        if entry.path not in archives:
            archives[entry.path] = dict(read_features(manifest_path.parent / entry.path))
        records = archives[entry.path]
        if entry.utterance_id not in records:
            raise DataError(f"Utterance {entry.utterance_id!r} not found in {entry.path}")
        dataset.append((entry.utterance_id, records[entry.utterance_id], entry.label))
    return manifest, dataset


# ---------------------------------------------------------------------------
# Training logs, predictions and reports


def write_train_log(path: PathLike, logs: Sequence[TrainLog], timing: bool = False) -> None:
    """Line-delimited JSON records of every class's training log; wall times only on request."""
    records = [r for log in logs for r in (log.to_records() if timing else log.without_timing())]
    lines = [json.dumps(record, sort_keys=True) for record in records]
    _atomic_write_text(Path(path), "\n".join(lines) + ("\n" if lines else ""))


def read_train_log(path: PathLike) -> List[Dict[str, Any]]:
    return [
        json.loads(line)
        for line in Path(path).read_text(encoding="utf-8").splitlines()
        if line.strip()
    ]


def format_predictions(labels: Sequence[str], predictions: Sequence[Prediction]) -> str:
    lines = [f"#labels: {','.join(labels)}"]
    for p in predictions:
        scores = ",".join(repr(float(value)) for value in p.scores)
        lines.append(f"{p.utterance_id}\t{p.label}\t{int(p.tie)}\t{scores}")
    return "\n".join(lines) + "\n"


def write_predictions(
    path: PathLike, labels: Sequence[str], predictions: Sequence[Prediction]
) -> None:
    """Predictions as ``id<TAB>label<TAB>tie<TAB>comma-separated scores`` lines."""
    _atomic_write_text(Path(path), format_predictions(labels, predictions))


def read_predictions(path: PathLike) -> Tuple[List[str], List[Prediction]]:
    """Read a prediction file; returns the class labels and the predictions."""
    labels: Optional[List[str]] = None
    predictions = []
    for number, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        if labels is None:
            if not line.startswith("#labels:"):
                raise CorruptFileError(f"{path}: first line must be a '#labels:' header")
            labels = [x for x in line[len("#labels:") :].strip().split(",") if x]
            continue
        fields = line.split("\t")
        if len(fields) != 4:
            raise CorruptFileError(f"{path}:{number}: expected 4 tab-separated fields")
        try:
            scores = np.array([float(x) for x in fields[3].split(",") if x], dtype=np.float64)
            predictions.append(Prediction(fields[0], fields[1], scores, fields[2] == "1"))
        except ValueError as e:
            raise CorruptFileError(f"{path}:{number}: {e}") from e
    if labels is None:
        raise CorruptFileError(f"{path}: missing '#labels:' header")
    return labels, predictions


def write_report(path: PathLike, text: str, record: Mapping[str, Any]) -> None:
    """Write a text report and its machine-readable ``.json`` companion."""
    target = Path(path)
    _atomic_write_text(target, text)
    _atomic_write_text(target.with_name(target.name + ".json"), _dump_json(dict(record)))
