"""
Serialization utilities for stablefit artifacts.

Handles the checkpoint binary format, CSV tables, JSON documents and the
per-run trace files.

Checkpoint layout (all integers little-endian):

    magic      8 bytes  b"SFCKPT\\0\\0"
    version    u32      1
    header     u64 length + UTF-8 "key=value" lines (model config, dtype, provenance)
    count      u64      number of tensor records
    records    u32 name length, name bytes, u32 rank, rank x u64 dims, raw data

Parameter data is stored in the checkpoint dtype (``<f4`` for float32
models). Optimizer moments use the reserved prefixes ``__adam_m__.`` and
``__adam_v__.`` and are stored as ``<f8``; the step counter is the rank-0
record ``__adam_t__``.
"""

import csv
import json
import struct
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .params import ParamStore
from .types import AdamState, Checkpoint, ModelConfig, RunRecord
from .validate import ArtifactMissingError, StabilityValidationError, ensure_checkpoint

MAGIC = b"SFCKPT\0\0"
VERSION = 1
ADAM_M_PREFIX = "__adam_m__."
ADAM_V_PREFIX = "__adam_v__."
ADAM_STEP = "__adam_t__"
STATE_DTYPE = "<f8"


def _encode_header(entries: Dict[str, str]) -> bytes:
    return "".join(f"{k}={v}\n" for k, v in entries.items()).encode("utf-8")


def _decode_header(raw: bytes) -> Dict[str, str]:
    entries = {}
    for line in raw.decode("utf-8").splitlines():
        if line:
            key, _, value = line.partition("=")
            entries[key] = value
    return entries


def _write_record(buf: List[bytes], name: str, arr: np.ndarray, dtype: str) -> None:
    encoded = name.encode("utf-8")
    buf.append(struct.pack("<I", len(encoded)))
    buf.append(encoded)
    buf.append(struct.pack("<I", arr.ndim))
    buf.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    buf.append(np.ascontiguousarray(arr, dtype=dtype).tobytes())


def checkpoint_to_bytes(checkpoint: Checkpoint, state: Optional[AdamState] = None) -> bytes:
    """Encode a checkpoint (and optionally optimizer state) to the binary format."""
    config = checkpoint.config
    dtype = np.dtype(config.dtype).newbyteorder("<").str
    header = {f"model.{k}": json.dumps(v) for k, v in config.to_dict().items()}
    header["data_dtype"] = dtype
    header["provenance"] = checkpoint.provenance.replace("\n", " ")

    records: List[Tuple[str, np.ndarray, str]] = [(n, a, dtype) for n, a in checkpoint.params.items()]
    if state is not None:
        records += [(ADAM_M_PREFIX + n, a, STATE_DTYPE) for n, a in state.m.items()]
        records += [(ADAM_V_PREFIX + n, a, STATE_DTYPE) for n, a in state.v.items()]
        records.append((ADAM_STEP, np.asarray(float(state.step)), STATE_DTYPE))

    raw_header = _encode_header(header)
    buf = [MAGIC, struct.pack("<I", VERSION), struct.pack("<Q", len(raw_header)), raw_header,
           struct.pack("<Q", len(records))]
    for name, arr, record_dtype in records:
        _write_record(buf, name, arr, record_dtype)
    return b"".join(buf)


def checkpoint_from_bytes(data: bytes) -> Tuple[Checkpoint, Optional[AdamState]]:
    """
    Decode the binary format.

    Raises:
        StabilityValidationError: Bad magic, unknown version, truncated data,
            or a parameter set that does not match the stored config
    """
    view = memoryview(data)
    if bytes(view[:8]) != MAGIC:
        raise StabilityValidationError("not a stablefit checkpoint (bad magic)")
    offset = 8

    def take(fmt: str) -> Tuple[Any, ...]:
        nonlocal offset
        size = struct.calcsize(fmt)
        if offset + size > len(view):
            raise StabilityValidationError("truncated checkpoint")
        values = struct.unpack_from(fmt, view, offset)
        offset += size
        return values

    (version,) = take("<I")
    if version != VERSION:
        raise StabilityValidationError(f"unsupported checkpoint version {version}")
    (header_len,) = take("<Q")
    header = _decode_header(bytes(view[offset:offset + header_len]))
    offset += header_len

    model = {k[len("model."):]: json.loads(v) for k, v in header.items() if k.startswith("model.")}
    config = ModelConfig.from_dict(model)
    dtype = header.get("data_dtype", "<f4")

    (count,) = take("<Q")
    params = ParamStore()
    m, v = ParamStore(), ParamStore()
    step: Optional[int] = None
    for _ in range(count):
        (name_len,) = take("<I")
        name = bytes(view[offset:offset + name_len]).decode("utf-8")
        offset += name_len
        (rank,) = take("<I")
        shape = take(f"<{rank}Q") if rank else ()
        is_state = name.startswith((ADAM_M_PREFIX, ADAM_V_PREFIX)) or name == ADAM_STEP
        record_dtype = np.dtype(STATE_DTYPE if is_state else dtype)
        nbytes = int(np.prod(shape, dtype=np.int64)) * record_dtype.itemsize
        if offset + nbytes > len(view):
            raise StabilityValidationError("truncated checkpoint")
        arr = np.frombuffer(view[offset:offset + nbytes], dtype=record_dtype).reshape(shape).copy()
        offset += nbytes
        if name == ADAM_STEP:
            step = int(arr)
        elif name.startswith(ADAM_M_PREFIX):
            m.add(name[len(ADAM_M_PREFIX):], arr.astype(np.float64))
        elif name.startswith(ADAM_V_PREFIX):
            v.add(name[len(ADAM_V_PREFIX):], arr.astype(np.float64))
        else:
            params.add(name, arr.astype(config.np_dtype))

    checkpoint = Checkpoint(config, params, header.get("provenance", ""))
    ensure_checkpoint(checkpoint, "load_checkpoint")
    state = AdamState(step, m, v) if step is not None else None
    return checkpoint, state


def save_checkpoint(checkpoint: Checkpoint, path: Union[str, Path], state: Optional[AdamState] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(checkpoint_to_bytes(checkpoint, state))
    return path


def load_checkpoint(path: Union[str, Path]) -> Tuple[Checkpoint, Optional[AdamState]]:
    """
    Load a checkpoint file.

    Raises:
        ArtifactMissingError: If the file does not exist
    """
    path = Path(path)
    if not path.is_file():
        raise ArtifactMissingError(f"checkpoint not found: {path}", path=str(path))
    with open(path, "rb") as f:
        return checkpoint_from_bytes(f.read())


# ---------------------------------------------------------------------------
# Tables and documents
# ---------------------------------------------------------------------------

def format_cell(value: Any) -> str:
    """Render one CSV cell; floats use repr so values parse back exactly."""
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_csv(path: Union[str, Path], header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
    """Write a UTF-8, LF-terminated CSV file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(list(header))
        for row in rows:
            writer.writerow([format_cell(v) for v in row])
    return path


def read_csv(path: Union[str, Path]) -> List[Dict[str, str]]:
    with open(path, "r", encoding="utf-8", newline="") as f:
        return list(csv.DictReader(f))


def save_json(data: Any, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(json.dumps(data, indent=2, ensure_ascii=False))
        f.write("\n")
    return path


def load_json(path: Union[str, Path]) -> Any:
    path = Path(path)
    if not path.is_file():
        raise ArtifactMissingError(f"file not found: {path}", path=str(path))
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


# ---------------------------------------------------------------------------
# Run directories
# ---------------------------------------------------------------------------

def write_run_traces(record: RunRecord, out_dir: Union[str, Path]) -> List[str]:
    """
    Write a run's traces as CSV families plus record.json.

    Returns:
        File names written, in a fixed order
    """
    out_dir = Path(out_dir)
    steps = range(1, record.iterations + 1)
    write_csv(out_dir / "loss.csv", ["iteration", "loss"], zip(steps, record.losses))
    write_csv(out_dir / "schedule.csv", ["iteration", "lr", "bias_correction_factor"],
              zip(steps, record.lrs, record.bias_correction_factors))
    groups = list(record.grad_norms)
    write_csv(out_dir / "grad_norms.csv", ["iteration"] + groups,
              ([t] + [record.grad_norms[g][t - 1] for g in groups] for t in steps))
    write_csv(out_dir / "eval.csv", ["iteration", "dev_metric", "train_loss"],
              ((e.iteration, e.dev_metric, e.train_loss) for e in record.evals))
    names = ["loss.csv", "schedule.csv", "grad_norms.csv", "eval.csv"]
    if record.dev_correct:
        write_csv(out_dir / "dev_correct.csv", ["index", "correct"], enumerate(record.dev_correct))
        names.append("dev_correct.csv")
    save_json(record.to_dict(), out_dir / "record.json")
    names.append("record.json")
    return names


def load_run_record(path: Union[str, Path]) -> RunRecord:
    path = Path(path)
    if path.is_dir():
        path = path / "record.json"
    return RunRecord.from_dict(load_json(path))
