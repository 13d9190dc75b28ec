"""Record sinks: NDJSON-plus-sidecar files, null counting, socket streaming.

File layout per dataset directory:

    records.ndjson   one JSON object per record, fixed key order
    records.bin      raw payload bytes, concatenated in write order

Each JSON line carries ``payload_offset``/``payload_len`` into the sidecar
plus a crc32 checksum of the payload, so a dataset can be scanned without
touching payload bytes and verified cheaply when it is.

Stream framing, per record: a little-endian u32 holding the byte length of
the JSON line, the JSON line itself (no trailing newline), then the raw
payload. The JSON is identical to a file-sink line, so a stream receiver
can reconstruct the exact same dataset.
"""

from __future__ import annotations

import io
import json
import struct
import zlib
from pathlib import Path

from .errors import ConfigError
from .hooks import DType
from .records import CaptureRecord

NDJSON_NAME = "records.ndjson"
SIDECAR_NAME = "records.bin"
_FRAME_LEN = struct.Struct("<I")


def record_header(record: CaptureRecord, payload_offset: int) -> dict:
    """JSON header for one record; insertion order is the wire order."""
    return {
        "request_id": record.request_id,
        "hook": record.hook_name,
        "layer": record.layer_index,
        "step": record.step_seq,
        "tp_rank": record.rank_coords[0],
        "pp_stage": record.rank_coords[1],
        "token_range": list(record.token_range),
        "shape": list(record.shape),
        "dtype": record.dtype.name,
        "payload_offset": payload_offset,
        "payload_len": len(record.payload),
        "checksum": record.checksum,
    }


class FileSink:
    """Appends records to records.ndjson + records.bin under a directory."""

    def __init__(self, directory: str | Path) -> None:
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self._ndjson = open(self.directory / NDJSON_NAME, "a",
                            encoding="utf-8")
        self._sidecar = open(self.directory / SIDECAR_NAME, "ab")
        self._offset = self._sidecar.tell()
        self.records_written = 0
        self.bytes_written = 0

    def write(self, records: list[CaptureRecord]) -> None:
        for record in records:
            header = record_header(record, self._offset)
            self._ndjson.write(json.dumps(header, separators=(",", ":")))
            self._ndjson.write("\n")
            self._sidecar.write(record.payload)
            self._offset += len(record.payload)
            self.records_written += 1
            self.bytes_written += len(record.payload)

    def flush(self) -> None:
        self._ndjson.flush()
        self._sidecar.flush()

    def close(self) -> None:
        self._ndjson.close()
        self._sidecar.close()

    def __enter__(self) -> "FileSink":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


class NullSink:
    """Counts what it is handed and drops it."""

    def __init__(self) -> None:
        self.records_written = 0
        self.bytes_written = 0

    def write(self, records: list[CaptureRecord]) -> None:
        self.records_written += len(records)
        self.bytes_written += sum(len(r.payload) for r in records)

    def flush(self) -> None:
        pass

    def close(self) -> None:
        pass


class StreamSink:
    """Frames records onto a writable binary stream or connected socket."""

    def __init__(self, stream) -> None:
        # accept any object with write(); sockets come wrapped via makefile
        if hasattr(stream, "sendall") and not hasattr(stream, "write"):
            stream = stream.makefile("wb")
        self._stream = stream
        self._offset = 0
        self.records_written = 0
        self.bytes_written = 0

    def write(self, records: list[CaptureRecord]) -> None:
        for record in records:
            header = record_header(record, self._offset)
            line = json.dumps(header, separators=(",", ":")).encode("utf-8")
            self._stream.write(_FRAME_LEN.pack(len(line)))
            self._stream.write(line)
            self._stream.write(record.payload)
            self._offset += len(record.payload)
            self.records_written += 1
            self.bytes_written += len(record.payload)

    def flush(self) -> None:
        self._stream.flush()

    def close(self) -> None:
        self._stream.close()


def read_stream(stream) -> list[tuple[dict, bytes]]:
    """Parse a framed stream back into (header, payload) pairs."""
    out = []
    while True:
        raw = stream.read(_FRAME_LEN.size)
        if not raw:
            break
        if len(raw) < _FRAME_LEN.size:
            raise ConfigError("truncated frame length")
        (line_len,) = _FRAME_LEN.unpack(raw)
        line = stream.read(line_len)
        if len(line) < line_len:
            raise ConfigError("truncated frame header")
        header = json.loads(line.decode("utf-8"))
        payload = stream.read(header["payload_len"])
        if len(payload) < header["payload_len"]:
            raise ConfigError("truncated frame payload")
        out.append((header, payload))
    return out


def scan_dataset(directory: str | Path) -> list[tuple[dict, bytes]]:
    """Load raw (header, payload) pairs without interpreting or verifying."""
    directory = Path(directory)
    ndjson_path = directory / NDJSON_NAME
    sidecar_path = directory / SIDECAR_NAME
    if not ndjson_path.exists():
        raise ConfigError(f"no dataset at {directory}")
    sidecar = sidecar_path.read_bytes() if sidecar_path.exists() else b""
    pairs = []
    with open(ndjson_path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            header = json.loads(line)
            start = header["payload_offset"]
            end = start + header["payload_len"]
            if end > len(sidecar):
                raise ConfigError(
                    f"line {line_no}: payload extends past sidecar end")
            pairs.append((header, sidecar[start:end]))
    return pairs


def read_dataset(directory: str | Path,
                 verify_checksums: bool = True) -> list[CaptureRecord]:
    """Load a file-sink dataset back into records."""
    records = []
    for line_no, (header, payload) in enumerate(scan_dataset(directory),
                                                start=1):
        if verify_checksums and zlib.crc32(payload) != header["checksum"]:
            raise ConfigError(f"line {line_no}: checksum mismatch")
        records.append(record_from_header(header, payload))
    return records


def record_from_header(header: dict, payload: bytes) -> CaptureRecord:
    return CaptureRecord(
        request_id=header["request_id"],
        hook_name=header["hook"],
        layer_index=header["layer"],
        step_seq=header["step"],
        token_range=tuple(header["token_range"]),
        shape=tuple(header["shape"]),
        dtype=DType.of(header["dtype"]),
        rank_coords=(header["tp_rank"], header["pp_stage"]),
        payload=payload,
    )


def records_to_stream_bytes(records: list[CaptureRecord]) -> bytes:
    """Frame records into an in-memory buffer; handy for tests and demos."""
    buf = io.BytesIO()
    sink = StreamSink(buf)
    sink.write(records)
    return buf.getvalue()
