"""On-disk formats: EMB1 embeddings, named-array containers, trial lists,
speaker metadata, labels and key/value config files.

All binary formats are little-endian. EMB1 layout::

    offset 0   4 bytes  magic "EMB1"
    offset 4   u32      record count
    offset 8   u32      dimension
    offset 12  u64      reserved, zero
    then per record: u16 id byte-length, UTF-8 id, dim float32 values

Named-array container ("ARR1") layout::

    4 bytes magic "ARR1", u32 array count, then per array:
    u16 name byte-length, UTF-8 name, u8 ndim, ndim x u32 shape,
    prod(shape) float32 values (C order)
"""

from __future__ import annotations

import csv
import io
import json
import re
import struct
from collections.abc import Iterable, Mapping
from pathlib import Path

import numpy as np

from .calibration import GroupKey
from .errors import ConfigError, DataError, FormatError
from .scoring import TrialPair

__all__ = [
    "EMB1_MAGIC",
    "EMB1_HEADER",
    "ARR1_MAGIC",
    "EmbeddingStore",
    "write_embeddings",
    "read_embeddings",
    "write_arrays",
    "read_arrays",
    "write_kv",
    "read_kv",
    "parse_trials",
    "format_trials",
    "parse_metadata",
    "speaker_of",
    "join_groups",
    "parse_labels",
    "format_labels",
    "read_bytes",
    "read_text",
]

EMB1_MAGIC = b"EMB1"
_EMB1_HEAD = struct.Struct("<4sIIQ")
EMB1_HEADER = _EMB1_HEAD.size  # 20 bytes
ARR1_MAGIC = b"ARR1"
_F32 = np.dtype("<f4")


class EmbeddingStore(Mapping):
    """Ordered ``utterance_id -> float32 vector`` map with one common dimension.

    Vectors are held as little-endian float32, the precision of the file
    format, so writing and reading a store is the identity.
    """

    def __init__(self, items: Iterable | Mapping = (), dim: int | None = None, provenance: str = ""):
        if isinstance(items, Mapping):
            items = items.items()
        self._vectors = {}
        self.dim = dim
        self.provenance = provenance
        for utt, vec in items:
            self.add(utt, vec)
        if self.dim is None:
            self.dim = 0

    def add(self, utt: str, vec) -> None:
        vec = np.asarray(getattr(vec, "vector", vec)).ravel().astype(_F32)
        if not isinstance(utt, str) or not utt:
            raise DataError("utterance ids must be non-empty strings")
        if len(utt.encode("utf-8")) > 0xFFFF:
            raise DataError(f"utterance id too long: {utt[:40]!r}...")
        if utt in self._vectors:
            raise DataError(f"duplicate utterance id {utt!r}")
        if self.dim is None or (self.dim == 0 and not self._vectors):
            self.dim = vec.size
        if vec.size != self.dim:
            raise DataError(f"dim mismatch for {utt!r}: store has dim {self.dim}, got {vec.size}")
        if not np.all(np.isfinite(vec)):
            raise DataError(f"embedding {utt!r} has non-finite values")
        vec.setflags(write=False)
        self._vectors[utt] = vec

    def __getitem__(self, utt):
        return self._vectors[utt]

    def __iter__(self):
        return iter(self._vectors)

    def __len__(self):
        return len(self._vectors)

    def __eq__(self, other):
        if not isinstance(other, EmbeddingStore):
            return NotImplemented
        return (
            self.dim == other.dim
            and list(self) == list(other)
            and all(self[k].tobytes() == other[k].tobytes() for k in self)
        )

    def matrix(self) -> np.ndarray:
        """Rows in store order, as float64."""
        if not self._vectors:
            return np.zeros((0, self.dim))
        return np.stack([v.astype(np.float64) for v in self._vectors.values()])


def write_embeddings(store: EmbeddingStore) -> bytes:
    if not isinstance(store, EmbeddingStore):
        store = EmbeddingStore(store)
    parts = [_EMB1_HEAD.pack(EMB1_MAGIC, len(store), store.dim, 0)]
    for utt, vec in store.items():
        raw = utt.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(vec.astype(_F32).tobytes())
    return b"".join(parts)


def read_embeddings(data: bytes, expected_dim: int | None = None, provenance: str = "") -> EmbeddingStore:
    """Parse an EMB1 byte string.

    Raises:
      FormatError: bad magic, truncated header or record, nonzero reserved
        field, invalid id, dimension mismatch or trailing bytes. ``offset``
        holds the byte offset of the fault.
    """
    data = bytes(data)
    if data[:4] != EMB1_MAGIC:
        raise FormatError("bad magic at offset 0", 0)
    if len(data) < EMB1_HEADER:
        raise FormatError(f"truncated header at offset {len(data)}: need {EMB1_HEADER} bytes", len(data))
    _, count, dim, reserved = _EMB1_HEAD.unpack_from(data, 0)
    if reserved != 0:
        raise FormatError("nonzero reserved field at offset 12", 12)
    if expected_dim is not None and dim != expected_dim:
        raise FormatError(f"dim mismatch at offset 8: file has dim {dim}, expected {expected_dim}", 8)
    store = EmbeddingStore(dim=dim, provenance=provenance)
    pos = EMB1_HEADER
    nbytes = 4 * dim
    for k in range(count):
        if pos + 2 > len(data):
            raise FormatError(f"truncated record {k} at offset {pos}: missing id length", pos)
        (n,) = struct.unpack_from("<H", data, pos)
        if n == 0:
            raise FormatError(f"empty id in record {k} at offset {pos}", pos)
        start = pos + 2
        if start + n + nbytes > len(data):
            raise FormatError(f"truncated record {k} at offset {pos}: need {2 + n + nbytes} bytes", pos)
        try:
            utt = data[start : start + n].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"invalid UTF-8 id in record {k} at offset {start}", start) from exc
        vec = np.frombuffer(data, dtype=_F32, count=dim, offset=start + n)
        try:
            store.add(utt, vec)
        except DataError as exc:
            raise FormatError(f"record {k} at offset {pos}: {exc}", pos) from exc
        pos = start + n + nbytes
    if pos != len(data):
        raise FormatError(f"trailing bytes at offset {pos}: {len(data) - pos} unexpected", pos)
    return store


def write_arrays(arrays: Mapping[str, np.ndarray]) -> bytes:
    parts = [ARR1_MAGIC, struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        if not raw or len(raw) > 0xFFFF or arr.ndim > 255:
            raise DataError(f"cannot store array {name!r}")
        parts.append(struct.pack(f"<H{len(raw)}sB{arr.ndim}I", len(raw), raw, arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_F32).tobytes())
    return b"".join(parts)


def read_arrays(data: bytes) -> dict[str, np.ndarray]:
    """Parse a named-array container into float64 arrays (insertion order kept)."""
    data = bytes(data)
    if data[:4] != ARR1_MAGIC:
        raise FormatError("bad magic at offset 0", 0)
    if len(data) < 8:
        raise FormatError(f"truncated header at offset {len(data)}", len(data))
    (count,) = struct.unpack_from("<I", data, 4)
    out, pos = {}, 8

    def need(n, what):
        if pos + n > len(data):
            raise FormatError(f"truncated {what} at offset {pos}", pos)

    for k in range(count):
        need(2, f"array {k} name length")
        (n,) = struct.unpack_from("<H", data, pos)
        pos += 2
        need(n + 1, f"array {k} name")
        try:
            name = data[pos : pos + n].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"invalid UTF-8 name at offset {pos}", pos) from exc
        pos += n
        ndim = data[pos]
        pos += 1
        need(4 * ndim, f"array {name!r} shape")
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        size = int(np.prod(shape, dtype=np.int64))
        need(4 * size, f"array {name!r} data")
        if name in out:
            raise FormatError(f"duplicate array {name!r} at offset {pos}", pos)
        out[name] = np.frombuffer(data, dtype=_F32, count=size, offset=pos).astype(np.float64).reshape(shape)
        pos += 4 * size
    if pos != len(data):
        raise FormatError(f"trailing bytes at offset {pos}", pos)
    return out


def write_kv(values: Mapping) -> str:
    """``key = <JSON value>`` lines, keys sorted."""
    return "".join(f"{k} = {json.dumps(values[k], sort_keys=True)}\n" for k in sorted(values))


def read_kv(text: str) -> dict:
    """Inverse of :func:`write_kv`; ``#`` starts a comment line."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"malformed config line {lineno}: expected 'key = value'")
        if key in out:
            raise ConfigError(f"config line {lineno}: duplicate key {key!r}")
        try:
            out[key] = json.loads(value)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config line {lineno}: value for {key!r} is not JSON ({exc.msg})") from exc
    return out


_LABELS = {"1": True, "0": False}


def parse_trials(text: str) -> list[TrialPair]:
    """``label enroll_id test_id`` per line, label 1 (target) or 0 (nontarget).

    Blank lines are ignored; line numbers in errors count every line.
    """
    trials = []
    for lineno, line in enumerate(text.splitlines(), 1):
        fields = line.split()
        if not fields:
            continue
        if len(fields) != 3:
            raise FormatError(f"malformed trial at line {lineno}: expected 3 fields, got {len(fields)}", lineno)
        if fields[0] not in _LABELS:
            raise FormatError(f"invalid label at line {lineno}: {fields[0]!r}", lineno)
        trials.append(TrialPair(_LABELS[fields[0]], fields[1], fields[2]))
    return trials


def format_trials(trials: Iterable[TrialPair]) -> str:
    return "".join(f"{int(t.target)} {t.enroll_id} {t.test_id}\n" for t in trials)


def parse_metadata(text: str) -> dict[str, tuple[GroupKey, ...]]:
    """Speaker metadata CSV: ``speaker_id`` column plus one column per grouping dimension.

    Empty cells are left out of a speaker's key set.
    """
    reader = csv.DictReader(io.StringIO(text))
    if not reader.fieldnames or reader.fieldnames[0].strip() != "speaker_id":
        raise FormatError("metadata header must start with 'speaker_id'", 1)
    dims = [f.strip() for f in reader.fieldnames[1:]]
    out = {}
    for lineno, row in enumerate(reader, 2):
        if None in row or any(v is None for v in row.values()):
            raise FormatError(f"malformed metadata at line {lineno}: wrong field count", lineno)
        spk = row[reader.fieldnames[0]].strip()
        if not spk:
            raise FormatError(f"missing speaker_id at line {lineno}", lineno)
        if spk in out:
            raise FormatError(f"duplicate speaker {spk!r} at line {lineno}", lineno)
        keys = [GroupKey(d, row[f].strip()) for d, f in zip(dims, reader.fieldnames[1:]) if row[f].strip()]
        out[spk] = tuple(sorted(keys))
    return out


def speaker_of(utterance_id: str, pattern: str | re.Pattern | None = None) -> str:
    """Speaker id of an utterance: text before the first '/', or the first
    group (or the ``speaker`` named group) of ``pattern``."""
    if pattern is None:
        return utterance_id.split("/", 1)[0]
    m = re.search(pattern, utterance_id)
    if m is None:
        raise DataError(f"speaker pattern does not match utterance {utterance_id!r}")
    if "speaker" in m.re.groupindex:
        return m.group("speaker")
    return m.group(1) if m.re.groups else m.group(0)


def join_groups(trials, metadata, dimension, pattern=None, on_unknown="fail"):
    """Tag each trial with the ``dimension`` value of its enrollment speaker.

    Trials whose two speakers fall in different groups are dropped: a group
    threshold applies to trials within that group. Speakers absent from
    ``metadata`` (or lacking ``dimension``) raise unless ``on_unknown`` is
    "skip", in which case those trials are dropped.

    Returns ``(tagged_trials, n_dropped)``.
    """
    if on_unknown not in ("fail", "skip"):
        raise ConfigError(f"on_unknown must be 'fail' or 'skip', got {on_unknown!r}")

    def group_of(utt, k):
        spk = speaker_of(utt, pattern)
        for key in metadata.get(spk, ()):
            if key.dimension == dimension:
                return key.value
        if on_unknown == "fail":
            raise DataError(f"unknown speaker {spk!r} (dimension {dimension!r}) in trial {k + 1}")
        return None

    out, dropped = [], 0
    for k, t in enumerate(trials):
        ge, gt = group_of(t.enroll_id, k), group_of(t.test_id, k)
        if ge is None or gt is None or ge != gt:
            dropped += 1
            continue
        out.append(TrialPair(t.target, t.enroll_id, t.test_id, ge))
    return out, dropped


def parse_labels(text: str) -> dict[str, str]:
    """``utterance_id,label`` CSV with that header."""
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or [h.strip() for h in header] != ["utterance_id", "label"]:
        raise FormatError("labels header must be 'utterance_id,label'", 1)
    out = {}
    for lineno, row in enumerate(reader, 2):
        if not row:
            continue
        if len(row) != 2 or not row[0].strip() or not row[1].strip():
            raise FormatError(f"malformed label at line {lineno}", lineno)
        utt = row[0].strip()
        if utt in out:
            raise FormatError(f"duplicate utterance {utt!r} at line {lineno}", lineno)
        out[utt] = row[1].strip()
    return out


def format_labels(labels: Mapping[str, str]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["utterance_id", "label"])
    for utt, label in labels.items():
        writer.writerow([utt, label])
    return buf.getvalue()


def read_bytes(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror or exc}") from exc


def read_text(path) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror or exc}") from exc
    except UnicodeDecodeError as exc:
        raise FormatError(f"{path} is not UTF-8 text (offset {exc.start})", exc.start) from exc
