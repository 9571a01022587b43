"""CAN log parsing, feature scaling, 27-message windows and dataset splits.

A window is 27 consecutive messages. Each message becomes a 9-value feature
vector (ID, byte0..byte7); messages 0-8, 9-17 and 18-26 fill the rows of
channels 0, 1 and 2 of a 3x9x9 image. The LSTM branch sees the same numbers
as a 27x9 sequence.
"""
from __future__ import annotations

import enum
import struct
import warnings
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAX_STD_ID = 0x7FF
WINDOW_MESSAGES = 27
FEATURES = 9
IMAGE_SHAPE = (3, 9, 9)
SEQUENCE_SHAPE = (27, 9)


class Label(enum.IntEnum):
    NORMAL = 0
    DOS = 1
    FUZZY = 2
    SPOOF_GEAR = 3
    SPOOF_RPM = 4

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        if isinstance(value, int):
            return cls(value)
        key = str(value).strip().upper().replace("-", "_")
        aliases = {"GEAR": "SPOOF_GEAR", "RPM": "SPOOF_RPM", "FUZZ": "FUZZY", "SPOOFGEAR": "SPOOF_GEAR",
                   "SPOOFRPM": "SPOOF_RPM"}
        key = aliases.get(key, key)
        try:
            return cls[key]
        except KeyError:
            raise ValueError(f"unknown traffic class {value!r}") from None


CLASS_NAMES = {Label.NORMAL: "Normal", Label.DOS: "DoS", Label.FUZZY: "Fuzzy",
               Label.SPOOF_GEAR: "SpoofGear", Label.SPOOF_RPM: "SpoofRPM"}


class CanParseError(ValueError):
    def __init__(self, path, line_no, reason):
        super().__init__(f"{path}:{line_no}: {reason}")
        self.path = path
        self.line_no = line_no
        self.reason = reason


class WindowsFileError(ValueError):
    pass


@dataclass(frozen=True, slots=True)
class CanRecord:
    timestamp: float
    can_id: int
    dlc: int
    payload: bytes
    label: Label = Label.NORMAL

    def __post_init__(self):
        if not 0 <= self.can_id <= MAX_STD_ID:
            raise ValueError(f"CAN id {self.can_id:#x} outside standard 11-bit range")
        if not 0 <= self.dlc <= 8:
            raise ValueError(f"DLC {self.dlc} outside [0, 8]")
        if len(self.payload) != self.dlc:
            raise ValueError(f"payload has {len(self.payload)} bytes but DLC is {self.dlc}")


# -- parsing -----------------------------------------------------------------

def _parse_hex_bytes(tokens):
    return bytes(int(t, 16) for t in tokens)


def _is_hex_byte(tok):
    return 1 <= len(tok) <= 2 and all(ch in "0123456789abcdefABCDEF" for ch in tok)


def _detect_dialect(line):
    if line.lstrip().startswith("Timestamp:"):
        return "txt"
    fields = [f.strip() for f in line.split(",")]
    if len(fields) >= 4 and " " in fields[3]:
        return "spaced"
    return "columns"


def _split_row(line, dialect):
    """Return (timestamp, id_hex, dlc_str, byte_tokens, flag or None)."""
    if dialect == "txt":
        # Timestamp: 1479121434.850202        ID: 0350    000    DLC: 8    05 28 84 66 6d 00 00 a2
        head, _, rest = line.partition("ID:")
        ts = head.replace("Timestamp:", "").strip()
        id_part, _, tail = rest.partition("DLC:")
        can_id = id_part.split()[0] if id_part.split() else ""
        toks = tail.split()
        return ts, can_id, toks[0] if toks else "", toks[1:], None
    fields = [f.strip() for f in line.split(",")]
    while fields and fields[-1] == "":
        fields.pop()
    if len(fields) < 3:
        raise ValueError("expected at least timestamp, ID and DLC fields")
    ts, can_id, dlc = fields[0], fields[1], fields[2]
    rest = fields[3:]
    flag = None
    if rest and rest[-1].upper() in ("R", "T"):
        flag = rest.pop().upper()
    if dialect == "spaced":
        tokens = rest[0].split() if rest else []
        if len(rest) > 1:
            raise ValueError(f"unexpected extra fields {rest[1:]}")
    else:
        tokens = rest
    return ts, can_id, dlc, tokens, flag


def parse_can_csv(path, label=Label.NORMAL, mode="auto"):
    """Parse a Car-Hacking style capture into :class:`CanRecord` objects.

    ``mode`` is ``"fixed"`` (every row gets ``label``), ``"flag"`` (rows
    flagged ``T`` get ``label``, ``R`` rows are Normal; a missing flag is an
    error) or ``"auto"`` (flag mode for rows that carry a flag, ``label``
    otherwise). Payload bytes may be space separated in one field or spread
    over columns, and the plain-text ``Timestamp: ... ID: ... DLC:`` log
    layout is also accepted; the dialect is detected from the first row.
    """
    if mode not in ("auto", "fixed", "flag"):
        raise ValueError(f"unknown label mode {mode!r}")
    label = Label.parse(label)
    path = Path(path)
    records = []
    dialect = None
    with path.open("r", encoding="utf-8", errors="replace") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            if dialect is None:
                if not line.startswith("Timestamp:"):
                    try:
                        float(line.split(",")[0])
                    except ValueError:
                        continue  # header row
                dialect = _detect_dialect(line)
            try:
                ts, id_hex, dlc_s, tokens, flag = _split_row(line, dialect)
                timestamp = float(ts)
                can_id = int(id_hex, 16)
                dlc = int(dlc_s)
                if not all(_is_hex_byte(t) for t in tokens):
                    raise ValueError(f"malformed hex payload {' '.join(tokens)!r}")
                payload = _parse_hex_bytes(tokens)
            except ValueError as exc:
                raise CanParseError(path, line_no, str(exc)) from None
            if can_id > MAX_STD_ID:
                raise CanParseError(path, line_no, f"CAN id {id_hex} exceeds 0x7FF")
            if not 0 <= dlc <= 8:
                raise CanParseError(path, line_no, f"DLC {dlc} outside [0, 8]")
            if len(payload) != dlc:
                raise CanParseError(path, line_no, f"DLC {dlc} but {len(payload)} payload bytes")
            if mode == "fixed" or (mode == "auto" and flag is None):
                row_label = label
            elif flag is None:
                raise CanParseError(path, line_no, "missing R/T flag in flag mode")
            else:
                row_label = label if flag == "T" else Label.NORMAL
            records.append(CanRecord(timestamp, can_id, dlc, payload, row_label))
    return records


# -- features and windows ----------------------------------------------------

def normalize_record(rec):
    """Scale a record to 9 values in [0, 1]: ID/2047 then each byte/255, zero-padded."""
    out = np.zeros(FEATURES, dtype=np.float64)
    out[0] = rec.can_id / MAX_STD_ID
    if rec.dlc:
        out[1:1 + rec.dlc] = np.frombuffer(rec.payload, dtype=np.uint8) / 255.0
    return out.astype(np.float32)


def feature_matrix(records):
    """Vectorized :func:`normalize_record` over a list of records, shape (n, 9)."""
    n = len(records)
    raw = np.zeros((n, FEATURES), dtype=np.float64)
    if n == 0:
        return raw.astype(np.float32)
    raw[:, 0] = np.fromiter((r.can_id for r in records), dtype=np.float64, count=n) / MAX_STD_ID
    padded = b"".join(r.payload.ljust(8, b"\x00") for r in records)
    raw[:, 1:] = np.frombuffer(padded, dtype=np.uint8).reshape(n, 8) / 255.0
    return raw.astype(np.float32)


@dataclass(frozen=True, eq=False)
class Window:
    image: np.ndarray
    label: Label
    source_index: int

    def __post_init__(self):
        if self.image.shape != IMAGE_SHAPE:
            raise ValueError(f"window image must have shape {IMAGE_SHAPE}, got {self.image.shape}")
        self.image.setflags(write=False)

    @property
    def sequence(self):
        return self.image.reshape(SEQUENCE_SHAPE)


def window_label(labels):
    """Normal iff every label is Normal; otherwise the most common attack label.

    Ties go to the smaller class ordinal.
    """
    attacks = Counter(Label(l) for l in labels if l != Label.NORMAL)
    if not attacks:
        return Label.NORMAL
    best = max(attacks.values())
    return min(l for l, c in attacks.items() if c == best)


def build_windows(records, drop_normal=False):
    """Cut records into non-overlapping runs of 27; a trailing remainder is discarded.

    With ``drop_normal`` windows labelled Normal are skipped (used for attack
    captures whose benign stretches are not part of the attack class).
    """
    n_win = len(records) // WINDOW_MESSAGES
    if n_win == 0:
        warnings.warn(f"only {len(records)} records; a window needs {WINDOW_MESSAGES}", stacklevel=2)
        return []
    used = n_win * WINDOW_MESSAGES
    feats = feature_matrix(records[:used]).reshape(n_win, *IMAGE_SHAPE)
    labels = np.fromiter((int(r.label) for r in records[:used]), dtype=np.int64, count=used)
    labels = labels.reshape(n_win, WINDOW_MESSAGES)
    windows = []
    for i in range(n_win):
        row = labels[i]
        lab = Label.NORMAL if not row.any() else window_label(row)
        if drop_normal and lab == Label.NORMAL:
            continue
        windows.append(Window(np.ascontiguousarray(feats[i]), lab, i * WINDOW_MESSAGES))
    return windows


# -- splitting ---------------------------------------------------------------

@dataclass
class DatasetSplit:
    train: list
    validation: list
    test: list
    seed: int
    ratios: tuple = (0.7, 0.2, 0.1)

    def class_counts(self):
        out = {}
        for part in ("train", "validation", "test"):
            c = Counter(w.label for w in getattr(self, part))
            out[part] = {lab: c.get(lab, 0) for lab in Label}
        return out


def split_counts(n, ratios):
    n_train = int(round(n * ratios[0]))
    n_val = int(round(n * ratios[1]))
    n_val = min(n_val, n - n_train)
    return n_train, n_val, n - n_train - n_val


def split_dataset(windows, ratios=(0.7, 0.2, 0.1), seed=0):
    """Stratified, seeded train/validation/test split."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three positive numbers summing to 1, got {ratios}")
    by_class = {lab: [] for lab in Label}
    for w in windows:
        by_class[w.label].append(w)
    for lab, items in by_class.items():
        if 0 < len(items) < 3:
            raise ValueError(f"class {CLASS_NAMES[lab]} has only {len(items)} windows; need at least 3")
    rng = np.random.default_rng(seed)
    train, val, test = [], [], []
    for lab in Label:
        items = by_class[lab]
        if not items:
            continue
        order = rng.permutation(len(items))
        a, b, _ = split_counts(len(items), ratios)
        train += [items[i] for i in order[:a]]
        val += [items[i] for i in order[a:a + b]]
        test += [items[i] for i in order[a + b:]]
    return DatasetSplit(train, val, test, seed, ratios)


def stratified_subsample(windows, total, seed=0):
    """Keep about ``total`` windows, preserving class proportions."""
    if total >= len(windows):
        return list(windows)
    by_class = {}
    for w in windows:
        by_class.setdefault(w.label, []).append(w)
    rng = np.random.default_rng(seed)
    out = []
    for lab in sorted(by_class):
        items = by_class[lab]
        keep = max(3, int(round(total * len(items) / len(windows))))
        idx = np.sort(rng.choice(len(items), size=min(keep, len(items)), replace=False))
        out += [items[i] for i in idx]
    return out


# -- synthetic traffic -------------------------------------------------------

BENIGN_IDS = (0x545, 0x2B0, 0x43F, 0x5F0, 0x350, 0x316, 0x18F, 0x260, 0x2A0, 0x329, 0x4F0, 0x153)
SPOOF_IDS = {Label.SPOOF_GEAR: 0x43F, Label.SPOOF_RPM: 0x316}


def synthesize_traffic(kind, n, seed=0, spoof_ids=None):
    """Deterministic fixture traffic of one class (for tests and demos)."""
    kind = Label.parse(kind)
    if n < 0:
        raise ValueError("n must be non-negative")
    rng = np.random.default_rng([seed, int(kind)])
    ids = dict(SPOOF_IDS, **(spoof_ids or {}))
    out = []
    for i in range(n):
        ts = 1479121434.0 + i * 0.0005
        if kind == Label.DOS:
            out.append(CanRecord(ts, 0x000, 8, bytes(8), kind))
        elif kind == Label.FUZZY:
            can_id = int(rng.integers(0, MAX_STD_ID + 1))
            out.append(CanRecord(ts, can_id, 8, rng.integers(0, 256, 8, dtype=np.uint8).tobytes(), kind))
        elif kind in ids:
            out.append(CanRecord(ts, ids[kind], 8, rng.integers(0, 256, 8, dtype=np.uint8).tobytes(), kind))
        else:
            can_id = BENIGN_IDS[i % len(BENIGN_IDS)]
            dlc = 8 if can_id != 0x5F0 else 2
            payload = rng.integers(0, 64, dlc, dtype=np.uint8).tobytes()
            out.append(CanRecord(ts, can_id, dlc, payload, Label.NORMAL))
    return out


def synthetic_windows(per_class, seed=0):
    """``per_class`` windows of every class built from :func:`synthesize_traffic`."""
    windows = []
    for lab in Label:
        windows += build_windows(synthesize_traffic(lab, per_class * WINDOW_MESSAGES, seed))
    return windows


# one capture per class, named as in the public Car-Hacking release
CAPTURE_FILES = {
    Label.NORMAL: "normal_run_data.txt",
    Label.DOS: "DoS_dataset.csv",
    Label.FUZZY: "Fuzzy_dataset.csv",
    Label.SPOOF_GEAR: "gear_dataset.csv",
    Label.SPOOF_RPM: "RPM_dataset.csv",
}


def find_captures(data_dir):
    """Map each class to its capture file in ``data_dir`` (names matched case-insensitively)."""
    data_dir = Path(data_dir)
    if not data_dir.is_dir():
        raise FileNotFoundError(f"data directory {data_dir} does not exist")
    present = {p.name.lower(): p for p in data_dir.iterdir() if p.is_file()}
    found, missing = {}, []
    for lab, name in CAPTURE_FILES.items():
        if name.lower() in present:
            found[lab] = present[name.lower()]
        else:
            missing.append(name)
    if missing:
        raise FileNotFoundError(f"{data_dir}: missing capture files {', '.join(missing)}")
    return found


def load_captures(paths, attack_mode="flag", drop_normal=True):
    """Windows from a class -> capture path mapping.

    The normal capture is labelled Normal throughout. Attack captures are read
    in ``attack_mode`` (``flag`` uses the per-row R/T marker); with
    ``drop_normal`` their all-benign windows are left out so every attack
    capture contributes windows of its own class only.
    """
    windows = []
    for lab in sorted(paths):
        if lab == Label.NORMAL:
            windows += build_windows(parse_can_csv(paths[lab], Label.NORMAL, mode="fixed"))
        else:
            windows += build_windows(parse_can_csv(paths[lab], lab, mode=attack_mode), drop_normal=drop_normal)
    return windows


def write_capture_csv(path, records):
    """Write records in the comma/column dialect with R/T flags."""
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            cols = [f"{r.timestamp:.6f}", f"{r.can_id:04x}", str(r.dlc)] + [f"{b:02x}" for b in r.payload]
            cols.append("R" if r.label == Label.NORMAL else "T")
            fh.write(",".join(cols) + "\n")


# -- binary windows file -----------------------------------------------------

WINDOWS_MAGIC = b"LIPW"
WINDOWS_VERSION = 1
_HEADER = struct.Struct("<4sHQQ")
RECORD_DTYPE = np.dtype([("label", "u1"), ("source_index", "<u8"), ("values", "<f4", (243,))])


def write_windows(path, windows, seed):
    recs = np.zeros(len(windows), dtype=RECORD_DTYPE)
    for i, w in enumerate(windows):
        recs[i]["label"] = int(w.label)
        recs[i]["source_index"] = w.source_index
        recs[i]["values"] = w.image.reshape(-1)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(WINDOWS_MAGIC, WINDOWS_VERSION, len(windows), int(seed)))
        fh.write(recs.tobytes())


def read_windows(path):
    """Return ``(windows, seed)`` from a windows file."""
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise WindowsFileError(f"{path}: truncated header")
    magic, version, count, seed = _HEADER.unpack_from(blob)
    if magic != WINDOWS_MAGIC:
        raise WindowsFileError(f"{path}: bad magic {magic!r}")
    if version != WINDOWS_VERSION:
        raise WindowsFileError(f"{path}: unsupported version {version}")
    body = blob[_HEADER.size:]
    if len(body) != count * RECORD_DTYPE.itemsize:
        raise WindowsFileError(f"{path}: expected {count} records, body has {len(body)} bytes")
    recs = np.frombuffer(body, dtype=RECORD_DTYPE)
    if count and recs["label"].max() >= len(Label):
        raise WindowsFileError(f"{path}: label out of range")
    windows = [
        Window(np.array(r["values"], dtype=np.float32).reshape(IMAGE_SHAPE), Label(int(r["label"])), int(r["source_index"]))
        for r in recs
    ]
    return windows, seed


def stack_windows(windows):
    """Batch arrays: images (N,3,9,9), sequences (27,N,9) and labels (N,)."""
    images = np.stack([w.image for w in windows]).astype(np.float32) if windows else np.zeros((0, *IMAGE_SHAPE), np.float32)
    seqs = np.ascontiguousarray(images.reshape(len(windows), *SEQUENCE_SHAPE).transpose(1, 0, 2))
    labels = np.array([int(w.label) for w in windows], dtype=np.int64)
    return images, seqs, labels
