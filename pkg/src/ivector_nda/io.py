"""File formats: FMAT matrices, 16-bit PCM WAV, JSON model files and text lists.

FMAT layout (little-endian)::

    b"FMAT" | u32 rows | u32 cols | rows*cols f32, row-major

Model files are JSON objects whose values are scalars or (nested) lists of
floats written with ``repr`` precision, so a save/load round trip is exact.
Keys are written in the order given by the caller.
"""

import json
import struct
import wave
from pathlib import Path

import numpy as np

FMAT_MAGIC = b"FMAT"
_HEADER = struct.Struct("<4sII")


class FormatError(ValueError):
    """Raised when a file does not match the expected on-disk layout."""


def write_fmat(path, mat):
    mat = np.asarray(mat, dtype=np.float64)
    if mat.ndim != 2:
        raise ValueError(f"FMAT needs a 2-d matrix, got shape {mat.shape}")
    if not np.all(np.isfinite(mat)):
        raise ValueError("FMAT matrix has non-finite entries")
    rows, cols = mat.shape
    with open(path, "wb") as f:
        f.write(_HEADER.pack(FMAT_MAGIC, rows, cols))
        f.write(mat.astype("<f4").tobytes(order="C"))


def read_fmat(path):
    """Reads an FMAT file into a float64 array of shape (rows, cols)."""
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size or data[:4] != FMAT_MAGIC:
        raise FormatError(f"{path}: bad FMAT magic")
    _, rows, cols = _HEADER.unpack_from(data)
    expected = _HEADER.size + 4 * rows * cols
    if len(data) != expected:
        raise FormatError(
            f"{path}: FMAT payload is {len(data)} bytes, header implies {expected}"
        )
    mat = np.frombuffer(data, dtype="<f4", offset=_HEADER.size).reshape(rows, cols)
    mat = mat.astype(np.float64)
    if not np.all(np.isfinite(mat)):
        raise FormatError(f"{path}: non-finite values")
    return mat


def read_wav(path):
    """Reads a mono 16-bit PCM WAV file.

    Returns:
      (samples in [-1, 1) as float64, sample rate in Hz)
    """
    try:
        with wave.open(str(path), "rb") as w:
            if w.getnchannels() != 1:
                raise FormatError(f"{path}: expected mono, got {w.getnchannels()} channels")
            if w.getsampwidth() != 2:
                raise FormatError(
                    f"{path}: expected 16-bit PCM, got {8 * w.getsampwidth()}-bit"
                )
            if w.getcomptype() != "NONE":
                raise FormatError(f"{path}: compressed WAV ({w.getcomptype()}) not supported")
            rate = w.getframerate()
            raw = w.readframes(w.getnframes())
    except (wave.Error, EOFError) as e:
        raise FormatError(f"{path}: {e}") from e
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return samples, rate


def write_wav(path, samples, sample_rate):
    samples = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 32767 / 32768)
    pcm = np.round(samples * 32768.0).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(int(sample_rate))
        w.writeframes(pcm.tobytes())


def _to_jsonable(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    return value


def save_model(path, kind, fields):
    """Writes named arrays/scalars as JSON; ``kind`` is stored as ``"format"``."""
    obj = {"format": kind}
    for k, v in fields.items():
        obj[k] = _to_jsonable(v)
    text = json.dumps(obj, indent=1, allow_nan=False)
    Path(path).write_text(text + "\n")


def load_model(path, kind):
    try:
        obj = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: not a JSON model file ({e})") from e
    if not isinstance(obj, dict) or obj.get("format") != kind:
        raise FormatError(f"{path}: expected a '{kind}' model")
    return obj


def write_ids(path, ids):
    Path(path).write_text("".join(f"{i}\n" for i in ids))


def read_ids(path):
    return [line.strip() for line in Path(path).read_text().splitlines() if line.strip()]


def write_ivectors(path, ids, X):
    """Writes an i-vector archive: FMAT at ``path`` and ids at ``path + '.ids'``."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if len(ids) != X.shape[0]:
        raise ValueError(f"{len(ids)} ids for {X.shape[0]} i-vectors")
    write_fmat(path, X)
    write_ids(str(path) + ".ids", ids)


def read_ivectors(path):
    X = read_fmat(path)
    ids = read_ids(str(path) + ".ids")
    if len(ids) != X.shape[0]:
        raise FormatError(f"{path}: {len(ids)} ids for {X.shape[0]} rows")
    return ids, X


def read_utt2spk(path):
    """Reads ``uttID speakerID`` lines; returns an insertion-ordered dict."""
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 2:
            raise FormatError(f"{path}:{n}: expected 'utt speaker'")
        out[parts[0]] = parts[1]
    return out


def write_utt2spk(path, utt2spk):
    Path(path).write_text("".join(f"{u} {s}\n" for u, s in utt2spk.items()))


def read_trials(path):
    """Reads ``enrollID testID target|nontarget`` lines.

    Returns:
      list of (enroll, test, is_target) tuples.
    """
    trials = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 3 or parts[2] not in ("target", "nontarget"):
            raise FormatError(f"{path}:{n}: expected 'enroll test target|nontarget'")
        trials.append((parts[0], parts[1], parts[2] == "target"))
    return trials


def write_trials(path, trials):
    Path(path).write_text(
        "".join(f"{e} {t} {'target' if y else 'nontarget'}\n" for e, t, y in trials)
    )


def write_scores(path, enroll, test, scores):
    lines = [f"{e} {t} {float(s)!r}\n" for e, t, s in zip(enroll, test, scores)]
    Path(path).write_text("".join(lines))


def read_scores(path):
    enroll, test, scores = [], [], []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 3:
            raise FormatError(f"{path}:{n}: expected 'enroll test score'")
        enroll.append(parts[0])
        test.append(parts[1])
        scores.append(float(parts[2]))
    return enroll, test, np.asarray(scores)
