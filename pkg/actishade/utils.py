import json
import os
import tempfile
from functools import lru_cache
from pathlib import Path

from .errors import InputError, MalformedRecord

STOPWORDS_FILE = Path(__file__).resolve().parent / "data" / "stopwords_en.txt"


def canonical_json(payload):
    """Serialize with sorted keys and no insignificant whitespace."""
    return json.dumps(payload, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


# File handling utility
def atomic_write_bytes(path, data):
    """Write to a temp file in the target directory, then rename over `path`."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(data)
            handle.flush()
            os.fsync(handle.fileno())
        os.replace(tmp_path, path)
    except BaseException:
        # Clean up the temp file if there was an error
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise
    return path


def atomic_write_text(path, text):
    return atomic_write_bytes(path, text.encode("utf-8"))


def atomic_write_json(path, payload):
    return atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True, ensure_ascii=False) + "\n")


def atomic_write_jsonl(path, rows):
    lines = [json.dumps(row, ensure_ascii=False, sort_keys=True) for row in rows]
    return atomic_write_text(path, "".join(line + "\n" for line in lines))


def read_jsonl(path):
    """Read a UTF-8 JSONL file, skipping blank lines."""
    path = Path(path)
    if not path.exists():
        raise InputError(f"file not found: {path}")
    rows = []
    with open(path, "r", encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise MalformedRecord(f"{path}:{line_no}: invalid JSON ({exc.msg})") from exc
    return rows


def read_json(path):
    path = Path(path)
    if not path.exists():
        raise InputError(f"file not found: {path}")
    with open(path, "r", encoding="utf-8") as handle:
        try:
            return json.load(handle)
        except json.JSONDecodeError as exc:
            raise MalformedRecord(f"{path}: invalid JSON ({exc.msg})") from exc


@lru_cache(maxsize=8)
def load_stopwords(path=STOPWORDS_FILE):
    """One lowercase word per line; lines starting with '#' are comments."""
    words = set()
    with open(path, "r", encoding="utf-8") as handle:
        for line in handle:
            word = line.strip()
            if word and not word.startswith("#"):
                words.add(word.lower())
    return frozenset(words)
