"""Content-addressed store for stage results.

A key is the sha256 of a canonical JSON rendering of ``(op, inputs, config
slice)``; changing any of them yields a new key, so stale entries are simply
never looked up again.
"""
from __future__ import annotations

import hashlib
import json
import os
import shutil
import tempfile
import threading
from pathlib import Path


def canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ":")).encode("utf-8")


def content_hash(obj) -> str:
    return hashlib.sha256(canonical(obj)).hexdigest()


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


class Cache:
    def __init__(self, root, enabled: bool = True):
        self.root = Path(root)
        self.enabled = enabled
        self.hits = 0
        self.misses = 0
        self._lock = threading.Lock()

    @staticmethod
    def key(op: str, inputs, config=None) -> str:
        return content_hash({"op": op, "inputs": inputs, "config": config})

    def _path(self, key: str, suffix: str) -> Path:
        return self.root / key[:2] / f"{key}{suffix}"

    def _count(self, hit: bool) -> None:
        with self._lock:
            if hit:
                self.hits += 1
            else:
                self.misses += 1

    def _atomic_write(self, dest: Path, data: bytes) -> None:
        dest.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=dest.parent, prefix=".tmp-")
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, dest)

    def get_json(self, key: str):
        if not self.enabled:
            return None
        p = self._path(key, ".json")
        if not p.is_file():
            self._count(False)
            return None
        try:
            value = json.loads(p.read_text(encoding="utf-8"))
        except ValueError:
            self._count(False)
            return None
        self._count(True)
        return value

    def put_json(self, key: str, value) -> None:
        if self.enabled:
            self._atomic_write(self._path(key, ".json"), canonical(value))

    def get_file(self, key: str, suffix: str = "") -> Path | None:
        if not self.enabled:
            return None
        p = self._path(key, suffix)
        self._count(p.is_file())
        return p if p.is_file() else None

    def put_file(self, key: str, src, suffix: str = "") -> Path | None:
        if not self.enabled:
            return None
        dest = self._path(key, suffix)
        self._atomic_write(dest, Path(src).read_bytes())
        return dest

    def restore_file(self, key: str, dest, suffix: str = "") -> bool:
        """Copy a cached file to ``dest``; False on a miss."""
        src = self.get_file(key, suffix)
        if src is None:
            return False
        Path(dest).parent.mkdir(parents=True, exist_ok=True)
        shutil.copyfile(src, dest)
        return True
