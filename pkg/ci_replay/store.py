# -*- coding: utf-8 -*-
"""
制品存储 - Content-addressed artifact store
Raw logs, normalized logs and container plans are kept under their SHA-256
digest and never rewritten; ``manifest.ndjson`` indexes them, one row per
(stage, run, target).

Layout (see DATASET.md)::

    <root>/dataset.json
    <root>/manifest.ndjson
    <root>/artifacts/<kind>/<dd>/<digest>
    <root>/raw-logs/<forge>-<run_id>/<schema filename>
"""
import hashlib
import json
import logging
import os
import shutil
import tempfile
import threading
from contextlib import contextmanager
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .errors import ArtifactNotFoundError, DigestMismatchError, DuplicateKeyError, StoreIOError
from .fidelity import FidelityVerdict
from .models import CIRun, ReconstructionRecord, decode, encode

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
HASH_NAME = "sha256"
HEADER_FILE = "dataset.json"
MANIFEST_FILE = "manifest.ndjson"


class ArtifactKind(str, Enum):
    RAW_LOG = "raw_log"
    NORMALIZED_LOG = "normalized_log"
    DOCKERFILE = "dockerfile"
    BUILD_SCRIPT = "build_script"
    MANIFEST_ROW = "manifest_row"


class ManifestStage(str, Enum):
    HARVEST = "harvest"
    RECONSTRUCT = "reconstruct"
    PARSE = "parse"
    COMPARE = "compare"


class ArtifactId(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    digest: str
    kind: ArtifactKind

    @field_validator("digest")
    @classmethod
    def _hex(cls, v: str) -> str:
        if len(v) != 64 or any(c not in "0123456789abcdef" for c in v):
            raise ValueError(f"not a sha256 hex digest: {v!r}")
        return v

    def __str__(self) -> str:
        return f"{self.kind.value}/{self.digest}"

    @classmethod
    def parse(cls, text: str) -> "ArtifactId":
        kind, _, digest = text.partition("/")
        return cls(kind=ArtifactKind(kind), digest=digest)


def digest_bytes(content: bytes) -> str:
    return hashlib.sha256(content).hexdigest()


# 清单中的制品角色 - artifact roles inside one manifest row
ROLE_RAW_LOG = "raw_log"
ROLE_REPLAY_LOG = "replay_log"
ROLE_DOCKERFILE = "dockerfile"
ROLE_BUILD_SCRIPT = "build_script"
ROLE_ORIGINAL_NORMALIZED = "original_normalized"
ROLE_REPLAY_NORMALIZED = "replay_normalized"


class ManifestRow(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    stage: ManifestStage
    run: CIRun
    target: str = ""
    artifacts: Dict[str, ArtifactId] = Field(default_factory=dict)
    record: Optional[ReconstructionRecord] = None
    verdict: Optional[FidelityVerdict] = None
    log_filename: Optional[str] = None
    compilation_failure: Optional[bool] = None
    note: Optional[str] = None

    @property
    def key(self) -> Tuple[str, str, str]:
        return (self.stage.value, self.run.run_id, self.target)


def row_for(stage: ManifestStage, run: CIRun, **fields) -> ManifestRow:
    return ManifestRow(stage=stage, run=run, target=run.target, **fields)


class Manifest:
    """Append-only list of rows; loading drops a torn trailing line"""

    def __init__(self, rows: Iterable[ManifestRow] = ()):
        self.rows: Tuple[ManifestRow, ...] = ()
        self._keys: Dict[Tuple[str, str, str], int] = {}
        for row in rows:
            self._add(row)

    def _add(self, row: ManifestRow) -> None:
        if row.key in self._keys:
            raise DuplicateKeyError(f"manifest already has a row for {row.key}")
        self._keys[row.key] = len(self.rows)
        self.rows = self.rows + (row,)

    def __len__(self) -> int:
        return len(self.rows)

    def __iter__(self) -> Iterator[ManifestRow]:
        return iter(self.rows)

    def __contains__(self, key) -> bool:
        return key in self._keys

    def get(self, stage: ManifestStage, run_id: str, target: str = "") -> Optional[ManifestRow]:
        idx = self._keys.get((stage.value, run_id, target))
        return None if idx is None else self.rows[idx]

    def stage_rows(self, stage: ManifestStage) -> List[ManifestRow]:
        return [r for r in self.rows if r.stage == stage]

    def with_row(self, row: ManifestRow) -> "Manifest":
        return Manifest(self.rows + (row,))

    def serialize(self) -> bytes:
        return "".join(encode(r) + "\n" for r in self.rows).encode("utf-8")

    @classmethod
    def parse(cls, data: bytes) -> "Manifest":
        rows = []
        lines = data.split(b"\n")
        for i, raw in enumerate(lines):
            if not raw.strip():
                continue
            last = i == len(lines) - 1
            try:
                row = decode(ManifestRow, raw.decode("utf-8"))
            except (UnicodeDecodeError, ValidationError, ValueError):
                if last:
                    logger.warning(f"[STORE] dropping torn manifest tail ({len(raw)} bytes)")
                    break
                raise StoreIOError(f"corrupt manifest row at line {i + 1}")
            rows.append(row)
        return cls(rows)


class ArtifactStore:
    """数据集目录管理 - one dataset directory"""

    def __init__(self, root):
        self.root = Path(root)
        self._manifest_lock = threading.Lock()

    # ---------------------------------------------------------------- layout

    @property
    def manifest_path(self) -> Path:
        return self.root / MANIFEST_FILE

    @property
    def header_path(self) -> Path:
        return self.root / HEADER_FILE

    def exists(self) -> bool:
        return self.header_path.is_file()

    def init(self) -> None:
        """创建数据集目录结构"""
        try:
            (self.root / "artifacts").mkdir(parents=True, exist_ok=True)
            (self.root / "raw-logs").mkdir(exist_ok=True)
            if not self.header_path.exists():
                header = json.dumps({"format_version": FORMAT_VERSION, "hash": HASH_NAME}, sort_keys=True)
                self._atomic_write(self.header_path, (header + "\n").encode("utf-8"))
                logger.info(f"[STORE] initialized dataset at {self.root}")
        except OSError as e:
            raise StoreIOError(f"cannot initialize dataset {self.root}: {e}") from e
        self.check_header()
        try:
            if not self.manifest_path.exists():
                self._atomic_write(self.manifest_path, b"")
        except OSError as e:
            raise StoreIOError(f"cannot initialize dataset {self.root}: {e}") from e

    def check_header(self) -> Dict:
        try:
            header = json.loads(self.header_path.read_text(encoding="utf-8"))
        except (OSError, ValueError) as e:
            raise StoreIOError(f"unreadable dataset header {self.header_path}: {e}") from e
        if header.get("hash") != HASH_NAME or header.get("format_version") != FORMAT_VERSION:
            raise StoreIOError(f"unsupported dataset header {header}")
        return header

    def _path(self, aid: ArtifactId) -> Path:
        return self.root / "artifacts" / aid.kind.value / aid.digest[:2] / aid.digest

    def _atomic_write(self, path: Path, content: bytes) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
        try:
            with os.fdopen(fd, "wb") as f:
                f.write(content)
                f.flush()
                os.fsync(f.fileno())
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise

    # ---------------------------------------------------------------- artifacts

    def put(self, content: bytes, kind: ArtifactKind) -> ArtifactId:
        aid = ArtifactId(digest=digest_bytes(content), kind=ArtifactKind(kind))
        path = self._path(aid)
        if path.exists():
            logger.debug(f"[STORE] hit {aid}")
            return aid
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
            try:
                with os.fdopen(fd, "wb") as f:
                    f.write(content)
                    f.flush()
                    os.fsync(f.fileno())
                # link() refuses to replace; a concurrent writer of the same digest wins harmlessly
                try:
                    os.link(tmp, path)
                except FileExistsError:
                    pass
                except OSError:
                    if not path.exists():
                        os.replace(tmp, path)
            finally:
                if os.path.exists(tmp):
                    os.unlink(tmp)
        except OSError as e:
            raise StoreIOError(f"cannot store {aid}: {e}") from e
        logger.debug(f"[STORE] put {aid} ({len(content)} bytes)")
        return aid

    def get(self, aid: ArtifactId) -> bytes:
        path = self._path(aid)
        try:
            content = path.read_bytes()
        except FileNotFoundError:
            raise ArtifactNotFoundError(f"no artifact {aid}") from None
        except OSError as e:
            raise StoreIOError(f"cannot read {aid}: {e}") from e
        if digest_bytes(content) != aid.digest:
            raise DigestMismatchError(f"artifact {aid} is corrupt on disk")
        return content

    def has(self, aid: ArtifactId) -> bool:
        return self._path(aid).exists()

    def link_raw_log(self, aid: ArtifactId, run: CIRun, filename: str) -> Path:
        """Expose a stored raw log under its schema filename for browsing"""
        dest = self.root / "raw-logs" / f"{run.repo.forge.value}-{run.run_id}" / filename
        if dest.exists():
            return dest
        dest.parent.mkdir(parents=True, exist_ok=True)
        src = self._path(aid)
        try:
            os.link(src, dest)
        except OSError:
            shutil.copyfile(src, dest)
        return dest

    # ---------------------------------------------------------------- manifest

    def manifest(self) -> Manifest:
        try:
            data = self.manifest_path.read_bytes()
        except FileNotFoundError:
            return Manifest()
        except OSError as e:
            raise StoreIOError(f"cannot read manifest: {e}") from e
        return Manifest.parse(data)

    @contextmanager
    def _manifest_writer(self):
        with self._manifest_lock:
            yield

    def append_manifest_row(self, row: ManifestRow) -> Manifest:
        """Append one row; the file is replaced atomically so readers see old or new, never half"""
        with self._manifest_writer():
            updated = self.manifest().with_row(row)
            try:
                self._atomic_write(self.manifest_path, updated.serialize())
            except OSError as e:
                raise StoreIOError(f"cannot append manifest row: {e}") from e
        logger.debug(f"[STORE] manifest += {row.key}")
        return updated
