"""Content-addressed object store, catalogs, manifests and the tag database.

On-disk layout of a repository directory::

    <repo>/data/xx/<62 hex>     DEFLATE-compressed objects
    <repo>/manifests/<rev>      one key=value manifest per revision
    <repo>/tags                 tag and snapshot pointers

Object ids are SHA-256 digests of the *uncompressed* content.
"""

from __future__ import annotations

import enum
import fcntl
import hashlib
import os
import re
import tempfile
import zlib
from collections.abc import Iterable, Iterator, Mapping
from contextlib import contextmanager
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from .errors import (
    DecodeError,
    IntegrityError,
    InvariantError,
    NotFound,
    StoreError,
)

HASH_NAME = "sha256"
COMPRESS_LEVEL = 6
CATALOG_HEADER = "ucvm-catalog 1"

_OID_RE = re.compile(r"\A[0-9a-f]{64}\Z")


def object_id(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def is_object_id(value: str) -> bool:
    return isinstance(value, str) and _OID_RE.match(value) is not None


def check_object_id(value: str) -> str:
    if not is_object_id(value):
        raise ValueError(f"not an object id: {value!r}")
    return value


def atomic_write(path: Path, data: bytes, *, mode: int = 0o644) -> None:
    """Write *data* to *path* via a temporary sibling and ``os.replace``."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.chmod(tmp, mode)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise


# ---------------------------------------------------------------------------
# Object store
# ---------------------------------------------------------------------------


class ObjectStore:
    """Compressed blobs under ``<root>/data/<2 hex>/<62 hex>``.

    Readers may run concurrently; concurrent writers of the same object are
    harmless because every write lands through an atomic rename of identical
    bytes.
    """

    def __init__(self, root: str | os.PathLike[str]):
        self.root = Path(root)
        self.data_dir = self.root / "data"

    def path_for(self, oid: str) -> Path:
        check_object_id(oid)
        return self.data_dir / oid[:2] / oid[2:]

    def __contains__(self, oid: object) -> bool:
        return isinstance(oid, str) and is_object_id(oid) and self.path_for(oid).exists()

    def __iter__(self) -> Iterator[str]:
        if not self.data_dir.is_dir():
            return
        for fan in sorted(self.data_dir.iterdir()):
            if len(fan.name) != 2 or not fan.is_dir():
                continue
            for entry in sorted(fan.iterdir()):
                oid = fan.name + entry.name
                if is_object_id(oid):
                    yield oid

    def __len__(self) -> int:
        return sum(1 for _ in self)

    def put_object(self, data: bytes) -> str:
        oid = object_id(data)
        path = self.path_for(oid)
        if not path.exists():
            try:
                atomic_write(path, zlib.compress(data, COMPRESS_LEVEL))
            except OSError as exc:
                raise StoreError(f"cannot store object {oid}: {exc}") from exc
        return oid

    def put_compressed(self, oid: str, blob: bytes) -> bytes:
        """Store an already-compressed blob after checking it decodes to *oid*.

        Returns the uncompressed bytes.
        """
        data = decompress_verified(oid, blob)
        path = self.path_for(oid)
        if not path.exists():
            atomic_write(path, blob)
        return data

    def read_compressed(self, oid: str) -> bytes:
        try:
            return self.path_for(oid).read_bytes()
        except FileNotFoundError:
            raise NotFound(f"object {oid} not in store") from None

    def get_object(self, oid: str) -> bytes:
        return decompress_verified(oid, self.read_compressed(oid))

    def compressed_size(self, oid: str) -> int:
        try:
            return self.path_for(oid).stat().st_size
        except FileNotFoundError:
            raise NotFound(f"object {oid} not in store") from None

    def delete(self, oid: str) -> None:
        try:
            self.path_for(oid).unlink()
        except FileNotFoundError:
            pass

    def total_compressed_bytes(self) -> int:
        return sum(self.compressed_size(oid) for oid in self)

    def verify(self) -> list[str]:
        """Re-hash every object; return the ids that fail."""
        bad = []
        for oid in self:
            try:
                self.get_object(oid)
            except IntegrityError:
                bad.append(oid)
        return bad


def decompress_verified(oid: str, blob: bytes) -> bytes:
    try:
        data = zlib.decompress(blob)
    except zlib.error as exc:
        raise IntegrityError(f"object {oid} does not decompress: {exc}") from None
    if object_id(data) != oid:
        raise IntegrityError(f"object {oid} fails digest check")
    return data


# ---------------------------------------------------------------------------
# Catalog
# ---------------------------------------------------------------------------


class Kind(enum.Enum):
    FILE = "f"
    DIR = "d"
    SYMLINK = "l"


@dataclass(frozen=True)
class Dirent:
    name: str
    kind: Kind
    mode: int = 0o644
    uid: int = 0
    gid: int = 0
    size: int = 0
    content: str | None = None
    target: str | None = None

    def __post_init__(self) -> None:
        if self.name != "" and ("/" in self.name or self.name in (".", "..")):
            raise InvariantError(f"bad entry name {self.name!r}")
        if not 0 <= self.mode <= 0o177777:
            raise InvariantError(f"mode out of range: {self.mode:o}")
        if self.kind is Kind.FILE:
            if self.content is None or not is_object_id(self.content):
                raise InvariantError(f"file {self.name!r} without content id")
            if self.size < 0:
                raise InvariantError("negative size")
        elif self.content is not None:
            raise InvariantError(f"{self.kind.name.lower()} {self.name!r} carries content")
        if self.kind is Kind.DIR and self.size != 0:
            raise InvariantError(f"directory {self.name!r} with nonzero size")
        if self.kind is Kind.SYMLINK:
            if not self.target:
                raise InvariantError(f"symlink {self.name!r} without target")
        elif self.target is not None:
            raise InvariantError(f"{self.name!r} is not a symlink but has a target")

    @property
    def is_dir(self) -> bool:
        return self.kind is Kind.DIR

    def same_payload(self, other: Dirent | None) -> bool:
        """Equal kind and content (hash or link target); metadata ignored."""
        return (
            other is not None
            and self.kind is other.kind
            and self.content == other.content
            and self.target == other.target
        )


def split_path(path: str) -> list[str]:
    if not path.startswith("/"):
        raise ValueError(f"path must be absolute: {path!r}")
    return [p for p in path.split("/") if p]


def normalize_path(path: str) -> str:
    """Collapse ``//`` and ``.``; reject ``..`` so a path cannot escape root."""
    parts = []
    for p in split_path(path):
        if p == ".":
            continue
        if p == "..":
            raise ValueError(f"'..' not allowed in {path!r}")
        parts.append(p)
    return "/" + "/".join(parts)


def parent_path(path: str) -> str:
    if path == "/":
        raise ValueError("root has no parent")
    head = path.rsplit("/", 1)[0]
    return head or "/"


def join_path(parent: str, name: str) -> str:
    return parent + name if parent == "/" else f"{parent}/{name}"


def _path_key(path: str) -> bytes:
    return path.encode("utf-8", "surrogateescape")


class Catalog(Mapping[str, Dirent]):
    """Immutable directory tree of one snapshot, keyed by absolute path."""

    def __init__(self, entries: Mapping[str, Dirent] | Iterable[tuple[str, Dirent]]):
        items = dict(entries.items() if isinstance(entries, Mapping) else entries)
        root = items.get("/")
        if root is None or not root.is_dir:
            raise InvariantError("catalog lacks a root directory")
        children: dict[str, list[str]] = {}
        for path, dirent in items.items():
            if path == "/":
                if dirent.name != "":
                    raise InvariantError("root entry must have an empty name")
                continue
            if normalize_path(path) != path:
                raise InvariantError(f"path not normalized: {path!r}")
            parent = parent_path(path)
            p = items.get(parent)
            if p is None:
                raise InvariantError(f"{path}: parent {parent} missing")
            if not p.is_dir:
                raise InvariantError(f"{path}: parent {parent} is not a directory")
            name = path.rsplit("/", 1)[1]
            if dirent.name != name:
                raise InvariantError(f"{path}: entry name {dirent.name!r} mismatch")
            children.setdefault(parent, []).append(name)
        self._entries = {k: items[k] for k in sorted(items, key=_path_key)}
        self._children = {
            k: tuple(sorted(v, key=lambda n: n.encode("utf-8", "surrogateescape")))
            for k, v in children.items()
        }

    def __getitem__(self, path: str) -> Dirent:
        return self._entries[path]

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __eq__(self, other: object) -> bool:
        if isinstance(other, Catalog):
            return self._entries == other._entries
        return NotImplemented

    def __hash__(self) -> int:
        return hash(tuple(self._entries.items()))

    def __repr__(self) -> str:
        return f"Catalog({len(self)} entries)"

    def children(self, path: str) -> tuple[str, ...]:
        return self._children.get(path, ())

    def files(self) -> Iterator[tuple[str, Dirent]]:
        for path, d in self._entries.items():
            if d.kind is Kind.FILE:
                yield path, d

    def content_ids(self) -> set[str]:
        return {d.content for _, d in self.files()}  # type: ignore[misc]


def _escape(s: str) -> str:
    return (
        s.replace("\\", "\\\\")
        .replace("\t", "\\t")
        .replace("\n", "\\n")
        .replace("\r", "\\r")
    )


_UNESCAPE = {"\\": "\\", "t": "\t", "n": "\n", "r": "\r"}


def _unescape(s: str) -> str:
    if "\\" not in s:
        return s
    out = []
    it = iter(s)
    for ch in it:
        if ch == "\\":
            nxt = next(it, None)
            if nxt not in _UNESCAPE:
                raise DecodeError(f"bad escape in {s!r}")
            out.append(_UNESCAPE[nxt])
        else:
            out.append(ch)
    return "".join(out)


def encode_catalog(catalog: Catalog) -> bytes:
    lines = [CATALOG_HEADER]
    for path, d in catalog.items():
        lines.append(
            "\t".join(
                (
                    _escape(path),
                    d.kind.value,
                    f"{d.mode:o}",
                    str(d.uid),
                    str(d.gid),
                    str(d.size),
                    d.content or "",
                    _escape(d.target) if d.target is not None else "",
                )
            )
        )
    return ("\n".join(lines) + "\n").encode("utf-8", "surrogateescape")


def decode_catalog(data: bytes) -> Catalog:
    try:
        text = data.decode("utf-8", "surrogateescape")
    except Exception as exc:  # pragma: no cover - surrogateescape never fails
        raise DecodeError(str(exc)) from exc
    if not text.endswith("\n"):
        raise DecodeError("catalog is truncated")
    lines = text[:-1].split("\n")
    if lines[0] != CATALOG_HEADER:
        raise DecodeError(f"unexpected catalog header {lines[0]!r}")
    entries: dict[str, Dirent] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        fields = line.split("\t")
        if len(fields) != 8:
            raise DecodeError(f"line {lineno}: expected 8 fields, got {len(fields)}")
        raw_path, kind, mode, uid, gid, size, content, target = fields
        path = _unescape(raw_path)
        try:
            dirent = Dirent(
                name="" if path == "/" else path.rsplit("/", 1)[-1],
                kind=Kind(kind),
                mode=int(mode, 8),
                uid=int(uid),
                gid=int(gid),
                size=int(size),
                content=content or None,
                target=_unescape(target) if target else None,
            )
        except ValueError as exc:
            raise DecodeError(f"line {lineno}: {exc}") from None
        if path in entries:
            raise DecodeError(f"line {lineno}: duplicate path {path!r}")
        if not path.startswith("/"):
            raise DecodeError(f"line {lineno}: relative path {path!r}")
        entries[path] = dirent
    catalog = Catalog(entries)
    if list(catalog) != list(entries):
        raise DecodeError("catalog entries are not in canonical order")
    return catalog


def tree_digest(entries: Iterable[tuple[str, Kind, int, int, int, str]]) -> str:
    """Digest of a tree walk given ``(path, kind, mode, uid, gid, ref)`` rows.

    ``ref`` is the content id for files, the target for symlinks, and empty
    for directories. Rows are sorted here so callers may walk in any order.
    """
    h = hashlib.sha256()
    for path, kind, mode, uid, gid, ref in sorted(entries, key=lambda r: _path_key(r[0])):
        h.update(
            f"{_escape(path)}\t{kind.value}\t{mode:o}\t{uid}\t{gid}\t{_escape(ref)}\n".encode(
                "utf-8", "surrogateescape"
            )
        )
    return h.hexdigest()


def catalog_digest(catalog: Catalog, exclude: Iterable[str] = ()) -> str:
    skip = set(exclude)
    return tree_digest(
        (path, d.kind, d.mode, d.uid, d.gid, d.content or d.target or "")
        for path, d in catalog.items()
        if path not in skip
    )


# ---------------------------------------------------------------------------
# Manifest and tag database
# ---------------------------------------------------------------------------

_MANIFEST_KEYS = (
    "repo_name",
    "revision",
    "snapshot_name",
    "root_catalog",
    "published_at",
    "parent_revision",
)


def parse_key_values(text: str) -> list[tuple[str, str]]:
    pairs = []
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise DecodeError(f"expected key=value, got {line!r}")
        pairs.append((key.strip(), value.strip()))
    return pairs


def _format_time(ts: datetime) -> str:
    return ts.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


@dataclass(frozen=True)
class Manifest:
    repo_name: str
    revision: int
    snapshot_name: str
    root_catalog: str
    published_at: datetime
    parent_revision: int | None = None
    #: set by the transport layer when served from the local cache
    from_cache: bool = field(default=False, compare=False)

    def __post_init__(self) -> None:
        if self.revision < 1:
            raise InvariantError(f"revision must be positive, got {self.revision}")
        if self.parent_revision is not None and self.parent_revision != self.revision - 1:
            raise InvariantError(
                f"revision {self.revision} has parent {self.parent_revision}"
            )
        check_object_id(self.root_catalog)
        for text in (self.repo_name, self.snapshot_name):
            if not text or any(c in text for c in "\n\r=") or text != text.strip():
                raise InvariantError(f"invalid name {text!r}")

    def to_bytes(self) -> bytes:
        values = {
            "repo_name": self.repo_name,
            "revision": str(self.revision),
            "snapshot_name": self.snapshot_name,
            "root_catalog": self.root_catalog,
            "published_at": _format_time(self.published_at),
            "parent_revision": "" if self.parent_revision is None else str(self.parent_revision),
        }
        return "".join(f"{k}={values[k]}\n" for k in _MANIFEST_KEYS).encode()

    @classmethod
    def from_bytes(cls, data: bytes) -> Manifest:
        try:
            values = dict(parse_key_values(data.decode("utf-8")))
        except UnicodeDecodeError as exc:
            raise DecodeError(str(exc)) from None
        missing = [k for k in _MANIFEST_KEYS if k not in values]
        if missing:
            raise DecodeError(f"manifest lacks {', '.join(missing)}")
        try:
            published = datetime.fromisoformat(values["published_at"].replace("Z", "+00:00"))
            parent = values["parent_revision"]
            return cls(
                repo_name=values["repo_name"],
                revision=int(values["revision"]),
                snapshot_name=values["snapshot_name"],
                root_catalog=values["root_catalog"],
                published_at=published,
                parent_revision=int(parent) if parent else None,
            )
        except (ValueError, InvariantError) as exc:
            raise DecodeError(f"bad manifest: {exc}") from None


@dataclass
class TagDatabase:
    tags: dict[str, int] = field(default_factory=dict)
    snapshots: dict[str, int] = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        lines = [f"tag {name} {rev}" for name, rev in sorted(self.tags.items())]
        lines += [
            f"snapshot {name} {rev}"
            for name, rev in sorted(self.snapshots.items(), key=lambda kv: kv[1])
        ]
        return "".join(line + "\n" for line in lines).encode()

    @classmethod
    def from_bytes(cls, data: bytes) -> TagDatabase:
        db = cls()
        for line in data.decode("utf-8").splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            kind, _, rest = line.partition(" ")
            name, _, rev = rest.rpartition(" ")
            if kind not in ("tag", "snapshot") or not name or not rev.isdigit():
                raise DecodeError(f"bad tags line {line!r}")
            target = db.tags if kind == "tag" else db.snapshots
            target[name] = int(rev)
        if len(set(db.snapshots.values())) != len(db.snapshots):
            raise InvariantError("two snapshot names point at the same revision")
        return db


# ---------------------------------------------------------------------------
# Repository directory
# ---------------------------------------------------------------------------


class Repository:
    """A repository directory: object store, manifests and the tag database."""

    NAME_FILE = "repo_name"

    def __init__(self, root: str | os.PathLike[str], name: str | None = None):
        self.root = Path(root)
        self.store = ObjectStore(self.root)
        self.manifest_dir = self.root / "manifests"
        self.tags_path = self.root / "tags"
        name_file = self.root / self.NAME_FILE
        if name is None:
            name = name_file.read_text().strip() if name_file.exists() else self.root.resolve().name
        self.name = name

    @classmethod
    def init(cls, root: str | os.PathLike[str], name: str | None = None) -> Repository:
        root = Path(root)
        (root / "data").mkdir(parents=True, exist_ok=True)
        (root / "manifests").mkdir(exist_ok=True)
        name_file = root / cls.NAME_FILE
        if name is not None:
            if name_file.exists() and name_file.read_text().strip() != name:
                raise StoreError(f"{root} already holds repository {name_file.read_text().strip()!r}")
            atomic_write(name_file, (name + "\n").encode())
        if not (root / "tags").exists():
            atomic_write(root / "tags", b"")
        return cls(root)

    @contextmanager
    def lock(self) -> Iterator[None]:
        """Exclusive advisory lock held by a publisher."""
        self.root.mkdir(parents=True, exist_ok=True)
        with open(self.root / ".lock", "a") as fh:
            fcntl.flock(fh, fcntl.LOCK_EX)
            try:
                yield
            finally:
                fcntl.flock(fh, fcntl.LOCK_UN)

    def revisions(self) -> list[int]:
        if not self.manifest_dir.is_dir():
            return []
        return sorted(int(p.name) for p in self.manifest_dir.iterdir() if p.name.isdigit())

    def head_revision(self) -> int | None:
        revs = self.revisions()
        return revs[-1] if revs else None

    def manifest_bytes(self, revision: int) -> bytes:
        try:
            return (self.manifest_dir / str(revision)).read_bytes()
        except FileNotFoundError:
            raise NotFound(f"no manifest for revision {revision}") from None

    def load_manifest(self, revision: int) -> Manifest:
        return Manifest.from_bytes(self.manifest_bytes(revision))

    def write_manifest(self, manifest: Manifest) -> None:
        path = self.manifest_dir / str(manifest.revision)
        if path.exists():
            raise StoreError(f"revision {manifest.revision} already published")
        atomic_write(path, manifest.to_bytes())

    def load_tags(self) -> TagDatabase:
        try:
            return TagDatabase.from_bytes(self.tags_path.read_bytes())
        except FileNotFoundError:
            return TagDatabase()

    def write_tags(self, db: TagDatabase) -> None:
        revs = set(self.revisions())
        dangling = [r for r in (*db.tags.values(), *db.snapshots.values()) if r not in revs]
        if dangling:
            raise InvariantError(f"tags reference unpublished revisions {sorted(set(dangling))}")
        atomic_write(self.tags_path, db.to_bytes())

    def load_catalog(self, manifest: Manifest) -> Catalog:
        return decode_catalog(self.store.get_object(manifest.root_catalog))
