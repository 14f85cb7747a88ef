"""Copy-on-write union of a read-only snapshot and a writable host directory.

The lower layer is a :class:`~ucvm.repo_core.Catalog` whose file contents are
pulled through a ``fetch(object_id) -> bytes`` callable (normally
:meth:`ucvm.transport.RepoClient.fetch_object`). The upper layer is a plain
host directory. Deletions of lower entries are recorded as AUFS-style
``.wh.<name>`` marker files next to the hidden name.

A directory whose lower counterpart was removed and then re-created gets a
whiteout for every lower child, which stands in for AUFS opaque markers.
"""

from __future__ import annotations

import fcntl
import os
import shutil
import stat as st
import threading
import uuid
from collections import deque
from collections.abc import Callable, Iterator
from dataclasses import dataclass
from enum import Enum
from functools import wraps
from pathlib import Path
from typing import Any, Protocol

from .errors import (
    DirectoryNotEmpty,
    FileExists,
    IsADirectory,
    MountBusy,
    MountClosed,
    NotADirectory,
    NotASymlink,
    ParentNotADirectory,
    ParentNotFound,
    PathNotFound,
    ReadOnly,
    ReservedName,
    TooManyLinks,
)
from .repo_core import Catalog, Dirent, Kind, join_path, object_id, tree_digest

WHITEOUT_PREFIX = ".wh."
MAX_SYMLINK_HOPS = 40
_TMP_PREFIX = WHITEOUT_PREFIX + WHITEOUT_PREFIX + "tmp-"


class Layer(Enum):
    UPPER = "upper"
    LOWER = "lower"


@dataclass(frozen=True)
class UnionStat:
    kind: Kind
    mode: int
    uid: int
    gid: int
    size: int
    layer: Layer


class OwnerMap(Protocol):
    def apply(self, uid: int, gid: int) -> tuple[int, int]: ...


def _kind_of(mode: int) -> Kind:
    if st.S_ISDIR(mode):
        return Kind.DIR
    if st.S_ISLNK(mode):
        return Kind.SYMLINK
    return Kind.FILE


class _Node:
    """Resolution state of one path: what the union shows and where it lives."""

    __slots__ = ("path", "name", "parent", "kind", "host", "upper_dir", "lower", "whited", "lower_dir", "target")

    def __init__(self, path: str, name: str, parent: _Node | None):
        self.path = path
        self.name = name
        self.parent = parent
        self.kind: Kind | None = None
        #: host path of the upper entry, if the upper layer holds one
        self.host: Path | None = None
        #: True when ``host`` is a directory (children may live in upper)
        self.upper_dir = False
        #: lower entry at this path not hidden by a whiteout (may be shadowed by upper)
        self.lower: Dirent | None = None
        #: lower entry hidden by a whiteout
        self.whited: Dirent | None = None
        #: True when this directory merges a visible lower directory
        self.lower_dir = False
        self.target: str | None = None


def _mutating(method: Callable[..., Any]) -> Callable[..., Any]:
    @wraps(method)
    def wrapper(self: UnionMount, *args: Any, **kwargs: Any) -> Any:
        with self._write_lock:
            if self.readonly:
                self.rejected_writes += 1
                raise ReadOnly(f"{method.__name__}: read-write layer is mounted read-only")
            self._check_open()
            return method(self, *args, **kwargs)

    return wrapper


class UnionMount:
    """Union view over ``lower`` (catalog + fetch) and ``upper_dir``.

    Mutations are serialized; reads may run concurrently. Only one mount may
    hold a given upper directory at a time.
    """

    def __init__(
        self,
        lower: Catalog,
        fetch: Callable[[str], bytes],
        upper_dir: str | os.PathLike[str],
        *,
        idmap: OwnerMap | None = None,
    ):
        self.lower = lower
        self.fetch = fetch
        self.upper = Path(upper_dir)
        self.upper.mkdir(parents=True, exist_ok=True)
        self.idmap = idmap
        self.readonly = False
        self.closed = False
        self.rejected_writes = 0
        self._write_lock = threading.RLock()
        self._lock_fh = open(self.upper.parent / f".{self.upper.name}.lock", "a")
        try:
            fcntl.flock(self._lock_fh, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except BlockingIOError:
            self._lock_fh.close()
            raise MountBusy(f"{self.upper} is already mounted") from None
        self._as_root = hasattr(os, "geteuid") and os.geteuid() == 0

    # -- lifecycle ---------------------------------------------------------

    def set_readonly(self) -> None:
        self.readonly = True

    def close(self) -> None:
        with self._write_lock:
            if self.closed:
                return
            self.closed = True
            fcntl.flock(self._lock_fh, fcntl.LOCK_UN)
            self._lock_fh.close()

    def __enter__(self) -> UnionMount:
        return self

    def __exit__(self, *exc: object) -> None:
        self.close()

    def _check_open(self) -> None:
        if self.closed:
            raise MountClosed("union mount is closed")

    # -- resolution --------------------------------------------------------

    def _root(self) -> _Node:
        node = _Node("/", "", None)
        node.kind = Kind.DIR
        node.host = self.upper
        node.upper_dir = True
        node.lower = self.lower["/"]
        node.lower_dir = True
        return node

    def _child(self, parent: _Node, name: str) -> _Node:
        node = _Node(join_path(parent.path, name), name, parent)
        if name.startswith(WHITEOUT_PREFIX):
            return node
        cat = self.lower.get(node.path) if parent.lower_dir else None
        whiteout = False
        ust = None
        if parent.upper_dir:
            assert parent.host is not None
            try:
                ust = os.lstat(parent.host / name)
            except FileNotFoundError:
                ust = None
            whiteout = os.path.lexists(parent.host / (WHITEOUT_PREFIX + name))
        if whiteout:
            node.whited = cat
        else:
            node.lower = cat
        if ust is not None:
            assert parent.host is not None
            node.kind = _kind_of(ust.st_mode)
            node.host = parent.host / name
            node.upper_dir = node.kind is Kind.DIR
            node.lower_dir = node.upper_dir and node.lower is not None and node.lower.is_dir
            if node.kind is Kind.SYMLINK:
                node.target = os.readlink(node.host)
        elif node.lower is not None:
            node.kind = node.lower.kind
            node.lower_dir = node.lower.is_dir
            node.target = node.lower.target
        return node

    def _resolve(self, path: str, *, follow: bool, create: bool = False) -> _Node:
        """Walk *path* through the union view, following symlinks like the kernel.

        Intermediate symlinks are always followed; the final one only when
        *follow* is set. A missing final component yields a node whose
        ``kind`` is None so callers can create it.
        """
        if not isinstance(path, str) or not path.startswith("/"):
            raise PathNotFound(f"path must be absolute: {path!r}")
        self._check_open()
        parts = deque(path.split("/"))
        stack = [self._root()]
        hops = 0
        node = stack[-1]
        while parts:
            name = parts.popleft()
            if name in ("", "."):
                node = stack[-1]
                continue
            if name == "..":
                if len(stack) > 1:
                    stack.pop()
                node = stack[-1]
                continue
            node = self._child(stack[-1], name)
            last = not any(p not in ("", ".") for p in parts)
            if node.kind is Kind.SYMLINK and (follow or not last):
                hops += 1
                if hops > MAX_SYMLINK_HOPS:
                    raise TooManyLinks(f"{path}: too many levels of symbolic links")
                target = node.target or ""
                if target.startswith("/"):
                    del stack[1:]
                parts.extendleft(reversed(target.split("/")))
                node = stack[-1]
                continue
            if last:
                if parts and node.kind is not None and node.kind is not Kind.DIR:
                    # trailing slash on a non-directory
                    raise NotADirectory(f"{path}: not a directory")
                return node
            if node.kind is None:
                raise (ParentNotFound if create else PathNotFound)(f"{path}: no such file or directory")
            if node.kind is not Kind.DIR:
                raise (ParentNotADirectory if create else NotADirectory)(f"{path}: not a directory")
            stack.append(node)
        return node

    def _upper_dir_for(self, node: _Node) -> Path:
        """Copy *node* (a directory in the view) and its ancestors up, metadata only."""
        if node.upper_dir:
            assert node.host is not None
            return node.host
        assert node.parent is not None and node.lower is not None
        parent_host = self._upper_dir_for(node.parent)
        host = parent_host / node.name
        os.mkdir(host)
        self._apply_meta(host, node.lower, dir_=True)
        node.host = host
        node.upper_dir = True
        return host

    def _apply_meta(self, host: Path, dirent: Dirent, *, dir_: bool = False) -> None:
        # keep the owner able to traverse and write the host copy
        os.chmod(host, dirent.mode | (0o700 if dir_ else 0o600))
        if self._as_root:
            uid, gid = self._owner(dirent)
            try:
                os.lchown(host, uid, gid)
            except OSError:
                pass

    def _owner(self, dirent: Dirent) -> tuple[int, int]:
        if self.idmap is None:
            return dirent.uid, dirent.gid
        return self.idmap.apply(dirent.uid, dirent.gid)

    @staticmethod
    def _check_name(node: _Node) -> None:
        if node.name.startswith(WHITEOUT_PREFIX):
            raise ReservedName(f"{node.path}: names starting with {WHITEOUT_PREFIX!r} are reserved")

    @staticmethod
    def _drop_whiteout(parent_host: Path, name: str) -> None:
        try:
            os.unlink(parent_host / (WHITEOUT_PREFIX + name))
        except FileNotFoundError:
            pass

    @staticmethod
    def _make_whiteout(parent_host: Path, name: str) -> None:
        (parent_host / (WHITEOUT_PREFIX + name)).touch()

    def _list(self, node: _Node) -> list[str]:
        names: set[str] = set()
        whiteouts: set[str] = set()
        if node.upper_dir:
            assert node.host is not None
            for entry in os.listdir(node.host):
                if entry.startswith(WHITEOUT_PREFIX):
                    whiteouts.add(entry[len(WHITEOUT_PREFIX):])
                else:
                    names.add(entry)
        if node.lower_dir:
            names.update(n for n in self.lower.children(node.path) if n not in whiteouts)
        return sorted(names)

    # -- reads -------------------------------------------------------------

    def read(self, path: str) -> bytes:
        node = self._resolve(path, follow=True)
        if node.kind is None:
            raise PathNotFound(f"{path}: no such file or directory")
        if node.kind is Kind.DIR:
            raise IsADirectory(f"{path}: is a directory")
        if node.host is not None:
            return node.host.read_bytes()
        assert node.lower is not None and node.lower.content is not None
        return self.fetch(node.lower.content)

    def readdir(self, path: str) -> list[str]:
        node = self._resolve(path, follow=True)
        if node.kind is None:
            raise PathNotFound(f"{path}: no such file or directory")
        if node.kind is not Kind.DIR:
            raise NotADirectory(f"{path}: not a directory")
        return self._list(node)

    def stat(self, path: str, *, follow: bool = False) -> UnionStat:
        node = self._resolve(path, follow=follow)
        if node.kind is None:
            raise PathNotFound(f"{path}: no such file or directory")
        if node.parent is None:
            # the overlay root directory is plumbing; report the snapshot's root
            d = self.lower["/"]
            uid, gid = self._owner(d)
            return UnionStat(Kind.DIR, d.mode, uid, gid, 0, Layer.LOWER)
        if node.host is not None:
            s = os.lstat(node.host)
            kind = _kind_of(s.st_mode)
            size = 0 if kind is Kind.DIR else s.st_size
            return UnionStat(kind, st.S_IMODE(s.st_mode), s.st_uid, s.st_gid, size, Layer.UPPER)
        d = node.lower
        assert d is not None
        uid, gid = self._owner(d)
        return UnionStat(d.kind, d.mode, uid, gid, d.size, Layer.LOWER)

    def readlink(self, path: str) -> str:
        node = self._resolve(path, follow=False)
        if node.kind is None:
            raise PathNotFound(f"{path}: no such file or directory")
        if node.kind is not Kind.SYMLINK:
            raise NotASymlink(f"{path}: not a symbolic link")
        assert node.target is not None
        return node.target

    def exists(self, path: str) -> bool:
        try:
            return self._resolve(path, follow=False).kind is not None
        except (PathNotFound, NotADirectory, TooManyLinks):
            return False

    def content_ref(self, path: str) -> str:
        """Object id of a file's content; lower files avoid a fetch."""
        node = self._resolve(path, follow=False)
        if node.kind is not Kind.FILE:
            raise IsADirectory(f"{path}: not a regular file")
        if node.host is not None:
            return object_id(node.host.read_bytes())
        assert node.lower is not None and node.lower.content is not None
        return node.lower.content

    # -- writes ------------------------------------------------------------

    @_mutating
    def write(self, path: str, data: bytes) -> None:
        node = self._resolve(path, follow=True, create=True)
        self._check_name(node)
        if node.kind is Kind.DIR:
            raise IsADirectory(f"{path}: is a directory")
        assert node.parent is not None
        parent_host = self._upper_dir_for(node.parent)
        target = parent_host / node.name
        tmp = parent_host / f"{_TMP_PREFIX}{uuid.uuid4().hex}"
        tmp.write_bytes(data)
        if node.host is not None:
            os.chmod(tmp, st.S_IMODE(os.lstat(node.host).st_mode))
        elif node.lower is not None and node.kind is Kind.FILE:
            self._apply_meta(tmp, node.lower)
        else:
            os.chmod(tmp, 0o644)
        os.replace(tmp, target)
        self._drop_whiteout(parent_host, node.name)

    @_mutating
    def mkdir(self, path: str, mode: int = 0o755) -> None:
        node = self._resolve(path, follow=False, create=True)
        self._check_name(node)
        if node.kind is not None:
            raise FileExists(f"{path}: file exists")
        assert node.parent is not None
        parent_host = self._upper_dir_for(node.parent)
        self._drop_whiteout(parent_host, node.name)
        host = parent_host / node.name
        os.mkdir(host)
        os.chmod(host, mode | 0o700)
        if node.whited is not None and node.whited.is_dir:
            # the old lower directory comes back into the merge; hide its children
            for child in self.lower.children(node.path):
                self._make_whiteout(host, child)

    @_mutating
    def symlink(self, path: str, target: str) -> None:
        if not target:
            raise PathNotFound("symlink target must not be empty")
        node = self._resolve(path, follow=False, create=True)
        self._check_name(node)
        if node.kind is not None:
            raise FileExists(f"{path}: file exists")
        assert node.parent is not None
        parent_host = self._upper_dir_for(node.parent)
        self._drop_whiteout(parent_host, node.name)
        os.symlink(target, parent_host / node.name)

    @_mutating
    def unlink(self, path: str) -> None:
        node = self._resolve(path, follow=False)
        if node.kind is None:
            raise PathNotFound(f"{path}: no such file or directory")
        if node.kind is Kind.DIR:
            raise IsADirectory(f"{path}: is a directory")
        assert node.parent is not None
        if node.host is not None:
            os.unlink(node.host)
            if node.lower is not None:
                self._make_whiteout(node.host.parent, node.name)
        else:
            self._make_whiteout(self._upper_dir_for(node.parent), node.name)

    @_mutating
    def rmdir(self, path: str) -> None:
        node = self._resolve(path, follow=False)
        if node.kind is None:
            raise PathNotFound(f"{path}: no such file or directory")
        if node.kind is not Kind.DIR:
            raise NotADirectory(f"{path}: not a directory")
        if node.parent is None:
            raise MountBusy("cannot remove the root directory")
        if self._list(node):
            raise DirectoryNotEmpty(f"{path}: directory not empty")
        if node.host is not None:
            shutil.rmtree(node.host)
        if node.lower is not None:
            self._make_whiteout(self._upper_dir_for(node.parent), node.name)

    @_mutating
    def chmod(self, path: str, mode: int) -> None:
        """Change permission bits; lower entries are copied up in full first."""
        node = self._resolve(path, follow=True)
        if node.kind is None:
            raise PathNotFound(f"{path}: no such file or directory")
        if node.host is None:
            assert node.parent is not None and node.lower is not None
            if node.kind is Kind.DIR:
                self._upper_dir_for(node)
            else:
                parent_host = self._upper_dir_for(node.parent)
                data = self.fetch(node.lower.content)  # type: ignore[arg-type]
                host = parent_host / node.name
                tmp = parent_host / f"{_TMP_PREFIX}{uuid.uuid4().hex}"
                tmp.write_bytes(data)
                self._apply_meta(tmp, node.lower)
                os.replace(tmp, host)
                node.host = host
        assert node.host is not None
        os.chmod(node.host, mode & 0o7777)

    # -- whole-tree helpers ------------------------------------------------

    def walk(self, path: str = "/") -> Iterator[tuple[str, UnionStat]]:
        """Depth-first walk of the union view, without following symlinks."""
        stat_ = self.stat(path)
        yield path, stat_
        if stat_.kind is Kind.DIR:
            for name in self.readdir(path):
                yield from self.walk(join_path(path, name))

    def digest(self, *, exclude: tuple[str, ...] = ()) -> str:
        """Tree digest comparable to :func:`ucvm.repo_core.catalog_digest`."""
        rows = []
        for path, s in self.walk():
            if path in exclude:
                continue
            if s.kind is Kind.FILE:
                ref = self.content_ref(path)
            elif s.kind is Kind.SYMLINK:
                ref = self.readlink(path)
            else:
                ref = ""
            rows.append((path, s.kind, s.mode, s.uid, s.gid, ref))
        return tree_digest(rows)
