"""Publishing snapshots: meta-package checks, tree ingestion, tags, resolution."""

from __future__ import annotations

import os
import stat
from collections import deque
from collections.abc import Mapping
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Union

from .errors import (
    DuplicateSnapshotName,
    InvalidMetaPackage,
    InvariantError,
    ReservedName,
    UnknownSelector,
)
from .repo_core import (
    Catalog,
    Dirent,
    Kind,
    Manifest,
    ObjectStore,
    Repository,
    catalog_digest,
    encode_catalog,
    join_path,
    normalize_path,
    parent_path,
)

NEWEST = "newest"
WHITEOUT_PREFIX = ".wh."

_RANGE_CHARS = set("<>=*~^!, \t|")


# ---------------------------------------------------------------------------
# Meta package
# ---------------------------------------------------------------------------


def _check_exact(version: str) -> None:
    if not version or _RANGE_CHARS & set(version):
        raise InvalidMetaPackage(f"version {version!r} is not an exact version")


@dataclass(frozen=True)
class MetaPackage:
    name: str
    version: str
    dependencies: tuple[tuple[str, str], ...] = ()

    def __post_init__(self) -> None:
        _check_exact(self.version)
        seen = set()
        for dep, version in self.dependencies:
            _check_exact(version)
            if dep in seen:
                raise InvalidMetaPackage(f"dependency {dep!r} listed twice")
            seen.add(dep)

    @classmethod
    def parse(cls, text: str) -> MetaPackage:
        """Parse ``name <n>`` / ``version <v>`` / ``dep <name> <version>`` lines."""
        name = version = None
        deps = []
        for line in text.splitlines():
            words = line.split()
            if not words or words[0].startswith("#"):
                continue
            if words[0] == "name" and len(words) == 2:
                name = words[1]
            elif words[0] == "version" and len(words) == 2:
                version = words[1]
            elif words[0] == "dep" and len(words) == 3:
                deps.append((words[1], words[2]))
            else:
                raise InvalidMetaPackage(f"cannot parse meta-package line {line!r}")
        if name is None or version is None:
            raise InvalidMetaPackage("meta package needs a name and a version")
        return cls(name, version, tuple(deps))


Package = tuple[str, str]


@dataclass
class PackageUniverse:
    packages: dict[Package, list[Package]] = field(default_factory=dict)

    @classmethod
    def parse(cls, text: str) -> PackageUniverse:
        """Parse ``pkg <name> <version> [<dep>=<version> ...]`` lines."""
        universe = cls()
        for line in text.splitlines():
            words = line.split()
            if not words or words[0].startswith("#"):
                continue
            if words[0] != "pkg" or len(words) < 3:
                raise InvalidMetaPackage(f"cannot parse universe line {line!r}")
            deps = []
            for word in words[3:]:
                dep, sep, version = word.partition("=")
                if not sep:
                    raise InvalidMetaPackage(f"dependency {word!r} is not name=version")
                deps.append((dep, version))
            universe.packages[(words[1], words[2])] = deps
        return universe


@dataclass(frozen=True)
class MissingPackage:
    name: str
    version: str


@dataclass(frozen=True)
class VersionConflict:
    name: str
    v1: str
    v2: str


@dataclass
class ValidationReport:
    problems: list[MissingPackage | VersionConflict] = field(default_factory=list)
    closure: set[Package] = field(default_factory=set)

    @property
    def ok(self) -> bool:
        return not self.problems


def validate_meta_package(meta: MetaPackage, universe: PackageUniverse) -> ValidationReport:
    """Check that the dependency closure is fully resolvable and single-versioned."""
    seen: set[Package] = set()
    queue = deque(meta.dependencies)
    while queue:
        pkg = queue.popleft()
        if pkg in seen:
            continue
        seen.add(pkg)
        queue.extend(universe.packages.get(pkg, ()))

    report = ValidationReport(closure=seen)
    for pkg in sorted(seen):
        if pkg not in universe.packages:
            report.problems.append(MissingPackage(*pkg))
    versions: dict[str, list[str]] = {}
    for name, version in sorted(seen):
        versions.setdefault(name, []).append(version)
    for name, vs in sorted(versions.items()):
        for i, a in enumerate(vs):
            for b in vs[i + 1:]:
                report.problems.append(VersionConflict(name, a, b))
    return report


# ---------------------------------------------------------------------------
# Source trees
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SourceDir:
    mode: int = 0o755
    uid: int = 0
    gid: int = 0


@dataclass(frozen=True)
class SourceFile:
    data: bytes
    mode: int = 0o644
    uid: int = 0
    gid: int = 0


@dataclass(frozen=True)
class SourceLink:
    target: str
    uid: int = 0
    gid: int = 0


SourceEntry = Union[SourceDir, SourceFile, SourceLink, bytes, str, None]
"""In-memory tree value: bytes are files, str symlink targets, None directories."""


def _check_name(path: str) -> None:
    if path != "/" and path.rsplit("/", 1)[1].startswith(WHITEOUT_PREFIX):
        raise ReservedName(f"{path}: names starting with {WHITEOUT_PREFIX!r} are reserved")


def ingest_mapping(store: ObjectStore, tree: Mapping[str, SourceEntry]) -> Catalog:
    """Store an in-memory tree description and return its catalog.

    Missing parent directories are created with default metadata.
    """
    entries: dict[str, Dirent] = {"/": Dirent("", Kind.DIR, 0o755)}
    for raw_path, value in tree.items():
        path = normalize_path(raw_path)
        _check_name(path)
        name = "" if path == "/" else path.rsplit("/", 1)[1]
        if value is None:
            value = SourceDir()
        elif isinstance(value, bytes):
            value = SourceFile(value)
        elif isinstance(value, str):
            value = SourceLink(value)
        if isinstance(value, SourceDir):
            d = Dirent(name, Kind.DIR, value.mode, value.uid, value.gid)
        elif isinstance(value, SourceFile):
            oid = store.put_object(value.data)
            d = Dirent(name, Kind.FILE, value.mode, value.uid, value.gid, len(value.data), oid)
        else:
            d = Dirent(name, Kind.SYMLINK, 0o777, value.uid, value.gid, len(value.target), target=value.target)
        entries[path] = d
        p = path
        while p != "/":
            p = parent_path(p)
            if p not in entries:
                entries[p] = Dirent(p.rsplit("/", 1)[1], Kind.DIR, 0o755)
    return Catalog(entries)


def ingest_directory(store: ObjectStore, source: Path) -> Catalog:
    """Store a host directory tree (regular files, directories, symlinks)."""
    source = Path(source)
    st = source.stat()
    entries: dict[str, Dirent] = {
        "/": Dirent("", Kind.DIR, stat.S_IMODE(st.st_mode), st.st_uid, st.st_gid)
    }
    stack = [("/", source)]
    while stack:
        vpath, host = stack.pop()
        with os.scandir(host) as it:
            for entry in it:
                child = join_path(vpath, entry.name)
                _check_name(child)
                st = entry.stat(follow_symlinks=False)
                mode = stat.S_IMODE(st.st_mode)
                if entry.is_symlink():
                    target = os.readlink(entry.path)
                    entries[child] = Dirent(
                        entry.name, Kind.SYMLINK, mode, st.st_uid, st.st_gid, len(target), target=target
                    )
                elif entry.is_dir(follow_symlinks=False):
                    entries[child] = Dirent(entry.name, Kind.DIR, mode, st.st_uid, st.st_gid)
                    stack.append((child, Path(entry.path)))
                elif entry.is_file(follow_symlinks=False):
                    data = Path(entry.path).read_bytes()
                    oid = store.put_object(data)
                    entries[child] = Dirent(
                        entry.name, Kind.FILE, mode, st.st_uid, st.st_gid, len(data), oid
                    )
                else:
                    raise InvariantError(f"{entry.path}: only files, directories and symlinks are supported")
    return Catalog(entries)


# ---------------------------------------------------------------------------
# Publishing and resolution
# ---------------------------------------------------------------------------


def publish_snapshot(
    repo: Repository,
    source: Path | str | Mapping[str, SourceEntry],
    snapshot_name: str,
    tag: str | None = None,
    *,
    meta: MetaPackage | None = None,
    universe: PackageUniverse | None = None,
    now: datetime | None = None,
) -> Manifest:
    """Publish *source* as the next revision of *repo*.

    *source* is either a host directory or an in-memory mapping from absolute
    paths to :data:`SourceEntry` values. When *meta* is given its dependency
    closure must validate against *universe* before anything is stored.
    """
    if tag == NEWEST:
        raise UnknownSelector(f"{NEWEST!r} is a reserved selector")
    if meta is not None:
        report = validate_meta_package(meta, universe or PackageUniverse())
        if not report.ok:
            raise InvalidMetaPackage(
                "meta package does not pin a closed dependency set: "
                + ", ".join(map(str, report.problems))
            )
    with repo.lock():
        Repository.init(repo.root, repo.name)
        tags = repo.load_tags()
        if snapshot_name in tags.snapshots:
            raise DuplicateSnapshotName(f"snapshot {snapshot_name!r} already published")
        if isinstance(source, Mapping):
            catalog = ingest_mapping(repo.store, source)
        else:
            catalog = ingest_directory(repo.store, Path(source))
        root_catalog = repo.store.put_object(encode_catalog(catalog))
        head = repo.head_revision()
        manifest = Manifest(
            repo_name=repo.name,
            revision=(head or 0) + 1,
            snapshot_name=snapshot_name,
            root_catalog=root_catalog,
            published_at=(now or datetime.now(timezone.utc)).replace(microsecond=0),
            parent_revision=head,
        )
        repo.write_manifest(manifest)
        tags.snapshots[snapshot_name] = manifest.revision
        if tag is not None:
            tags.tags[tag] = manifest.revision
        repo.write_tags(tags)
    return manifest


def set_tag(repo: Repository, tag: str, revision: int) -> None:
    if tag == NEWEST:
        raise UnknownSelector(f"{NEWEST!r} is a reserved selector")
    with repo.lock():
        if revision not in repo.revisions():
            raise UnknownSelector(f"revision {revision} does not exist")
        tags = repo.load_tags()
        tags.tags[tag] = revision
        repo.write_tags(tags)


def resolve_revision(repo: Repository, selector: str) -> int:
    """Tags take precedence over snapshot names; ``newest`` is reserved."""
    if selector == NEWEST:
        head = repo.head_revision()
        if head is None:
            raise UnknownSelector("repository is empty")
        return head
    tags = repo.load_tags()
    if selector in tags.tags:
        return tags.tags[selector]
    if selector in tags.snapshots:
        return tags.snapshots[selector]
    raise UnknownSelector(f"unknown selector {selector!r}")


def resolve(repo: Repository, selector: str) -> Manifest:
    return repo.load_manifest(resolve_revision(repo, selector))


def snapshot_digest(repo: Repository, manifest: Manifest) -> str:
    """Tree digest of a published snapshot, comparable to a booted union view."""
    return catalog_digest(repo.load_catalog(manifest))


def materialize(repo: Repository, manifest: Manifest, dest: Path) -> None:
    """Extract a full snapshot into the empty directory *dest*."""
    dest = Path(dest)
    dest.mkdir(parents=True, exist_ok=True)
    if any(dest.iterdir()):
        raise InvariantError(f"{dest} is not empty")
    catalog = repo.load_catalog(manifest)
    dirs = []
    for path, d in catalog.items():
        host = dest / path.lstrip("/") if path != "/" else dest
        if d.kind is Kind.DIR:
            host.mkdir(exist_ok=True)
            dirs.append((host, d.mode))
        elif d.kind is Kind.FILE:
            host.write_bytes(repo.store.get_object(d.content))  # type: ignore[arg-type]
            os.chmod(host, d.mode)
        else:
            os.symlink(d.target, host)  # type: ignore[arg-type]
    for host, mode in reversed(dirs):
        os.chmod(host, mode)
