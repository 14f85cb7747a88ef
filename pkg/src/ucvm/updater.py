"""System updates: staged image updates, snapshot unpinning and the update merge.

When a machine moves from one snapshot to another, local changes kept in the
overlay are reconciled with the new snapshot:

* a change conflicts when the snapshot entry at that path differs between the
  old and the new snapshot;
* conflicts under ``/etc`` and ``/var`` keep the local copy, everywhere else
  the new snapshot wins;
* user-installed packages are re-inserted into the new package database;
* ``/etc/passwd`` and ``/etc/group`` are merged record by record, and ids of
  the new snapshot that clash with local ones are remapped.
"""

from __future__ import annotations

import os
import shutil
from collections.abc import Callable, Iterable
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import NamedTuple, Protocol

from .errors import DecodeError, NotFound, NotPinned, StageConflict, UcvmError
from .repo_core import Catalog, Dirent, atomic_write, join_path
from .unionfs import _TMP_PREFIX, WHITEOUT_PREFIX, UnionMount

UPDATE_DIR = "ucernvm-update"
FIRST_FREE_ID = 1000
PKGDB_PATH = "/var/lib/ucvm/packages"
PASSWD_PATH = "/etc/passwd"
GROUP_PATH = "/etc/group"
LOCAL_WINS_ROOTS = ("/etc", "/var")


class HasStateDir(Protocol):
    state_dir: Path


# ---------------------------------------------------------------------------
# Staged image updates
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StagedUpdate:
    new_ucvm_version: str
    payload: bytes
    staged_at: datetime
    location: Path


def _read_staged(location: Path) -> StagedUpdate | None:
    try:
        version = (location / "version").read_text().strip()
        staged_at = datetime.fromisoformat((location / "staged_at").read_text().strip())
        payload = (location / "payload").read_bytes()
    except FileNotFoundError:
        return None
    return StagedUpdate(version, payload, staged_at, location)


def stage_ucvm_update(
    scratch: HasStateDir,
    version: str,
    payload: bytes,
    *,
    now: datetime | None = None,
) -> StagedUpdate:
    """Drop a new image into the staging area on the scratch disk.

    A previously staged update is replaced when the new one is at least as
    recent; staging something older than what is already there raises
    :class:`StageConflict`.
    """
    if not version or version != version.strip() or "\n" in version:
        raise UcvmError(f"invalid version {version!r}")
    now = now or datetime.now(timezone.utc)
    location = scratch.state_dir / UPDATE_DIR
    current = _read_staged(location)
    if current is not None and current.new_ucvm_version != version and current.staged_at > now:
        raise StageConflict(
            f"{current.new_ucvm_version} staged at {current.staged_at.isoformat()} is newer than {version}"
        )
    tmp = scratch.state_dir / f".{UPDATE_DIR}.{os.getpid()}.tmp"
    shutil.rmtree(tmp, ignore_errors=True)
    tmp.mkdir(parents=True)
    (tmp / "payload").write_bytes(payload)
    (tmp / "staged_at").write_text(now.isoformat() + "\n")
    # written last: a staging dir without a version file is incomplete
    (tmp / "version").write_text(version + "\n")
    if location.exists():
        trash = scratch.state_dir / f".{UPDATE_DIR}.{os.getpid()}.old"
        os.replace(location, trash)
        os.replace(tmp, location)
        shutil.rmtree(trash)
    else:
        os.replace(tmp, location)
    return StagedUpdate(version, payload, now, location)


def check_staged(scratch: HasStateDir) -> StagedUpdate | None:
    """Return and consume the staged update, emptying the staging area."""
    location = scratch.state_dir / UPDATE_DIR
    staged = _read_staged(location)
    if location.exists():
        shutil.rmtree(location)
    return staged


class Pinnable(Protocol):
    pinned_revision: int | None


def unpin_snapshot(machine: Pinnable) -> None:
    if machine.pinned_revision is None:
        raise NotPinned("machine is not pinned to a snapshot")
    machine.pinned_revision = None


# ---------------------------------------------------------------------------
# Id maps
# ---------------------------------------------------------------------------


@dataclass
class IdMap:
    """Snapshot-side id to machine-local id, for uids and gids separately."""

    uid_map: dict[int, int] = field(default_factory=dict)
    gid_map: dict[int, int] = field(default_factory=dict)

    def apply(self, uid: int, gid: int) -> tuple[int, int]:
        return self.uid_map.get(uid, uid), self.gid_map.get(gid, gid)

    def __bool__(self) -> bool:
        return bool(self.uid_map or self.gid_map)

    def remaps(self) -> list[tuple[str, int, int]]:
        return [("uid", a, b) for a, b in sorted(self.uid_map.items())] + [
            ("gid", a, b) for a, b in sorted(self.gid_map.items())
        ]

    def to_text(self) -> str:
        return "".join(f"{kind} {a} {b}\n" for kind, a, b in self.remaps())

    @classmethod
    def from_text(cls, text: str) -> IdMap:
        idmap = cls()
        for line in text.splitlines():
            words = line.split()
            if not words:
                continue
            if len(words) != 3 or words[0] not in ("uid", "gid"):
                raise DecodeError(f"bad id map line {line!r}")
            target = idmap.uid_map if words[0] == "uid" else idmap.gid_map
            target[int(words[1])] = int(words[2])
        return idmap


def apply_idmap(owner: tuple[int, int], idmap: IdMap) -> tuple[int, int]:
    return idmap.apply(*owner)


# ---------------------------------------------------------------------------
# Account databases
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class UserRecord:
    name: str
    password_hash: str
    uid: int
    gid: int
    gecos: str = ""
    home: str = "/"
    shell: str = "/bin/sh"

    def line(self) -> str:
        return f"{self.name}:{self.password_hash}:{self.uid}:{self.gid}:{self.gecos}:{self.home}:{self.shell}"


@dataclass(frozen=True)
class GroupRecord:
    name: str
    password_hash: str
    gid: int
    members: tuple[str, ...] = ()

    def line(self) -> str:
        return f"{self.name}:{self.password_hash}:{self.gid}:{','.join(self.members)}"


@dataclass
class AccountDb:
    users: list[UserRecord] = field(default_factory=list)
    groups: list[GroupRecord] = field(default_factory=list)

    def check(self) -> None:
        """Raise ValueError unless names and ids are unique."""
        for label, values in (
            ("user name", [u.name for u in self.users]),
            ("uid", [u.uid for u in self.users]),
            ("group name", [g.name for g in self.groups]),
            ("gid", [g.gid for g in self.groups]),
        ):
            if len(values) != len(set(values)):
                raise ValueError(f"duplicate {label} in account database")

    @staticmethod
    def parse_passwd(text: str) -> list[UserRecord]:
        users = []
        for line in text.splitlines():
            if not line.strip() or line.startswith("#"):
                continue
            f = line.split(":")
            if len(f) != 7:
                raise DecodeError(f"bad passwd line {line!r}")
            users.append(UserRecord(f[0], f[1], int(f[2]), int(f[3]), f[4], f[5], f[6]))
        return users

    @staticmethod
    def parse_group(text: str) -> list[GroupRecord]:
        groups = []
        for line in text.splitlines():
            if not line.strip() or line.startswith("#"):
                continue
            f = line.split(":")
            if len(f) != 4:
                raise DecodeError(f"bad group line {line!r}")
            members = tuple(m for m in f[3].split(",") if m)
            groups.append(GroupRecord(f[0], f[1], int(f[2]), members))
        return groups

    @classmethod
    def parse(cls, passwd: str, group: str) -> AccountDb:
        return cls(cls.parse_passwd(passwd), cls.parse_group(group))

    def render_passwd(self) -> str:
        return "".join(u.line() + "\n" for u in self.users)

    def render_group(self) -> str:
        return "".join(g.line() + "\n" for g in self.groups)


def _smallest_unused(used: set[int]) -> int:
    candidate = FIRST_FREE_ID
    while candidate in used:
        candidate += 1
    return candidate


def merge_accounts(local: AccountDb, incoming: AccountDb) -> tuple[AccountDb, IdMap]:
    """Merge *incoming* (new snapshot) into *local* record by record.

    Local records keep their passwords and ids; group membership is the union
    of both sides; incoming records whose id is taken locally get the
    smallest id >= 1000 unused on either side.
    """
    idmap = IdMap()

    groups = list(local.groups)
    group_index = {g.name: i for i, g in enumerate(groups)}
    local_gids = {g.gid for g in local.groups}
    used_gids = local_gids | {g.gid for g in incoming.groups}
    for g in incoming.groups:
        if g.name in group_index:
            i = group_index[g.name]
            mine = groups[i]
            extra = tuple(m for m in g.members if m not in mine.members)
            groups[i] = replace(mine, members=mine.members + extra)
            if g.gid != mine.gid:
                idmap.gid_map[g.gid] = mine.gid
        elif g.gid in local_gids:
            new_gid = _smallest_unused(used_gids)
            used_gids.add(new_gid)
            idmap.gid_map[g.gid] = new_gid
            groups.append(replace(g, gid=new_gid))
        else:
            groups.append(g)

    users = list(local.users)
    local_names = {u.name: u for u in local.users}
    local_uids = {u.uid for u in local.users}
    used_uids = local_uids | {u.uid for u in incoming.users}
    for u in incoming.users:
        if u.name in local_names:
            mine = local_names[u.name]
            if u.uid != mine.uid:
                idmap.uid_map[u.uid] = mine.uid
            continue
        gid = idmap.gid_map.get(u.gid, u.gid)
        if u.uid in local_uids:
            new_uid = _smallest_unused(used_uids)
            used_uids.add(new_uid)
            idmap.uid_map[u.uid] = new_uid
            users.append(replace(u, uid=new_uid, gid=gid))
        else:
            users.append(replace(u, gid=gid))

    merged = AccountDb(users, groups)
    merged.check()
    return merged, idmap


# ---------------------------------------------------------------------------
# Package database
# ---------------------------------------------------------------------------


class PackageRecord(NamedTuple):
    name: str
    version: str
    origin: str = "snapshot"


def parse_pkgdb(text: str) -> list[PackageRecord]:
    records = []
    for line in text.splitlines():
        if not line.strip():
            continue
        f = line.split("\t")
        if len(f) == 2:
            f.append("snapshot")
        if len(f) != 3 or f[2] not in ("user", "snapshot"):
            raise DecodeError(f"bad package line {line!r}")
        records.append(PackageRecord(*f))
    return records


def render_pkgdb(records: Iterable[PackageRecord]) -> str:
    return "".join(f"{r.name}\t{r.version}\t{r.origin}\n" for r in records)


def reinsert_packages(
    locally_installed: Iterable[tuple[str, str]],
    new_pkgdb: Iterable[tuple[str, str]],
) -> list[PackageRecord]:
    merged = {name: PackageRecord(name, version, "snapshot") for name, version, *_ in new_pkgdb}
    for name, version, *_ in locally_installed:
        merged[name] = PackageRecord(name, version, "user")
    return sorted(merged.values(), key=lambda r: r.name)


# ---------------------------------------------------------------------------
# Overlay merge
# ---------------------------------------------------------------------------


def local_wins(path: str) -> bool:
    """FHS rule: conflicts under /etc and /var keep the local copy."""
    return any(path == root or path.startswith(root + "/") for root in LOCAL_WINS_ROOTS)


def _differs(a: Dirent | None, b: Dirent | None) -> bool:
    if a is None or b is None:
        return (a is None) != (b is None)
    return not a.same_payload(b)


def overlay_entries(upper: Path) -> list[tuple[str, str]]:
    """All entries of an upper directory as ``(path, kind)``.

    *kind* is ``file``, ``symlink``, ``dir`` or ``whiteout`` (for a whiteout
    the path is the hidden one). Parents sort before children.
    """
    out: list[tuple[str, str]] = []

    def walk(host: Path, vpath: str) -> None:
        with os.scandir(host) as it:
            entries = sorted(it, key=lambda e: e.name)
        for entry in entries:
            name = entry.name
            if name.startswith(_TMP_PREFIX):
                continue
            if name.startswith(WHITEOUT_PREFIX):
                out.append((join_path(vpath, name[len(WHITEOUT_PREFIX):]), "whiteout"))
                continue
            path = join_path(vpath, name)
            if entry.is_symlink():
                out.append((path, "symlink"))
            elif entry.is_dir():
                out.append((path, "dir"))
                walk(Path(entry.path), path)
            else:
                out.append((path, "file"))

    walk(upper, "/")
    out.sort(key=lambda e: e[0].encode("utf-8", "surrogateescape"))
    return out


@dataclass
class MergeReport:
    kept_local: list[str] = field(default_factory=list)
    took_remote: list[str] = field(default_factory=list)
    untouched_overlay: list[str] = field(default_factory=list)
    reinserted_packages: list[tuple[str, str]] = field(default_factory=list)
    account_remaps: list[tuple[str, int, int]] = field(default_factory=list)
    orphaned: list[tuple[str, str]] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)
    idmap: IdMap = field(default_factory=IdMap)

    def to_text(self) -> str:
        lines = [f"kept_local={p}" for p in self.kept_local]
        lines += [f"took_remote={p}" for p in self.took_remote]
        lines += [f"untouched_overlay={p}" for p in self.untouched_overlay]
        lines += [f"reinserted_package={n} {v}" for n, v in self.reinserted_packages]
        lines += [f"account_remap={k} {a} {b}" for k, a, b in self.account_remaps]
        lines += [f"orphaned={p} {dest}" for p, dest in self.orphaned]
        lines += [f"note={n}" for n in self.notes]
        return "".join(line + "\n" for line in lines)


def _host_path(upper: Path, path: str) -> Path:
    return upper / path.lstrip("/")


def _resolve_conflicts(
    upper: Path,
    old: Catalog,
    new: Catalog,
    report: MergeReport,
    orphan_dir: Path | None,
) -> None:
    removed: list[str] = []
    for path, kind in overlay_entries(upper):
        if any(path.startswith(r + "/") for r in removed):
            continue
        old_e, new_e = old.get(path), new.get(path)
        if kind == "dir":
            if old_e is not None and old_e.is_dir:
                # metadata-only copy-up; only a change of kind in the snapshot matters
                if new_e is None or new_e.is_dir:
                    continue
                conflict = True
            else:
                conflict = _differs(old_e, new_e) and not (new_e is not None and new_e.is_dir)
        else:
            conflict = _differs(old_e, new_e)

        if not conflict:
            report.untouched_overlay.append(path)
            continue
        if local_wins(path):
            report.kept_local.append(path)
            continue
        report.took_remote.append(path)

        host = _host_path(upper, path)
        if kind == "whiteout":
            os.unlink(host.parent / (WHITEOUT_PREFIX + host.name))
            continue
        displaced = kind == "dir" or (new_e is not None and new_e.is_dir)
        if displaced and orphan_dir is not None:
            dest = orphan_dir / path.lstrip("/")
            dest.parent.mkdir(parents=True, exist_ok=True)
            shutil.move(str(host), str(dest))
            report.orphaned.append((path, str(dest)))
        elif kind == "dir":
            shutil.rmtree(host)
        else:
            os.unlink(host)
        if kind == "dir":
            removed.append(path)


def _read_view(mount: UnionMount, path: str) -> bytes | None:
    try:
        return mount.read(path)
    except (NotFound, UcvmError):
        return None


def _has_upper_copy(upper: Path, path: str) -> bool:
    return os.path.lexists(_host_path(upper, path))


def merge_on_update(
    upper_dir: str | os.PathLike[str],
    old: Catalog,
    new: Catalog,
    fetch: Callable[[str], bytes],
    *,
    orphan_dir: Path | None = None,
) -> MergeReport:
    """Reconcile the overlay in *upper_dir* (built against *old*) with *new*.

    Runs before the new union view is exposed; nothing else may touch the
    overlay meanwhile.
    """
    upper = Path(upper_dir)
    report = MergeReport()

    with UnionMount(old, fetch, upper) as before:
        local_passwd = _read_view(before, PASSWD_PATH)
        local_group = _read_view(before, GROUP_PATH)
        local_pkgdb = _read_view(before, PKGDB_PATH) if _has_upper_copy(upper, PKGDB_PATH) else None

    _resolve_conflicts(upper, old, new, report, orphan_dir)

    with UnionMount(new, fetch, upper) as after:
        _merge_packages(after, new, fetch, upper, local_pkgdb, report)
        _merge_account_files(after, new, fetch, upper, local_passwd, local_group, report)
    return report


def _snapshot_file(catalog: Catalog, fetch: Callable[[str], bytes], path: str) -> bytes | None:
    d = catalog.get(path)
    if d is None or d.content is None:
        return None
    return fetch(d.content)


def _merge_packages(
    mount: UnionMount,
    new: Catalog,
    fetch: Callable[[str], bytes],
    upper: Path,
    local_pkgdb: bytes | None,
    report: MergeReport,
) -> None:
    if local_pkgdb is None:
        return
    user = [r for r in parse_pkgdb(local_pkgdb.decode()) if r.origin == "user"]
    incoming_raw = _snapshot_file(new, fetch, PKGDB_PATH)
    incoming = parse_pkgdb(incoming_raw.decode()) if incoming_raw is not None else []
    merged = reinsert_packages([(r.name, r.version) for r in user], [(r.name, r.version) for r in incoming])
    report.reinserted_packages = [(r.name, r.version) for r in user]
    snapshot_versions = {r.name: r.version for r in incoming}
    for r in user:
        theirs = snapshot_versions.get(r.name)
        if theirs is not None and theirs != r.version:
            report.notes.append(
                f"package {r.name}: database keeps user version {r.version}, "
                f"snapshot ships {theirs}; files outside /etc and /var follow the snapshot"
            )
    try:
        mount.write(PKGDB_PATH, render_pkgdb(merged).encode())
    except UcvmError as exc:
        report.notes.append(f"cannot write {PKGDB_PATH}: {exc}")


def _merge_account_files(
    mount: UnionMount,
    new: Catalog,
    fetch: Callable[[str], bytes],
    upper: Path,
    local_passwd: bytes | None,
    local_group: bytes | None,
    report: MergeReport,
) -> None:
    incoming_passwd = _snapshot_file(new, fetch, PASSWD_PATH)
    incoming_group = _snapshot_file(new, fetch, GROUP_PATH)
    if incoming_passwd is None and incoming_group is None:
        return
    if local_passwd is None and local_group is None:
        return
    try:
        local = AccountDb.parse((local_passwd or b"").decode(), (local_group or b"").decode())
        incoming = AccountDb.parse((incoming_passwd or b"").decode(), (incoming_group or b"").decode())
        merged, idmap = merge_accounts(local, incoming)
    except (DecodeError, ValueError) as exc:
        report.notes.append(f"account databases not merged: {exc}")
        return
    report.idmap = idmap
    report.account_remaps = idmap.remaps()
    for path, text, theirs in (
        (PASSWD_PATH, merged.render_passwd().encode(), incoming_passwd),
        (GROUP_PATH, merged.render_group().encode(), incoming_group),
    ):
        if _has_upper_copy(upper, path) or text != (theirs or b""):
            try:
                mount.write(path, text)
            except UcvmError as exc:
                report.notes.append(f"cannot write {path}: {exc}")


def load_idmap(path: Path) -> IdMap:
    try:
        return IdMap.from_text(path.read_text())
    except FileNotFoundError:
        return IdMap()


def save_idmap(path: Path, idmap: IdMap) -> None:
    atomic_write(path, idmap.to_text().encode())

