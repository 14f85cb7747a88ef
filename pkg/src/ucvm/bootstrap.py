"""Early user space: contextualize, find scratch space, assemble and switch root.

The boot sequence follows the micro-VM design: adopt a staged image update,
choose the snapshot (pinned revision first, then the user-data selector),
merge the overlay if the snapshot changed, union the snapshot with the
persistent overlay, publish the client ids, run the repository's bootstrap
hook, pin the files the repository asks for, and finally expose the raw
read-only and read-write layers under ``/mnt/.ro`` and ``/mnt/.rw``.
"""

from __future__ import annotations

import itertools
import logging
import os
import re
import subprocess
import tempfile
import urllib.request
from collections.abc import Callable
from dataclasses import dataclass, field
from pathlib import Path

from .errors import (
    IsADirectory,
    MalformedBlock,
    MissingRequiredKey,
    NoScratchAvailable,
    NotADirectory,
    NotBooted,
    NotFound,
    PathNotFound,
    ReadOnly,
    UcvmError,
)
from .repo_core import Catalog, Kind, Manifest, atomic_write, decode_catalog, normalize_path
from .transport import (
    DEFAULT_QUOTA,
    PINFILE,
    CacheManager,
    PinReport,
    PinSet,
    RepoClient,
    _resolve_in_catalog,
    pin,
    read_pinset,
)
from .unionfs import Layer, UnionMount, UnionStat, _kind_of
from .updater import (
    MergeReport,
    check_staged,
    load_idmap,
    merge_on_update,
    save_idmap,
)

log = logging.getLogger(__name__)

SCRATCH_LABEL = "UCVM_SCRATCH"
LABEL_FILE = ".label"
BASE_UCVM_VERSION = "1.0"
BLOCK_BEGIN = "[ucernvm-begin]"
BLOCK_END = "[ucernvm-end]"
PIDS_FILE = "/.cvmfs_pids"
BOOTSTRAP_FILE = "/.ucernvm_bootstrap"
RO_MOUNT = "/mnt/.ro"
RW_MOUNT = "/mnt/.rw"
#: files the orchestrator rewrites on every boot; excluded from tree digests
RUNTIME_FILES = (PIDS_FILE,)
HOOK_TIMEOUT = 60.0

_instance_ids = itertools.count(1)


# ---------------------------------------------------------------------------
# Contextualization
# ---------------------------------------------------------------------------


@dataclass
class Context:
    repo_url: str
    repo_name: str
    snapshot_selector: str = "newest"
    proxy: str | None = None
    cache_quota_bytes: int | None = None
    extra: dict[str, str] = field(default_factory=dict)


_SIZE_RE = re.compile(r"\A(\d+)\s*([kmgt]?)(i?b)?\Z", re.IGNORECASE)
_SIZE_UNITS = {"": 1, "k": 1024, "m": 1024**2, "g": 1024**3, "t": 1024**4}


def parse_size(value: str) -> int:
    m = _SIZE_RE.match(value.strip())
    if not m:
        raise ValueError(f"not a size: {value!r}")
    return int(m.group(1)) * _SIZE_UNITS[m.group(2).lower()]


def parse_user_data(data: bytes | str) -> Context:
    """Extract the ``[ucernvm-begin]`` ... ``[ucernvm-end]`` block.

    Anything outside the block (cloud-init sections and the like) is ignored.
    Only the first block is read.
    """
    text = data.decode("utf-8", "replace") if isinstance(data, bytes) else data
    lines = text.splitlines()
    try:
        start = next(i for i, line in enumerate(lines) if line.strip() == BLOCK_BEGIN)
    except StopIteration:
        raise MissingRequiredKey(f"no {BLOCK_BEGIN} block in user data") from None
    try:
        end = next(i for i in range(start + 1, len(lines)) if lines[i].strip() == BLOCK_END)
    except StopIteration:
        raise MalformedBlock(f"{BLOCK_BEGIN} without {BLOCK_END}") from None

    values: dict[str, str] = {}
    for line in lines[start + 1:end]:
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise MalformedBlock(f"expected key=value inside the block, got {line!r}")
        values[key.strip()] = value.strip()

    for key in ("repo_url", "repo_name"):
        if not values.get(key):
            raise MissingRequiredKey(f"user data lacks {key}")
    quota = values.pop("cache_quota", "")
    try:
        quota_bytes = parse_size(quota) if quota else None
    except ValueError as exc:
        raise MalformedBlock(f"cache_quota: {exc}") from None
    return Context(
        repo_url=values.pop("repo_url"),
        repo_name=values.pop("repo_name"),
        snapshot_selector=values.pop("snapshot", "") or "newest",
        proxy=values.pop("proxy", "") or None,
        cache_quota_bytes=quota_bytes,
        extra=values,
    )


def read_user_data(source: str) -> bytes:
    """Load user data from a local file or an http(s) URL."""
    if source.startswith(("http://", "https://")):
        with urllib.request.urlopen(source, timeout=30) as resp:
            return resp.read()
    return Path(source).read_bytes()


# ---------------------------------------------------------------------------
# Scratch disk
# ---------------------------------------------------------------------------


@dataclass
class VolumeProbe:
    path: Path
    label: str | None = None
    #: None means "look at the directory"
    empty: bool | None = None

    def effective_label(self) -> str | None:
        if self.label is not None:
            return self.label
        try:
            return (Path(self.path) / LABEL_FILE).read_text().strip() or None
        except (FileNotFoundError, NotADirectoryError):
            return None

    def is_empty(self) -> bool:
        if self.empty is not None:
            return self.empty
        p = Path(self.path)
        return not p.exists() or (p.is_dir() and not any(p.iterdir()))


class ScratchDisk:
    """A host directory standing in for the labelled scratch volume."""

    def __init__(self, root_path: str | os.PathLike[str]):
        self.root_path = Path(root_path).resolve()
        self.overlay_dir = self.root_path / "overlay"
        self.cache_dir = self.root_path / "cache"
        self.state_dir = self.root_path / "state"

    @property
    def label(self) -> str | None:
        try:
            return (self.root_path / LABEL_FILE).read_text().strip()
        except FileNotFoundError:
            return None

    def initialize(self) -> None:
        """Simulated partition + format: create the layout, then the label."""
        for d in (self.overlay_dir, self.cache_dir, self.state_dir):
            d.mkdir(parents=True, exist_ok=True)
        if self.label != SCRATCH_LABEL:
            atomic_write(self.root_path / LABEL_FILE, (SCRATCH_LABEL + "\n").encode())

    def read_state(self, name: str) -> str | None:
        try:
            return (self.state_dir / name).read_text().strip()
        except FileNotFoundError:
            return None

    def write_state(self, name: str, value: str | None) -> None:
        path = self.state_dir / name
        if value is None:
            path.unlink(missing_ok=True)
        else:
            atomic_write(path, (value + "\n").encode())


def discover_scratch(volumes: list[VolumeProbe]) -> ScratchDisk:
    """Reuse a labelled volume, else take the first empty one."""
    for vol in volumes:
        if vol.effective_label() == SCRATCH_LABEL:
            scratch = ScratchDisk(vol.path)
            scratch.initialize()
            return scratch
    for vol in volumes:
        if vol.is_empty():
            scratch = ScratchDisk(vol.path)
            scratch.initialize()
            log.info("initialized scratch space on %s", vol.path)
            return scratch
    raise NoScratchAvailable("no labelled and no empty volume attached")


# ---------------------------------------------------------------------------
# Machine and root stack
# ---------------------------------------------------------------------------


@dataclass
class BootReport:
    revision: int
    snapshot_name: str
    ucvm_version: str
    bytes_fetched: int
    objects_fetched: int
    requests: int
    pinned: int
    pinned_bytes: int
    pin_unknown: list[str]
    hook_status: str
    manifest_from_cache: bool
    merged: bool

    def to_text(self) -> str:
        rows = [
            ("revision", self.revision),
            ("snapshot_name", self.snapshot_name),
            ("ucvm_version", self.ucvm_version),
            ("bytes_fetched", self.bytes_fetched),
            ("objects_fetched", self.objects_fetched),
            ("requests", self.requests),
            ("pinned", self.pinned),
            ("pinned_bytes", self.pinned_bytes),
            ("pin_unknown", ",".join(self.pin_unknown)),
            ("hook_status", self.hook_status),
            ("manifest_from_cache", "yes" if self.manifest_from_cache else "no"),
            ("merged", "yes" if self.merged else "no"),
        ]
        return "".join(f"{k}={v}\n" for k, v in rows)


class RootStack:
    """The switched root: the union view plus the two raw layer projections."""

    ro_projection = RO_MOUNT
    rw_projection = RW_MOUNT

    def __init__(self, union: UnionMount, client: RepoClient, manifest: Manifest):
        self.union = union
        self.client = client
        self.mounted_manifest = manifest

    @property
    def catalog(self) -> Catalog:
        return self.union.lower

    def _route(self, path: str) -> tuple[str, str]:
        for prefix, layer in ((RO_MOUNT, "ro"), (RW_MOUNT, "rw")):
            if path == prefix or path.startswith(prefix + "/"):
                return layer, normalize_path(path[len(prefix):] or "/")
        return "union", path

    def _rw_host(self, sub: str) -> Path:
        return self.union.upper / sub.lstrip("/")

    def _ro_entry(self, sub: str):  # noqa: ANN202
        real = _resolve_in_catalog(self.catalog, sub)
        if real is None:
            raise PathNotFound(f"{RO_MOUNT}{sub}: no such file or directory")
        return real, self.catalog[real]

    def read(self, path: str) -> bytes:
        layer, sub = self._route(path)
        if layer == "ro":
            _, d = self._ro_entry(sub)
            if d.kind is Kind.DIR:
                raise IsADirectory(f"{path}: is a directory")
            return self.client.fetch_object(d.content)  # type: ignore[arg-type]
        if layer == "rw":
            try:
                return self._rw_host(sub).read_bytes()
            except (FileNotFoundError, IsADirectoryError) as exc:
                raise PathNotFound(f"{path}: {exc.strerror}") from None
        return self.union.read(path)

    def listdir(self, path: str) -> list[str]:
        layer, sub = self._route(path)
        if layer == "ro":
            real, d = self._ro_entry(sub)
            if not d.is_dir:
                raise NotADirectory(f"{path}: not a directory")
            return list(self.catalog.children(real))
        if layer == "rw":
            try:
                return sorted(os.listdir(self._rw_host(sub)))
            except (FileNotFoundError, NotADirectoryError) as exc:
                raise PathNotFound(f"{path}: {exc.strerror}") from None
        if normalize_path(path) == "/":
            return sorted(set(self.union.readdir(path)) | {"mnt"})
        if normalize_path(path) == "/mnt":
            try:
                names = set(self.union.readdir(path))
            except PathNotFound:
                names = set()
            return sorted(names | {".ro", ".rw"})
        return self.union.readdir(path)

    def stat(self, path: str) -> UnionStat:
        layer, sub = self._route(path)
        if layer != "union":
            if layer == "ro":
                _, d = self._ro_entry(sub)
                return UnionStat(d.kind, d.mode, d.uid, d.gid, d.size, Layer.LOWER)
            host = self._rw_host(sub)
            try:
                s = os.lstat(host)
            except FileNotFoundError:
                raise PathNotFound(f"{path}: no such file or directory") from None
            return UnionStat(_kind_of(s.st_mode), s.st_mode & 0o7777, s.st_uid, s.st_gid, s.st_size, Layer.UPPER)
        return self.union.stat(path)

    def _writable(self, path: str) -> str:
        layer, _ = self._route(path)
        if layer != "union":
            raise ReadOnly(f"{path}: layer projections are read-only")
        return path

    def write(self, path: str, data: bytes) -> None:
        self.union.write(self._writable(path), data)

    def mkdir(self, path: str, mode: int = 0o755) -> None:
        self.union.mkdir(self._writable(path), mode)

    def symlink(self, path: str, target: str) -> None:
        self.union.symlink(self._writable(path), target)

    def unlink(self, path: str) -> None:
        self.union.unlink(self._writable(path))

    def rmdir(self, path: str) -> None:
        self.union.rmdir(self._writable(path))

    def digest(self) -> str:
        """Tree digest of the union view, runtime files excluded."""
        return self.union.digest(exclude=RUNTIME_FILES)


class MachineState:
    """A simulated VM: its scratch disk plus what is currently booted.

    Pinned revision and image version live in ``state/`` on the scratch disk
    so they survive reboots.
    """

    def __init__(self, scratch: ScratchDisk):
        self.scratch = scratch
        self.booted: RootStack | None = None
        self.last_boot_report: BootReport | None = None
        self.last_merge_report: MergeReport | None = None

    @property
    def pinned_revision(self) -> int | None:
        value = self.scratch.read_state("pinned-revision")
        return int(value) if value else None

    @pinned_revision.setter
    def pinned_revision(self, revision: int | None) -> None:
        self.scratch.write_state("pinned-revision", None if revision is None else str(revision))

    @property
    def ucvm_version(self) -> str:
        return self.scratch.read_state("ucvm-version") or BASE_UCVM_VERSION

    @ucvm_version.setter
    def ucvm_version(self, version: str) -> None:
        self.scratch.write_state("ucvm-version", version)

    @property
    def mounted_revision(self) -> int | None:
        value = self.scratch.read_state("mounted-revision")
        return int(value) if value else None

    @property
    def is_booted(self) -> bool:
        return self.scratch.read_state("booted") is not None


def _make_client(machine: MachineState, context: Context, backoff_base: float) -> RepoClient:
    cache = CacheManager(machine.scratch.cache_dir, context.cache_quota_bytes or DEFAULT_QUOTA)
    return RepoClient(
        context.repo_url,
        context.repo_name,
        cache,
        proxy=context.proxy,
        backoff_base=backoff_base,
    )


def _run_hook(union: UnionMount, manifest: Manifest, context: Context, timeout: float) -> str:
    try:
        script = union.read(BOOTSTRAP_FILE)
    except (NotFound, UcvmError):
        return "absent"
    with tempfile.NamedTemporaryFile("wb", suffix=".sh", delete=False) as fh:
        fh.write(script)
        hook_path = fh.name
    env = dict(os.environ)
    env.update(
        UCVM_ROOT=str(union.upper),
        UCVM_REPO_URL=context.repo_url,
        UCVM_REPO_NAME=context.repo_name,
        UCVM_REVISION=str(manifest.revision),
        UCVM_SNAPSHOT=manifest.snapshot_name,
    )
    try:
        proc = subprocess.run(
            ["/bin/sh", hook_path],
            env=env,
            cwd=union.upper,
            capture_output=True,
            timeout=timeout,
        )
    except subprocess.TimeoutExpired:
        log.warning("bootstrap hook timed out after %.0fs", timeout)
        return "failed:timeout"
    finally:
        os.unlink(hook_path)
    if proc.returncode != 0:
        log.warning("bootstrap hook exited %d: %s", proc.returncode, proc.stderr.decode(errors="replace").strip())
        return f"failed:{proc.returncode}"
    return "ok"


def boot(
    machine: MachineState,
    context: Context,
    *,
    backoff_base: float = 0.5,
    hook_timeout: float = HOOK_TIMEOUT,
) -> RootStack:
    """Run the full boot sequence and return the switched root."""
    if machine.booted is not None:
        raise UcvmError("machine is already booted")
    scratch = machine.scratch
    scratch.initialize()

    # (1) kexec into a staged image before anything else
    staged = check_staged(scratch)
    if staged is not None:
        log.info("adopting staged image %s", staged.new_ucvm_version)
        atomic_write(scratch.state_dir / "ucvm-image", staged.payload)
        machine.ucvm_version = staged.new_ucvm_version

    # (2) choose the snapshot
    client = _make_client(machine, context, backoff_base)
    pinned = machine.pinned_revision
    if pinned is not None:
        manifest = client.fetch_manifest_revision(pinned)
    else:
        manifest = client.fetch_manifest(context.snapshot_selector)
        machine.pinned_revision = manifest.revision
    catalog = client.fetch_catalog(manifest)

    merge = None
    previous = machine.mounted_revision
    previous_catalog = scratch.read_state("mounted-catalog")
    if previous is not None and previous != manifest.revision and previous_catalog:
        old = decode_catalog(client.fetch_object(previous_catalog))
        merge = merge_on_update(
            scratch.overlay_dir,
            old,
            catalog,
            client.fetch_object,
            orphan_dir=scratch.state_dir / "merge-orphans" / str(manifest.revision),
        )
        save_idmap(scratch.state_dir / "idmap", merge.idmap)
        atomic_write(scratch.state_dir / "last-merge-report", merge.to_text().encode())
        machine.last_merge_report = merge
    scratch.write_state("mounted-revision", str(manifest.revision))
    scratch.write_state("mounted-catalog", manifest.root_catalog)

    # (3) union the snapshot with the persistent overlay
    union = UnionMount(
        catalog,
        client.fetch_object,
        scratch.overlay_dir,
        idmap=load_idmap(scratch.state_dir / "idmap"),
    )
    try:
        # (4) tell the OS which processes keep its root alive
        union.write(PIDS_FILE, f"{os.getpid()}\n{next(_instance_ids)}\n".encode())
        # (5) repository hook, just before the root switch
        hook_status = _run_hook(union, manifest, context, hook_timeout)
        # (6) keep the recovery set in the cache
        pinset = read_pinset(union.read) or PinSet()
        extra = [manifest.root_catalog]
        for special in (PINFILE, BOOTSTRAP_FILE):
            d = catalog.get(special)
            if d is not None and d.content is not None:
                extra.append(d.content)
        pin_report: PinReport = pin(client, pinset, catalog, extra_ids=extra)
    except BaseException:
        union.close()
        raise

    # (7) switch root with the raw layers projected in
    stack = RootStack(union, client, manifest)
    report = BootReport(
        revision=manifest.revision,
        snapshot_name=manifest.snapshot_name,
        ucvm_version=machine.ucvm_version,
        bytes_fetched=client.stats.bytes_downloaded,
        objects_fetched=client.stats.objects_fetched,
        requests=client.stats.requests,
        pinned=pin_report.objects,
        pinned_bytes=pin_report.bytes,
        pin_unknown=pin_report.unknown,
        hook_status=hook_status,
        manifest_from_cache=manifest.from_cache,
        merged=merge is not None,
    )
    atomic_write(scratch.state_dir / "last-boot-report", report.to_text().encode())
    scratch.write_state("booted", str(manifest.revision))
    machine.booted = stack
    machine.last_boot_report = report
    return stack


def attach(machine: MachineState, context: Context, *, backoff_base: float = 0.5) -> RootStack:
    """Re-open the root stack of a machine booted by another process."""
    if machine.booted is not None:
        return machine.booted
    if not machine.is_booted:
        raise NotBooted("machine is not booted")
    revision = machine.mounted_revision
    catalog_id = machine.scratch.read_state("mounted-catalog")
    if revision is None or not catalog_id:
        raise NotBooted("boot state is incomplete")
    client = _make_client(machine, context, backoff_base)
    manifest = client.fetch_manifest_revision(revision)
    catalog = decode_catalog(client.fetch_object(catalog_id))
    union = UnionMount(
        catalog,
        client.fetch_object,
        machine.scratch.overlay_dir,
        idmap=load_idmap(machine.scratch.state_dir / "idmap"),
    )
    machine.booted = RootStack(union, client, manifest)
    return machine.booted


@dataclass
class ShutdownReport:
    order: list[str] = field(default_factory=list)
    violations: int = 0
    was_booted: bool = True

    def to_text(self) -> str:
        return f"order={','.join(self.order)}\nviolations={self.violations}\nwas_booted={'yes' if self.was_booted else 'no'}\n"


def shutdown(
    machine: MachineState,
    *,
    after_readonly: Callable[[RootStack], None] | None = None,
) -> ShutdownReport:
    """Tear down in a safe order: rw layer read-only, close the union, release root.

    *after_readonly* runs between the first two steps; tests use it to inject
    late writes, each of which is rejected and counted as a violation.
    """
    stack = machine.booted
    if stack is None:
        if machine.is_booted:
            machine.scratch.write_state("booted", None)
        return ShutdownReport(was_booted=False)
    report = ShutdownReport()
    union = stack.union
    union.set_readonly()
    report.order.append("rw_readonly")
    if after_readonly is not None:
        try:
            after_readonly(stack)
        except ReadOnly:
            pass
    report.violations = union.rejected_writes
    fd = os.open(union.upper, os.O_RDONLY)
    try:
        os.fsync(fd)
    finally:
        os.close(fd)
    union.close()
    report.order.append("union_close")
    machine.booted = None
    machine.scratch.write_state("booted", None)
    report.order.append("root_release")
    return report
