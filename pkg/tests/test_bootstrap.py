from __future__ import annotations

from datetime import datetime, timezone
from pathlib import Path

import pytest

from helpers import make_context, make_machine
from ucvm.bootstrap import (
    PIDS_FILE,
    SCRATCH_LABEL,
    MachineState,
    ScratchDisk,
    VolumeProbe,
    attach,
    boot,
    discover_scratch,
    parse_size,
    parse_user_data,
    shutdown,
)
from ucvm.errors import (
    MalformedBlock,
    MissingRequiredKey,
    NoScratchAvailable,
    NotBooted,
    ReadOnly,
    UnknownSelector,
)
from ucvm.publisher import publish_snapshot
from ucvm.repo_core import Kind
from ucvm.transport import PINFILE
from ucvm.unionfs import Layer

NOW = datetime(2014, 6, 1, tzinfo=timezone.utc)

BASE = {
    "/bin/sh": b"#!shell\n",
    "/etc/motd": b"welcome\n",
    "/usr/lib/libc.so": b"libc" * 100,
    "/usr/share/doc/big": bytes(range(256)) * 64,
}


# ---------------------------------------------------------------------------
# User data
# ---------------------------------------------------------------------------

USER_DATA = """#cloud-config
users: [root]
[ucernvm-begin]
repo_url=http://example.org/cvmfs
repo_name=sft.cern.ch
snapshot=production
cache_quota=2G
# comment
proxy=http://squid:3128
site=cern
[ucernvm-end]
runcmd: [true]
"""


def test_parse_user_data() -> None:
    ctx = parse_user_data(USER_DATA)
    assert ctx.repo_url == "http://example.org/cvmfs"
    assert ctx.repo_name == "sft.cern.ch"
    assert ctx.snapshot_selector == "production"
    assert ctx.cache_quota_bytes == 2 * 1024**3
    assert ctx.proxy == "http://squid:3128"
    assert ctx.extra == {"site": "cern"}


def test_snapshot_defaults_to_newest() -> None:
    ctx = parse_user_data(b"[ucernvm-begin]\nrepo_url=u\nrepo_name=n\n[ucernvm-end]\n")
    assert ctx.snapshot_selector == "newest" and ctx.proxy is None and ctx.cache_quota_bytes is None


@pytest.mark.parametrize(
    "text,error",
    [
        ("no block at all\n", MissingRequiredKey),
        ("[ucernvm-begin]\nrepo_url=u\n[ucernvm-end]\n", MissingRequiredKey),
        ("[ucernvm-begin]\nrepo_url=u\nrepo_name=n\n", MalformedBlock),
        ("[ucernvm-begin]\nrepo_url=u\nrepo_name=n\njunk\n[ucernvm-end]\n", MalformedBlock),
        ("[ucernvm-begin]\nrepo_url=u\nrepo_name=n\ncache_quota=lots\n[ucernvm-end]\n", MalformedBlock),
    ],
)
def test_user_data_errors(text: str, error: type) -> None:
    with pytest.raises(error):
        parse_user_data(text)


@pytest.mark.parametrize("value,expected", [("0", 0), ("10", 10), ("4k", 4096), ("1M", 1 << 20), ("3GiB", 3 << 30)])
def test_parse_size(value: str, expected: int) -> None:
    assert parse_size(value) == expected


# ---------------------------------------------------------------------------
# Scratch discovery
# ---------------------------------------------------------------------------


def test_first_empty_volume_is_formatted(tmp_path: Path) -> None:
    full = tmp_path / "full"
    full.mkdir()
    (full / "data").write_text("x")
    empty = tmp_path / "empty"
    scratch = discover_scratch([VolumeProbe(full), VolumeProbe(empty)])
    assert scratch.root_path == empty.resolve()
    assert scratch.label == SCRATCH_LABEL
    assert scratch.overlay_dir.is_dir() and scratch.cache_dir.is_dir()


def test_labelled_volume_is_reused(tmp_path: Path) -> None:
    first = discover_scratch([VolumeProbe(tmp_path / "v0")])
    (first.overlay_dir / "kept").write_text("data")
    again = discover_scratch([VolumeProbe(tmp_path / "blank"), VolumeProbe(tmp_path / "v0")])
    assert again.root_path == first.root_path
    assert (again.overlay_dir / "kept").read_text() == "data"


def test_probe_flags_override_directory(tmp_path: Path) -> None:
    scratch = discover_scratch([VolumeProbe(tmp_path / "a", empty=False), VolumeProbe(tmp_path / "b", label=SCRATCH_LABEL)])
    assert scratch.root_path == (tmp_path / "b").resolve()


def test_no_scratch(tmp_path: Path) -> None:
    full = tmp_path / "full"
    full.mkdir()
    (full / "x").write_text("x")
    with pytest.raises(NoScratchAvailable):
        discover_scratch([VolumeProbe(full)])
    with pytest.raises(NoScratchAvailable):
        discover_scratch([])


def test_state_roundtrip(tmp_path: Path) -> None:
    scratch = ScratchDisk(tmp_path / "d")
    scratch.initialize()
    scratch.write_state("k", "v")
    assert scratch.read_state("k") == "v"
    scratch.write_state("k", None)
    assert scratch.read_state("k") is None


# ---------------------------------------------------------------------------
# Boot
# ---------------------------------------------------------------------------


def test_boot_fetches_only_what_is_touched(repo, server, tmp_path: Path) -> None:
    publish_snapshot(repo, BASE, "1.0", "production", now=NOW)
    machine = make_machine(tmp_path / "m")
    root = boot(machine, make_context(server.url, "production"), backoff_base=0.01)
    report = machine.last_boot_report
    assert report.revision == 1 and report.snapshot_name == "1.0"
    assert report.hook_status == "absent"
    assert report.objects_fetched == 1  # only the root catalog
    assert root.read("/bin/sh") == b"#!shell\n"
    assert root.union.stat(PIDS_FILE).layer is Layer.UPPER
    assert machine.pinned_revision == 1
    shutdown(machine)


def test_boot_unknown_selector(repo, server, tmp_path: Path) -> None:
    publish_snapshot(repo, BASE, "1.0", now=NOW)
    machine = make_machine(tmp_path / "m")
    with pytest.raises(UnknownSelector):
        boot(machine, make_context(server.url, "no-such"), backoff_base=0.01)
    assert machine.pinned_revision is None


def test_boot_is_deterministic(repo, server, tmp_path: Path) -> None:
    publish_snapshot(repo, BASE, "1.0", now=NOW)
    digests = []
    for i in range(2):
        machine = make_machine(tmp_path / f"m{i}")
        root = boot(machine, make_context(server.url), backoff_base=0.01)
        digests.append(root.digest())
        shutdown(machine)
    assert digests[0] == digests[1]


def test_pinfile_entries_are_pinned(repo, server, tmp_path: Path) -> None:
    files = {**BASE, PINFILE: b"/bin/sh\n/usr/lib\nrelative/ignored\n/missing\n"}
    publish_snapshot(repo, files, "1.0", now=NOW)
    machine = make_machine(tmp_path / "m")
    root = boot(machine, make_context(server.url), backoff_base=0.01)
    report = machine.last_boot_report
    # catalog, pinfile, /bin/sh and /usr/lib/libc.so
    assert report.pinned == 4
    assert report.pin_unknown == ["relative/ignored", "/missing"]
    before = root.client.stats.requests
    assert root.read("/usr/lib/libc.so") == BASE["/usr/lib/libc.so"]
    assert root.client.stats.requests == before
    shutdown(machine)


@pytest.mark.parametrize(
    "script,status",
    [
        (b'touch "$UCVM_ROOT/hook-ran"\necho "$UCVM_SNAPSHOT" > "$UCVM_ROOT/hook-snapshot"\n', "ok"),
        (b"exit 3\n", "failed:3"),
    ],
)
def test_bootstrap_hook(repo, server, tmp_path: Path, script: bytes, status: str) -> None:
    publish_snapshot(repo, {**BASE, "/.ucernvm_bootstrap": script}, "1.0", now=NOW)
    machine = make_machine(tmp_path / "m")
    root = boot(machine, make_context(server.url), backoff_base=0.01)
    assert machine.last_boot_report.hook_status == status
    if status == "ok":
        assert root.read("/hook-snapshot") == b"1.0\n"
        assert root.union.stat("/hook-ran").layer is Layer.UPPER
    shutdown(machine)


def test_hook_timeout(repo, server, tmp_path: Path) -> None:
    publish_snapshot(repo, {**BASE, "/.ucernvm_bootstrap": b"sleep 5\n"}, "1.0", now=NOW)
    machine = make_machine(tmp_path / "m")
    boot(machine, make_context(server.url), backoff_base=0.01, hook_timeout=0.3)
    assert machine.last_boot_report.hook_status == "failed:timeout"
    shutdown(machine)


def test_layer_projections(repo, server, tmp_path: Path) -> None:
    publish_snapshot(repo, BASE, "1.0", now=NOW)
    machine = make_machine(tmp_path / "m")
    root = boot(machine, make_context(server.url), backoff_base=0.01)
    root.write("/etc/motd", b"local motd\n")
    assert root.read("/etc/motd") == b"local motd\n"
    assert root.read("/mnt/.ro/etc/motd") == b"welcome\n"
    assert root.read("/mnt/.rw/etc/motd") == b"local motd\n"
    assert "etc" in root.listdir("/mnt/.rw")
    assert root.listdir("/mnt") == [".ro", ".rw"]
    assert "mnt" in root.listdir("/")
    assert root.stat("/mnt/.ro/usr").kind is Kind.DIR
    for path in ("/mnt/.ro/x", "/mnt/.rw/x"):
        with pytest.raises(ReadOnly):
            root.write(path, b"")
    shutdown(machine)


def test_reboot_keeps_overlay_and_snapshot(repo, server, tmp_path: Path) -> None:
    publish_snapshot(repo, BASE, "1.0", "production", now=NOW)
    machine = make_machine(tmp_path / "m")
    ctx = make_context(server.url, "production")
    root = boot(machine, ctx, backoff_base=0.01)
    root.write("/home", b"not a dir, just a file")
    digest = root.digest()
    shutdown(machine)
    fresh = MachineState(ScratchDisk(machine.scratch.root_path))
    root = boot(fresh, ctx, backoff_base=0.01)
    assert root.digest() == digest
    assert fresh.last_boot_report.merged is False
    shutdown(fresh)


def test_attach_requires_boot(repo, server, tmp_path: Path) -> None:
    publish_snapshot(repo, BASE, "1.0", now=NOW)
    machine = make_machine(tmp_path / "m")
    ctx = make_context(server.url)
    with pytest.raises(NotBooted):
        attach(machine, ctx)
    root = boot(machine, ctx, backoff_base=0.01)
    root.write("/note", b"n")
    root.union.close()
    other = MachineState(ScratchDisk(machine.scratch.root_path))
    assert attach(other, ctx).read("/note") == b"n"
    assert shutdown(other).was_booted


# ---------------------------------------------------------------------------
# Shutdown
# ---------------------------------------------------------------------------


def test_shutdown_never_booted_is_noop(tmp_path: Path) -> None:
    machine = make_machine(tmp_path / "m")
    report = shutdown(machine)
    assert report.was_booted is False and report.order == [] and report.violations == 0


def test_shutdown_order_and_late_write(repo, server, tmp_path: Path) -> None:
    publish_snapshot(repo, BASE, "1.0", now=NOW)
    machine = make_machine(tmp_path / "m")
    boot(machine, make_context(server.url), backoff_base=0.01)
    report = shutdown(machine, after_readonly=lambda root: root.write("/late", b"x"))
    assert report.order == ["rw_readonly", "union_close", "root_release"]
    assert report.violations == 1
    assert not (machine.scratch.overlay_dir / "late").exists()
    assert not machine.is_booted
