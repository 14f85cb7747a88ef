"""Walk a machine through its life: publish, boot, edit, upgrade, roll back.

Run with ``python3 demos/lifecycle.py``; everything lives in a temp directory.
"""

from __future__ import annotations

import tempfile
from pathlib import Path

from ucvm.bootstrap import Context, MachineState, ScratchDisk, VolumeProbe, boot, discover_scratch, shutdown
from ucvm.publisher import publish_snapshot, set_tag, snapshot_digest
from ucvm.repo_core import Repository
from ucvm.transport import PINFILE, serve_in_thread
from ucvm.updater import unpin_snapshot


def tree(release: int) -> dict[str, object]:
    files: dict[str, object] = {
        "/bin/sh": b"#!/bin/sh\n",
        "/etc/release": f"demo OS {release}\n".encode(),
        "/etc/resolv.conf": b"nameserver 10.0.0.1\n",
        "/usr/bin/gcc": f"gcc build {release}\n".encode(),
        "/etc/passwd": b"root:x:0:0:root:/root:/bin/sh\n",
        "/etc/group": b"root:x:0:\nwheel:x:10:\n",
        PINFILE: b"/bin/sh\n/etc\n",
    }
    files.update({f"/usr/share/doc/page{i}": bytes([i]) * 20_000 for i in range(40)})
    if release >= 2:
        files["/etc/passwd"] += b"ntp:x:38:38::/:/sbin/nologin\n"
        files["/etc/group"] += b"ntp:x:38:\n"
    return files


def banner(text: str) -> None:
    print(f"\n== {text}")


def reboot(machine: MachineState, ctx: Context) -> MachineState:
    shutdown(machine)
    fresh = MachineState(ScratchDisk(machine.scratch.root_path))
    boot(fresh, ctx, backoff_base=0.05)
    return fresh


def main() -> None:
    with tempfile.TemporaryDirectory() as tmp:
        work = Path(tmp)
        repo = Repository.init(work / "repo", "demo")
        digests = {}
        for rel in (1, 2):
            m = publish_snapshot(repo, tree(rel), f"{rel}.0", "production" if rel == 1 else "testing")
            digests[rel] = snapshot_digest(repo, m)
            print(f"published revision {m.revision} ({m.snapshot_name})")

        with serve_in_thread(repo) as server:
            ctx = Context(server.url, "demo", "production")

            banner("first boot on an empty volume")
            scratch = discover_scratch([VolumeProbe(work / "disk0")])
            machine = MachineState(scratch)
            root = boot(machine, ctx, backoff_base=0.05)
            print(machine.last_boot_report.to_text(), end="")
            print("release:", root.read("/etc/release").decode().strip())

            banner("local changes go to the overlay")
            root.write("/etc/resolv.conf", b"nameserver 192.168.1.1\n")
            root.write("/usr/bin/gcc", b"my own gcc\n")
            root.write("/etc/passwd", root.read("/etc/passwd") + b"dbus:x:38:38::/:/sbin/nologin\n")
            print("overlay:", sorted(p.name for p in (machine.scratch.overlay_dir / "etc").iterdir()))

            banner("production moves on, but the machine stays put")
            set_tag(repo, "production", 2)
            machine = reboot(machine, ctx)
            print("mounted revision:", machine.mounted_revision)

            banner("unpin and reboot to follow production")
            unpin_snapshot(machine)
            machine = reboot(machine, ctx)
            root = machine.booted
            print("mounted revision:", machine.mounted_revision)
            print(machine.last_merge_report.to_text(), end="")
            print("resolv.conf:", root.read("/etc/resolv.conf").decode().strip())
            print("gcc:", root.read("/usr/bin/gcc").decode().strip())
            print("passwd:", root.read("/etc/passwd").decode().split())
            shutdown(machine)

            banner("time travel to 1.0 on a second volume")
            other = MachineState(discover_scratch([VolumeProbe(work / "disk1")]))
            root = boot(other, Context(server.url, "demo", "1.0"), backoff_base=0.05)
            print("digest matches revision 1:", root.digest() == digests[1])
            report = shutdown(other)
            print(report.to_text(), end="")


if __name__ == "__main__":
    main()
