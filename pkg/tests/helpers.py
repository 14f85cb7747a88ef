"""Small builders shared by the test modules."""

from __future__ import annotations

import os
from pathlib import Path

from ucvm.bootstrap import Context, MachineState, ScratchDisk


def make_machine(root: Path) -> MachineState:
    disk = root / "disk0"
    disk.mkdir(parents=True, exist_ok=True)
    scratch = ScratchDisk(disk)
    scratch.initialize()
    return MachineState(scratch)


def make_context(url: str, selector: str = "newest", **kw: object) -> Context:
    return Context(repo_url=url, repo_name="os", snapshot_selector=selector, **kw)  # type: ignore[arg-type]


def host_snapshot(root: Path) -> dict[str, object]:
    """Everything under *root* as path -> bytes / link target / None (dir)."""
    out: dict[str, object] = {}
    for dirpath, dirnames, filenames in os.walk(root):
        for d in dirnames:
            p = Path(dirpath, d)
            out[str(p.relative_to(root))] = ("link", os.readlink(p)) if p.is_symlink() else None
        for f in filenames:
            p = Path(dirpath, f)
            out[str(p.relative_to(root))] = ("link", os.readlink(p)) if p.is_symlink() else p.read_bytes()
    return out
