"""The ``ucvm`` command: publish, serve, boot, exec, update, shutdown, tag, fsck.

Machine-readable output is ``key=value`` lines on stdout; diagnostics go to
stderr. Exit status is 0 on success, 1 for user or environment errors and 2
for broken invariants or internal failures.

Every subcommand and flag is declared once in :data:`COMMANDS`; the argparse
tree (and therefore ``--help``) is generated from that table.
"""

from __future__ import annotations

import argparse
import contextlib
import io
import logging
import os
import sys
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

from . import bootstrap as bs
from .errors import NotBooted, UcvmError, UnknownSubcommand, UsageError
from .publisher import MetaPackage, PackageUniverse, publish_snapshot, set_tag, snapshot_digest
from .repo_core import Kind, Repository, parse_key_values
from .transport import RepoServer, parse_listen
from .updater import stage_ucvm_update, unpin_snapshot

log = logging.getLogger("ucvm")


@dataclass
class CommandResult:
    exit_code: int
    stdout: str = ""
    stderr: str = ""


# ---------------------------------------------------------------------------
# Command table
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Flag:
    name: str
    help: str
    required: bool = False
    kwargs: dict = field(default_factory=dict)

    @property
    def dest(self) -> str:
        return self.name.lstrip("-").replace("-", "_")


@dataclass(frozen=True)
class Command:
    help: str
    flags: tuple[Flag, ...] = ()
    positionals: tuple[tuple[str, dict], ...] = ()
    subcommands: dict[str, Command] = field(default_factory=dict)


REPO = Flag("--repo", "repository directory", required=True)
MACHINE = Flag("--machine", "machine directory", required=True)
BACKOFF = Flag("--backoff", "base delay in seconds between connection retries", kwargs={"type": float})
PROXY = Flag("--proxy", "HTTP proxy URL (fallback: UCVM_PROXY)")

COMMANDS: dict[str, Command] = {
    "publish": Command(
        "publish a directory tree as the next snapshot",
        (
            REPO,
            Flag("--tree", "source directory", required=True),
            Flag("--name", "snapshot name", required=True),
            Flag("--tag", "tag to move to the new revision"),
            Flag("--repo-name", "repository name for a new repository"),
            Flag("--meta", "meta-package file to validate before publishing"),
            Flag("--universe", "package universe file for --meta"),
        ),
    ),
    "tag": Command(
        "point a tag at a revision",
        (REPO, Flag("--tag", "tag name", required=True), Flag("--revision", "revision number", True, {"type": int})),
    ),
    "tags": Command("list tags and snapshot names", (REPO,)),
    "serve": Command(
        "serve a repository over HTTP until interrupted",
        (REPO, Flag("--listen", "address as host:port", kwargs={"default": None})),
    ),
    "fsck": Command("re-hash every stored object", (REPO,)),
    "boot": Command(
        "boot a simulated machine",
        (
            MACHINE,
            Flag("--user-data", "user data file or http(s) URL"),
            Flag(
                "--volume",
                "attached volume as PATH[,empty][,label=X]; repeatable",
                kwargs={"action": "append"},
            ),
            PROXY,
            BACKOFF,
        ),
    ),
    "exec": Command(
        "run a file operation inside a booted machine",
        (MACHINE, PROXY, BACKOFF),
        positionals=(
            ("verb", {"choices": ["read", "ls", "write", "rm", "stat", "mkdir"], "help": "operation"}),
            ("path", {"help": "path in the union view"}),
            ("data", {"nargs": "?", "help": "content for write (default: stdin)"}),
        ),
    ),
    "update": Command(
        "manage image updates and snapshot pinning",
        subcommands={
            "stage": Command(
                "stage a new image for the next boot",
                (
                    MACHINE,
                    Flag("--version", "new image version", required=True),
                    Flag("--payload", "image file", required=True),
                ),
            ),
            "unpin": Command("release the snapshot pin so the next boot follows the selector", (MACHINE,)),
        },
    ),
    "shutdown": Command("shut a booted machine down", (MACHINE, PROXY, BACKOFF)),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        if "invalid choice" in message:
            raise UnknownSubcommand(f"{self.prog}: {message}")
        raise UsageError(f"{self.prog}: {message}")


def _add_command(sub: argparse._SubParsersAction, name: str, cmd: Command, path: tuple[str, ...]) -> None:
    p = sub.add_parser(name, help=cmd.help, description=cmd.help)
    p.set_defaults(_command=path + (name,), _flags=cmd.flags)
    for flag in cmd.flags:
        text = flag.help + (" (required)" if flag.required else "")
        p.add_argument(flag.name, dest=flag.dest, help=text, **flag.kwargs)
    for pname, kwargs in cmd.positionals:
        p.add_argument(pname, **kwargs)
    if cmd.subcommands:
        inner = p.add_subparsers(title="subcommands", metavar="COMMAND")
        for sname, scmd in cmd.subcommands.items():
            _add_command(inner, sname, scmd, path + (name,))


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ucvm", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="key=value file supplying defaults for any flag")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(title="subcommands", metavar="COMMAND", parser_class=_Parser)
    for name, cmd in COMMANDS.items():
        _add_command(sub, name, cmd, ())
    return parser


def _apply_config(args: argparse.Namespace) -> None:
    if args.config:
        for key, value in parse_key_values(Path(args.config).read_text()):
            dest = key.replace("-", "_")
            if getattr(args, dest, "absent") is None:
                setattr(args, dest, value)
    for flag in getattr(args, "_flags", ()):
        if flag.required and getattr(args, flag.dest) is None:
            raise UsageError(f"{flag.name} is required")
        conv = flag.kwargs.get("type")
        value = getattr(args, flag.dest)
        if flag.kwargs.get("action") == "append" and isinstance(value, str):
            setattr(args, flag.dest, value.split())
        elif conv is not None and isinstance(value, str):
            setattr(args, flag.dest, conv(value))


# ---------------------------------------------------------------------------
# Repository commands
# ---------------------------------------------------------------------------


def _out(key: str, value: object) -> None:
    print(f"{key}={value}")


def cmd_publish(args: argparse.Namespace) -> int:
    repo = Repository(args.repo, name=args.repo_name)
    meta = MetaPackage.parse(Path(args.meta).read_text()) if args.meta else None
    universe = PackageUniverse.parse(Path(args.universe).read_text()) if args.universe else None
    tree = Path(args.tree)
    if not tree.is_dir():
        raise UsageError(f"{tree} is not a directory")
    manifest = publish_snapshot(repo, tree, args.name, args.tag, meta=meta, universe=universe)
    _out("revision", manifest.revision)
    _out("snapshot_name", manifest.snapshot_name)
    _out("root_catalog", manifest.root_catalog)
    _out("tree_digest", snapshot_digest(repo, manifest))
    return 0


def cmd_tag(args: argparse.Namespace) -> int:
    set_tag(Repository(args.repo), args.tag, args.revision)
    _out("tag", args.tag)
    _out("revision", args.revision)
    return 0


def cmd_tags(args: argparse.Namespace) -> int:
    tags = Repository(args.repo).load_tags()
    for name, rev in sorted(tags.tags.items()):
        _out(f"tag.{name}", rev)
    for name, rev in sorted(tags.snapshots.items(), key=lambda kv: kv[1]):
        _out(f"snapshot.{name}", rev)
    return 0


def cmd_fsck(args: argparse.Namespace) -> int:
    repo = Repository(args.repo)
    bad = repo.store.verify()
    _out("objects", len(repo.store))
    _out("corrupt", len(bad))
    for oid in bad:
        print(f"error: object {oid} fails verification", file=sys.stderr)
    return 2 if bad else 0


def cmd_serve(args: argparse.Namespace) -> int:
    repo = Repository(args.repo)
    host, port = parse_listen(args.listen or "127.0.0.1:8000")
    server = RepoServer(repo, (host, port))
    _out("url", server.url)
    sys.stdout.flush()
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0


# ---------------------------------------------------------------------------
# Machine commands
# ---------------------------------------------------------------------------

MACHINE_CONF = "machine.conf"


def parse_volume(spec: str) -> bs.VolumeProbe:
    path, *opts = spec.split(",")
    probe = bs.VolumeProbe(Path(path))
    for opt in opts:
        if opt == "empty":
            probe.empty = True
        elif opt.startswith("label="):
            probe.label = opt[len("label="):]
        else:
            raise UsageError(f"unknown volume option {opt!r}")
    return probe


@dataclass
class MachineConfig:
    user_data: str
    volumes: list[str]

    def save(self, machine_dir: Path) -> None:
        lines = [f"user_data={self.user_data}"] + [f"volume={v}" for v in self.volumes]
        machine_dir.mkdir(parents=True, exist_ok=True)
        (machine_dir / MACHINE_CONF).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, machine_dir: Path) -> MachineConfig:
        try:
            text = (machine_dir / MACHINE_CONF).read_text()
        except FileNotFoundError:
            raise NotBooted(f"{machine_dir} has never been booted") from None
        user_data, volumes = "", []
        for line in text.splitlines():
            key, _, value = line.partition("=")
            if key == "user_data":
                user_data = value
            elif key == "volume":
                volumes.append(value)
        return cls(user_data, volumes)


def _absolute_volume(spec: str) -> str:
    path, sep, opts = spec.partition(",")
    return str(Path(path).resolve()) + sep + opts


def _machine(machine_dir: Path, volumes: list[str]) -> bs.MachineState:
    return bs.MachineState(bs.discover_scratch([parse_volume(v) for v in volumes]))


def _context(args: argparse.Namespace, user_data: str) -> bs.Context:
    ctx = bs.parse_user_data(bs.read_user_data(user_data))
    proxy = getattr(args, "proxy", None)
    if proxy:
        ctx.proxy = proxy
    elif not ctx.proxy and os.environ.get("UCVM_PROXY"):
        ctx.proxy = os.environ["UCVM_PROXY"]
    return ctx


def _backoff(args: argparse.Namespace) -> float:
    return args.backoff if getattr(args, "backoff", None) is not None else 0.5


def cmd_boot(args: argparse.Namespace) -> int:
    machine_dir = Path(args.machine)
    previous = MachineConfig.load(machine_dir) if (machine_dir / MACHINE_CONF).exists() else None
    user_data = args.user_data or (previous.user_data if previous else None)
    if not user_data:
        raise UsageError("--user-data is required on first boot")
    volumes = args.volume or (previous.volumes if previous else [str(machine_dir / "disk0")])
    volumes = [_absolute_volume(v) for v in volumes]
    if not args.volume and previous is None:
        Path(volumes[0]).mkdir(parents=True, exist_ok=True)
    if user_data.startswith(("http://", "https://")) or os.path.isabs(user_data):
        stored = user_data
    else:
        stored = str(Path(user_data).resolve())
    ctx = _context(args, user_data)
    machine = _machine(machine_dir, volumes)
    if machine.is_booted:
        raise UcvmError(f"{machine_dir} is already booted; shut it down first")
    MachineConfig(stored, volumes).save(machine_dir)
    stack = bs.boot(machine, ctx, backoff_base=_backoff(args))
    try:
        sys.stdout.write(machine.last_boot_report.to_text())  # type: ignore[union-attr]
        if machine.last_merge_report is not None:
            sys.stdout.write(machine.last_merge_report.to_text())
    finally:
        stack.union.close()
    return 0


@contextlib.contextmanager
def _attached(args: argparse.Namespace):  # noqa: ANN202
    machine_dir = Path(args.machine)
    conf = MachineConfig.load(machine_dir)
    machine = _machine(machine_dir, conf.volumes)
    stack = bs.attach(machine, _context(args, conf.user_data), backoff_base=_backoff(args))
    try:
        yield machine, stack
    finally:
        stack.union.close()


def cmd_exec(args: argparse.Namespace) -> int:
    with _attached(args) as (_, stack):
        verb, path = args.verb, args.path
        if verb == "read":
            sys.stdout.flush()
            out = getattr(sys.stdout, "buffer", None)
            data = stack.read(path)
            if out is not None:
                out.write(data)
                out.flush()
            else:
                sys.stdout.write(data.decode("utf-8", "replace"))
        elif verb == "ls":
            for name in stack.listdir(path):
                print(name)
        elif verb == "write":
            data = args.data.encode() if args.data is not None else sys.stdin.buffer.read()
            stack.write(path, data)
            _out("written", len(data))
        elif verb == "rm":
            if stack.stat(path).kind is Kind.DIR:
                stack.rmdir(path)
            else:
                stack.unlink(path)
            _out("removed", path)
        elif verb == "mkdir":
            stack.mkdir(path)
            _out("created", path)
        else:
            st = stack.stat(path)
            _out("kind", {Kind.FILE: "file", Kind.DIR: "dir", Kind.SYMLINK: "symlink"}[st.kind])
            _out("mode", f"{st.mode:o}")
            _out("uid", st.uid)
            _out("gid", st.gid)
            _out("size", st.size)
            _out("layer", st.layer.name.lower())
    return 0


def cmd_shutdown(args: argparse.Namespace) -> int:
    machine_dir = Path(args.machine)
    conf = MachineConfig.load(machine_dir)
    machine = _machine(machine_dir, conf.volumes)
    if machine.is_booted:
        bs.attach(machine, _context(args, conf.user_data), backoff_base=_backoff(args))
    report = bs.shutdown(machine)
    sys.stdout.write(report.to_text())
    return 0


def _machine_for_update(args: argparse.Namespace) -> bs.MachineState:
    machine_dir = Path(args.machine)
    try:
        volumes = MachineConfig.load(machine_dir).volumes
    except NotBooted:
        volumes = [str(machine_dir / "disk0")]
        Path(volumes[0]).mkdir(parents=True, exist_ok=True)
    return _machine(machine_dir, volumes)


def cmd_update_stage(args: argparse.Namespace) -> int:
    machine = _machine_for_update(args)
    staged = stage_ucvm_update(machine.scratch, args.version, Path(args.payload).read_bytes())
    _out("staged_version", staged.new_ucvm_version)
    _out("staged_at", staged.staged_at.isoformat())
    return 0


def cmd_update_unpin(args: argparse.Namespace) -> int:
    machine = _machine_for_update(args)
    previous = machine.pinned_revision
    unpin_snapshot(machine)
    _out("unpinned_revision", previous)
    return 0


HANDLERS: dict[tuple[str, ...], Callable[[argparse.Namespace], int]] = {
    ("publish",): cmd_publish,
    ("tag",): cmd_tag,
    ("tags",): cmd_tags,
    ("serve",): cmd_serve,
    ("fsck",): cmd_fsck,
    ("boot",): cmd_boot,
    ("exec",): cmd_exec,
    ("shutdown",): cmd_shutdown,
    ("update", "stage"): cmd_update_stage,
    ("update", "unpin"): cmd_update_unpin,
}


# ---------------------------------------------------------------------------
# Entry points
# ---------------------------------------------------------------------------


def _dispatch(argv: Sequence[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(list(argv))
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    command = getattr(args, "_command", None)
    if command not in HANDLERS:
        raise UnknownSubcommand("missing subcommand; see ucvm --help")
    _apply_config(args)
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    return HANDLERS[command](args)


def _guarded(argv: Sequence[str]) -> int:
    try:
        return _dispatch(argv)
    except UcvmError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


class _TextCapture(io.StringIO):
    """StringIO with a ``buffer`` so binary writes land in the same text."""

    def __init__(self) -> None:
        super().__init__()
        self.buffer = _BinarySink(self)


class _BinarySink:
    def __init__(self, text: io.StringIO):
        self._text = text

    def write(self, data: bytes) -> int:
        self._text.write(data.decode("utf-8", "replace"))
        return len(data)

    def flush(self) -> None:
        pass


def run(argv: Sequence[str]) -> CommandResult:
    """Run one command in-process, capturing its output."""
    out, err = _TextCapture(), io.StringIO()
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        code = _guarded(argv)
    return CommandResult(code, out.getvalue(), err.getvalue())


def main(argv: Sequence[str] | None = None) -> int:
    return _guarded(sys.argv[1:] if argv is None else argv)


if __name__ == "__main__":
    raise SystemExit(main())
