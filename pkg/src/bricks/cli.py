"""Command-line interface.

Exit codes: 0 success, 1 operational failure, 2 usage or configuration
problem, 3 authentication failure. Machine-readable output (asset rows,
``--json``) goes to stdout; diagnostics and progress go to stderr. Prompts
appear only when a TTY is missing required configure fields.
"""

from __future__ import annotations

import argparse
import getpass
import json
import logging
import sys
from pathlib import Path

from . import config as config_mod
from . import installer, pipeline
from .errors import (
    AuthError,
    BricksError,
    ConfigError,
    CycleError,
    DuplicateOutputError,
    MalformedRefError,
    NotConfiguredError,
    ParseError,
    StageFailedError,
)
from .model import parse_brick_ref, parse_lockfile, parse_manifest
from .registry import RegistryClient, RegistryEndpoint
from .store import ContentStore

log = logging.getLogger("bricks")

_USAGE_ERRORS = (
    ConfigError,
    ParseError,
    CycleError,
    DuplicateOutputError,
    MalformedRefError,
    NotConfiguredError,
)


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--library", help="library directory (overrides env/config)")
    common.add_argument("--registry", help="registry base URL")
    common.add_argument("--token", help="registry bearer token")
    common.add_argument("--parallel", help="parallel blob fetch streams")
    common.add_argument("--default-org", help="org assumed for bare brick names")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(
        prog="bricks",
        description="Install, build, and publish commit-pinned data packages.",
    )
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser(
        "configure", parents=[common], help="write the config file, create the library"
    )
    p.add_argument("--check", action="store_true", help="validate the token against the registry")
    p.add_argument("--show", action="store_true", help="print resolved settings and sources")

    p = sub.add_parser("install", parents=[common], help="install one brick into the library")
    p.add_argument("ref", help="name, org/name, either with @commit, or a URL")

    p = sub.add_parser("assets", parents=[common], help="list an installed brick's assets")
    p.add_argument("ref")
    p.add_argument("--json", action="store_true", dest="as_json")

    sub.add_parser("init", parents=[common], help="create .bb/dependencies.txt here")

    p = sub.add_parser("add", parents=[common], help="pin a dependency at its resolved commit")
    p.add_argument("ref")

    sub.add_parser(
        "pull", parents=[common], help="install every pinned dependency not yet present"
    )

    p = sub.add_parser("repro", parents=[common], help="run stale pipeline stages in this brick")
    p.add_argument("--dry-run", action="store_true")
    p.add_argument("--json", action="store_true", dest="as_json")
    p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("push", parents=[common], help="publish this brick's snapshot and payload")
    p.add_argument("--org", help="destination org (default: configured default org)")
    p.add_argument("--name", help="destination name (default: directory name)")

    p = sub.add_parser("status", parents=[common], help="show the stage plan for this brick")
    p.add_argument("--json", action="store_true", dest="as_json")

    cache = sub.add_parser("cache", help="cache maintenance").add_subparsers(
        dest="cache_command"
    )
    cache.add_parser("verify", parents=[common], help="re-hash every cached blob")
    p = cache.add_parser("gc", parents=[common], help="list unreferenced blobs")
    p.add_argument("--dry-run", action="store_true")
    return parser


def _load_config(args) -> config_mod.Config:
    return config_mod.load_config(
        {
            "library": args.library,
            "registry": args.registry,
            "token": args.token,
            "parallel": args.parallel,
            "default_org": args.default_org,
        }
    )


def _require_library(cfg) -> installer.LibraryLayout:
    if cfg.library is None:
        raise NotConfiguredError("no library configured; run: bricks configure")
    return installer.LibraryLayout(cfg.library)


def _require_client(cfg) -> RegistryClient:
    if cfg.registry is None:
        raise NotConfiguredError("no registry configured; run: bricks configure")
    if not cfg.token:
        raise AuthError("no registry token configured; run: bricks configure")
    return RegistryClient(
        RegistryEndpoint(cfg.registry, cfg.token), parallel=cfg.parallel
    )


def _workdir_pipeline(workdir: Path):
    manifest_path = workdir / pipeline.MANIFEST_NAME
    if not manifest_path.is_file():
        raise ConfigError(f"no {pipeline.MANIFEST_NAME} in {workdir}")
    manifest = parse_manifest(manifest_path.read_bytes())
    lock_path = workdir / pipeline.LOCKFILE_NAME
    lock = parse_lockfile(lock_path.read_bytes()) if lock_path.is_file() else None
    return manifest, lock


def _print_plan(statuses, as_json: bool) -> None:
    if as_json:
        payload = {
            s.name: {
                "state": s.state,
                "reasons": [
                    {"path": r.path, "recorded": r.recorded, "current": r.current}
                    for r in s.reasons
                ],
            }
            for s in statuses
        }
        print(json.dumps(payload, indent=2))
        return
    width = max((len(s.name) for s in statuses), default=5)
    for s in statuses:
        first = s.reasons[0].path if s.reasons else ""
        print(f"{s.name:<{width}}  {s.state:<8}  {first}")


# ---------------------------------------------------------------------------
# Commands


def _cmd_configure(args) -> int:
    if args.show:
        cfg = _load_config(args)
        for row in cfg.describe():
            print(row)
        return 0

    current = config_mod.read_config_file(config_mod.config_path())
    fields = {
        "library": args.library,
        "registry": args.registry,
        "token": args.token,
        "parallel": args.parallel,
        "default_org": args.default_org,
    }
    interactive = sys.stdin.isatty()
    for key in ("library", "registry", "token"):
        if fields[key] is None and key not in current:
            if not interactive:
                raise ConfigError(f"missing --{key} and no existing value")
            prompt = f"{key}: "
            fields[key] = getpass.getpass(prompt) if key == "token" else input(prompt)
    merged = dict(current)
    merged.update({k: str(v) for k, v in fields.items() if v is not None})
    if "library" in merged:
        merged["library"] = str(Path(merged["library"]).absolute())
    if "parallel" in merged:
        config_mod._parse_parallel(merged["parallel"], "flag")
    config_mod.write_config_file(config_mod.config_path(), merged)

    library = installer.LibraryLayout(Path(merged["library"]))
    library.cache.mkdir(parents=True, exist_ok=True)
    log.info("library at %s (cache ready)", library.root)

    if args.check:
        cfg = _load_config(args)
        client = _require_client(cfg)
        try:
            client.list_commits("_", "_")
        except AuthError:
            raise
        except BricksError:
            pass  # any authenticated answer proves the token works
        log.info("token accepted by %s", cfg.registry)
    return 0


def _cmd_install(args) -> int:
    cfg = _load_config(args)
    lib = _require_library(cfg)
    client = _require_client(cfg)
    ref = parse_brick_ref(args.ref, cfg.default_org)
    installer.install(lib, client, ref)
    return 0


def _cmd_assets(args) -> int:
    cfg = _load_config(args)
    lib = _require_library(cfg)
    ref = parse_brick_ref(args.ref, cfg.default_org)
    catalog = installer.assets(lib, ref)
    if args.as_json:
        print(json.dumps(catalog.to_json(), indent=2))
    else:
        for entry in catalog:
            print(f"{entry.name}\t{entry.path}\t{entry.format}")
    return 0


def _cmd_init(_args) -> int:
    path = installer.deps_init(Path.cwd())
    log.info("dependency file ready: %s", path)
    return 0


def _cmd_add(args) -> int:
    cfg = _load_config(args)
    client = _require_client(cfg)
    ref = parse_brick_ref(args.ref, cfg.default_org)
    installer.deps_add(Path.cwd(), client, ref)
    return 0


def _cmd_pull(args) -> int:
    cfg = _load_config(args)
    lib = _require_library(cfg)
    client = _require_client(cfg)
    results = installer.deps_pull(Path.cwd(), lib, client)
    log.info("pulled %d dependencies", len(results))
    return 0


def _cmd_repro(args) -> int:
    workdir = Path.cwd()
    manifest, lock = _workdir_pipeline(workdir)
    if args.dry_run:
        _print_plan(pipeline.plan(workdir, manifest, lock), args.as_json)
        return 0
    report = pipeline.repro(workdir, manifest, lock, jobs=args.jobs)
    log.info(
        "repro complete: %d executed, %d skipped",
        len(report.executed),
        len(report.skipped),
    )
    return 0


def _cmd_status(args) -> int:
    workdir = Path.cwd()
    manifest, lock = _workdir_pipeline(workdir)
    _print_plan(pipeline.plan(workdir, manifest, lock), args.as_json)
    return 0


def _cmd_push(args) -> int:
    cfg = _load_config(args)
    lib = _require_library(cfg)
    client = _require_client(cfg)
    workdir = Path.cwd()
    _, lock = _workdir_pipeline(workdir)
    if lock is None:
        raise ConfigError("no brick.lock here; run: bricks repro")
    store = ContentStore(lib.cache)
    store.ensure()
    pipeline.commit_outputs(workdir, lock, store)
    org = args.org or cfg.default_org
    name = args.name or workdir.name
    commit = client.push_brick(workdir, lock, store, org=org, name=name)
    log.info("pushed %s/%s@%s", org, name, commit)
    return 0


def _cmd_cache(args) -> int:
    cfg = _load_config(args)
    lib = _require_library(cfg)
    store = ContentStore(lib.cache)
    if args.cache_command == "verify":
        report = store.verify()
        if report.ok:
            log.info("cache verified: %d blobs intact", report.checked)
            return 0
        for path, problem in report.corrupt:
            log.error("corrupt: %s (%s)", path, problem)
        return 1
    if args.cache_command == "gc":
        if not args.dry_run:
            raise ConfigError("only 'cache gc --dry-run' is supported")
        referenced = installer.referenced_digests(lib)
        for digest in store.unreferenced(referenced):
            print(digest)
        return 0
    raise ConfigError("usage: bricks cache {verify | gc --dry-run}")


_COMMANDS = {
    "configure": _cmd_configure,
    "install": _cmd_install,
    "assets": _cmd_assets,
    "init": _cmd_init,
    "add": _cmd_add,
    "pull": _cmd_pull,
    "repro": _cmd_repro,
    "status": _cmd_status,
    "push": _cmd_push,
    "cache": _cmd_cache,
}


def _setup_logging(verbose: bool) -> None:
    root = logging.getLogger("bricks")
    for handler in list(root.handlers):
        root.removeHandler(handler)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(message)s"))
    root.addHandler(handler)
    root.setLevel(logging.DEBUG if verbose else logging.INFO)


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    _setup_logging(getattr(args, "verbose", False))
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    if args.command == "cache" and getattr(args, "cache_command", None) is None:
        print("usage: bricks cache {verify | gc --dry-run}", file=sys.stderr)
        return 2
    try:
        return _COMMANDS[args.command](args)
    except AuthError as exc:
        log.error("auth error: %s", exc)
        return 3
    except _USAGE_ERRORS as exc:
        log.error("%s", exc)
        return 2
    except StageFailedError as exc:
        log.error("%s", exc)
        return 1
    except BricksError as exc:
        log.error("%s", exc)
        return 1
    except OSError as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
