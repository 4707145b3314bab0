from __future__ import annotations

import json

import pytest

from bricks import cli
from bricks.model import parse_lockfile

from conftest import TEST_TOKEN
from forge import forge_brick, publish_brick, smrt_workdir

ORG = "biobricks-ai"


@pytest.fixture
def env(tmp_path, monkeypatch, registry_server):
    """Isolated config file + library + registry for CLI invocations."""
    monkeypatch.setenv("BRICKS_CONFIG", str(tmp_path / "conf" / "config"))
    for var in ("BRICKS_LIBRARY", "BRICKS_REGISTRY", "BRICKS_TOKEN", "BRICKS_PARALLEL"):
        monkeypatch.delenv(var, raising=False)
    library = tmp_path / "library"
    return {
        "library": library,
        "registry": registry_server.base_url,
        "tmp": tmp_path,
    }


def _configure(env):
    code = cli.main(
        [
            "configure",
            "--library",
            str(env["library"]),
            "--registry",
            env["registry"],
            "--token",
            TEST_TOKEN,
        ]
    )
    assert code == 0


@pytest.fixture
def published_hgnc(tmp_path, client, dev_store):
    brick = forge_brick(
        tmp_path / "hgnc-src", {"hgnc_complete_set.parquet": b"PAR1 hgnc"}
    )
    commit = publish_brick(client, dev_store, brick, org=ORG, name="hgnc")
    return commit


# ---------------------------------------------------------------------------
# configure


def test_configure_creates_library_and_cache(env, capsys):
    _configure(env)
    assert (env["library"] / "cache").is_dir()
    config_text = (env["tmp"] / "conf" / "config").read_text()
    assert f"registry={env['registry']}" in config_text
    # idempotent re-run leaves identical content
    before = (env["tmp"] / "conf" / "config").read_bytes()
    _configure(env)
    assert (env["tmp"] / "conf" / "config").read_bytes() == before


def test_configure_show_redacts_token_and_names_sources(env, monkeypatch, capsys):
    _configure(env)
    monkeypatch.setenv("BRICKS_REGISTRY", "http://env-wins.example")
    assert cli.main(["configure", "--show"]) == 0
    out = capsys.readouterr().out
    assert "token=****" in out
    assert TEST_TOKEN not in out
    assert "registry=http://env-wins.example  [env]" in out
    assert "[file]" in out  # the library row still comes from the file


def test_configure_check_validates_token(env, capsys):
    _configure(env)
    assert cli.main(["configure", "--check"]) == 0
    assert cli.main(["configure", "--check", "--token", "wrong"]) == 3


def test_configure_missing_fields_non_interactive(env):
    assert cli.main(["configure", "--library", str(env["library"])]) == 2


# ---------------------------------------------------------------------------
# install / assets


def test_install_and_assets_flow(env, published_hgnc, capsys):
    _configure(env)
    assert cli.main(["install", "hgnc"]) == 0
    err = capsys.readouterr().err
    assert f"installed {ORG}/hgnc@{published_hgnc} (1/1 blobs fetched)" in err

    assert cli.main(["assets", "hgnc"]) == 0
    captured = capsys.readouterr()
    rows = [line.split("\t") for line in captured.out.strip().splitlines()]
    assert rows[0][0] == "hgnc_complete_set_parquet"
    assert rows[0][1].endswith("brick/hgnc_complete_set.parquet")
    assert rows[0][2] == "parquet"
    assert "hgnc_complete_set_parquet" not in captured.err

    assert cli.main(["assets", "hgnc", "--json"]) == 0
    payload = json.loads(capsys.readouterr().out)
    assert payload["hgnc_complete_set_parquet"]["format"] == "parquet"


def test_install_without_token_exits_3_with_hint(env, capsys):
    # library + registry configured, token absent
    (env["tmp"] / "conf").mkdir(parents=True, exist_ok=True)
    (env["tmp"] / "conf" / "config").write_text(
        f"library={env['library']}\nregistry={env['registry']}\n"
    )
    assert cli.main(["install", "hgnc"]) == 3
    err = capsys.readouterr().err
    assert "configure" in err


def test_install_unknown_brick_exit_1(env, capsys):
    _configure(env)
    assert cli.main(["install", "doesnotexist"]) == 1


def test_install_bad_ref_exit_2(env):
    _configure(env)
    assert cli.main(["install", "a/b@4f0"]) == 2


def test_unknown_command_exits_2(env, capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["frobnicate"])
    assert exc.value.code == 2
    assert cli.main([]) == 2


def test_assets_not_installed_exit_1(env, capsys):
    _configure(env)
    assert cli.main(["assets", "neverheard"]) == 1
    assert "install" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# init / add / pull


def test_dependency_workflow_cli(env, tmp_path, client, dev_store, monkeypatch, capsys):
    _configure(env)
    for name in ("toxrefdb", "chembl"):
        brick = forge_brick(tmp_path / f"dep-{name}", {"d.parquet": name.encode()})
        publish_brick(client, dev_store, brick, org=ORG, name=name)

    project = tmp_path / "project"
    project.mkdir()
    monkeypatch.chdir(project)
    assert cli.main(["init"]) == 0
    assert (project / ".bb" / "dependencies.txt").is_file()
    assert cli.main(["add", "toxrefdb"]) == 0
    assert cli.main(["add", "chembl"]) == 0
    deps_text = (project / ".bb" / "dependencies.txt").read_text()
    assert "toxrefdb" in deps_text and "chembl" in deps_text

    assert cli.main(["pull"]) == 0
    assert "pulled 2 dependencies" in capsys.readouterr().err
    assert (env["library"] / ORG / "toxrefdb").is_dir()
    assert (env["library"] / ORG / "chembl").is_dir()


# ---------------------------------------------------------------------------
# repro / status / push


def test_repro_status_push_cycle(env, tmp_path, monkeypatch, capsys, client):
    _configure(env)
    workdir = smrt_workdir(tmp_path / "smrt")
    monkeypatch.chdir(workdir)
    monkeypatch.delenv("STAGE_RUN_COUNTS", raising=False)

    assert cli.main(["status"]) == 0
    out = capsys.readouterr().out
    assert "stale" in out

    assert cli.main(["repro"]) == 0
    assert (workdir / "brick.lock").is_file()

    assert cli.main(["repro", "--dry-run", "--json"]) == 0
    plan = json.loads(capsys.readouterr().out)
    assert plan["status"]["state"] == "stale"  # empty-deps stage is always due
    assert plan["download"]["state"] == "blocked"

    assert cli.main(["push", "--name", "smrt"]) == 0
    err = capsys.readouterr().err
    assert f"pushed {ORG}/smrt@" in err
    commits = client.list_commits(ORG, "smrt")
    assert len(commits) == 1

    # round-trip: install what we just pushed
    assert cli.main(["install", "smrt"]) == 0
    lock = parse_lockfile((workdir / "brick.lock").read_bytes())
    installed = (
        env["library"] / ORG / "smrt" / commits[0].commit / "brick" / "smrt_dataset.parquet"
    )
    assert installed.read_bytes() == (workdir / "brick" / "smrt_dataset.parquet").read_bytes()
    assert lock.stages["process"].outs[0].hash.digest in str(
        installed.resolve()
    ).replace("/", "")


def test_repro_failure_exit_1(env, tmp_path, monkeypatch):
    workdir = tmp_path / "failing"
    workdir.mkdir()
    (workdir / "brick.yaml").write_text(
        'stages:\n  boom:\n    cmd: "exit 9"\n    outs: ["x.txt"]\n'
    )
    monkeypatch.chdir(workdir)
    assert cli.main(["repro"]) == 1


def test_repro_manifest_error_exit_2(env, tmp_path, monkeypatch):
    workdir = tmp_path / "badmanifest"
    workdir.mkdir()
    (workdir / "brick.yaml").write_text("stages: 5\n")
    monkeypatch.chdir(workdir)
    assert cli.main(["repro"]) == 2
    monkeypatch.chdir(tmp_path)
    assert cli.main(["repro"]) == 2  # missing manifest entirely


# ---------------------------------------------------------------------------
# cache maintenance


def test_cache_verify_and_gc(env, published_hgnc, capsys):
    _configure(env)
    assert cli.main(["install", "hgnc"]) == 0
    capsys.readouterr()
    assert cli.main(["cache", "verify"]) == 0
    assert "intact" in capsys.readouterr().err

    assert cli.main(["cache", "gc", "--dry-run"]) == 0
    assert capsys.readouterr().out.strip() == ""  # nothing unreferenced

    # corrupt one blob: verify fails with exit 1
    import os

    cache = env["library"] / "cache"
    blob = next(p for p in cache.rglob("*") if p.is_file())
    os.chmod(blob, 0o644)
    blob.write_bytes(b"garbage")
    assert cli.main(["cache", "verify"]) == 1

    assert cli.main(["cache", "gc"]) == 2  # only --dry-run supported


def test_token_never_in_diagnostics(env, published_hgnc, capsys):
    _configure(env)
    cli.main(["install", "hgnc"])
    cli.main(["assets", "hgnc"])
    cli.main(["install", "nosuchbrick"])
    cli.main(["install", "hgnc", "--token", "wrong-token-xyz"])
    captured = capsys.readouterr()
    assert TEST_TOKEN not in captured.out
    assert TEST_TOKEN not in captured.err
