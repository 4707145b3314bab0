from __future__ import annotations

import pytest

from bricks.installer import LibraryLayout
from bricks.registry import RegistryClient, RegistryEndpoint
from bricks.server import RegistryServer
from bricks.store import ContentStore

# A recognizable token so leak checks can grep captured output for it.
TEST_TOKEN = "tok-f4a9c0d1e2b3"


@pytest.fixture
def registry_server(tmp_path):
    server = RegistryServer(tmp_path / "registry", TEST_TOKEN).start()
    yield server
    server.stop()


@pytest.fixture
def client(registry_server):
    return RegistryClient(
        RegistryEndpoint(registry_server.base_url, TEST_TOKEN),
        retry_delays=(0.01, 0.02, 0.04),
    )


@pytest.fixture
def library(tmp_path):
    lib = LibraryLayout(tmp_path / "library")
    lib.cache.mkdir(parents=True)
    return lib


@pytest.fixture
def dev_store(tmp_path):
    store = ContentStore(tmp_path / "devcache")
    store.ensure()
    return store


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One pass/fail line per acceptance criterion at the end of the run."""
    lines = []
    for outcome, label in (("passed", "PASS"), ("failed", "FAIL"), ("error", "FAIL")):
        for report in terminalreporter.stats.get(outcome, []):
            nodeid = getattr(report, "nodeid", "")
            if "test_acceptance.py" in nodeid:
                name = nodeid.split("::")[-1]
                lines.append((name, label))
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for name, label in sorted(lines):
        terminalreporter.write_line(f"[{label}] {name}")
