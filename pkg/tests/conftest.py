import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "ci", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("ci")

# Filled in by tests/test_acceptance.py; one "<name>: PASS|FAIL" line per
# acceptance criterion is printed in the terminal summary.
ACCEPTANCE_RESULTS: dict[str, str] = {}


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, status in ACCEPTANCE_RESULTS.items():
        terminalreporter.write_line(f"{name}: {status}")


@pytest.fixture
def tmp_corpus(tmp_path):
    """Small on-disk fixture corpus (manifest plus PNG masks)."""
    from segforge import dataio, fixtures

    manifest = fixtures.write_fixture_corpus(tmp_path / "corpus", count=3, size=128, seed=11)
    return manifest, dataio.read_manifest(manifest)
