import pytest

from g2g.dataset import make_triple, synthesize_fixture


@pytest.fixture(scope="session")
def fixture_triples():
    """Eight 256x256 synthetic triples."""
    return [make_triple(sat, gt, source_id=f"fx{i}") for i, (sat, gt) in enumerate(synthesize_fixture(8, 256, seed=0))]


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n, title, ok, detail in sorted(results, key=lambda r: r[0]):
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  criterion {n}: {title}: {detail}")
