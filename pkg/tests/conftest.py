import pytest

from mvvt.plantgen import RenderConfig, archetype_specs, generate_crop


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """Radish, 3 plants x 6 days at 32x32: (root, manifest)."""
    root = tmp_path_factory.mktemp("small")
    manifest = generate_crop(archetype_specs("radish", plants=3, seed=0), range(1, 7),
                             RenderConfig(height=32, width=32), root)
    return root, manifest


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
