import sys
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def desk_dataset(tmp_path_factory):
    """Three models per category, so every split (and both val protocols) is populated."""
    from recgan import dataset, shapes

    root = tmp_path_factory.mktemp("desk")
    shapes.write_library(root / "meshes", per_category=3, seed=7, categories=("chair", "blob"))
    meshes, _ = dataset.load_mesh_dir(root / "meshes")
    pairs, manifest, skipped = dataset.synth_pairs(meshes, dataset.VIEW_PROFILES["desk"], seed=0)
    dataset.write_dataset(pairs, manifest, root / "data")
    return root / "data", manifest, pairs


def pytest_terminal_summary(terminalreporter):
    # acceptance tests attach their verdict line as a user property
    lines = [value for reports in terminalreporter.stats.values() for r in reports
             if getattr(r, "when", None) == "call"
             for key, value in r.user_properties if key == "acceptance"]
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[0][1:])):
            terminalreporter.write_line(line)
