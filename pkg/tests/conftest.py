import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

SMALL_GENERATE_ARGS = [
    "--feature-width", "16",
    "--prototypes", "12",
    "--classes", "4",
    "--parts", "8",
    "--patches-per-part", "24",
    "--entangled", "2",
]


@pytest.fixture(scope="session")
def small_bundle_dir(tmp_path_factory):
    """A tiny annotated synthetic bundle shared across tests (read-only)."""
    from protosplit.cli import main

    out = tmp_path_factory.mktemp("fixture") / "bundle"
    rc = main(["--seed", "5", "generate", "--out", str(out), *SMALL_GENERATE_ARGS])
    assert rc == 0
    return out
