import pytest

from protoexplain import synthetic
from protoexplain.cli import main as cli_main


@pytest.fixture(scope="session")
def dataset_manifest(tmp_path_factory):
    """The committed synthetic fixture: deterministic for the frozen seed."""
    root = tmp_path_factory.mktemp("synthetic")
    return synthetic.generate(root)


@pytest.fixture(scope="session")
def fitted_workspace(dataset_manifest, tmp_path_factory):
    """An output directory with banks fitted at every depth (2, 3, 4)."""
    out = tmp_path_factory.mktemp("artifacts")
    code = cli_main([
        "fit",
        "--manifest", str(dataset_manifest),
        "--out", str(out),
        "--depth-from", "2",
        "--k-per-class", "2",
        "--seed", "0",
    ])
    assert code == 0
    return out
