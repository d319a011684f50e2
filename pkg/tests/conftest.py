import pytest

from sanet.data import Domain, build_manifest
from sanet.fixtures import synthesize


def make_manifests(root, n_frozen=6, n_permanent=6, seed=0, size=64):
    dirs = synthesize(root / "fixtures", seed=seed, n_frozen=n_frozen, n_permanent=n_permanent, size=size)
    frozen = build_manifest([dirs["frozen"]], Domain.FROZEN, root / "patches" / "frozen",
                            seed=seed, patch_size=size)
    permanent = build_manifest([dirs["permanent"]], Domain.PERMANENT, root / "patches" / "permanent",
                               seed=seed, patch_size=size)
    return frozen, permanent


@pytest.fixture(scope="session")
def small_manifests(tmp_path_factory):
    return make_manifests(tmp_path_factory.mktemp("small"))
