import numpy as np
import pytest

from hoarefine import Volume, fuse_labels, generate_phantom, refine_full


@pytest.fixture(scope="session")
def phantom0():
    """One shared rule-consistent phantom (seed 0)."""
    return generate_phantom(0)


@pytest.fixture(scope="session")
def refined0(phantom0):
    vol, lms = phantom0
    return refine_full(fuse_labels(vol), lms)


def make_volume(data, spacing=1.0, origin=0.0, taxonomy=None):
    """Small axis-aligned volume helper for hand-built cases."""
    data = np.asarray(data)
    sp = np.broadcast_to(np.asarray(spacing, dtype=np.float64), 3)
    affine = np.diag([sp[0], sp[1], sp[2], 1.0])
    affine[:3, 3] = np.broadcast_to(np.asarray(origin, dtype=np.float64), 3)
    return Volume(data, affine, taxonomy=taxonomy)
