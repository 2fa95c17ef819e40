import hashlib
import random

import pytest

from mdtp.testbed import ReplicaProfile, TestbedSpec, start_testbed

MIB = 1024 * 1024


def make_file(path, size, seed=0):
    rng = random.Random(seed)
    with open(path, "wb") as fh:
        remaining = size
        while remaining > 0:
            block = rng.randbytes(min(1 << 20, remaining))
            fh.write(block)
            remaining -= len(block)
    return path


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


@pytest.fixture
def source_file(tmp_path):
    """A 3 MiB pseudo-random source file."""
    return make_file(tmp_path / "source.bin", 3 * MIB + 517, seed=1)


@pytest.fixture
def testbed_factory(tmp_path):
    """Start testbeds that are torn down at test exit.

    factory(profiles, source=...) -> Testbed
    """
    beds = []

    def factory(profiles, source):
        spec = TestbedSpec(source_path=str(source), profiles=tuple(profiles))
        tb = start_testbed(spec)
        beds.append(tb)
        return tb

    yield factory
    for tb in beds:
        tb.stop()


def uniform_profiles(n, **kwargs):
    return [ReplicaProfile(replica_id=f"r{i + 1}", **kwargs) for i in range(n)]
