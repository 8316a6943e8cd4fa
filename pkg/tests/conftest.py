import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "ci", max_examples=60, deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("ci")


@pytest.fixture
def default_cfg():
    from vmsim.config import default_config

    return default_config()


def small_memhier(l1_lat=4, l2_lat=12, llc_lat=40, dram_lat=200, phys_bytes=1 << 30):
    from vmsim.memhier import MemoryHierarchy

    cfg = {
        "l1": {"size": 32 * 1024, "assoc": 8, "latency": l1_lat},
        "l2": {"size": 256 * 1024, "assoc": 8, "latency": l2_lat},
        "llc": {"size": 2 * 1024 * 1024, "assoc": 16, "latency": llc_lat},
        "dram": {"latency": dram_lat},
    }
    return MemoryHierarchy(cfg, phys_bytes)
