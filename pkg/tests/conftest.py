import numpy as np
import pytest

from zmoe.bitfield import Bf16Buffer
from zmoe.profiles import ExecutionProfile

# bit patterns that must never be interpreted numerically
SPECIAL_WORDS = [
    0x7F80,  # +inf
    0xFF80,  # -inf
    0x7FC0,  # quiet NaN
    0x7F81,  # signalling NaN
    0x0001,  # subnormal
    0x8001,  # negative subnormal
    0x0000,
    0x8000,  # negative zero
]


def random_tensor(rng, count):
    return Bf16Buffer(rng.integers(0, 1 << 16, count, dtype=np.uint32).astype("<u2").tobytes())


def special_tensor():
    return Bf16Buffer.from_words(SPECIAL_WORDS)


def make_profile(
    u=1.0,
    c=0.3,
    rho=0.4,
    shards=2,
    workers=2,
    tensors=1,
    exec_seconds=None,
    default_exec=0.0,
    **kwargs,
):
    return ExecutionProfile(
        sm_read_seconds=u,
        decompress_seconds=c,
        compression_ratio=rho,
        shards_per_tensor=shards,
        workers=workers,
        tensors_per_expert=tensors,
        expert_exec_seconds=exec_seconds or {},
        default_exec_seconds=default_exec,
        **kwargs,
    )


def entropy_matched_probs(target_bits, alphabet=256):
    """Geometric-family pmf over ``alphabet`` symbols with the requested
    order-0 entropy, solved by bisection on the decay rate."""

    def entropy(rate):
        w = rate ** np.arange(alphabet)
        p = w / w.sum()
        p = p[p > 0]
        return float(-(p * np.log2(p)).sum())

    lo, hi = 1e-9, 1.0 - 1e-12
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if entropy(mid) < target_bits:
            lo = mid
        else:
            hi = mid
    rate = 0.5 * (lo + hi)
    w = rate ** np.arange(alphabet)
    return w / w.sum()


def entropy_matched_stream(rng, target_bits, size, alphabet=256):
    p = entropy_matched_probs(target_bits, alphabet)
    return rng.choice(alphabet, size=size, p=p).astype(np.uint8).tobytes()


@pytest.fixture
def rng():
    return np.random.default_rng(20240811)
