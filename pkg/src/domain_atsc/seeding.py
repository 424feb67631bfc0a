import hashlib


def derive_seed(seed: int, component: str) -> int:
    """Stable 63-bit seed for a named sub-component of a run."""
    digest = hashlib.sha256(f"{seed}:{component}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & ((1 << 63) - 1)
