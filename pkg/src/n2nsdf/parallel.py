"""Worker-count cap shared by KD-tree queries and grid evaluation."""

import os

ENV_VAR = "SDF_N2N_THREADS"


def workers() -> int:
    """Cap from SDF_N2N_THREADS; -1 (all cores) when unset."""
    raw = os.environ.get(ENV_VAR, "").strip()
    if not raw:
        return -1
    try:
        return max(int(raw), 1)
    except ValueError:
        raise ValueError(f"{ENV_VAR}: expected an integer, got {raw!r}") from None


def pool_size() -> int:
    n = workers()
    return os.cpu_count() or 1 if n < 0 else n
