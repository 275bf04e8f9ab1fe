"""Static near-equal work partitioning across workers or ranks.

Work (tree counts, test-row ranges) is always divided into exactly one
contiguous chunk per worker: `total div k` each, with the remainder going to
the lowest-numbered chunks. Chunks may be empty when there are more workers
than work items.
"""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class ChunkPlan:
    """Near-equal split of `total` items over `k` workers.

    sizes[i] items starting at offsets[i] belong to worker i;
    sum(sizes) == total and max(sizes) - min(sizes) <= 1.
    """

    total: int
    k: int
    sizes: tuple[int, ...]
    offsets: tuple[int, ...]


def chunk_sizes(total: int, k: int) -> ChunkPlan:
    """Split `total` items into k nearly equal chunks.

    The first `total mod k` chunks get `total div k + 1` items, the rest
    `total div k`.
    """
    if k < 1:
        raise ValueError(f"worker count must be >= 1, got {k}")
    if total < 0:
        raise ValueError(f"total must be >= 0, got {total}")
    base, rem = divmod(total, k)
    sizes = tuple(base + 1 if i < rem else base for i in range(k))
    offsets = []
    pos = 0
    for s in sizes:
        offsets.append(pos)
        pos += s
    return ChunkPlan(total=total, k=k, sizes=sizes, offsets=tuple(offsets))


def block_indices(n: int, size: int, rank: int) -> range:
    """Contiguous index block owned by `rank` out of `size` ranks.

    The blocks of all ranks are disjoint, ordered by rank, and cover
    range(n). Indices are 0-based.
    """
    if not 0 <= rank < size:
        raise ValueError(f"rank {rank} out of range [0, {size})")
    plan = chunk_sizes(n, size)
    start = plan.offsets[rank]
    return range(start, start + plan.sizes[rank])
