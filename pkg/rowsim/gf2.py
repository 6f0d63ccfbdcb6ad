"""
GF(2) Helpers
Bit-mask linear algebra used for address reconstruction and mapping recovery.
"""
from typing import Iterable, List, Optional, Sequence

import numpy as np


def parity(value: int) -> int:
    """Parity of the set bits of value"""
    return value.bit_count() & 1


def to_matrix(masks: Sequence[int], width: int) -> np.ndarray:
    """One row per mask, one column per bit (column j is bit j)."""
    if not masks:
        return np.zeros((0, width), dtype=np.uint8)
    bits = np.arange(width, dtype=np.uint64)
    arr = np.asarray(masks, dtype=np.uint64).reshape(-1, 1)
    return ((arr >> bits) & np.uint64(1)).astype(np.uint8)


def from_row(row: np.ndarray) -> int:
    """Inverse of one to_matrix row"""
    value = 0
    for j in np.flatnonzero(row):
        value |= 1 << int(j)
    return value


def _width(masks: Iterable[int]) -> int:
    return max((m.bit_length() for m in masks), default=1) or 1


def row_reduce(matrix: np.ndarray):
    """
    Reduced row echelon form over GF(2).

    Pivots are chosen from the highest bit down so that the reduced basis
    is canonical for a given span.

    Returns:
        (reduced matrix with zero rows dropped, list of pivot columns)
    """
    m = matrix.copy() % 2
    n_rows, n_cols = m.shape
    pivots: List[int] = []
    r = 0
    for col in range(n_cols - 1, -1, -1):
        if r >= n_rows:
            break
        candidates = np.flatnonzero(m[r:, col])
        if candidates.size == 0:
            continue
        p = r + int(candidates[0])
        if p != r:
            m[[r, p]] = m[[p, r]]
        others = np.flatnonzero(m[:, col])
        for o in others:
            if o != r:
                m[o] ^= m[r]
        pivots.append(col)
        r += 1
    return m[:r], pivots


def rank(masks: Sequence[int]) -> int:
    masks = [int(m) for m in masks if m]
    if not masks:
        return 0
    reduced, _ = row_reduce(to_matrix(masks, _width(masks)))
    return reduced.shape[0]


def basis(masks: Sequence[int]) -> List[int]:
    """Canonical reduced basis of the span of masks, highest pivot first."""
    masks = [int(m) for m in masks if m]
    if not masks:
        return []
    reduced, _ = row_reduce(to_matrix(masks, _width(masks)))
    return [from_row(row) for row in reduced]


def independent(masks: Sequence[int]) -> bool:
    return rank(masks) == len(masks)


def same_span(a: Sequence[int], b: Sequence[int]) -> bool:
    ra, rb = rank(a), rank(b)
    return ra == rb and rank(list(a) + list(b)) == ra


def in_span(mask: int, masks: Sequence[int]) -> bool:
    return rank(list(masks) + [mask]) == rank(masks)


class PivotSolver:
    """
    Solves parity(masks[i] & x) = target bit i for x restricted to a set of
    free bit positions.

    A subset of the free bits (the pivots) is chosen once so that the
    restricted system is square and invertible; every solution leaves the
    remaining free bits at zero.
    """

    def __init__(self, masks: Sequence[int], free_bits: Sequence[int]):
        self.masks = [int(m) for m in masks]
        self.free_bits = sorted(int(b) for b in free_bits)
        self.pivot_bits: Optional[List[int]] = self._choose_pivots()
        self._table = self._build_table() if self.pivot_bits is not None else None

    @property
    def solvable(self) -> bool:
        return self._table is not None

    def _choose_pivots(self) -> Optional[List[int]]:
        n = len(self.masks)
        if n == 0:
            return []
        chosen: List[int] = []
        columns: List[int] = []
        for bit in self.free_bits:
            column = 0
            for i, m in enumerate(self.masks):
                if (m >> bit) & 1:
                    column |= 1 << i
            if column and not in_span(column, columns):
                chosen.append(bit)
                columns.append(column)
                if len(chosen) == n:
                    return chosen
        return None

    def _build_table(self) -> List[int]:
        n = len(self.masks)
        table = [0] * (1 << n)
        for assignment in range(1 << len(self.pivot_bits)):
            x = 0
            for k, bit in enumerate(self.pivot_bits):
                if (assignment >> k) & 1:
                    x |= 1 << bit
            target = 0
            for i, m in enumerate(self.masks):
                target |= parity(m & x) << i
            table[target] = x
        return table

    def solve(self, target: int) -> int:
        """x over the pivot bits with parity(masks[i] & x) == bit i of target"""
        if self._table is None:
            raise ValueError("system has no solution for every target")
        return self._table[target]
