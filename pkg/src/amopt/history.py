"""Sliding window of iterate and residual differences.

The mixer consumes the window as a pair of column matrices (X, R), oldest
column first. With the moving average enabled the stored columns are the
exponentially averaged differences

    dxh_k = gamma * dxh_{k-1} + (1 - gamma) * dx_k

(and the same for dr), with the carries starting at zero, so the very
first averaged column is (1 - gamma) times the raw difference. Raw
columns are not retained in that mode.
"""

from collections import deque

import numpy as np


class HistoryBuffer:
    """FIFO ring of up to `capacity` difference pairs of length `dim`."""

    def __init__(self, dim, capacity, ma_enabled=False, gamma=0.9):
        if dim < 0 or capacity < 1:
            raise ValueError("need dim >= 0 and capacity >= 1")
        if not 0.0 <= gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        self.dim = int(dim)
        self.capacity = int(capacity)
        self.ma_enabled = bool(ma_enabled)
        self.gamma = float(gamma)
        self._dx = deque(maxlen=self.capacity)
        self._dr = deque(maxlen=self.capacity)
        self.dx_hat_last = np.zeros(self.dim)
        self.dr_hat_last = np.zeros(self.dim)

    def __len__(self):
        return len(self._dx)

    def push(self, dx, dr):
        """Append a difference pair, averaging first when enabled.

        Evicts the oldest pair once the ring is full. Non-finite or
        wrongly sized input raises ValueError.
        """
        dx = np.asarray(dx, dtype=float)
        dr = np.asarray(dr, dtype=float)
        if dx.shape != (self.dim,) or dr.shape != (self.dim,):
            raise ValueError(f"expected vectors of length {self.dim}")
        if not (np.all(np.isfinite(dx)) and np.all(np.isfinite(dr))):
            raise ValueError("non-finite difference pushed into history")
        if self.ma_enabled:
            dx = self.gamma * self.dx_hat_last + (1.0 - self.gamma) * dx
            dr = self.gamma * self.dr_hat_last + (1.0 - self.gamma) * dr
            self.dx_hat_last = dx
            self.dr_hat_last = dr
        self._dx.append(dx.copy())
        self._dr.append(dr.copy())

    def matrices(self):
        """Current window as (X, R), shape (dim, m_k), oldest column first."""
        if not self._dx:
            return np.zeros((self.dim, 0)), np.zeros((self.dim, 0))
        return np.column_stack(self._dx), np.column_stack(self._dr)

    def last_dx(self):
        """Newest stored dx column, or None while empty."""
        return self._dx[-1] if self._dx else None

    def clear(self):
        """Drop all columns and re-zero the moving-average carries."""
        self._dx.clear()
        self._dr.clear()
        self.dx_hat_last = np.zeros(self.dim)
        self.dr_hat_last = np.zeros(self.dim)

    def copy(self):
        """Independent deep copy (steps treat state as a value)."""
        other = HistoryBuffer(self.dim, self.capacity, self.ma_enabled, self.gamma)
        other._dx = deque((c.copy() for c in self._dx), maxlen=self.capacity)
        other._dr = deque((c.copy() for c in self._dr), maxlen=self.capacity)
        other.dx_hat_last = self.dx_hat_last.copy()
        other.dr_hat_last = self.dr_hat_last.copy()
        return other
