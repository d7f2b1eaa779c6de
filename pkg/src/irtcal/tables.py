"""Columnar container for graded responses: the sparse set {(item, session, grade)}."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ResponseTable:
    """Graded responses stored column-wise, in observation (time) order.

    ``timestamps`` is optional (ISO-8601 strings); when absent, row order
    defines time. Grades are binary {0, 1}. Duplicate (session, item) pairs
    are rejected at construction.
    """

    session_ids: np.ndarray
    item_ids: np.ndarray
    grades: np.ndarray
    timestamps: np.ndarray | None = None

    def __post_init__(self) -> None:
        n = len(self.session_ids)
        if len(self.item_ids) != n or len(self.grades) != n:
            raise ValueError("response columns have mismatched lengths")
        if self.timestamps is not None and len(self.timestamps) != n:
            raise ValueError("timestamp column has mismatched length")
        g = np.asarray(self.grades)
        if n and not np.isin(g, (0, 1)).all():
            bad = np.flatnonzero(~np.isin(g, (0, 1)))[0]
            raise ValueError(f"grade out of {{0,1}} at row {bad}: {g[bad]!r}")
        if n:
            _, sess_codes = np.unique(self.session_ids, return_inverse=True)
            item_vocab, item_codes = np.unique(self.item_ids, return_inverse=True)
            pair = sess_codes.astype(np.int64) * len(item_vocab) + item_codes
            if len(np.unique(pair)) != n:
                order = np.argsort(pair, kind="stable")
                ps = pair[order]
                row = order[np.flatnonzero(ps[1:] == ps[:-1])[0] + 1]
                raise ValueError(
                    f"duplicate response for session {self.session_ids[row]!r}, "
                    f"item {self.item_ids[row]!r}"
                )

    @classmethod
    def from_rows(cls, rows, timestamps=None) -> "ResponseTable":
        """Build from an iterable of (session_id, item_id, grade) triples."""
        rows = list(rows)
        sessions = np.asarray([str(r[0]) for r in rows], dtype=str)
        items = np.asarray([str(r[1]) for r in rows], dtype=str)
        grades = np.asarray([int(r[2]) for r in rows], dtype=np.int8)
        ts = None if timestamps is None else np.asarray([str(t) for t in timestamps], dtype=str)
        return cls(sessions, items, grades, ts)

    def __len__(self) -> int:
        return len(self.session_ids)

    @property
    def n_responses(self) -> int:
        return len(self)

    def unique_sessions(self) -> np.ndarray:
        return np.unique(self.session_ids)

    def unique_items(self) -> np.ndarray:
        return np.unique(self.item_ids)

    def subset(self, mask: np.ndarray) -> "ResponseTable":
        ts = None if self.timestamps is None else self.timestamps[mask]
        return ResponseTable(self.session_ids[mask], self.item_ids[mask],
                             self.grades[mask], ts)

    def indexed(self):
        """Integer-coded view: (session codes, item codes, session vocab, item vocab).

        Vocabularies are sorted; codes index into them.
        """
        sess_vocab, sess_codes = np.unique(self.session_ids, return_inverse=True)
        item_vocab, item_codes = np.unique(self.item_ids, return_inverse=True)
        return sess_codes, item_codes, sess_vocab, item_vocab

    def time_order(self) -> np.ndarray:
        """Stable permutation sorting rows by timestamp (or identity without one)."""
        if self.timestamps is None:
            return np.arange(len(self))
        return np.argsort(self.timestamps, kind="stable")

    def rows(self):
        for k in range(len(self)):
            yield str(self.session_ids[k]), str(self.item_ids[k]), int(self.grades[k])
