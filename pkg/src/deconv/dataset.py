"""Ragged replicate table W_ij and its CSV schema.

CSV layout: header ``subject,rep,x1..xp``, one row per replicate, UTF-8,
LF line endings.  Subjects need not be contiguous and replicate counts may
vary by subject.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, EmptyDataset, InsufficientReplicates


@dataclass
class ReplicateDataset:
    """Flat view of n subjects with m_i replicate vectors in R^p."""

    w: np.ndarray  # (N, p) replicate rows
    subject_index: np.ndarray  # (N,) int in [0, n)
    rep_index: np.ndarray  # (N,) int replicate number within subject
    subject_ids: np.ndarray  # (n,) original labels, in index order

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=float)
        self.subject_index = np.asarray(self.subject_index, dtype=int)
        self.rep_index = np.asarray(self.rep_index, dtype=int)
        if self.w.size == 0:
            raise EmptyDataset("dataset has no rows")

    @property
    def n_subjects(self) -> int:
        return len(self.subject_ids)

    @property
    def n_rows(self) -> int:
        return self.w.shape[0]

    @property
    def dim(self) -> int:
        return self.w.shape[1]

    @property
    def counts(self) -> np.ndarray:
        return np.bincount(self.subject_index, minlength=self.n_subjects)

    def subject_means(self) -> np.ndarray:
        sums = np.zeros((self.n_subjects, self.dim))
        np.add.at(sums, self.subject_index, self.w)
        return sums / self.counts[:, None]

    def within_subject_variance(self) -> np.ndarray:
        """Pooled per-coordinate variance of replicates about subject means."""
        dev = self.w - self.subject_means()[self.subject_index]
        dof = max(self.n_rows - self.n_subjects, 1)
        return (dev**2).sum(axis=0) / dof

    def require_replicates(self) -> None:
        if int(self.counts.max()) < 2:
            raise InsufficientReplicates(
                "every subject has a single replicate; error scale "
                "is not identifiable"
            )

    @staticmethod
    def from_arrays(
        x_rows: np.ndarray, subject_index: np.ndarray
    ) -> "ReplicateDataset":
        subject_index = np.asarray(subject_index, dtype=int)
        n = subject_index.max() + 1
        rep = np.zeros_like(subject_index)
        seen: dict[int, int] = {}
        for row, s in enumerate(subject_index):
            rep[row] = seen.get(s, 0)
            seen[s] = rep[row] + 1
        return ReplicateDataset(
            w=np.asarray(x_rows, dtype=float),
            subject_index=subject_index,
            rep_index=rep,
            subject_ids=np.arange(n),
        )

    def write_csv(self, path: str | Path) -> None:
        p = self.dim
        header = "subject,rep," + ",".join(f"x{j + 1}" for j in range(p))
        lines = [header]
        for row in range(self.n_rows):
            sid = self.subject_ids[self.subject_index[row]]
            vals = ",".join(format(v, ".17g") for v in self.w[row])
            lines.append(f"{sid},{self.rep_index[row]},{vals}")
        Path(path).write_bytes(("\n".join(lines) + "\n").encode("utf-8"))


def read_csv(path: str | Path) -> ReplicateDataset:
    """Parse the replicate CSV, naming the offending row on failure."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise DataError(f"{path}: empty file")
    header = [h.strip() for h in lines[0].split(",")]
    if header[:2] != ["subject", "rep"] or len(header) < 3:
        raise DataError(f"{path}: header must be 'subject,rep,x1..xp'")
    p = len(header) - 2
    subjects: list[str] = []
    sub_to_idx: dict[str, int] = {}
    subject_index = []
    rep_index = []
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        if len(parts) != p + 2:
            raise DataError(
                f"{path}: row {lineno} has {len(parts)} fields, expected {p + 2}"
            )
        sid = parts[0].strip()
        try:
            rep = int(parts[1])
            vals = [float(v) for v in parts[2:]]
        except ValueError as exc:
            raise DataError(f"{path}: row {lineno}: {exc}") from exc
        if not all(np.isfinite(vals)):
            raise DataError(f"{path}: row {lineno}: non-finite value")
        if sid not in sub_to_idx:
            sub_to_idx[sid] = len(subjects)
            subjects.append(sid)
        subject_index.append(sub_to_idx[sid])
        rep_index.append(rep)
        rows.append(vals)
    return ReplicateDataset(
        w=np.asarray(rows, dtype=float),
        subject_index=np.asarray(subject_index, dtype=int),
        rep_index=np.asarray(rep_index, dtype=int),
        subject_ids=np.asarray(subjects),
    )
