"""Grouped space-time observations and the row-deleted basis matrix.

Observations reference locations and times by index; missing space-time
pairs are simply absent.  Records are canonicalized (sorted by group
label, then time index, then location index) so every downstream
factorization is deterministic regardless of input order, and group
labels are mapped to 0..g-1 in that canonical order.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

RANK_RTOL = 1e-10


class DataError(ValueError):
    """Invalid observation data."""


@dataclass(frozen=True)
class ObservationSet:
    """Canonically ordered observation records with design matrices.

    Attributes
    ----------
    locations : (n, 2) coordinates addressed by ``loc_idx``.
    times : (m,) instants addressed by ``time_idx``.
    loc_idx, time_idx : (n_obs,) int record coordinates.
    group_idx : (n_obs,) int in 0..g-1, nondecreasing.
    group_labels : tuple of the g original labels in index order.
    y : (n_obs,) responses.
    X : (n_obs, q) fixed-effect covariates (q may be 0; no intercept).
    Z : (n_obs, p) random-effect covariates.
    """

    locations: np.ndarray
    times: np.ndarray
    loc_idx: np.ndarray
    time_idx: np.ndarray
    group_idx: np.ndarray
    group_labels: tuple
    y: np.ndarray
    X: np.ndarray
    Z: np.ndarray
    group_starts: np.ndarray = field(repr=False)  # (g + 1,) slice bounds

    @property
    def n_obs(self) -> int:
        return self.y.shape[0]

    @property
    def n_groups(self) -> int:
        return len(self.group_labels)

    @property
    def n_fixed(self) -> int:
        return self.X.shape[1]

    @property
    def n_random(self) -> int:
        return self.Z.shape[1]

    def group_slice(self, k: int) -> slice:
        return slice(int(self.group_starts[k]), int(self.group_starts[k + 1]))

    def group_sizes(self) -> np.ndarray:
        return np.diff(self.group_starts)

    def drop_records(self, mask) -> "ObservationSet":
        """New set without the records flagged in ``mask``."""
        keep = ~np.asarray(mask, dtype=bool)
        return build_observation_set(
            self.locations, self.times, self.loc_idx[keep],
            self.time_idx[keep], np.asarray(self.group_labels)[
                self.group_idx[keep]], self.y[keep], self.X[keep],
            self.Z[keep])


def build_observation_set(locations, times, loc_idx, time_idx, group_labels,
                          y, X, Z) -> ObservationSet:
    """Validate and canonicalize raw record arrays into an ObservationSet."""
    locations = np.asarray(locations, dtype=float)
    times = np.asarray(times, dtype=float).ravel()
    loc_idx = np.asarray(loc_idx, dtype=np.int64).ravel()
    time_idx = np.asarray(time_idx, dtype=np.int64).ravel()
    labels = np.asarray(group_labels).astype(str).ravel()
    y = np.asarray(y, dtype=float).ravel()
    X = np.asarray(X, dtype=float)
    Z = np.asarray(Z, dtype=float)
    n_obs = y.size
    if X.size == 0:
        X = X.reshape(n_obs, 0)
    if X.ndim == 1:
        X = X[:, None]
    if Z.ndim == 1:
        Z = Z[:, None]
    lengths = {loc_idx.size, time_idx.size, labels.size, n_obs,
               X.shape[0], Z.shape[0]}
    if lengths != {n_obs}:
        raise DataError(f"record arrays disagree in length: {sorted(lengths)}")
    if n_obs == 0:
        raise DataError("no observation records")
    if Z.shape[1] < 1:
        raise DataError("at least one random-effect covariate is required")

    n, m = locations.shape[0], times.size
    if (loc_idx < 0).any() or (loc_idx >= n).any():
        raise DataError("location index out of range")
    if (time_idx < 0).any() or (time_idx >= m).any():
        raise DataError("time index out of range")

    cell = loc_idx * m + time_idx
    uniq, counts = np.unique(cell, return_counts=True)
    if (counts > 1).any():
        dup = uniq[counts > 1][0]
        raise DataError(
            f"duplicate record for location {dup // m}, time {dup % m}")

    # canonical order: group label, then time index, then location index
    order = np.lexsort((loc_idx, time_idx, labels))
    loc_idx, time_idx, labels = loc_idx[order], time_idx[order], labels[order]
    y, X, Z = y[order], X[order], Z[order]

    uniq_labels, group_idx = np.unique(labels, return_inverse=True)
    group_starts = np.searchsorted(group_idx, np.arange(len(uniq_labels) + 1))

    q = X.shape[1]
    if q:
        if np.linalg.matrix_rank(X, tol=RANK_RTOL * max(1.0, np.abs(X).max())
                                 * max(X.shape)) < q:
            raise DataError("fixed-effect design matrix is rank deficient")
        col_span = np.ptp(X, axis=0)
        if (col_span <= 1e-12 * np.maximum(1.0, np.abs(X).max(axis=0))).any():
            raise DataError(
                "fixed-effect design contains a constant column; the "
                "intercept is absorbed by the smooth field")

    for arr in (locations, times, loc_idx, time_idx, group_idx, y, X, Z,
                group_starts):
        arr.setflags(write=False)
    return ObservationSet(
        locations=locations, times=times, loc_idx=loc_idx, time_idx=time_idx,
        group_idx=group_idx, group_labels=tuple(uniq_labels.tolist()),
        y=y, X=X, Z=Z, group_starts=group_starts)


def load_observations(observations, locations, times) -> ObservationSet:
    """Read the three-CSV interchange format.

    ``observations`` has header loc_id,time_id,group,y,x1..xq,z1..zp (a
    missing datum is simply an absent row); ``locations`` has header
    loc_id,x,y and ``times`` has header time_id,t, both with dense 0-based
    ids.  Each argument is a path or an open text stream.
    """
    loc_rows = _read_indexed(locations, "loc_id", ("x", "y"))
    time_rows = _read_indexed(times, "time_id", ("t",))
    loc_arr = np.array(loc_rows, dtype=float)
    time_arr = np.array(time_rows, dtype=float).ravel()

    with _open(observations) as fh:
        reader = csv.DictReader(fh)
        cols = reader.fieldnames or []
        for required in ("loc_id", "time_id", "group", "y"):
            if required not in cols:
                raise DataError(f"observations: missing column {required}")
        x_cols = _numbered(cols, "x")
        z_cols = _numbered(cols, "z")
        if not z_cols:
            raise DataError("observations: need at least one z column")
        li, ti, gl, yv, xv, zv = [], [], [], [], [], []
        for rec in reader:
            li.append(int(rec["loc_id"]))
            ti.append(int(rec["time_id"]))
            gl.append(rec["group"])
            yv.append(float(rec["y"]))
            xv.append([float(rec[c]) for c in x_cols])
            zv.append([float(rec[c]) for c in z_cols])
    return build_observation_set(
        loc_arr, time_arr, li, ti, gl, yv,
        np.array(xv, dtype=float).reshape(len(yv), len(x_cols)),
        np.array(zv, dtype=float))


def write_observations(obs: ObservationSet, observations, locations, times):
    """Write the three-CSV interchange format (inverse of load)."""
    with open(locations, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["loc_id", "x", "y"])
        for i, (x, y) in enumerate(obs.locations):
            w.writerow([i, repr(float(x)), repr(float(y))])
    with open(times, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time_id", "t"])
        for j, t in enumerate(obs.times):
            w.writerow([j, repr(float(t))])
    with open(observations, "w", newline="") as fh:
        w = csv.writer(fh)
        q, p = obs.n_fixed, obs.n_random
        w.writerow(["loc_id", "time_id", "group", "y"]
                   + [f"x{i + 1}" for i in range(q)]
                   + [f"z{i + 1}" for i in range(p)])
        for r in range(obs.n_obs):
            w.writerow([int(obs.loc_idx[r]), int(obs.time_idx[r]),
                        obs.group_labels[obs.group_idx[r]],
                        repr(float(obs.y[r]))]
                       + [repr(float(v)) for v in obs.X[r]]
                       + [repr(float(v)) for v in obs.Z[r]])


def build_B(obs: ObservationSet, psi: sp.spmatrix,
            phi: np.ndarray) -> sp.csr_matrix:
    """Row-deleted Kronecker basis matrix.

    Row r of the result is kron(phi[time_idx[r]], psi[loc_idx[r]]): the
    space-time basis evaluated at record r's location and time, with
    coefficients ordered time-major.
    """
    psi = sp.csr_matrix(psi)
    phi = np.asarray(phi, dtype=float)
    n, n_space = psi.shape
    m, n_time = phi.shape
    if obs.locations.shape[0] != n:
        raise DataError("psi rows do not match observation locations")
    if obs.times.size != m:
        raise DataError("phi rows do not match observation times")

    rows, cols, vals = [], [], []
    indptr, indices, data = psi.indptr, psi.indices, psi.data
    for r in range(obs.n_obs):
        i = obs.loc_idx[r]
        j = obs.time_idx[r]
        sl = slice(indptr[i], indptr[i + 1])
        space_cols = indices[sl]
        space_vals = data[sl]
        time_row = phi[j]
        nz_time = np.nonzero(time_row)[0]
        block_cols = (nz_time[:, None] * n_space + space_cols[None, :]).ravel()
        block_vals = (time_row[nz_time][:, None] * space_vals[None, :]).ravel()
        rows.append(np.full(block_cols.size, r))
        cols.append(block_cols)
        vals.append(block_vals)
    mat = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(obs.n_obs, n_space * n_time))
    mat.sum_duplicates()
    return mat


def _open(source):
    if isinstance(source, io.TextIOBase):
        return source
    return open(source, newline="")


def _numbered(cols, prefix):
    out = []
    k = 1
    while f"{prefix}{k}" in cols:
        out.append(f"{prefix}{k}")
        k += 1
    return out


def _read_indexed(source, id_col, value_cols):
    with _open(source) as fh:
        reader = csv.DictReader(fh)
        cols = reader.fieldnames or []
        for required in (id_col, *value_cols):
            if required not in cols:
                raise DataError(f"{id_col} table: missing column {required}")
        rows = {}
        for rec in reader:
            idx = int(rec[id_col])
            if idx in rows:
                raise DataError(f"duplicate {id_col} {idx}")
            rows[idx] = tuple(float(rec[c]) for c in value_cols)
    if not rows:
        raise DataError(f"{id_col} table is empty")
    if sorted(rows) != list(range(len(rows))):
        raise DataError(f"{id_col} values must be dense 0-based indices")
    return [rows[i] for i in range(len(rows))]
