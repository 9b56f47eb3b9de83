import io

import numpy as np
import pytest

from mixfem.data import (
    DataError,
    build_B,
    build_observation_set,
    load_observations,
    write_observations,
)
from mixfem.mesh import spatial_eval_matrix, unit_square_mesh
from mixfem.splines import cubic_spline_basis, eval_basis


def grid_records(n_loc, n_time, groups, rng, drop=()):
    """Full factorial records minus the dropped (loc, time) pairs."""
    li, ti, gl = [], [], []
    for i in range(n_loc):
        for j in range(n_time):
            if (i, j) in drop:
                continue
            li.append(i)
            ti.append(j)
            gl.append(groups[i % len(groups)])
    k = len(li)
    y = rng.normal(size=k)
    X = rng.normal(size=(k, 2))
    Z = np.ones((k, 1))
    return li, ti, gl, y, X, Z


def make_obs(n_loc=6, n_time=4, drop=(), seed=0):
    rng = np.random.default_rng(seed)
    locations = rng.random((n_loc, 2))
    times = np.linspace(0, 1, n_time)
    li, ti, gl, y, X, Z = grid_records(n_loc, n_time, ["a", "b"], rng, drop)
    return build_observation_set(locations, times, li, ti, gl, y, X, Z)


class TestConstruction:
    def test_full_grid_single_group(self):
        rng = np.random.default_rng(1)
        locations = rng.random((5, 2))
        times = np.linspace(0, 1, 3)
        li, ti, gl, y, X, Z = grid_records(5, 3, ["only"], rng)
        obs = build_observation_set(locations, times, li, ti, gl, y, X, Z)
        assert obs.n_obs == 15
        assert obs.n_groups == 1

    def test_missing_fraction_counts(self):
        # dropping 2.41% of a 40 x 25 grid leaves ceil(0.9759 * 1000) records
        rng = np.random.default_rng(2)
        locations = rng.random((40, 2))
        times = np.linspace(0, 1, 25)
        all_pairs = [(i, j) for i in range(40) for j in range(25)]
        k_drop = round(0.0241 * 1000)
        drop_idx = rng.choice(1000, size=k_drop, replace=False)
        drop = {all_pairs[i] for i in drop_idx}
        li, ti, gl, y, X, Z = grid_records(40, 25, ["a", "b", "c"], rng, drop)
        obs = build_observation_set(locations, times, li, ti, gl, y, X, Z)
        assert obs.n_obs == int(np.ceil(0.9759 * 1000)) == 976

    def test_duplicate_record_rejected(self):
        rng = np.random.default_rng(3)
        locations = rng.random((3, 2))
        with pytest.raises(DataError, match="duplicate"):
            build_observation_set(
                locations, [0.0, 1.0], [0, 0], [1, 1], ["a", "a"],
                [1.0, 2.0], rng.normal(size=(2, 1)), np.ones((2, 1)))

    def test_out_of_range_indices_rejected(self):
        rng = np.random.default_rng(4)
        locations = rng.random((3, 2))
        with pytest.raises(DataError, match="location index"):
            build_observation_set(locations, [0.0], [5], [0], ["a"], [1.0],
                                  rng.normal(size=(1, 1)), np.ones((1, 1)))
        with pytest.raises(DataError, match="time index"):
            build_observation_set(locations, [0.0], [0], [2], ["a"], [1.0],
                                  rng.normal(size=(1, 1)), np.ones((1, 1)))

    def test_rank_deficient_X_rejected(self):
        rng = np.random.default_rng(5)
        locations = rng.random((4, 2))
        x1 = rng.normal(size=8)
        X = np.column_stack([x1, 2 * x1])
        with pytest.raises(DataError, match="rank deficient"):
            build_observation_set(
                locations, [0.0, 1.0], [0, 0, 1, 1, 2, 2, 3, 3],
                [0, 1] * 4, ["a"] * 8, rng.normal(size=8), X, np.ones((8, 1)))

    def test_constant_X_column_rejected(self):
        rng = np.random.default_rng(6)
        locations = rng.random((4, 2))
        X = np.column_stack([np.ones(8), rng.normal(size=8)])
        with pytest.raises(DataError, match="constant column"):
            build_observation_set(
                locations, [0.0, 1.0], [0, 0, 1, 1, 2, 2, 3, 3],
                [0, 1] * 4, ["a"] * 8, rng.normal(size=8), X, np.ones((8, 1)))

    def test_q_zero_supported(self):
        rng = np.random.default_rng(7)
        locations = rng.random((3, 2))
        obs = build_observation_set(
            locations, [0.0, 1.0], [0, 1, 2], [0, 1, 0], list("aab"),
            [1.0, 2.0, 3.0], np.zeros((3, 0)), np.ones((3, 1)))
        assert obs.n_fixed == 0

    def test_canonical_order_invariant_to_input_order(self):
        rng = np.random.default_rng(8)
        locations = rng.random((6, 2))
        times = np.linspace(0, 1, 4)
        li, ti, gl, y, X, Z = grid_records(6, 4, ["b", "a"], rng)
        obs1 = build_observation_set(locations, times, li, ti, gl, y, X, Z)
        perm = rng.permutation(len(li))
        obs2 = build_observation_set(
            locations, times, np.array(li)[perm], np.array(ti)[perm],
            np.array(gl)[perm], np.array(y)[perm], X[perm], Z[perm])
        assert np.array_equal(obs1.y, obs2.y)
        assert np.array_equal(obs1.loc_idx, obs2.loc_idx)
        assert np.array_equal(obs1.X, obs2.X)
        assert obs1.group_labels == obs2.group_labels
        # groups are contiguous and nondecreasing
        assert (np.diff(obs1.group_idx) >= 0).all()


class TestCsvRoundTrip:
    def test_round_trip(self, tmp_path):
        obs = make_obs(drop={(0, 0), (3, 2)})
        paths = (tmp_path / "obs.csv", tmp_path / "loc.csv",
                 tmp_path / "times.csv")
        write_observations(obs, *paths)
        back = load_observations(*paths)
        assert np.array_equal(back.y, obs.y)
        assert np.array_equal(back.X, obs.X)
        assert np.array_equal(back.Z, obs.Z)
        assert np.array_equal(back.loc_idx, obs.loc_idx)
        assert back.group_labels == obs.group_labels

    def test_stream_input_and_missing_column(self):
        loc = io.StringIO("loc_id,x,y\n0,0.1,0.2\n")
        times = io.StringIO("time_id,t\n0,0.0\n")
        obs = io.StringIO("loc_id,time_id,group,y,z1\n0,0,g,1.5,1.0\n")
        parsed = load_observations(obs, loc, times)
        assert parsed.n_obs == 1 and parsed.n_fixed == 0
        bad = io.StringIO("loc_id,time_id,y,z1\n0,0,1.5,1.0\n")
        with pytest.raises(DataError, match="group"):
            load_observations(bad, io.StringIO("loc_id,x,y\n0,0.1,0.2\n"),
                              io.StringIO("time_id,t\n0,0.0\n"))


class TestBasisMatrix:
    def setup_method(self):
        self.mesh = unit_square_mesh(3)
        self.basis = cubic_spline_basis(5)

    def _matrices(self, obs):
        psi = spatial_eval_matrix(self.mesh, obs.locations)
        phi = eval_basis(self.basis, obs.times)
        return psi, phi

    def test_full_grid_is_row_permutation_of_kron(self):
        rng = np.random.default_rng(10)
        locations = rng.random((4, 2))
        times = np.linspace(0, 1, 3)
        li, ti, gl, y, X, Z = grid_records(4, 3, ["g"], rng)
        obs = build_observation_set(locations, times, li, ti, gl, y, X, Z)
        psi, phi = self._matrices(obs)
        b = build_B(obs, psi, phi).toarray()
        import scipy.sparse as sps
        full = sps.kron(sps.csr_matrix(phi), psi).toarray()
        kron_rows = obs.time_idx * 4 + obs.loc_idx
        assert np.allclose(b, full[kron_rows])

    def test_constant_coefficients_give_constant_field(self):
        obs = make_obs(drop={(1, 1)})
        psi, phi = self._matrices(obs)
        b = build_B(obs, psi, phi)
        f = np.full(b.shape[1], 7.0)
        assert np.allclose(b @ f, 7.0, atol=1e-12)

    def test_matches_double_sum_expansion(self):
        obs = make_obs(drop={(2, 3), (0, 1)}, seed=11)
        psi, phi = self._matrices(obs)
        b = build_B(obs, psi, phi)
        rng = np.random.default_rng(12)
        f = rng.normal(size=b.shape[1])
        fmat = f.reshape(self.basis.n_basis, self.mesh.n_nodes)
        psi_d = psi.toarray()
        direct = np.array([
            sum(fmat[r, l] * psi_d[obs.loc_idx[k], l] * phi[obs.time_idx[k], r]
                for l in range(self.mesh.n_nodes)
                for r in range(self.basis.n_basis))
            for k in range(obs.n_obs)])
        assert np.allclose(b @ f, direct, atol=1e-10)

    def test_row_sparsity_bound(self):
        obs = make_obs(seed=13)
        psi, phi = self._matrices(obs)
        b = build_B(obs, psi, phi)
        assert (np.diff(b.indptr) <= 12).all()
