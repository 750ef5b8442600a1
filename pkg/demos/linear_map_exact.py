"""Exact recovery sanity check on a known linear map.

For y = M x + b the affine dictionary (1, x1, x2) is closed under the
dynamics, so the fitted operator reproduces the map exactly: its spectrum
is {1} union eig(M), the flow map is exact in both directions, and the
located fixed point is (I - M)^{-1} b to solver precision.

Run:  python demos/linear_map_exact.py
"""
from __future__ import annotations

import numpy as np

from koopman_roa import basis, dynamics, edmd, roa


def main() -> None:
    rng = np.random.default_rng(6)
    raw = rng.normal(size=(2, 2))
    M = 0.75 * raw / np.max(np.abs(np.linalg.eigvals(raw)))
    b = rng.normal(size=2) * 0.3
    x_star = np.linalg.solve(np.eye(2) - M, b)
    print("map eigenvalues:", np.sort_complex(np.linalg.eigvals(M)))
    print("map fixed point:", x_star)

    trajectories = []
    for x0 in rng.normal(size=(40, 2)):
        tr = [x0]
        for _ in range(12):
            tr.append(M @ tr[-1] + b)
        trajectories.append(np.array(tr))
    data = dynamics.TrajectoryDataset(dt=1.0, ids=tuple(range(40)),
                                      trajectories=trajectories)
    train, test = dynamics.split(data, 0.75, seed=1)

    spec = basis.BasisSpec("laguerre", basis.truncated_indices(2, 1, 1.0))
    model = edmd.fit(dynamics.to_snapshots(train), spec)
    print("\nfitted eigenvalues:", np.sort_complex(model.mu))
    print(f"held-out prediction error e = {edmd.empirical_error(model, test).e:.2e}")

    found = roa.find_fixed_points(model, rng.normal(size=(12, 2)))
    err = np.abs(found[0].location - x_star).max()
    print(f"located fixed point {found[0].location} (error {err:.2e})")

    x0 = np.array([0.7, -0.4])
    x5 = edmd.flow(model, x0, 5)
    back = edmd.flow(model, x5, -5)
    print(f"flow inversion: |flow(flow(x,5),-5) - x| = {np.abs(back - x0).max():.2e}")


if __name__ == "__main__":
    main()
