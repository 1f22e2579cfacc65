"""The three outcomes of a static two-player quadratic game: a unique point, a line, nothing."""

import numpy as np

from gnep import analysis as an

games = {
    "unique": an.StaticQuadraticGame([[[1, 1], [1, 1]], [[0, 0], [0, 1]]], [[-1, -1], [0, 0]], [0.5, 0], (1, 1)),
    "subspace": an.StaticQuadraticGame([[[1, 1], [1, 1]]] * 2, [[0, 0]] * 2, [0, 0], (1, 1)),
    "none": an.StaticQuadraticGame([np.zeros((2, 2))] * 2, [[1, 0], [0, 0]], [0, 0], (1, 1)),
}

for name, g in games.items():
    sol = an.lq_nash_solve(g)
    line = f"{name:9s} {sol.kind}"
    if sol.point is not None:
        line += f"  point {np.round(sol.point, 6)}"
    if sol.basis is not None and sol.basis.size:
        line += f"  direction {np.round(sol.basis[:, 0], 6)}  projection of (1, 0): {sol.project([1.0, 0.0])}"
    print(line)
