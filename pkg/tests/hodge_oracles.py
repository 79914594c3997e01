"""Independent dense discretisations used as oracles for the per-mode solvers.

Fields are flattened in C order over (n1, n2, nz); operators are Kronecker
products of the periodic (cotangent-formula) differentiation matrix and the
Chebyshev collocation matrix. Everything is real and lives in physical space.
"""
import numpy as np

from slabmhd.spectral import SlabGrid


def fourier_matrix(n: int) -> np.ndarray:
    """Periodic differentiation on [0, 1) at n equispaced points (n even)."""
    j = np.arange(n)
    diff = j[:, None] - j[None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        D = np.pi * (-1.0) ** diff / np.tan(np.pi * diff / n)
    D[diff == 0] = 0.0
    return D


def derivative_ops(grid: SlabGrid, half: str):
    t = grid.torus
    n3 = grid.nz(half)
    I1, I2, I3 = np.eye(t.n1), np.eye(t.n2), np.eye(n3)
    D1 = np.kron(np.kron(fourier_matrix(t.n1), I2), I3)
    D2 = np.kron(np.kron(I1, fourier_matrix(t.n2)), I3)
    D3 = np.kron(np.kron(I1, I2), grid.D(half))
    return D1, D2, D3


def curl_div(grid: SlabGrid, half: str):
    D1, D2, D3 = derivative_ops(grid, half)
    P = D1.shape[0]
    Z = np.zeros((P, P))
    curl = np.block([[Z, -D3, D2], [D3, Z, -D1], [-D2, D1, Z]])
    div = np.hstack([D1, D2, D3])
    return curl, div


def node_selector(grid: SlabGrid, half: str, level: int) -> np.ndarray:
    """Rows picking the values at vertical node ``level`` (all horizontal nodes)."""
    t = grid.torus
    n3 = grid.nz(half)
    P = t.n1 * t.n2 * n3
    idx = np.arange(t.n1 * t.n2) * n3 + (level % n3)
    S = np.zeros((idx.size, P))
    S[np.arange(idx.size), idx] = 1.0
    return S


def component(S: np.ndarray, c: int) -> np.ndarray:
    """Lift a scalar selector to component c of a 3-vector unknown."""
    P = S.shape[1]
    out = np.zeros((S.shape[0], 3 * P))
    out[:, c * P:(c + 1) * P] = S
    return out


def _lstsq(rows, rhs):
    A = np.vstack(rows)
    b = np.concatenate([np.ravel(r) for r in rhs])
    x, *_ = np.linalg.lstsq(A, b, rcond=None)
    return x, float(np.max(np.abs(A @ x - b)))


def one_phase_upper(grid, f1, f2, f3, f4):
    """curl v = f1, div v = f2 on the upper half; v x e3 = f3 at x3 = 0; v3 = f4 at x3 = 1."""
    curl, div = curl_div(grid, "upper")
    bot = node_selector(grid, "upper", 0)
    top = node_selector(grid, "upper", -1)
    rows = [curl, div, component(bot, 1), -component(bot, 0), component(top, 2)]
    rhs = [f1, f2, f3[0], f3[1], f4]
    x, res = _lstsq(rows, rhs)
    return x.reshape((3,) + grid.shape("upper")), res


def _two_half_blocks(grid):
    cl, dl = curl_div(grid, "lower")
    cu, du = curl_div(grid, "upper")
    Pl, Pu = dl.shape[1], du.shape[1]

    def L(M):
        return np.hstack([M, np.zeros((M.shape[0], Pu))])

    def U(M):
        return np.hstack([np.zeros((M.shape[0], Pl)), M])

    return cl, dl, cu, du, L, U, Pl


def _gluing_rows(grid, L, U):
    top_l = node_selector(grid, "lower", -1)
    bot_u = node_selector(grid, "upper", 0)
    rows = [L(component(top_l, c)) - U(component(bot_u, c)) for c in range(3)]
    return rows, [np.zeros(top_l.shape[0])] * 3


def two_phase(grid, f1, f2, g1, g2):
    cl, dl, cu, du, L, U, Pl = _two_half_blocks(grid)
    glue, glue_rhs = _gluing_rows(grid, L, U)
    bot = node_selector(grid, "lower", 0)
    top = node_selector(grid, "upper", -1)
    rows = [L(cl), L(dl), U(cu), U(du), *glue, L(component(bot, 2)), U(component(top, 0)), U(component(top, 1))]
    z = np.zeros(bot.shape[0])
    rhs = [f1, f2, g1, g2, *glue_rhs, z, z, z]
    x, res = _lstsq(rows, rhs)
    return x[:Pl].reshape((3,) + grid.shape("lower")), x[Pl:].reshape((3,) + grid.shape("upper")), res


def mixed_phase(grid, f1, f2, g1, g2, f3):
    """curl curl v = f1 below with v3 = 0 and (curl v) x e3 = f3 at x3 = -1."""
    cl, dl, cu, du, L, U, Pl = _two_half_blocks(grid)
    glue, glue_rhs = _gluing_rows(grid, L, U)
    bot = node_selector(grid, "lower", 0)
    top = node_selector(grid, "upper", -1)
    curl_bot = np.kron(np.eye(3), bot) @ cl  # bottom traces of the three curl components
    nb = bot.shape[0]
    c1, c2 = curl_bot[:nb], curl_bot[nb:2 * nb]
    rows = [L(cl @ cl), L(dl), U(cu), U(du), *glue, L(component(bot, 2)), L(c2), -L(c1),
            U(component(top, 0)), U(component(top, 1))]
    z = np.zeros(nb)
    rhs = [f1, f2, g1, g2, *glue_rhs, z, f3[0], f3[1], z, z]
    x, res = _lstsq(rows, rhs)
    return x[:Pl].reshape((3,) + grid.shape("lower")), x[Pl:].reshape((3,) + grid.shape("upper")), res
