import math
from types import SimpleNamespace

import numpy as np
import pytest
import scipy.io
import scipy.sparse as sp

from supg_dwr.assembly import (SolverError, SparseSystem, assemble_dual, assemble_forms,
                               assemble_primal, delta_param, dump_matrix, solve, stabilization)
from supg_dwr.fespace import FeSpace, make_quadrature
from supg_dwr.mesh import EAST, NORTH, SOUTH, WEST, MarkSet, new_uniform
from supg_dwr.problem import (DomainMean, constant_problem, example1, example2, freeze_context,
                              manufactured)


def hanging_mesh(n=4, frac=0.3, seed=0):
    rng = np.random.default_rng(seed)
    mesh = new_uniform(n=n)
    return mesh.refine_and_coarsen(MarkSet.of(mesh.keys[rng.random(len(mesh)) < frac]))[0]


def test_delta_examples():
    h = math.sqrt(2) / 8
    d = delta_param(np.array([h]), 1, math.sqrt(13), 1e-6, 1.0)
    assert d[0] == pytest.approx(0.049029, abs=5e-7)
    assert delta_param(np.array([h]), 1, 0.0, 1e-2, 0.0)[0] == pytest.approx(h**2 / 1e-2)
    big = delta_param(np.array([h]), 2, 1.0, 1e6, 1.0)[0]
    assert big == pytest.approx(h**2 / (16 * 1e6))
    assert delta_param(np.array([h]), 1, math.sqrt(13), 1e-6, 1.0, delta0=0.5)[0] == \
        pytest.approx(0.5 * d[0])


def test_stabilization_on_uniform_mesh():
    delta = stabilization(new_uniform(n=8), example1(1e-6), 1)
    assert np.allclose(delta, 0.049029, atol=5e-7)
    assert np.all(stabilization(new_uniform(n=4), constant_problem(), 1) >= 0)


def test_q1_mass_matrix():
    space = FeSpace(new_uniform(n=1), 1)
    pr = constant_problem(epsilon=1e-300, alpha=1.0)
    A, _ = assemble_forms(space, space, pr, +1, np.zeros(1), 2)
    local = A.toarray()[np.ix_(space.cell_nodes[0], space.cell_nodes[0])]
    ref = np.array([[4, 2, 2, 1], [2, 4, 1, 2], [2, 1, 4, 2], [1, 2, 2, 4]]) / 36.0
    assert np.allclose(local, ref, atol=1e-15)


def dense_reference(space, problem, delta, q):
    """Entry-by-entry loop over cells, quadrature points and basis pairs."""
    mesh, el = space.mesh, space.element
    rule = make_quadrature(q)
    x0, y0, hx, hy = mesh.geometry
    A = np.zeros((space.n_dofs, space.n_dofs))
    b = np.zeros(space.n_dofs)
    eps = problem.epsilon
    for c in range(len(mesh)):
        nodes = space.cell_nodes[c]
        for (xh, yh), w in zip(rule.points, rule.weights):
            X, Y = x0[c] + hx[c] * xh, y0[c] + hy[c] * yh
            wq = w * hx[c] * hy[c]
            bx, by = (float(v) for v in problem.b(np.array(X), np.array(Y)))
            al = float(problem.alpha(np.array(X), np.array(Y)))
            f = float(problem.f(np.array(X), np.array(Y)))
            vals = []
            for i in range(el.n_basis):
                v, g, H = el.shape_eval(i, [xh, yh])
                gx, gy = g[0] / hx[c], g[1] / hy[c]
                lap = H[0, 0] / hx[c] ** 2 + H[1, 1] / hy[c] ** 2
                vals.append((v, gx, gy, lap))
            for i, (vi, gxi, gyi, _) in enumerate(vals):
                stream_i = bx * gxi + by * gyi
                b[nodes[i]] += wq * f * (vi + delta[c] * stream_i)
                for j, (vj, gxj, gyj, lapj) in enumerate(vals):
                    gal = eps * (gxi * gxj + gyi * gyj) + (bx * gxj + by * gyj + al * vj) * vi
                    strong = -eps * lapj + bx * gxj + by * gyj + al * vj
                    A[nodes[i], nodes[j]] += wq * (gal + delta[c] * strong * stream_i)
    return A, b


@pytest.mark.parametrize("p", [1, 2])
def test_dense_reference_assembly(p):
    pr = example1(1e-2)
    mesh = new_uniform(n=4)
    space = FeSpace(mesh, p)
    delta = stabilization(mesh, pr, p)
    A, b = assemble_forms(space, space, pr, +1, delta, p + 2)
    Ad, bd = dense_reference(space, pr, delta, p + 2)
    assert np.max(np.abs(A.toarray() - Ad)) < 1e-12 * np.max(np.abs(Ad))
    assert np.max(np.abs(b - bd)) < 1e-12 * np.max(np.abs(bd))


def test_dense_reference_with_hanging_nodes():
    pr = example2(1e-2)
    mesh = hanging_mesh()
    space = FeSpace(mesh, 1)
    delta = stabilization(mesh, pr, 1)
    system = assemble_primal(space, pr, q=3)
    Ad, bd = dense_reference(space, pr, delta, 3)
    T = space.T.toarray()
    assert np.allclose(system.matrix.toarray(), T.T @ Ad @ T, rtol=0, atol=1e-12)
    assert np.allclose(system.rhs, T.T @ bd, rtol=0, atol=1e-12)


def test_dual_transpose_identity():
    pr = example2(1e-3)
    space = FeSpace(hanging_mesh(), 2)
    ctx = freeze_context(DomainMean(), pr, space, None, 4)
    dual = assemble_dual(space, pr, ctx, q=4, stabilize=False)
    primal = assemble_primal(space, pr, q=4, stabilize=False)
    # integration by parts of the convection term leaves no boundary term
    # only between functions vanishing on the Dirichlet boundary
    U = primal.unknowns()
    diff = (dual.matrix - primal.matrix.T)[U][:, U]
    assert abs(diff).max() < 1e-12


def test_dual_equals_primal_without_convection():
    pr = constant_problem(epsilon=0.3, alpha=2.0, f=1.0)
    space = FeSpace(hanging_mesh(), 2)
    ctx = freeze_context(DomainMean(), pr, space, None, 4)
    d = assemble_dual(space, pr, ctx, q=4)
    p = assemble_primal(space, pr, q=4)
    assert abs(d.matrix - p.matrix).max() < 1e-12


@pytest.mark.parametrize("p", [1, 2, 3])
def test_dual_mean_rhs_sums_to_area(p):
    pr = example2(1e-3)
    space = FeSpace(hanging_mesh(), p)
    ctx = freeze_context(DomainMean(), pr, space, None, p + 2)
    d = assemble_dual(space, pr, ctx, q=p + 2, stabilize=False)
    assert d.rhs.sum() == pytest.approx(1.0, abs=1e-13)
    assert np.all(d.dirichlet_values == 0)


def test_zero_problem_zero_solution():
    space = FeSpace(new_uniform(n=4), 2)
    u = solve(assemble_primal(space, constant_problem()))
    assert np.all(u == 0)


def test_one_dimensional_poisson_strip():
    # -u'' = 1 on (0, 2), u(0) = u(2) = 0, natural conditions top and bottom
    pr = constant_problem(epsilon=1.0, f=1.0, neumann_sides=(SOUTH, NORTH))
    mesh = new_uniform((0.0, 2.0, 0.0, 1.0), 4)
    space = FeSpace(mesh, 1)
    u = solve(assemble_primal(space, pr, q=3, stabilize=False))
    x = space.node_coords[:, 0]
    assert np.allclose(u, x * (2 - x) / 2, atol=1e-12)


@pytest.mark.parametrize("p", [1, 2, 3])
@pytest.mark.parametrize("hanging", [False, True])
def test_manufactured_reproduction(p, hanging):
    pr = manufactured(p, epsilon=1.0, b=(1.0, 1.0), alpha=1.0)
    mesh = hanging_mesh(4) if hanging else new_uniform(n=4)
    space = FeSpace(mesh, p)
    u = solve(assemble_primal(space, pr))
    exact = pr.exact.u(space.node_coords[:, 0], space.node_coords[:, 1])
    assert np.max(np.abs(u - exact)) < 1e-10


def test_dirichlet_values_restored():
    pr = example2(1e-2)
    space = FeSpace(hanging_mesh(), 2)
    system = assemble_primal(space, pr)
    u = solve(system)
    xy = space.node_coords
    for side in (WEST, EAST, SOUTH, NORTH):
        nd = space.boundary_nodes[side]
        assert np.allclose(u[nd], pr.exact.u(xy[nd, 0], xy[nd, 1]), atol=1e-15)


@pytest.mark.parametrize("p", [1, 2])
def test_supg_galerkin_relation(p):
    pr = example2(1e-4)
    mesh = hanging_mesh(8, 0.25, 2)
    space = FeSpace(mesh, p)
    q = p + 2
    system = assemble_primal(space, pr, q=q)
    u = solve(system)
    forms = assemble_forms(space, space, pr, +1, system.delta, q, split=True)
    rng = np.random.default_rng(5)
    for _ in range(20):
        r = rng.standard_normal(space.n_free)
        r[system.dirichlet_dofs] = 0.0
        phi = space.T @ r
        lhs = phi @ (forms.load - forms.galerkin @ u)
        rhs = phi @ (forms.supg @ u - forms.supg_load)
        assert lhs == pytest.approx(rhs, rel=1e-9, abs=1e-12 * np.abs(phi @ forms.load))


def fake_system(matrix, rhs, dirichlet=()):
    n = matrix.shape[0]
    space = SimpleNamespace(T=sp.identity(n, format="csr"))
    d = np.asarray(dirichlet, dtype=np.int64)
    return SparseSystem(space, sp.csr_matrix(matrix), np.asarray(rhs, float), d,
                        np.zeros(len(d)), np.zeros(0))


def test_solve_identity():
    e1 = np.eye(5)[0]
    assert np.array_equal(solve(fake_system(np.eye(5), e1)), e1)


def test_solve_random_spd_against_dense():
    rng = np.random.default_rng(0)
    B = sp.random(50, 50, density=0.1, random_state=1).toarray()
    A = B @ B.T + 50 * np.eye(50)
    b = rng.standard_normal(50)
    x = solve(fake_system(A, b))
    assert np.allclose(x, np.linalg.solve(A, b), rtol=1e-10, atol=1e-12)


def test_singular_system_raises():
    A = np.eye(4)
    A[2, 2] = 0.0
    with pytest.raises(SolverError):
        solve(fake_system(A, np.ones(4)))


def test_assembly_deterministic(tmp_path):
    pr = example1(1e-6)
    space = FeSpace(hanging_mesh(8, 0.2, 4), 2)
    a = assemble_primal(space, pr)
    b = assemble_primal(space, pr)
    assert np.array_equal(a.matrix.data, b.matrix.data) and np.array_equal(a.rhs, b.rhs)
    dump_matrix(a, tmp_path / "A.mtx")
    back = scipy.io.mmread(str(tmp_path / "A.mtx"))
    assert abs(back - a.matrix).max() < 1e-12 * abs(a.matrix).max()


def test_row_sparsity_bounded():
    space = FeSpace(hanging_mesh(8, 0.3, 1), 2)
    A = assemble_primal(space, example2(1e-3)).matrix
    counts = np.diff(A.indptr)
    # a vertex patch of four cells at most, plus constraint fill from hanging edges
    assert counts.max() <= 2 * (2 * 2 + 1) ** 2
