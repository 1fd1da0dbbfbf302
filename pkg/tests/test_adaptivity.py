import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stmaxwell import basis1d as b1
from stmaxwell.adaptivity import (_apply_axes, _coarse_spaces, _embed, _fine_spaces, _gram,
                                  _time_scatter)
from stmaxwell.adaptivity import (Candidate, adapt_slab, build_fine_space, children_of,
                                  choose_refinements, element_dofs, embed_coarse,
                                  enumerate_candidates, estimate, fine_tensor,
                                  mark_fixed_fraction, projection_defect, score_candidate,
                                  select_candidate, solve_pair, write_adapt_log)
from stmaxwell.fespace import (DegreeVector, FieldState, NodalState, SpaceDescriptor, evaluate_block,
                               l2_project_function, l2_project_nodal, trial_from_vector)
from stmaxwell.mesh import build_mesh, set_temporal_levels
from stmaxwell.timeloop import AnalyticSolution


def random_trial(space, rng):
    degs = space.spatial_degrees()
    init = NodalState(space.mesh, degs, [rng.standard_normal((3, *(p + 1 for p in d))) for d in degs],
                      [rng.standard_normal((3, *(p + 1 for p in d))) for d in degs])
    return trial_from_vector(space, rng.standard_normal(space.n_unknowns), init)


def coarse_space():
    mesh = build_mesh((2, 1, 1), hi=(1.0, 0.5, 0.5))
    return SpaceDescriptor(mesh, set_temporal_levels(0.0, 0.1, [0, 1]),
                           [DegreeVector(1, 1, 0, 2), DegreeVector(2, 0, 1, 1)])


def values(U, e, tt, xs):
    """Physical values of element ``e`` at reference times (slab-relative)
    and physical points, by direct basis evaluation."""
    sp = U.space
    o, h = sp.mesh.origin(e), sp.mesh.h(e)
    n = sp.n_sub(e)
    out = []
    for tau in tt:
        k = min(int(tau * n), n - 1)
        loc = tau * n - k
        ref = [(np.asarray(xs[a]) - o[a]) / h[a] for a in range(3)]
        out.append(evaluate_block(U.E[e][k:k + 1], h, np.array([loc]), ref)[0, :, 0])
    return np.array(out)


def test_fine_space_example_and_cap():
    sp = SpaceDescriptor(build_mesh(), set_temporal_levels(0, 1, [0]), [DegreeVector(1, 0, 0, 0)])
    fine = build_fine_space(sp)
    assert fine.n_elements == 8
    assert all(fine.n_sub(e) == 2 for e in range(8))
    assert set(fine.degrees) == {DegreeVector(2, 1, 1, 1)}
    with pytest.raises(ValueError):
        build_fine_space(SpaceDescriptor(build_mesh(), set_temporal_levels(0, 1, [0]),
                                         [DegreeVector(1, 10, 0, 0)]))


@pytest.mark.parametrize("p,pt", [(0, 1), (1, 1), (2, 3), (3, 2)])
def test_dof_ratio_formula(p, pt):
    sp = SpaceDescriptor(build_mesh((2, 1, 1)), set_temporal_levels(0, 1, [0, 0]),
                         [DegreeVector(pt, p, p, p)] * 2)
    ratio = build_fine_space(sp).n_unknowns / sp.n_unknowns
    assert ratio == pytest.approx(8 * 2 * ((p + 2) / (p + 1)) ** 3 * ((pt + 1) / pt))
    assert element_dofs(sp.degrees[0], 0) * 2 == sp.n_unknowns


def test_nesting_pointwise():
    sp = coarse_space()
    U = random_trial(sp, np.random.default_rng(0))
    fine = build_fine_space(sp)
    Uf = embed_coarse(U, fine)
    assert Uf.check_chaining(1e-13)
    rng = np.random.default_rng(1)
    kids = children_of(sp, fine)
    for e in range(sp.n_elements):
        o, h = sp.mesh.origin(e), sp.mesh.h(e)
        for f in kids[e]:
            fo, fh = fine.mesh.origin(f), fine.mesh.h(f)
            xs = [fo[a] + fh[a] * rng.random(2) for a in range(3)]
            tt = rng.random(3)
            assert np.allclose(values(U, e, tt, xs), values(Uf, f, tt, xs), atol=1e-12)
            assert o[0] <= fo[0] < o[0] + h[0]


def test_estimate_zero_locality_and_quadrature():
    sp = coarse_space()
    rng = np.random.default_rng(2)
    U = random_trial(sp, rng)
    fine = build_fine_space(sp)
    Uf = embed_coarse(U, fine)
    ind, eta = estimate(Uf, U)
    assert np.all(ind < 1e-12) and eta < 1e-12
    # perturb the unknowns of one child of coarse element 1 only
    f = children_of(sp, fine)[1][3]
    V = Uf.copy()
    V.H[f][:, :, 1:] += rng.standard_normal(V.H[f][:, :, 1:].shape)
    ind, eta = estimate(V, U)
    assert ind[0] == 0.0 and ind[1] > 0
    # random pair against quadrature of the fine-space difference
    W = random_trial(fine, rng)
    W0 = W - embed_coarse(U, fine)
    ind, eta = estimate(W, U)
    tx, tw = b1.gauss_rule(6)
    xq, wq = b1.gauss_rule(6)
    tot = 0.0
    for e in range(fine.n_elements):
        h, J = fine.mesh.element_jacobian(e)
        for blocks in (W0.E[e], W0.H[e]):
            v = evaluate_block(blocks, h, tx, [xq] * 3)
            wts = np.einsum("q,a,b,c->qabc", tw, wq, wq, wq)
            tot += fine.tau(e) * J * float(np.sum(wts * (v ** 2).sum(1)))
    assert np.sum(ind ** 2) == pytest.approx(tot, rel=1e-12)
    assert eta == pytest.approx(math.sqrt(tot), rel=1e-12)


def test_marking_examples():
    assert mark_fixed_fraction([3, 1, 2], 1.0) == [0, 1, 2]
    assert mark_fixed_fraction([3, 1, 2], 0.34) == [0, 2]
    assert mark_fixed_fraction([3, 1, 2], 0.33) == [0]
    assert mark_fixed_fraction([1, 1, 1, 1], 0.5) == [0, 1]
    with pytest.raises(ValueError):
        mark_fixed_fraction([1.0], 0.0)


@settings(max_examples=20, deadline=None)
@given(st.lists(st.floats(0, 10), min_size=1, max_size=30), st.floats(0.01, 1.0))
def test_marking_property(ind, theta):
    m = mark_fixed_fraction(ind, theta)
    assert len(m) == math.ceil(theta * len(ind) - 1e-12)
    rest = [i for i in range(len(ind)) if i not in m]
    assert all(ind[i] >= ind[j] for i in m for j in rest)


def fine_solution(seed=3):
    sp = coarse_space()
    fine = build_fine_space(sp)
    return sp, random_trial(fine, np.random.default_rng(seed))


def test_candidate_scores_special_cases():
    sp, Uh = fine_solution()
    U = random_trial(sp, np.random.default_rng(4))
    ind, _ = estimate(Uh, U)
    for e in range(sp.n_elements):
        d, lev = sp.degrees[e], sp.partition.levels[e]
        full = Candidate("fine", d.shifted(1, 1, 1, 1), lev + 1, True)
        assert score_candidate(Uh, sp, e, full) < 1e-12
        too_big = Candidate("big", d.shifted(2, 0, 0, 0), lev, False)
        assert score_candidate(Uh, sp, e, too_big) is None


def test_keep_score_matches_indicator_of_projection():
    """If U_H is the local L2 projection of U_h, keep's score equals eta(K)."""
    sp, Uh = fine_solution(5)
    kids = children_of(sp, Uh.space)
    E, H = [], []
    for e in range(sp.n_elements):
        d = sp.degrees[e]
        P = [_embed(f, c) for f, c in zip(_fine_spaces(sp, e), _coarse_spaces(sp, e))]
        h = sp.mesh.h(e)
        for fld, out in (("E", E), ("H", H)):
            T = _apply_axes(P, fine_tensor(Uh, kids[e], fld))
            out.append(_time_scatter(T, sp.n_sub(e), d.pt) * h[None, :, None, None, None, None])
    UH = FieldState(sp, "trial", E, H)
    ind, _ = estimate(Uh, UH)
    for e in range(sp.n_elements):
        keep = enumerate_candidates(sp, e)[0]
        assert score_candidate(Uh, sp, e, keep) == pytest.approx(ind[e], rel=1e-12)


def test_projection_orthogonality_and_monotonicity():
    sp, Uh = fine_solution(6)
    kids = children_of(sp, Uh.space)
    for e in range(sp.n_elements):
        grams = [_gram(s) for s in _fine_spaces(sp, e)]
        T = fine_tensor(Uh, kids[e], "E")
        cands = enumerate_candidates(sp, e)
        keep = score_candidate(Uh, sp, e, cands[0])
        for c in cands:
            if score_candidate(Uh, sp, e, c) is None:
                continue
            D = projection_defect(T, sp, e, c)
            PT = T - D
            # defect orthogonal to the candidate space: <D, PT> = 0, Pi idempotent
            ip = float(np.sum(D * _apply_axes(grams, PT)))
            assert abs(ip) <= 1e-11 * float(np.sum(T * _apply_axes(grams, T)))
            assert np.allclose(projection_defect(PT, sp, e, c), 0.0, atol=1e-11)
            superset = all(s >= 0 for s in (c.degrees.pt - sp.degrees[e].pt,
                                            *(a - b for a, b in zip(c.degrees.spatial,
                                                                    sp.degrees[e].spatial)),
                                            c.level - sp.partition.levels[e]))
            if superset:
                assert score_candidate(Uh, sp, e, c) <= keep * (1 + 1e-12)


def test_separable_field_prefers_px():
    sp = SpaceDescriptor(build_mesh(), set_temporal_levels(0, 1, [0]), [DegreeVector(1, 1, 1, 1)])
    fine = build_fine_space(sp)
    f = lambda t, x, y, z: np.stack([0 * x, 0 * x, x ** 3 + 0 * y * z + 0 * t])
    Uh = l2_project_function(f, f, fine)
    by_tag = {c.tag: score_candidate(Uh, sp, 0, c) for c in enumerate_candidates(sp, 0)}
    assert by_tag["px+1"] < by_tag["keep"] * 0.9
    assert by_tag["py+1"] == pytest.approx(by_tag["keep"], rel=1e-12)
    assert by_tag["pz+1"] == pytest.approx(by_tag["keep"], rel=1e-12)
    chosen, _ = choose_refinements(Uh, sp, [0])
    assert chosen[0].degrees.py == 1 and chosen[0].degrees.pz == 1


def test_select_rules():
    d = DegreeVector(1, 1, 1, 1)
    keep = Candidate("keep", d, 0, dofs=100, score=1.0)
    a = Candidate("a", d, 0, dofs=110, score=0.5)
    b = Candidate("b", d, 0, dofs=200, score=0.5)
    worse = Candidate("deref", d, 0, dofs=50, score=1.0 + 1e-9)
    assert select_candidate([keep, a], 1.0, 100) is a
    assert select_candidate([keep, b, a], 1.0, 100) is a
    assert select_candidate([keep, worse], 1.0, 100) is None
    same1 = Candidate("s1", d, 0, dofs=110, score=0.5)
    assert select_candidate([a, same1], 1.0, 100) is a


def test_infinite_tolerance_is_single_solve(tmp_path):
    sp = SpaceDescriptor(build_mesh(), set_temporal_levels(0, 0.1, [0]), [DegreeVector(1, 1, 1, 1)])
    f = lambda t, x, y, z: np.stack([0 * x, 0 * x, np.sin(np.pi * x) * np.sin(np.pi * y) + 0 * z])
    init = l2_project_nodal(lambda *p: f(0, *p), lambda *p: 0 * f(0, *p), sp.mesh, sp.spatial_degrees())
    res = adapt_slab(sp, init, math.inf)
    assert res.converged and res.rounds == 1 and len(res.log) == 1
    assert res.space is sp
    write_adapt_log(res.log, tmp_path / "adapt.csv", slab=0)
    lines = (tmp_path / "adapt.csv").read_text().splitlines()
    assert lines[0] == "slab,round,eta,dofs,choices" and len(lines) == 2


def plane_pulse():
    """E_z = f(x - t), H_y = -f(x - t) with a Gaussian profile."""
    prof = lambda s: np.exp(-((s - 0.5) / 0.2) ** 2)
    dprof = lambda s: -2 * (s - 0.5) / 0.04 * prof(s)

    def E(t, x, y, z):
        v = prof(x - t) + 0 * y * z
        return np.stack([0 * v, 0 * v, v])

    def H(t, x, y, z):
        v = -prof(x - t) + 0 * y * z
        return np.stack([0 * v, v, 0 * v])

    def curlE(t, x, y, z):
        v = dprof(x - t) + 0 * y * z
        return np.stack([0 * v, -v, 0 * v])

    def dE(t, x, y, z):
        v = -dprof(x - t) + 0 * y * z
        return np.stack([0 * v, 0 * v, v])

    def dH(t, x, y, z):
        v = dprof(x - t) + 0 * y * z
        return np.stack([0 * v, v, 0 * v])

    def curlH(t, x, y, z):
        v = -dprof(x - t) + 0 * y * z
        return np.stack([0 * v, 0 * v, v])

    return AnalyticSolution("pulse", E, H, dE, dH, curlE, curlH, None, E)


def test_plane_pulse_raises_degrees_along_propagation():
    sol = plane_pulse()
    assert sol.self_check() < 1e-10
    mesh = build_mesh((2, 1, 1), hi=(1.0, 0.5, 0.5))
    sp = SpaceDescriptor(mesh, set_temporal_levels(0, 0.05, [0, 0]), [DegreeVector(1, 1, 1, 1)] * 2)
    init = lambda m, degs: l2_project_nodal(lambda *p: sol.E(0, *p), lambda *p: sol.H(0, *p), m, degs)
    res = adapt_slab(sp, init, 0.0, theta=1.0, max_rounds=3, boundary=sol.g)
    degs = res.space.degrees
    assert res.rounds >= 2
    assert max(d.px for d in degs) > 1
    assert all(d.py == 1 and d.pz == 1 for d in degs)


def test_solve_pair_warm_start_fine_solution():
    sp = SpaceDescriptor(build_mesh(), set_temporal_levels(0, 0.1, [0]), [DegreeVector(1, 1, 1, 1)])
    sol = plane_pulse()
    init = lambda m, degs: l2_project_nodal(lambda *p: sol.E(0, *p), lambda *p: sol.H(0, *p), m, degs)
    state, its = solve_pair(sp, init, boundary=sol.g)
    assert state.eta > 0 and its > 0
    assert state.U_h.space.n_elements == 8
