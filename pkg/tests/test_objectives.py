import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from mrissl import objectives as obj
from oracles import dino_direct, infonce_direct, nt_xent_direct


def unit_rows(rng, n, d, dtype=torch.float64):
    z = torch.from_numpy(rng.normal(size=(n, d)))
    return (z / z.norm(dim=1, keepdim=True)).to(dtype)


def random_orthogonal(rng, d):
    q, r = np.linalg.qr(rng.normal(size=(d, d)))
    return torch.from_numpy(q * np.sign(np.diag(r)))


# -- normalization and similarity ------------------------------------------


def test_l2_normalize_examples():
    assert torch.allclose(obj.l2_normalize(torch.tensor([3.0, 4.0], dtype=torch.float64)),
                          torch.tensor([0.6, 0.8], dtype=torch.float64), atol=1e-12)
    assert torch.equal(obj.l2_normalize(torch.tensor([1.0, 0.0])), torch.tensor([1.0, 0.0]))
    with pytest.raises(obj.ObjectiveError):
        obj.l2_normalize(torch.zeros(2))


@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=16))
def test_l2_normalize_unit_norm(values):
    z = torch.tensor(values, dtype=torch.float64)
    if z.norm() <= 1e-6:
        return
    out = obj.l2_normalize(z)
    assert abs(out.norm().item() - 1) < 1e-9
    assert torch.allclose(out * z.norm(), z, atol=1e-9 * z.norm().item())


def test_similarity_matrix_examples():
    z = torch.eye(2, dtype=torch.float64)
    assert torch.equal(obj.similarity_matrix(z, 0.5), torch.tensor([[2.0, 0.0], [0.0, 2.0]], dtype=torch.float64))
    one = torch.tensor([[0.6, 0.8]], dtype=torch.float64)
    assert torch.allclose(obj.similarity_matrix(one, 0.2), torch.tensor([[5.0]], dtype=torch.float64))
    with pytest.raises(obj.ObjectiveError):
        obj.similarity_matrix(z, 0.0)


def test_similarity_matrix_matches_double_loop():
    rng = np.random.default_rng(0)
    z = unit_rows(rng, 7, 5)
    s = obj.similarity_matrix(z, 0.3).numpy()
    zn = z.numpy()
    for i in range(7):
        for j in range(7):
            assert abs(s[i, j] - sum(zn[i, k] * zn[j, k] for k in range(5)) / 0.3) < 1e-9
    assert np.allclose(s, s.T)
    assert np.allclose(np.diag(s), 1 / 0.3)


# -- NT-Xent -----------------------------------------------------------------


def test_nt_xent_fixtures():
    z = torch.tensor([[1, 0], [1, 0], [0, 1], [0, 1]], dtype=torch.float64)
    loss, per_row = obj.nt_xent_loss(z, 1.0)
    assert abs(loss.item() - 0.55144) < 1e-4
    assert torch.allclose(per_row, torch.full((4,), -math.log(math.e / (math.e + 2)), dtype=torch.float64))
    same = torch.tensor([[1.0, 0.0]] * 4, dtype=torch.float64)
    assert abs(obj.nt_xent_loss(same, 1.0)[0].item() - math.log(3)) < 1e-6


@pytest.mark.parametrize("tau", [0.2, 0.5, 1.0])
def test_nt_xent_single_pair_is_zero(tau):
    z = unit_rows(np.random.default_rng(1), 2, 6)
    assert obj.nt_xent_loss(z, tau)[0].item() == 0.0


def test_nt_xent_rejects_unnormalized_rows():
    with pytest.raises(obj.ObjectiveError):
        obj.nt_xent_loss(torch.ones(4, 3), 0.5)
    with pytest.raises(obj.ObjectiveError):
        obj.nt_xent_loss(unit_rows(np.random.default_rng(0), 3, 2), 0.5)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 8), st.integers(1, 16), st.sampled_from([0.2, 0.5, 1.0]), st.integers(0, 2**31))
def test_nt_xent_matches_direct_sum(n, d, tau, seed):
    z = unit_rows(np.random.default_rng(seed), 2 * n, d)
    loss, _ = obj.nt_xent_loss(z, tau)
    assert abs(loss.item() - nt_xent_direct(z.tolist(), tau)) < 1e-6
    assert loss.item() >= 0


def test_interleave_layout():
    a = torch.tensor([[1.0], [2.0]])
    b = torch.tensor([[10.0], [20.0]])
    assert obj.interleave(a, b).flatten().tolist() == [1.0, 10.0, 2.0, 20.0]
    assert obj.positive_index(4).tolist() == [1, 0, 3, 2]


# -- BYOL / MoCo v3 ----------------------------------------------------------


def test_byol_examples():
    p = torch.tensor([[1.0, 0.0], [0.0, 2.0]], dtype=torch.float64)
    assert abs(obj.byol_loss(p, p * 3).item()) < 1e-12
    assert abs(obj.byol_loss(p, torch.tensor([[0.0, 1.0], [5.0, 0.0]], dtype=torch.float64)).item() - 2) < 1e-12
    assert abs(obj.byol_loss(p, -p).item() - 4) < 1e-12
    with pytest.raises(obj.ObjectiveError):
        obj.byol_loss(torch.zeros(1, 2), torch.ones(1, 2))


def test_byol_target_receives_no_gradient():
    p = torch.randn(4, 3, requires_grad=True)
    z = torch.randn(4, 3, requires_grad=True)
    obj.byol_loss(p, z).backward()
    assert p.grad is not None and z.grad is None


def test_moco_fixtures():
    q = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
    assert abs(obj.moco_v3_loss(q, q, 1.0).item() - 0.31326) < 1e-4
    same = torch.tensor([[1.0, 0.0], [1.0, 0.0]], dtype=torch.float64)
    assert abs(obj.moco_v3_loss(same, same, 1.0).item() - math.log(2)) < 1e-12
    with pytest.raises(obj.ObjectiveError):
        obj.moco_v3_loss(q[:1], q[:1], 0.2)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 8), st.integers(2, 12), st.integers(0, 2**31))
def test_moco_matches_direct_and_tau_moves_toward_log_batch(n, d, seed):
    rng = np.random.default_rng(seed)
    q, k = unit_rows(rng, n, d), unit_rows(rng, n, d)
    for tau in (0.2, 1.0):
        assert abs(obj.moco_v3_loss(q, k, tau).item() - infonce_direct(q.tolist(), k.tolist(), tau)) < 1e-9
    # with aligned pairs the positive logit is the largest in its row, so
    # raising tau pulls the loss monotonically up toward the uniform value ln n
    losses = [obj.moco_v3_loss(q, q, tau).item() for tau in (0.2, 2.0, 20.0)]
    if len(set(map(tuple, q.tolist()))) == n:
        assert losses[0] < losses[1] < losses[2] < math.log(n)


def test_symmetrized_averages_both_directions():
    rng = np.random.default_rng(3)
    o1, o2, t1, t2 = (unit_rows(rng, 4, 5) for _ in range(4))
    got = obj.symmetrized(obj.moco_v3_loss, (o1, o2), (t1, t2), temperature=0.2)
    want = 0.5 * (infonce_direct(o1.tolist(), t2.tolist(), 0.2) + infonce_direct(o2.tolist(), t1.tolist(), 0.2))
    assert abs(got.item() - want) < 1e-9


# -- invariances ---------------------------------------------------------------


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 6), st.integers(2, 10), st.integers(0, 2**31))
def test_rotation_invariance(n, d, seed):
    rng = np.random.default_rng(seed)
    z = unit_rows(rng, 2 * n, d)
    p, t = unit_rows(rng, n, d), unit_rows(rng, n, d)
    rot = random_orthogonal(rng, d)
    assert abs(obj.nt_xent_loss(z, 0.5)[0] - obj.nt_xent_loss(z @ rot, 0.5)[0]) < 1e-6
    assert abs(obj.byol_loss(p, t) - obj.byol_loss(p @ rot, t @ rot)) < 1e-6
    assert abs(obj.moco_v3_loss(p, t) - obj.moco_v3_loss(p @ rot, t @ rot)) < 1e-6


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 6), st.integers(2, 10), st.integers(0, 2**31))
def test_pair_permutation_invariance(n, d, seed):
    rng = np.random.default_rng(seed)
    perm = torch.from_numpy(rng.permutation(n))
    z = unit_rows(rng, 2 * n, d)
    rows = torch.stack((2 * perm, 2 * perm + 1), dim=1).flatten()
    assert abs(obj.nt_xent_loss(z, 0.5)[0] - obj.nt_xent_loss(z[rows], 0.5)[0]) < 1e-9
    p, t = unit_rows(rng, n, d), unit_rows(rng, n, d)
    assert abs(obj.byol_loss(p, t) - obj.byol_loss(p[perm], t[perm])) < 1e-9
    assert abs(obj.moco_v3_loss(p, t) - obj.moco_v3_loss(p[perm], t[perm])) < 1e-9
    s, te = torch.from_numpy(rng.normal(size=(n, d))), torch.from_numpy(rng.normal(size=(n, d)))
    c = obj.CenterState(torch.from_numpy(rng.normal(size=d)))
    assert abs(obj.dino_loss(s, te, c) - obj.dino_loss(s[perm], te[perm], c)) < 1e-9


# -- DINO ------------------------------------------------------------------------


def test_dino_fixtures():
    c = obj.CenterState.zeros(4, dtype=torch.float64)
    flat = torch.zeros(3, 4, dtype=torch.float64)
    assert abs(obj.dino_loss(flat, flat, c).item() - math.log(4)) < 1e-6
    teacher = torch.tensor([[2.0, -1.0, 0.5, 3.0]], dtype=torch.float64)
    centered = obj.CenterState(teacher[0].clone())
    assert abs(obj.dino_loss(torch.zeros(1, 4, dtype=torch.float64), teacher, centered).item() - math.log(4)) < 1e-9
    one_hot = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
    got = obj.dino_loss(one_hot, one_hot, obj.CenterState.zeros(2, dtype=torch.float64))
    assert abs(got.item() - 4.54e-5) < 1e-7
    with pytest.raises(obj.ObjectiveError):
        obj.dino_loss(torch.zeros(1, 3), torch.zeros(1, 4), obj.CenterState.zeros(4))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 5), st.integers(2, 8), st.integers(0, 2**31))
def test_dino_matches_direct(n, k, seed):
    rng = np.random.default_rng(seed)
    s, t, c = rng.normal(size=(n, k)), rng.normal(size=(n, k)), rng.normal(size=k)
    got = obj.dino_loss(torch.from_numpy(s), torch.from_numpy(t), obj.CenterState(torch.from_numpy(c)))
    assert abs(got.item() - dino_direct(s.tolist(), t.tolist(), c.tolist(), 0.1, 0.04)) < 1e-9
    assert got.item() >= 0


def test_dino_views_use_cross_pairs_only():
    rng = np.random.default_rng(5)
    s1, s2, t1, t2 = (torch.from_numpy(rng.normal(size=(3, 6))) for _ in range(4))
    c = obj.CenterState(torch.from_numpy(rng.normal(size=6)))
    got = obj.dino_loss([s1, s2], [t1, t2], c)
    want = 0.5 * (obj.dino_loss(s2, t1, c) + obj.dino_loss(s1, t2, c))
    assert abs(got - want) < 1e-12


def test_dino_teacher_receives_no_gradient():
    s = torch.randn(2, 5, requires_grad=True)
    t = torch.randn(2, 5, requires_grad=True)
    obj.dino_loss(s, t, obj.CenterState.zeros(5)).backward()
    assert s.grad is not None and t.grad is None


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 8), st.integers(0, 2**31))
def test_teacher_distribution_rows_and_sharpening(k, seed):
    rng = np.random.default_rng(seed)
    logits = torch.from_numpy(rng.normal(size=(3, k)))
    c = torch.zeros(k, dtype=torch.float64)
    p_hot = obj.teacher_distribution(logits, c, 0.5)
    p_cold = obj.teacher_distribution(logits, c, 0.1)
    assert torch.allclose(p_hot.sum(1), torch.ones(3, dtype=torch.float64), atol=1e-6)
    assert bool((p_cold.max(1).values > p_hot.max(1).values).all())


def test_center_update_examples():
    c = obj.CenterState.zeros(3, momentum=0.9, dtype=torch.float64)
    new = obj.dino_center_update(c, torch.ones(3, dtype=torch.float64))
    assert torch.allclose(new.center, torch.full((3,), 0.1, dtype=torch.float64))
    assert torch.equal(c.center, torch.zeros(3, dtype=torch.float64))  # pure
    fixed = obj.CenterState(torch.tensor([0.3, -2.0]), 1.0)
    assert torch.equal(obj.dino_center_update(fixed, torch.tensor([5.0, 5.0])).center, fixed.center)
    follow = obj.CenterState(torch.tensor([0.3, -2.0]), 0.0)
    assert torch.equal(obj.dino_center_update(follow, torch.tensor([5.0, 6.0])).center, torch.tensor([5.0, 6.0]))


# -- EMA -------------------------------------------------------------------------


def test_ema_boundaries_are_exact():
    xi = {"w": torch.tensor([0.1, 0.2, 0.3])}
    theta = {"w": torch.tensor([7.0, -1.0, 1e-8])}
    state = obj.MomentumState(xi)
    assert torch.equal(obj.ema_update(state, theta, 1.0).params["w"], xi["w"])
    assert torch.equal(obj.ema_update(state, theta, 0.0).params["w"], theta["w"])
    assert obj.ema_update(state, theta, 0.5).updates == 1


def test_ema_geometric_recursion():
    state = obj.MomentumState({"w": torch.zeros(4, dtype=torch.float64)})
    theta = {"w": torch.ones(4, dtype=torch.float64)}
    for _ in range(100):
        state = obj.ema_update(state, theta, 0.99)
    assert torch.allclose(state.params["w"], torch.full((4,), 1 - 0.99**100, dtype=torch.float64), atol=1e-8)
    assert state.updates == 100


def test_ema_errors():
    state = obj.MomentumState({"w": torch.zeros(2)})
    with pytest.raises(obj.ObjectiveError):
        obj.ema_update(state, {"w": torch.zeros(3)}, 0.5)
    with pytest.raises(obj.ObjectiveError):
        obj.ema_update(state, {"v": torch.zeros(2)}, 0.5)
    with pytest.raises(obj.ObjectiveError):
        obj.ema_update(state, {"w": torch.zeros(2)}, 1.5)


# -- gradients -------------------------------------------------------------------


def fd_check(fn, x: torch.Tensor, eps: float = 1e-6) -> float:
    """Max relative error between autograd and central differences."""
    x = x.detach().clone().requires_grad_(True)
    (analytic,) = torch.autograd.grad(fn(x), x)
    numeric = torch.zeros_like(x)
    flat = x.detach().view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + eps
        up = fn(x.detach()).item()
        flat[i] = orig - eps
        down = fn(x.detach()).item()
        flat[i] = orig
        numeric.view(-1)[i] = (up - down) / (2 * eps)
    return ((analytic - numeric).norm() / max(numeric.norm(), analytic.norm(), 1e-12)).item()


def nt_xent_of_raw(x):
    return obj.nt_xent_loss(x / x.norm(dim=1, keepdim=True), 0.5)[0]


def test_loss_gradients_match_finite_differences():
    rng = np.random.default_rng(11)
    x = torch.from_numpy(rng.normal(size=(6, 5)))
    t = torch.from_numpy(rng.normal(size=(3, 5)))
    c = obj.CenterState(torch.from_numpy(rng.normal(size=5)))
    assert fd_check(nt_xent_of_raw, x) < 1e-4
    assert fd_check(lambda p: obj.byol_loss(p, t), x[:3]) < 1e-4
    assert fd_check(lambda q: obj.moco_v3_loss(q, t, 0.2), x[:3]) < 1e-4
    assert fd_check(lambda s: obj.dino_loss(s, t, c), x[:3]) < 1e-4
