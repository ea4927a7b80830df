import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from vidconcepts.conceptspace import (
    AlignmentConfig, PrototypeBank, alignment_loss, compute_code, init_prototypes,
    sinkhorn_plan, sinkhorn_soft_codes, soft_codes_for,
)
from vidconcepts.errors import DegenerateInputError, InvalidInputError

finite = st.floats(-1.0, 1.0, allow_nan=False, width=64)


class TestComputeCode:
    def test_basis_vectors(self):
        protos = torch.eye(2, dtype=torch.float64)
        code = compute_code(torch.tensor([1.0, 0.0], dtype=torch.float64), protos)
        assert code.tolist() == [1.0, 0.0]

    def test_scale_by_five(self):
        rng = np.random.default_rng(0)
        vec, protos = torch.from_numpy(rng.normal(size=8)), torch.from_numpy(rng.normal(size=(4, 8)))
        torch.testing.assert_close(compute_code(5 * vec, protos), compute_code(vec, protos),
                                   rtol=0, atol=1e-15)

    @pytest.mark.parametrize("seed", range(100))
    def test_matches_loop_oracle(self, seed):
        rng = np.random.default_rng(seed)
        vec, protos = rng.normal(size=8), rng.normal(size=(4, 8))
        got = compute_code(torch.from_numpy(vec), torch.from_numpy(protos))
        np.testing.assert_allclose(got.numpy(), oracles.cosine_code(vec, protos), atol=1e-6)

    def test_batched(self):
        rng = np.random.default_rng(1)
        vecs, protos = rng.normal(size=(5, 8)), rng.normal(size=(3, 8))
        got = compute_code(torch.from_numpy(vecs), torch.from_numpy(protos)).numpy()
        for b in range(5):
            np.testing.assert_allclose(got[b], oracles.cosine_code(vecs[b], protos), atol=1e-12)

    def test_zero_vec(self):
        with pytest.raises(DegenerateInputError):
            compute_code(torch.zeros(4), torch.ones(2, 4))

    def test_zero_prototype(self):
        with pytest.raises(DegenerateInputError):
            compute_code(torch.ones(4), torch.zeros(2, 4))

    @given(arrays(np.float64, 6, elements=finite), st.floats(1e-3, 1e3))
    @settings(max_examples=50, deadline=None)
    def test_scale_invariance_and_range(self, vec, lam):
        if np.linalg.norm(vec) < 1e-6:
            return
        protos = torch.from_numpy(np.random.default_rng(3).normal(size=(5, 6)))
        a = compute_code(torch.from_numpy(vec), protos)
        b = compute_code(torch.from_numpy(lam * vec), protos)
        torch.testing.assert_close(a, b, rtol=0, atol=1e-12)
        assert bool((a.abs() <= 1 + 1e-12).all())


class TestPrototypes:
    def test_init_rows_unit_norm(self):
        w = init_prototypes(50, 128, torch.Generator().manual_seed(0))
        torch.testing.assert_close(w.norm(dim=1), torch.ones(50))

    def test_bank_shapes_and_split(self):
        bank = PrototypeBank(3, 4, 16)
        assert bank.P_s.shape == (3, 16) and bank.P_d.shape == (4, 16) and bank.P_v.shape == (7, 16)
        a, b = bank.split_v(torch.arange(7.0))
        assert a.tolist() == [0, 1, 2] and b.tolist() == [3, 4, 5, 6]

    def test_bank_needs_two(self):
        with pytest.raises(InvalidInputError):
            PrototypeBank(1, 4, 16)


class TestSinkhorn:
    def test_equal_codes_uniform(self):
        for B, K in [(1, 2), (3, 7), (8, 5)]:
            soft = sinkhorn_soft_codes(torch.full((B, K), 0.3, dtype=torch.float64))
            torch.testing.assert_close(soft, torch.full((B, K), 1.0 / K, dtype=torch.float64))

    def test_two_by_two_near_permutation(self):
        codes = torch.tensor([[10.0, 0.0], [0.0, 10.0]], dtype=torch.float64)
        soft = sinkhorn_soft_codes(codes, AlignmentConfig(sinkhorn_iters=50))
        assert soft[0, 0] >= 0.99 and soft[1, 1] >= 0.99
        np.testing.assert_allclose(soft.numpy(), oracles.soft_codes(codes, 0.05, 50), atol=1e-12)

    def test_column_marginals_after_three_iterations(self):
        codes = torch.from_numpy(np.random.default_rng(0).uniform(-1, 1, size=(32, 50)))
        plan = sinkhorn_plan(codes, 0.05, 3)
        np.testing.assert_allclose(plan.sum(0).numpy(), 1 / 50, atol=1e-3)
        soft = sinkhorn_soft_codes(codes)
        np.testing.assert_allclose(soft.sum(1).numpy(), 1.0, atol=1e-5)

    def test_converged_columns_sum_to_b_over_k(self):
        codes = torch.from_numpy(np.random.default_rng(0).uniform(-1, 1, size=(32, 50)))
        soft = sinkhorn_soft_codes(codes, AlignmentConfig(sinkhorn_iters=500))
        np.testing.assert_allclose(soft.sum(0).numpy(), 32 / 50, atol=1e-3)
        np.testing.assert_allclose(soft.sum(1).numpy(), 1.0, atol=1e-5)

    @pytest.mark.parametrize("seed", range(100))
    def test_matches_loop_oracle(self, seed):
        rng = np.random.default_rng(seed)
        B, K = int(rng.integers(1, 9)), int(rng.integers(2, 9))
        codes = rng.uniform(-1, 1, size=(B, K))
        got = sinkhorn_soft_codes(torch.from_numpy(codes)).numpy()
        np.testing.assert_allclose(got, oracles.soft_codes(codes, 0.05, 3), atol=1e-6)

    def test_non_finite_rejected(self):
        with pytest.raises(InvalidInputError):
            sinkhorn_soft_codes(torch.tensor([[0.0, float("nan")]]))

    def test_single_concept_rejected(self):
        with pytest.raises(InvalidInputError):
            sinkhorn_soft_codes(torch.zeros(3, 1))

    def test_empty_batch(self):
        assert sinkhorn_soft_codes(torch.zeros(0, 5)).shape == (0, 5)

    def test_no_gradient(self):
        codes = torch.randn(4, 5, requires_grad=True)
        assert not sinkhorn_soft_codes(codes).requires_grad

    def test_fewer_samples_than_concepts(self):
        codes = torch.from_numpy(np.random.default_rng(2).uniform(-1, 1, size=(4, 10)))
        plan = sinkhorn_plan(codes, 0.05, 3)
        np.testing.assert_allclose(plan.sum(0).numpy(), 0.1, atol=1e-2)

    @given(arrays(np.float64, (5, 6), elements=finite), arrays(np.float64, (5, 1), elements=finite))
    @settings(max_examples=50, deadline=None)
    def test_row_shift_invariance(self, codes, shift):
        a = sinkhorn_soft_codes(torch.from_numpy(codes))
        b = sinkhorn_soft_codes(torch.from_numpy(codes + shift))
        torch.testing.assert_close(a, b, rtol=0, atol=1e-6)

    @given(arrays(np.float64, (6, 4), elements=finite))
    @settings(max_examples=50, deadline=None)
    def test_rows_are_distributions(self, codes):
        soft = sinkhorn_soft_codes(torch.from_numpy(codes))
        assert bool((soft >= 0).all())
        np.testing.assert_allclose(soft.sum(1).numpy(), 1.0, atol=1e-5)


def random_alignment_instance(rng, B, ks, kd):
    q_s = torch.from_numpy(rng.uniform(-1, 1, (B, ks)))
    q_d = torch.from_numpy(rng.uniform(-1, 1, (B, kd)))
    q_v = torch.from_numpy(rng.uniform(-1, 1, (B, ks + kd)))
    soft = {k: torch.from_numpy(rng.dirichlet(np.ones(n), B))
            for k, n in (("s", ks), ("d", kd), ("v_s", ks), ("v_d", kd))}
    return q_s, q_d, q_v, soft


class TestAlignmentLoss:
    def test_one_hot_limit_is_zero(self):
        q = torch.tensor([[1.0, -1.0]], dtype=torch.float64)
        soft = {k: torch.tensor([[1.0, 0.0]], dtype=torch.float64) for k in ("s", "d", "v_s", "v_d")}
        loss = alignment_loss(q, q, torch.cat([q, q], 1), soft, 2, AlignmentConfig(tau=1e-3))
        assert float(loss) < 1e-12

    def test_uniform_gives_log_k(self):
        q = torch.zeros(3, 2, dtype=torch.float64)
        soft = {k: torch.full((3, 2), 0.5, dtype=torch.float64) for k in ("s", "d", "v_s", "v_d")}
        loss = alignment_loss(q, q, torch.cat([q, q], 1), soft, 2)
        assert math.isclose(float(loss), 4 * math.log(2), abs_tol=1e-12)

    @pytest.mark.parametrize("seed", range(100))
    def test_matches_loop_oracle(self, seed):
        rng = np.random.default_rng(seed)
        B, ks, kd = int(rng.integers(1, 9)), int(rng.integers(2, 9)), int(rng.integers(2, 9))
        q_s, q_d, q_v, soft = random_alignment_instance(rng, B, ks, kd)
        got = float(alignment_loss(q_s, q_d, q_v, soft, ks))
        want = oracles.alignment(q_s, q_d, q_v, soft, ks, 0.1)
        assert abs(got - want) < 1e-6

    def test_mismatched_k(self):
        q_s, q_d, q_v, soft = random_alignment_instance(np.random.default_rng(0), 2, 3, 3)
        soft["s"] = soft["s"][:, :2]
        with pytest.raises(InvalidInputError):
            alignment_loss(q_s, q_d, q_v, soft, 3)

    def test_equals_entropy_when_softmax_matches(self):
        rng = np.random.default_rng(4)
        tau = 0.1
        q = torch.from_numpy(rng.uniform(-1, 1, (3, 4)))
        p = torch.softmax(q / tau, -1)
        soft = {k: p for k in ("s", "d", "v_s", "v_d")}
        loss = float(alignment_loss(q, q, torch.cat([q, q], 1), soft, 4))
        entropy = float(-(p * p.log()).sum(-1).mean())
        assert math.isclose(loss, 4 * entropy, rel_tol=1e-12)

    @given(st.integers(0, 2**31))
    @settings(max_examples=30, deadline=None)
    def test_nonnegative(self, seed):
        q_s, q_d, q_v, soft = random_alignment_instance(np.random.default_rng(seed), 4, 3, 5)
        assert float(alignment_loss(q_s, q_d, q_v, soft, 3)) >= 0

    def test_soft_codes_carry_no_gradient(self):
        rng = np.random.default_rng(5)
        q_s, q_d, q_v, _ = random_alignment_instance(rng, 4, 3, 3)
        for t in (q_s, q_d, q_v):
            t.requires_grad_(True)
        soft = soft_codes_for(q_s, q_d, q_v, 3)
        assert not any(s.requires_grad for s in soft.values())
        # with targets frozen, gradient equals the analytic softmax-minus-target form
        alignment_loss(q_s, q_d, q_v, soft, 3).backward()
        expected = (torch.softmax(q_s.detach() / 0.1, -1) - soft["v_s"]) / 0.1 / 4
        torch.testing.assert_close(q_s.grad, expected)

    def test_static_and_dynamic_blocks_decoupled(self, f64):
        rng = np.random.default_rng(6)
        C, ks, kd, B = 8, 3, 4, 5
        bank = PrototypeBank(ks, kd, C).double()
        feats = {k: torch.from_numpy(rng.normal(size=(B, C))).requires_grad_(True)
                 for k in ("s", "d", "v")}
        q = {k: compute_code(feats[k], bank[k]) for k in feats}
        soft = soft_codes_for(q["s"], q["d"], q["v"], ks)
        zero = {k: torch.zeros_like(v) for k, v in soft.items()}
        static_only = dict(zero, s=soft["s"], v_s=soft["v_s"])
        alignment_loss(q["s"], q["d"], q["v"], static_only, ks).backward()
        # uniform-zero targets on the dynamic side leave those terms identically 0
        assert feats["d"].grad is None or not feats["d"].grad.any()
        assert bank.P_d.grad is None or not bank.P_d.grad.any()
        assert not bank.P_v.grad[ks:].any()
