import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from social_mamba import autodiff as ad
from social_mamba.autodiff import Tensor, constant
from social_mamba.baselines import TwoPassBidirectionalBlock
from social_mamba.cycle import CycleMambaBlock, build_cycle_sequence, cycle_mamba_block, reconstruct
from social_mamba.errors import ShapeError
from social_mamba.ssm import MambaBlockConfig, selective_scan

CFG = MambaBlockConfig(d_model=6, d_state=4, conv_kernel=3, expand=2)


def recompute_step(h_prev, u, delta, A, B):
    """One recurrence step evaluated outside the scan."""
    z = delta[:, None] * A
    return np.exp(z) * h_prev + (np.expm1(z) / A) * B[None, :] * u[:, None]


def test_build_cycle_sequence_definition():
    a, b, c = [1.0, 10.0], [2.0, 20.0], [3.0, 30.0]
    out = build_cycle_sequence(Tensor([a, b, c])).data
    np.testing.assert_array_equal(out, [c, b, a, a, b, c])


def test_build_cycle_sequence_degenerate_and_doubling():
    s = Tensor([[5.0]])
    np.testing.assert_array_equal(build_cycle_sequence(s).data, [[5.0], [5.0]])
    s = Tensor(np.arange(6.0).reshape(3, 2))
    twice = build_cycle_sequence(build_cycle_sequence(s))
    assert twice.shape[0] == 4 * 3


def test_build_cycle_sequence_rejects_empty():
    with pytest.raises(ShapeError):
        build_cycle_sequence(Tensor(np.zeros((0, 2))))


def test_reconstruct_of_identity_doubles():
    s = np.random.default_rng(0).standard_normal((4, 3))
    np.testing.assert_array_equal(reconstruct(build_cycle_sequence(Tensor(s))).data, 2 * s)


def test_reconstruct_zeros_and_odd_length():
    np.testing.assert_array_equal(reconstruct(Tensor(np.zeros((6, 2)))).data, np.zeros((3, 2)))
    with pytest.raises(ShapeError):
        reconstruct(Tensor(np.zeros((5, 2))))


def test_reconstruct_index_arithmetic():
    L = 3
    o = np.random.default_rng(1).standard_normal((2 * L, 2))
    out = reconstruct(Tensor(o)).data
    # 1-indexed: position t pairs o_{L+t} with o_{L+1-t}
    for t in range(1, L + 1):
        np.testing.assert_array_equal(out[t - 1], o[L + t - 1] + o[L - t])
    np.testing.assert_array_equal(out[0], o[3] + o[2])


def test_cycle_block_uses_one_parameter_set():
    rng = np.random.default_rng(0)
    cyc = CycleMambaBlock(CFG, rng)
    two = TwoPassBidirectionalBlock(CFG, rng)
    assert cyc.ssm_param_count() == cyc.block.ssm_param_count()
    assert 2 * cyc.ssm_param_count() == two.ssm_param_count()


def test_zero_input_gives_zero_mixer_output():
    cyc = CycleMambaBlock(CFG, np.random.default_rng(0))
    out, trace = cycle_mamba_block(Tensor(np.zeros((5, 6))), cyc)
    assert np.all(trace.merged == 0.0)
    assert np.all(out.data == 0.0)


def test_trace_layout():
    cyc = CycleMambaBlock(CFG, np.random.default_rng(0))
    s = np.random.default_rng(1).standard_normal((2, 5, 6))
    out, trace = cycle_mamba_block(Tensor(s), cyc)
    assert out.shape == s.shape
    assert trace.s_cycle.shape == (2, 10, 6)
    np.testing.assert_array_equal(trace.s_cycle[:, :5], trace.s_cycle[:, 5:][:, ::-1])
    assert trace.h_seq.shape == (2, 10, CFG.d_inner, CFG.d_state)
    np.testing.assert_array_equal(out.data, s + trace.merged)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 12), st.integers(0, 2**31))
def test_state_continues_across_the_seam(L, seed):
    rng = np.random.default_rng(seed)
    cyc = CycleMambaBlock(CFG, rng)
    _, trace = cycle_mamba_block(Tensor(rng.standard_normal((L, 6))), cyc)
    m = trace.mixer
    expected = recompute_step(trace.h_seq[L - 1], m.u[L], m.delta[L], m.A, m.B[L])
    np.testing.assert_allclose(trace.h_seq[L], expected, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("L", [1, 2, 5, 16])
def test_seam_state_is_power_sum_of_reversed_inputs(L):
    rng = np.random.default_rng(L)
    E, N = 3, 4
    s = rng.standard_normal((L, E))
    delta = np.broadcast_to(rng.uniform(0.1, 0.9, size=E), (2 * L, E)).copy()
    A = -rng.uniform(0.2, 2.0, size=(E, N))
    Bvec = rng.standard_normal(N)
    B = np.broadcast_to(Bvec, (2 * L, N)).copy()
    C = rng.standard_normal((2 * L, N))
    s_cycle = build_cycle_sequence(Tensor(s)).data
    _, h = selective_scan(s_cycle, delta, A, B, C, np.zeros(E))
    z = delta[0][:, None] * A
    a_bar, b_bar = np.exp(z), np.expm1(z) / A * Bvec
    oracle = sum(a_bar ** (L - i) * b_bar * s[L - i][:, None] for i in range(1, L + 1))
    np.testing.assert_allclose(h[L - 1], oracle, rtol=1e-9, atol=1e-9)


def test_seam_state_sees_the_future_but_two_pass_forward_start_does_not():
    rng = np.random.default_rng(3)
    L = 6
    s = rng.standard_normal((L, 6))
    s2 = s.copy()
    s2[-1] += 1.0
    cyc = CycleMambaBlock(CFG, rng)
    _, t1 = cycle_mamba_block(Tensor(s), cyc)
    _, t2 = cycle_mamba_block(Tensor(s2), cyc)
    assert np.abs(t1.h_seq[L] - t2.h_seq[L]).max() > 0

    two = TwoPassBidirectionalBlock(CFG, rng)
    s3 = s.copy()
    s3[1:] += rng.standard_normal((L - 1, 6))
    _, (f1, _) = two.forward(Tensor(s), keep_trace=True)
    _, (f3, _) = two.forward(Tensor(s3), keep_trace=True)
    np.testing.assert_array_equal(f1.h[0], f3.h[0])


def test_cycle_block_gradients_match_central_differences():
    rng = np.random.default_rng(4)
    cyc = CycleMambaBlock(MambaBlockConfig(3, 2, conv_kernel=2, expand=1), rng)
    s = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
    proj = constant(rng.standard_normal((4, 3)))
    params = [s] + [t for _, t in cyc.named_parameters()]
    assert ad.grad_check(lambda: ad.sum_(ad.mul(cyc(s), proj)), params) < 1e-4


def test_single_step_cycle():
    cyc = CycleMambaBlock(CFG, np.random.default_rng(0))
    out, trace = cycle_mamba_block(Tensor(np.ones((1, 6))), cyc)
    assert out.shape == (1, 6)
    assert trace.h_seq.shape[0] == 2
