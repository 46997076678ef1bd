"""Acceptance criteria, one test per criterion, each reporting a PASS/FAIL line.

Criteria 6 and 7 train three models at d_model=32 on 2000 synthetic scenes and
take roughly half an hour together on one CPU core.
"""

import functools
import time

import numpy as np
import pytest

from social_mamba import autodiff as ad
from social_mamba.autodiff import Tensor
from social_mamba.baselines import (TwoPassBidirectionalBlock, constant_velocity_predict, leading_power, mhsa_flops,
                                    scan_block_flops)
from social_mamba.bench import run_scaling_benchmark
from social_mamba.cycle import CycleMambaBlock, build_cycle_sequence, cycle_mamba_block
from social_mamba.fusion import SocialGate, social_gate
from social_mamba.grid import AgentTrack, GridEmbedding, Scene, embed_grid, filter_and_sort
from social_mamba.io import parse_scenes, serialize_scenes
from social_mamba.model import ModelConfig, SocialMamba
from social_mamba.ssm import MambaBlock, MambaBlockConfig, mamba_block, selective_scan
from social_mamba.synth import SynthConfig, generate_synthetic
from social_mamba.training import (TrainConfig, batch_loss, best_of_k_loss, candidate_errors, evaluate,
                                   evaluate_metrics, fit, report_from_predictions, split_train_val)

# -- 1 -------------------------------------------------------------------------


def test_criterion_1_end_to_end_gradient(verdict):
    rng = np.random.default_rng(0)
    ego = np.cumsum(rng.normal(0.4, 0.2, size=(6, 2)), axis=0)
    scene = Scene("gc", [AgentTrack(0, ego), AgentTrack(1, rng.uniform(-2, 2, size=(6, 2)))], 0, 3, 3, 0.4)
    model = SocialMamba(ModelConfig(d_model=8, d_state=4, conv_kernel=2, expand=1, k=2, t_obs=3, t_pred=3,
                                    max_agents=2))
    grids, futures = [model.grid(scene)], scene.ego_future()[None]
    assert grids[0].n_agents == 2
    params = [p for _, p in model.named_parameters()]
    t0 = time.perf_counter()
    err = ad.grad_check(lambda: batch_loss(model, grids, futures), params)
    elapsed = time.perf_counter() - t0
    n = sum(p.data.size for p in params)
    verdict(1, "gradient fidelity", err < 1e-4 and elapsed < 60.0,
            f"max rel err {err:.2e} over {n} parameters in {elapsed:.1f}s (need < 1e-4, < 60s)")


# -- 2 -------------------------------------------------------------------------


def _step(h_prev, u, delta, A, B):
    z = delta[..., None] * A
    return np.exp(z) * h_prev + (np.expm1(z) / A) * B[..., None, :] * u[..., None]


def test_criterion_2_cycle_continuity(verdict):
    rng = np.random.default_rng(2)
    cfg = MambaBlockConfig(d_model=6, d_state=4, conv_kernel=3, expand=2)
    seam_err = 0.0
    for _ in range(100):
        L = int(rng.integers(1, 17))
        block = CycleMambaBlock(cfg, rng)
        _, trace = cycle_mamba_block(Tensor(rng.standard_normal((L, 6))), block)
        m = trace.mixer
        # step L+1 consumes x_1, the first element of the forward half
        expected = _step(trace.h_seq[L - 1], m.u[L], m.delta[L], m.A, m.B[L])
        seam_err = max(seam_err, float(np.max(np.abs(trace.h_seq[L] - expected))))

    oracle_err = 0.0
    E, N = 3, 4
    for L in range(1, 17):
        s = rng.standard_normal((L, E))
        delta = np.broadcast_to(rng.uniform(0.1, 0.9, size=E), (2 * L, E)).copy()
        A = -rng.uniform(0.2, 2.0, size=(E, N))
        b = rng.standard_normal(N)
        _, h = selective_scan(build_cycle_sequence(Tensor(s)).data, delta, A, np.broadcast_to(b, (2 * L, N)).copy(),
                              rng.standard_normal((2 * L, N)), np.zeros(E))
        z = delta[0][:, None] * A
        a_bar, b_bar = np.exp(z), np.expm1(z) / A * b
        # the reversed half feeds s_L first, so s_i is discounted i - 1 times
        oracle = sum(a_bar ** (i - 1) * b_bar * s[i - 1][:, None] for i in range(1, L + 1))
        oracle_err = max(oracle_err, float(np.max(np.abs(h[L - 1] - oracle) / np.maximum(1.0, np.abs(oracle)))))
    verdict(2, "cycle continuity", seam_err <= 1e-12 and oracle_err <= 1e-9,
            f"seam step err {seam_err:.1e} over 100 inputs (need <= 1e-12); "
            f"power-sum err {oracle_err:.1e} for L=1..16 (need <= 1e-9)")


# -- 3 -------------------------------------------------------------------------


def test_criterion_3_parameter_halving(verdict):
    counts = []
    for cfg in (MambaBlockConfig(128, 16), MambaBlockConfig(32, 16), MambaBlockConfig(8, 4, conv_kernel=2, expand=1)):
        rng = np.random.default_rng(0)
        counts.append((CycleMambaBlock(cfg, rng).ssm_param_count(), TwoPassBidirectionalBlock(cfg, rng).ssm_param_count()))
    ok = all(2 * c == t for c, t in counts)
    verdict(3, "parameter halving", ok, ", ".join(f"{c} vs {t}" for c, t in counts))


# -- 4 -------------------------------------------------------------------------


def test_criterion_4_scaling(verdict):
    t0 = time.perf_counter()
    result = run_scaling_benchmark(agent_counts=(16, 64, 256, 1024))
    elapsed = time.perf_counter() - t0
    slopes = result.slopes
    powers = leading_power(scan_block_flops(32, 16)), leading_power(mhsa_flops(32, 4))
    ok = slopes["mamba"] < 1.3 and slopes["mhsa"] > 1.6 and elapsed < 300 and powers == (1, 2)
    verdict(4, "scaling", ok,
            f"mamba slope {slopes['mamba']:.3f} (< 1.3), mhsa slope {slopes['mhsa']:.3f} (> 1.6), "
            f"{elapsed:.0f}s (< 300s), FLOP leading powers scan L^{powers[0]} / attention L^{powers[1]}")


# -- 5 -------------------------------------------------------------------------


def test_criterion_5_loss_and_metric_oracles(verdict):
    rng = np.random.default_rng(5)
    K, P = 20, 12
    worst, argmin_ok = 0.0, True
    for _ in range(1000):
        y_hat, y = rng.uniform(-5, 5, (K, P, 2)), rng.uniform(-5, 5, (P, 2))
        mse = [sum((y_hat[k, t, 0] - y[t, 0]) ** 2 + (y_hat[k, t, 1] - y[t, 1]) ** 2 for t in range(P)) / P
               for k in range(K)]
        ade = [sum(np.hypot(*(y_hat[k, t] - y[t])) for t in range(P)) / P for k in range(K)]
        fde = [float(np.hypot(*(y_hat[k, -1] - y[-1]))) for k in range(K)]
        leaf = Tensor(y_hat, requires_grad=True)
        loss = best_of_k_loss(leaf, y)
        ad.backward(loss)
        # the loss selects the candidate that receives the gradient
        picked = np.flatnonzero(np.abs(leaf.grad).sum(axis=(1, 2)))
        m = evaluate_metrics(y_hat, y)
        ade_k, fde_k = candidate_errors(y_hat, y)
        argmin_ok &= (list(picked) == [int(np.argmin(mse))] and int(np.argmin(ade_k)) == int(np.argmin(ade))
                      and int(np.argmin(fde_k)) == int(np.argmin(fde)))
        worst = max(worst, abs(loss.item() - min(mse)), abs(m.min_ade - min(ade)), abs(m.min_fde - min(fde)))
    verdict(5, "loss/metric oracle equivalence", argmin_ok and worst <= 1e-12,
            f"argmin agreement {argmin_ok}, max |diff| {worst:.1e} over 1000 pairs (need <= 1e-12)")


# -- 6 and 7 -------------------------------------------------------------------

LEARN_SYNTH = SynthConfig(n_scenes=2000, min_agents=3, max_agents=8, t_obs=8, t_pred=12, seed=0)
LEARN_TRAIN = TrainConfig(epochs=10, batch_size=32, lr=3e-3, lr_step_every=6, lr_gamma=0.5, grad_clip=1.0,
                          val_fraction=0.1, seed=0)


@functools.cache
def learning_split():
    return split_train_val(generate_synthetic(LEARN_SYNTH), LEARN_TRAIN.val_fraction, LEARN_TRAIN.seed)


@functools.cache
def trained(use_ego: bool = True, use_goal: bool = True):
    train, val = learning_split()
    model = SocialMamba(ModelConfig(d_model=32, use_ego=use_ego, use_goal=use_goal, seed=0))
    t0 = time.perf_counter()
    fit(model, train, LEARN_TRAIN, val_scenes=val)
    return evaluate(model, val), time.perf_counter() - t0


def test_criterion_6_learnability(verdict):
    _, val = learning_split()
    cv = report_from_predictions([constant_velocity_predict(s) for s in val], val).min_ade
    report, seconds = trained()
    target = 0.8 * cv
    verdict(6, "learnability", report.min_ade <= target and seconds < 1800,
            f"val minADE_20 {report.min_ade:.4f} vs CV ADE {cv:.4f} (need <= {target:.4f}); "
            f"trained in {seconds / 60:.1f} min (< 30)")


def test_criterion_7_ablation_ordering(verdict):
    full = trained()[0].min_ade
    no_ego = trained(use_ego=False)[0].min_ade
    no_goal = trained(use_goal=False)[0].min_ade
    verdict(7, "ablation ordering", full <= no_ego + 0.005 and full <= no_goal + 0.005,
            f"full {full:.4f}, no-ego {no_ego:.4f}, no-goal {no_goal:.4f} (full must be <= each + 0.005)")


# -- 8 -------------------------------------------------------------------------


def test_criterion_8_determinism_and_round_trip(verdict):
    cfg = SynthConfig(n_scenes=30, t_obs=4, t_pred=3, seed=8)
    a, b = serialize_scenes(generate_synthetic(cfg)), serialize_scenes(generate_synthetic(cfg))
    bytes_equal = a.encode() == b.encode()
    round_trip = serialize_scenes(parse_scenes(a)) == a

    def run():
        scenes = parse_scenes(a)
        model = SocialMamba(ModelConfig(d_model=8, d_state=4, k=4, t_obs=4, t_pred=3, seed=8))
        fit(model, scenes[:24], TrainConfig(epochs=2, batch_size=8, seed=8))
        return evaluate(model, scenes[24:])

    r1, r2 = run(), run()
    reports_equal = r1 == r2 and r1.min_ade.hex() == r2.min_ade.hex()
    verdict(8, "determinism and round trip", bytes_equal and round_trip and reports_equal,
            f"scene bytes equal {bytes_equal}, parse/serialize identity {round_trip}, "
            f"EvalReports bit-identical {reports_equal}")


# -- 9 -------------------------------------------------------------------------


def _zero(module):
    for _, p in module.named_parameters():
        p.data[...] = 0.0


def test_criterion_9_degenerate_inputs(verdict):
    checks = {}
    small = dict(d_model=8, d_state=4, conv_kernel=2, expand=1, t_obs=3, t_pred=2, max_agents=4)

    lone = Scene("lone", [AgentTrack(0, np.array([[0.0, 0], [1, 0], [2, 0], [3, 0], [4, 0]])),
                          AgentTrack(1, np.full((5, 2), 50.0))], 0, 3, 2, 1.0)
    grid = filter_and_sort(lone, 10.0)
    pred = SocialMamba(ModelConfig(**small, k=3)).predict(lone)
    checks["ego-only grid [1, T, 2]"] = grid.S.shape == (1, 5, 2)
    checks["ego-only prediction finite"] = pred.y_hat.shape == (3, 2, 2) and bool(np.all(np.isfinite(pred.y_hat)))

    one = np.array([[1.0, 2.0]])
    checks["L=1 cycle sequence [a, a]"] = np.array_equal(build_cycle_sequence(Tensor(one)).data, [[1, 2], [1, 2]])
    block = MambaBlock(MambaBlockConfig(2, 3), np.random.default_rng(0))
    checks["L=1 block runs"] = mamba_block(Tensor(one), block).shape == (1, 2)
    cyc = CycleMambaBlock(MambaBlockConfig(2, 3), np.random.default_rng(1))
    checks["L=1 cycle block runs"] = cyc(Tensor(one)).shape == (1, 2)

    k1 = SocialMamba(ModelConfig(**small, k=1))
    checks["K=1 decode shape"] = k1.predict(lone).y_hat.shape == (1, 2, 2)
    y = lone.ego_future()
    checks["K=1 exact candidate loss 0"] = best_of_k_loss(y[None], y).item() == 0.0
    checks["K=1 CV minFDE on linear truth 0"] = evaluate_metrics(constant_velocity_predict(lone).y_hat, y).min_fde == 0.0

    zero_model = SocialMamba(ModelConfig(**small, k=2))
    _zero(zero_model)
    checks["zero model decodes the last position"] = np.array_equal(zero_model.predict(lone).y_hat,
                                                                     np.broadcast_to([2.0, 0.0], (2, 2, 2)))
    emb = GridEmbedding(8, np.random.default_rng(0))
    _zero(emb)
    checks["zero embedding gives zero Z0"] = bool(np.all(embed_grid(grid, emb).data == 0.0))
    gate = SocialGate(8, 3, np.random.default_rng(0))
    _zero(gate)
    zs = [Tensor(np.random.default_rng(i).standard_normal((2, 5, 8))) for i in range(3)]
    checks["zero gate weights 1/3"] = bool(np.allclose(social_gate(zs, gate).data, 1 / 3, atol=1e-15))
    _zero(block)
    x = np.random.default_rng(3).standard_normal((4, 2))
    checks["zero block is the identity"] = np.array_equal(mamba_block(Tensor(x), block).data, x)

    failed = [name for name, ok in checks.items() if not ok]
    verdict(9, "degenerate inputs", not failed,
            f"{len(checks) - len(failed)}/{len(checks)} checks hold" + (f"; failed: {', '.join(failed)}" if failed else ""))
