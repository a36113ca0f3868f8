"""End-to-end acceptance checks at their stated scale and tolerance.

Each test prints one ``criterion N: PASS/FAIL`` line; the lines are also
collected into the terminal summary.  The full module takes several minutes.
"""

import json
import math
import time

import numpy as np
import pytest

from adalab import bounds, signopt
from adalab.adversaries import AdversaryConfig
from adalab.cli import main
from adalab.harness import ExperimentConfig, estimate_risk
from adalab.mechanisms import MechanismConfig, NoiseSpec, default_schedule
from adalab.signopt import GridConfig

from oracles import e_x_sign_x_plus_z, fk_expectation, random_fk_instance

SQ3 = math.sqrt(3)


def _config(k, kind, reps, seed, mechanism=None, sigma=1.0):
    mechanism = default_schedule(k, sigma) if mechanism is None else mechanism
    return ExperimentConfig(k, sigma, mechanism, AdversaryConfig(kind, sigma),
                            replications=reps, seed=seed)


def test_criterion_1_upper_bound(record_acceptance):
    details, ok = [], True
    for k in (10, 50):
        start = time.perf_counter()
        rep = estimate_risk(_config(k, "k_step_greedy", 100_000, seed=101))
        bound = bounds.k_step_mse_bound(k, 1.0)
        passed = rep.max_mse <= bound + 4 * rep.max_mse_se
        ok &= passed
        details.append(f"k={k} max MSE {rep.max_mse:.4f} ± {rep.max_mse_se:.4f} "
                       f"vs bound {bound:.4f} ({time.perf_counter() - start:.0f}s)")
    record_acceptance(1, ok, "; ".join(details))
    assert ok


def test_criterion_2_sharpness(record_acceptance):
    k, w2 = 10, 30.0
    mech = MechanismConfig("gaussian_schedule", (math.sqrt(w2),) * (k - 1) + (0.0,))
    rep = estimate_risk(_config(k, "orthogonal_then_one_step", 1_000_000, seed=202,
                                mechanism=mech))
    r = rep.per_round[-1]
    lo, hi = (k - 1) / (w2 + 1), (k - 1) / w2
    se = r.cond_bias_sq_se
    ok = lo - 4 * se <= r.cond_bias_sq_hat <= hi + 4 * se
    record_acceptance(2, ok, f"final-round squared bias {r.cond_bias_sq_hat:.5f} ± {se:.5f} "
                             f"in [{lo:.5f}, {hi:.5f}] ± 4 SE")
    assert ok


def test_criterion_3_lower_bound_witness(record_acceptance):
    details, ok = [], True
    for k in (10, 50):
        rep = estimate_risk(_config(k, "bayes_sign", 100_000, seed=303))
        r = rep.per_round[-1]
        floor = bounds.minimax_lower_bound(k, 1.0)
        assert floor == pytest.approx(math.sqrt(k - 1) / (2 * SQ3))
        w = default_schedule(k, 1.0).w_schedule[0]
        closed = math.sqrt(k - 1) * e_x_sign_x_plus_z(1.0, w)
        assert closed == pytest.approx(
            math.sqrt(k - 1) * math.sqrt(2 / math.pi) / math.sqrt(1 + w * w), rel=1e-8)
        above = r.bias_sq_hat >= floor - 4 * 2 * abs(r.bias_hat) * r.bias_se
        match = abs(r.bias_hat - closed) <= 4 * r.bias_se
        ok &= above and match
        details.append(f"k={k} bias^2 {r.bias_sq_hat:.4f} >= {floor:.4f}; "
                       f"bias {r.bias_hat:.4f} ± {r.bias_se:.4f} vs closed form {closed:.4f}")
    record_acceptance(3, ok, "; ".join(details))
    assert ok


def test_criterion_4_rate_exponent(record_acceptance):
    ks = np.array([4, 16, 64, 256])
    risks = [estimate_risk(_config(int(k), "k_step_greedy", 4096, seed=404)).max_mse for k in ks]
    slope = float(np.polyfit(np.log(ks), np.log(risks), 1)[0])
    ok = abs(slope - 0.5) <= 0.1
    record_acceptance(4, ok, f"slope {slope:.3f} from max MSE "
                             + ", ".join(f"{v:.3f}" for v in risks))
    assert ok


def test_criterion_5_noise_sandwich(record_acceptance):
    start = time.perf_counter()
    _, obj10 = signopt.solve_optimal_noise(1.0, 10.0)
    t10 = time.perf_counter() - start
    margin = obj10 / 2
    lo = signopt.margin_lower_bound(1.0, 10.0)
    hi = signopt.margin_risk(NoiseSpec.uniform(10.0), 1.0)
    width = (hi - lo) / hi
    inside = lo - 1e-9 <= margin <= hi + 1e-9
    start = time.perf_counter()
    _, obj100 = signopt.solve_optimal_noise(1.0, 100.0)
    t100 = time.perf_counter() - start
    scaled = 100.0 * obj100 / 2
    close = abs(scaled * SQ3 - 1) < 0.01
    ok = inside and width < 0.01 and close and max(t10, t100) < 30
    record_acceptance(5, ok, f"w=10 margin {margin:.6f} in [{lo:.6f}, {hi:.6f}] "
                             f"(width {100 * width:.2f}%); w=100 scaled margin {scaled:.5f} "
                             f"vs {1 / SQ3:.5f}; LP {t10:.1f}s/{t100:.1f}s")
    assert ok


def test_criterion_6_weak_duality(record_acceptance):
    ok, gaps = True, []
    for w in (1.0, 2.0, 5.0, 10.0, 50.0):
        _, obj = signopt.solve_optimal_noise(1.0, w)
        cert = signopt.dual_certificate(1.0, w)
        ok &= cert.objective_bound <= obj + 1e-9
        gaps.append((obj - cert.objective_bound) / obj)
    ok &= gaps[-1] < 0.02 and gaps[-1] < gaps[0]
    record_acceptance(6, ok, "relative gaps " + ", ".join(f"{g:.2e}" for g in gaps))
    assert ok


def test_criterion_7_operator_identities(record_acceptance):
    worst = 0.0
    for sigma in (0.5, 1.0, 2.0):
        h = sigma / 20
        x = np.arange(-30 * sigma, 30 * sigma + h / 2, h)
        inner = np.abs(x) <= 21 * sigma
        cases = [
            (np.ones_like(x), np.zeros_like(x)),
            (x, np.full_like(x, 2 * sigma**2)),
            (x**2, 4 * sigma**2 * x),
            (x**3, 6 * sigma**2 * x**2 + 6 * sigma**4),
        ]
        for f, want in cases:
            got = signopt.operator_A_apply(f, x, sigma)
            scale = max(1.0, np.max(np.abs(want[inner])))
            worst = max(worst, np.max(np.abs(got[inner] - want[inner])) / scale)
    ok = worst < 1e-5
    record_acceptance(7, ok, f"largest scaled error {worst:.2e}")
    assert ok


def test_criterion_8_recursion_oracle(record_acceptance):
    rng = np.random.default_rng(808)
    worst = 0.0
    for _ in range(1000):
        inst = random_fk_instance(rng)
        S, W, r = inst["S"], inst["W"], inst["r"]
        M = np.linalg.inv(S + W)
        f_prev = r @ M @ S @ M @ r
        got = bounds.recursive_fk_update(f_prev, S, W, inst["v"], inst["lam"], inst["w_sq"])
        want = fk_expectation(r, S, W, inst["v"], inst["lam"], inst["w_sq"])
        worst = max(worst, abs(got - want) / max(1.0, abs(want)))
    ok = worst <= 1e-10
    record_acceptance(8, ok, f"largest error over 1000 instances {worst:.2e}")
    assert ok


def test_criterion_9_determinism(record_acceptance, tmp_path):
    configs = [{"k": k, "sigma": 1.0, "replications": 20_000, "seed": 909,
                "adversary": {"kind": kind}}
               for k in (3, 10) for kind in ("k_step_greedy", "bayes_sign")]
    cfg = tmp_path / "sweep.json"
    cfg.write_text(json.dumps(configs))
    outputs = []
    for run, workers in enumerate((1, 1, 8)):
        out = tmp_path / f"run{run}"
        code = main(["--command", "sweep", "--config", str(cfg), "--out", str(out),
                     "--workers", str(workers)])
        assert code == 0
        outputs.append({name: (out / name).read_bytes()
                        for name in ("results.csv", "plotdata_risk_vs_k.csv")})
    ok = outputs[0] == outputs[1] == outputs[2]
    record_acceptance(9, ok, "results.csv and plotdata_risk_vs_k.csv identical "
                             "across two runs and workers 1 vs 8" if ok else "outputs differ")
    assert ok
