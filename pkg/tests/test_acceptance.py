"""End-to-end acceptance gate.

One test per criterion; each prints a single PASS/FAIL line (visible with -v
through the test outcome, and in captured output on failure) plus the cell
diagnostics that drove the verdict.
"""

import json
import subprocess
import sys
import time
from dataclasses import replace

import numpy as np
import pytest

from chaindid.blocks import delta_att, long_did, placebo_delta
from chaindid.chain import fit_chained
from chaindid.inference import multiplier_bootstrap, pretrend_test
from chaindid.propensity import IdentificationError, fit_group_propensity, fit_sampling_model
from chaindid.simlab import (
    DgpConfig,
    analytic_variances,
    monte_carlo,
    simple_monte_carlo,
    simulate_dgp,
    simulate_marx,
    twfe_oracle,
)

from conftest import make_balanced, make_rotating

TRUTH = np.array([1.75, 1.50, 1.25, 1.00, 0.75, 0.50])
T3_CHAINED_MEAN = np.array([1.748, 1.500, 1.248, 1.000, 0.741, 0.499])
T3_CHAINED_SD = np.array([0.099, 0.164, 0.231, 0.300, 0.406, 0.586])
T3_CS_SD = np.array([0.199, 0.305, 0.355, 0.412, 0.521, 0.711])
T3_DGP2_CS_MEAN = np.array([1.894, 1.774, 1.651, 1.522, 1.369, 1.209])

REPS_TABLE = 1000
REPS_T4 = 500


def _report(name, ok, detail):
    line = f"criterion {name}: {'PASS' if ok else 'FAIL'} — {detail}"
    print(line)
    assert ok, line


@pytest.fixture(scope="module")
def dgp1_run():
    t0 = time.time()
    rep = monte_carlo(DgpConfig.dgp1(), reps=REPS_TABLE,
                      estimators=("chained", "cross-section"), seed=11,
                      n_threads=4)
    return rep, time.time() - t0


@pytest.fixture(scope="module")
def dgp2_run():
    return monte_carlo(DgpConfig.dgp2(), reps=REPS_TABLE,
                       estimators=("chained", "cross-section"), seed=7,
                       n_threads=4)


def test_criterion_01_table3_dgp1(dgp1_run):
    rep, elapsed = dgp1_run
    mean_c = rep.means["chained"]
    sd_c = rep.sds["chained"]
    sd_cs = rep.sds["cross-section"]
    se = sd_c / np.sqrt(REPS_TABLE)
    msgs = []
    ok = True
    bad_mean = np.abs(mean_c - T3_CHAINED_MEAN) > 3 * se
    if bad_mean.any():
        ok = False
        msgs.append(f"chained means off at e={np.where(bad_mean)[0].tolist()}")
    r1 = sd_c / T3_CHAINED_SD
    if np.any(np.abs(r1 - 1) > 0.15):
        ok = False
        msgs.append(f"chained sd ratios {np.round(r1, 3).tolist()}")
    r2 = sd_cs / T3_CS_SD
    if np.any(np.abs(r2 - 1) > 0.15):
        ok = False
        msgs.append(f"cross-section sd ratios {np.round(r2, 3).tolist()}")
    if elapsed > 600:
        ok = False
        msgs.append(f"runtime {elapsed:.0f}s > 600s")
    detail = "; ".join(msgs) if msgs else (
        f"means/sds within tolerance, {elapsed:.0f}s")
    _report("1 (Table 3, DGP 1)", ok, detail)


def test_criterion_02_table3_dgp2(dgp2_run):
    rep = dgp2_run
    msgs = []
    ok = True
    se_c = rep.sds["chained"] / np.sqrt(REPS_TABLE)
    bad = np.abs(rep.means["chained"] - TRUTH) > 3 * se_c
    if bad.any():
        ok = False
        msgs.append(f"chained biased at e={np.where(bad)[0].tolist()}")
    se_cs = rep.sds["cross-section"] / np.sqrt(REPS_TABLE)
    gap = rep.means["cross-section"] - T3_DGP2_CS_MEAN
    bad_cs = np.abs(gap) > 3 * se_cs
    if bad_cs.any():
        ok = False
        msgs.append(
            f"cross-section means {np.round(rep.means['cross-section'], 3).tolist()}"
            f" vs table {T3_DGP2_CS_MEAN.tolist()}")
    detail = "; ".join(msgs) if msgs else "chained unbiased, CS bias matches table"
    _report("2 (Table 3, DGP 2)", ok, detail)


def test_criterion_03_table4_gmm():
    msgs = []
    ok = True
    reports = {}
    for num, cfg in ((3, DgpConfig.dgp3()), (4, DgpConfig.dgp4())):
        rep = monte_carlo(cfg, reps=REPS_T4, estimators=("chained", "cd-gmm"),
                          seed=3, n_threads=4)
        reports[num] = rep
        se = rep.sds["cd-gmm"] / np.sqrt(REPS_T4)
        bad = np.abs(rep.means["cd-gmm"] - TRUTH) > 3 * se
        if bad.any():
            ok = False
            msgs.append(f"DGP{num} cd-gmm biased at e={np.where(bad)[0].tolist()}")
    rep4 = reports[4]
    sd_gmm = rep4.sds["cd-gmm"][5]
    sd_id = rep4.sds["chained"][5]
    se_sd = np.sqrt((sd_gmm ** 2 + sd_id ** 2) / (2 * (REPS_T4 - 1)))
    if sd_gmm > sd_id + 3 * se_sd:
        ok = False
        msgs.append(f"DGP4 h6 sd(cd-gmm)={sd_gmm:.3f} > sd(identity)={sd_id:.3f}")
    detail = "; ".join(msgs) if msgs else (
        f"unbiased; DGP4 h6 sd {sd_gmm:.3f} <= {sd_id:.3f} (identity)")
    _report("3 (Table 4, DGPs 3-4)", ok, detail)


def test_criterion_04_telescoping():
    rng = np.random.default_rng(42)
    worst = 0.0
    for _ in range(50):
        d = make_balanced(rng, n=100, T=6, cohorts=(3, 4, 5))
        res = fit_chained(d)
        for (g, t) in res.targets:
            worst = max(worst, abs(res.att(g, t).estimate
                                   - long_did(d, g, t).estimate))
    _report("4 (telescoping identity)", worst < 1e-10, f"worst gap {worst:.2e}")


def test_criterion_05_twfe_equivalence():
    rng = np.random.default_rng(7)
    worst_rot = 0.0
    for _ in range(10):
        d = make_rotating(rng, n=300, T=5, g=3)
        res = fit_chained(d)
        tw = twfe_oracle(d)
        worst_rot = max(worst_rot,
                        max(abs(res.att(3, t).estimate - tw[t - 3])
                            for t in range(3, 6)))
    worst_bal = 0.0
    for _ in range(10):
        d = make_balanced(rng, n=200, T=6, cohorts=(4,))
        tw = twfe_oracle(d)
        worst_bal = max(worst_bal,
                        max(abs(long_did(d, 4, t).estimate - tw[t - 4])
                            for t in range(4, 7)))
    ok = worst_rot < 1e-8 and worst_bal < 1e-8
    _report("5 (TWFE oracle equivalence)", ok,
            f"rotating gap {worst_rot:.2e}, balanced gap {worst_bal:.2e}")


def test_criterion_06_gmm_embedding():
    rng = np.random.default_rng(0)
    worst_embed = 0.0
    worst_sq = 0.0
    for _ in range(20):
        d = make_balanced(rng, n=120, cohorts=(3, 5))
        a = fit_chained(d, weighting="identity", links="minimal")
        b = fit_chained(d, weighting="optimal", links="minimal")
        for (g, t) in a.targets:
            manual = sum(delta_att(d, g, tau, 1).estimate
                         for tau in range(g, t + 1))
            worst_embed = max(worst_embed, abs(a.att(g, t).estimate - manual))
        worst_sq = max(worst_sq, float(np.max(np.abs(a.estimates - b.estimates))))
    ok = worst_embed < 1e-10 and worst_sq < 1e-10
    _report("6 (GMM embedding)", ok,
            f"embedding gap {worst_embed:.2e}, square-W gap {worst_sq:.2e}")


def test_criterion_07_proposition1():
    msgs = []
    ok = True
    for rho in (0.0, 0.5, 1.0):
        s_eta2 = 4.0
        s_e1 = s_eta2 / (1 - rho ** 2) if rho < 1 else 4.0
        mc = simple_monte_carlo(n=5000, t_max=4, rho=rho, sigma_eta2=s_eta2,
                                sigma_alpha2=0.5, sigma_eps12=s_e1,
                                reps=2000, p=0.5, seed=202)
        ana = analytic_variances(rho=rho, sigma_eta2=s_eta2, sigma_alpha2=0.5,
                                 sigma_eps12=s_e1, p=0.5, q=0.25, t=4)
        for k in ("var_cd", "var_cs", "var_ld"):
            gap = mc[k] / ana[k] - 1.0
            if abs(gap) > 0.10:
                ok = False
                msgs.append(f"rho={rho} {k} gap {gap:+.1%}")
    v1 = analytic_variances(rho=1.0, sigma_eta2=4.0, sigma_alpha2=0.5,
                            sigma_eps12=4.0, p=0.5, q=0.25, t=4)
    if v1["var_cd"] != pytest.approx(v1["var_ld"], abs=1e-12):
        ok = False
        msgs.append("var_cd != var_ld at rho=1")
    _report("7 (Proposition 1 oracle)", ok,
            "; ".join(msgs) if msgs else "all 9 cells within 10%; rho=1 identity exact")


def test_criterion_08_bootstrap_calibration():
    rng = np.random.default_rng(99)
    K, n, outer = 6, 400, 500
    truth = np.zeros(K)
    cover = 0
    for r in range(outer):
        Phi = rng.normal(size=(K, n)) * (1.0 + np.arange(K))[:, None]
        Phi -= Phi.mean(axis=1, keepdims=True)
        est = truth + Phi.std(axis=1, ddof=1) * rng.normal(size=K) / np.sqrt(n)
        bands = multiplier_bootstrap(Phi, est, B=1000, alpha=0.05, seed=1000 + r)
        cover += int(np.all((bands.lower <= truth) & (truth <= bands.upper)))
    coverage = cover / outer

    cfg = replace(DgpConfig.dgp1(), pretreatment_pairs=True)
    reps = 400
    streams = np.random.SeedSequence(505).spawn(reps)
    rej = 0
    for b in range(reps):
        d = simulate_dgp(cfg, np.random.default_rng(streams[b]))
        placebos = []
        for g in d.cohorts():
            g = int(g)
            pf = fit_group_propensity(d, g)
            for t in range(2, g):
                try:
                    placebos.append(placebo_delta(d, g, t, pfit=pf))
                except IdentificationError:
                    continue
        _, _, reject = pretrend_test(placebos, B=1000, seed=9000 + b)
        rej += int(reject)
    size = rej / reps
    ok = 0.93 <= coverage <= 0.97 and 0.02 <= size <= 0.08
    _report("8 (bootstrap calibration)", ok,
            f"coverage {coverage:.3f} (target .93-.97), pretrend size {size:.3f}"
            " (target .05 +/- .03)")


def test_criterion_09_marx_correction():
    reps = 200
    streams = np.random.SeedSequence(777).spawn(reps)
    raw = np.empty((reps, 2))
    adj = np.empty((reps, 2))
    truths = np.empty((reps, 2))
    for b in range(reps):
        rng = np.random.default_rng(streams[b])
        d, tr = simulate_marx(seed=rng)
        truths[b] = tr
        r0 = fit_chained(d)
        raw[b] = [r0.att(2, 2).estimate, r0.att(2, 3).estimate]
        sf = fit_sampling_model(d, "mar-x", features=("x1",))
        r1 = fit_chained(d, sfit=sf)
        adj[b] = [r1.att(2, 2).estimate, r1.att(2, 3).estimate]
    tr = truths.mean(axis=0)
    msgs = []
    ok = True
    for j in range(2):
        se_raw = raw[:, j].std(ddof=1) / np.sqrt(reps)
        se_adj = adj[:, j].std(ddof=1) / np.sqrt(reps)
        zr = (raw[:, j].mean() - tr[j]) / se_raw
        za = (adj[:, j].mean() - tr[j]) / se_adj
        if abs(zr) < 2:
            ok = False
            msgs.append(f"e={j}: unadjusted bias only {zr:.1f} SEs")
        if abs(za) > 3:
            ok = False
            msgs.append(f"e={j}: corrected bias {za:.1f} SEs")
        msgs.append(f"e={j}: raw {zr:+.1f} SE, mar-x {za:+.1f} SE")
    _report("9 (MAR-X correction)", ok, "; ".join(msgs))


def _run_cli(args, cwd):
    return subprocess.run([sys.executable, "-m", "chaindid.cli"] + args,
                          cwd=cwd, capture_output=True, text=True)


def test_criterion_10_determinism(tmp_path):
    msgs = []
    ok = True
    for tag, threads in (("a", "1"), ("b", "4"), ("c", "4")):
        r = _run_cli(["montecarlo", "--dgp", "1", "--reps", "6", "--estimators",
                      "chained", "--seed", "5", "--threads", threads,
                      "--out", f"mc_{tag}"], str(tmp_path))
        assert r.returncode == 0, r.stderr
    if not ((tmp_path / "mc_a.csv").read_bytes()
            == (tmp_path / "mc_b.csv").read_bytes()
            == (tmp_path / "mc_c.csv").read_bytes()):
        ok = False
        msgs.append("montecarlo CSV differs")

    r = _run_cli(["simulate", "--dgp", "1", "--seed", "3", "--out", "p.csv"],
                 str(tmp_path))
    assert r.returncode == 0, r.stderr
    for tag, threads in (("a", "1"), ("b", "4")):
        r = _run_cli(["estimate", "p.csv", "--bootstrap", "400", "--seed", "11",
                      "--threads", threads, "--out", f"est_{tag}"], str(tmp_path))
        assert r.returncode == 0, r.stderr
    est_a = json.loads((tmp_path / "est_a.json").read_text())
    est_b = json.loads((tmp_path / "est_b.json").read_text())
    if est_a != est_b:
        ok = False
        msgs.append("estimate JSON differs across thread counts")
    if ((tmp_path / "est_a_event_study.csv").read_bytes()
            != (tmp_path / "est_b_event_study.csv").read_bytes()):
        ok = False
        msgs.append("event-study CSV differs")
    _report("10 (determinism)", ok,
            "; ".join(msgs) if msgs else "byte-identical across runs and threads")
