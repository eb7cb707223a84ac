"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The didactic and main experiments run at full scale (20 seeds). Set
``ILHF_ACCEPTANCE_DIR`` to keep their run directories between sessions;
completed seeds are then reused.

    pytest tests/test_acceptance.py -v
"""

import math
import os

import numpy as np
import pytest

from ilhf import agent as A
from ilhf import datagen
from ilhf import finetune as F
from ilhf import harness as H
from ilhf import metrics as E
from ilhf.rng import stream

REPORT: list[str] = []
ENSEMBLES = [f"ensemble_ilhf_{m}" for m in H.ENSEMBLE_SIZES]
REINFORCE = [f"reinforce_beta={b:g}" for b in H.BETA_GRID]


def report(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    REPORT.append(line)
    print(line)


def run_dir(tmp_path_factory, name):
    root = os.environ.get("ILHF_ACCEPTANCE_DIR")
    return os.path.join(root, name) if root else tmp_path_factory.mktemp(name)


@pytest.fixture(scope="session")
def didactic_run(tmp_path_factory):
    return H.run_experiment(H.preset("didactic"), run_dir(tmp_path_factory, "didactic"))


@pytest.fixture(scope="session")
def main_run(tmp_path_factory):
    return H.run_experiment(H.preset("main"), run_dir(tmp_path_factory, "main"))


def value_at(result, metric, episode):
    out = []
    for s in sorted(result.seeds):
        lookup = dict((int(e), v) for e, v in result.seeds[s].metrics[metric])
        out.append(lookup[episode])
    return np.array(out)


# ---------------------------------------------------------------- 1, 2


def test_criterion_01_didactic_inclusivity(didactic_run):
    p_2000 = value_at(didactic_run, "p_plus/ilhf", 2000).mean()
    p_final = H.final_values(didactic_run, "p_plus/ilhf").mean()
    minus = 1 - H.final_values(didactic_run, "p_plus/reinforce_beta=0").mean()
    ok = abs(p_2000 - 1 / 3) <= 0.03 and abs(p_final - 1 / 3) <= 0.03 and minus >= 0.95
    report(1, ok, f"ILHF P(+1) at 2000 episodes {p_2000:.4f}, at end {p_final:.4f} (target 1/3 +/- 0.03); "
                  f"REINFORCE beta=0 P(-1) {minus:.4f} (>= 0.95)")
    assert ok


def test_criterion_02_didactic_kl(didactic_run):
    ilhf = H.final_values(didactic_run, "kl/ilhf").mean()
    rf = {b: H.final_values(didactic_run, f"kl/{b}").mean() for b in REINFORCE}
    ok = ilhf < 0.005 and all(v > 0.02 for v in rf.values())
    report(2, ok, f"ILHF KL {ilhf:.5f} (< 0.005); REINFORCE KL " + ", ".join(f"{k}: {v:.4f}" for k, v in rf.items()) + " (> 0.02)")
    assert ok


# ---------------------------------------------------------------- 3


def fd(f, x, h=1e-6):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2 * h)
    return g


def rel(a, b):
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12))


def gradient_errors(seed):
    rng = np.random.default_rng(seed)
    D = int(rng.integers(1, 5))
    agent = A.init_agent(rng, D)
    prompt = np.where(rng.random(int(rng.integers(1, 8))) < 0.5, 1, -1)
    response = np.where(rng.random(int(rng.integers(1, 8))) < 0.5, 1, -1)
    errs = {}
    errs["grad_loglik_phi"] = rel(
        A.grad_loglik_phi(agent, prompt, response),
        fd(lambda p: A.response_log_likelihood(agent.with_phi(p), prompt, response), agent.phi.copy()),
    )
    docs = np.where(rng.random((2, int(rng.integers(2, 9)))) < 0.5, 1, -1)
    _, grads = A.bptt_gradients(agent, docs)
    worst = 0.0
    for name in ("phi", "W_hat", "U_hat"):
        def f(block, name=name):
            a = agent.copy()
            setattr(a, name, block)
            return A.document_nll(a, docs)
        worst = max(worst, rel(getattr(grads, name), fd(f, getattr(agent, name).copy())))
    errs["bptt"] = worst

    n, tau = 5, int(rng.integers(1, 7))
    states = rng.uniform(-1, 1, (n, 2, tau, D))
    responses = np.where(rng.random((n, 2, tau)) < 0.5, 1, -1)
    labels = rng.integers(2, size=n)
    _, g = F.ilhf_loss_and_grad(agent.phi, states, responses, labels)
    errs["ilhf"] = rel(g, fd(lambda p: F.ilhf_loss_and_grad(p, states, responses, labels)[0], agent.phi.copy()))
    rewards = rng.normal(-tau, 1.0, (n, 2))
    phi_pre = agent.phi + 0.5 * rng.standard_normal(D)
    beta = float(rng.choice(H.BETA_GRID))
    _, g = F.reinforce_loss_and_grad(agent.phi, states, responses, rewards, phi_pre, beta)
    errs["reinforce"] = rel(g, fd(lambda p: F.reinforce_loss_and_grad(p, states, responses, rewards, phi_pre, beta)[0], agent.phi.copy()))
    return errs


def test_criterion_03_gradient_oracles():
    worst = {}
    for seed in range(100):
        for k, v in gradient_errors(seed).items():
            worst[k] = max(worst.get(k, 0.0), v)
    ok = all(v < 1e-5 for v in worst.values())
    report(3, ok, "max relative error over 100 instances: " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + " (< 1e-5)")
    assert ok


# ---------------------------------------------------------------- 4, 5, 6


def test_criterion_04_normalisation():
    ys = E.all_responses(6)
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        ideal, shadow = datagen.sample_process_params(rng, 2)
        agent = A.init_agent(rng, 10)
        prompt = datagen.generate_prompt(shadow, 6, rng)
        worst = max(worst, abs(np.exp(datagen.ideal_log_likelihood(ideal, prompt, ys)).sum() - 1))
        states = A.response_states(agent, prompt.tokens[None], ys[None])[0]
        worst = max(worst, abs(np.exp(A.loglik_from_states(agent.phi, states, ys)).sum() - 1))
    ok = worst < 1e-10
    report(4, ok, f"max |sum P - 1| over 20 agent and ideal models at tau=6: {worst:.1e} (< 1e-10)")
    assert ok


def test_criterion_05_bradley_terry():
    rng = stream(0, 0, "acceptance/bt")
    worst = 0.0
    for delta in rng.uniform(-4, 4, 10):
        labels = datagen.bradley_terry_label(np.zeros(100_000), np.full(100_000, delta), rng)
        worst = max(worst, abs(labels.mean() - datagen.bradley_terry_prob(0.0, delta)))
    ok = worst < 0.005
    report(5, ok, f"max |freq - logistic(delta)| over 10 deltas x 1e5 draws: {worst:.4f} (< 0.005)")
    assert ok


def test_criterion_06_metric_oracle():
    worst_z, fails = 0.0, 0
    for pair in range(50):
        rng = stream(0, pair, "acceptance/kl-oracle")
        ideal, _ = datagen.sample_process_params(rng, 2)
        agent = A.init_agent(rng, 4)
        mc, mc_se = E.kl_metric(ideal, agent, 6, 500, rng, return_stderr=True)
        prompts = datagen.generate_prompts(ideal, 6, 4000, rng)
        per_prompt = E.exact_response_kl(ideal, agent, prompts, 6)
        exact, exact_se = per_prompt.mean(), per_prompt.std(ddof=1) / math.sqrt(len(per_prompt))
        z = abs(mc - exact) / math.hypot(mc_se, exact_se)
        worst_z = max(worst_z, z)
        fails += z >= 3
    ok = fails == 0
    report(6, ok, f"kl_metric vs enumeration over 50 model pairs at tau=6, D=4: worst gap {worst_z:.2f} SE, {fails} beyond 3 SE")
    assert ok


# ---------------------------------------------------------------- 7, 8, 9


def test_criterion_07_main_ordering(main_run):
    finals = {m: H.final_values(main_run, f"kl/{m}") for m in ["ilhf", "ensemble_ilhf_50"] + REINFORCE}
    stats = {m: H.mean_stderr(v) for m, v in finals.items()}

    def gap(lo, hi):
        (ml, sl), (mh, sh) = stats[lo], stats[hi]
        return (mh - ml) / math.hypot(sl, sh)

    gaps = {"ensemble_ilhf_50 < ilhf": gap("ensemble_ilhf_50", "ilhf")}
    gaps.update({f"ilhf < {b}": gap("ilhf", b) for b in REINFORCE})
    ok = all(g > 1 for g in gaps.values())
    means = ", ".join(f"{m} {mu:.4f}+/-{se:.4f}" for m, (mu, se) in stats.items())
    report(7, ok, f"final KL {means}; gaps in combined SE: " + ", ".join(f"{k}: {v:.2f}" for k, v in gaps.items()) + " (each > 1)")
    assert ok


def test_criterion_08_ensemble_speedup(main_run):
    thresholds = H.final_values(main_run, "kl/ilhf")
    seeds = sorted(main_run.seeds)
    hits = {}
    for m in ENSEMBLES:
        per_seed = [H.episodes_to_threshold(main_run.seeds[s].metrics[f"kl/{m}"], t) for s, t in zip(seeds, thresholds)]
        hits[m] = H.mean_stderr(np.array(per_seed, dtype=float))
    ok = True
    for a, b in zip(ENSEMBLES, ENSEMBLES[1:]):
        (ma, sa), (mb, sb) = hits[a], hits[b]
        ok &= mb <= ma + math.hypot(sa, sb)
    report(8, ok, "episodes to reach ILHF's final KL: " + ", ".join(f"{m} {mu:.1f}+/-{se:.1f}" for m, (mu, se) in hits.items())
           + " (non-increasing in M up to 1 SE)")
    assert ok


def test_criterion_09_head_to_head(main_run):
    rows = {r["candidate"]: r for r in H.head2head_summary(main_run) if r["reference"] == "ilhf"}
    ok = all(rows[m]["ratio"] - 1 >= rows[m]["stderr"] for m in ENSEMBLES)
    report(9, ok, "inclusive score ratio vs ILHF: " + ", ".join(f"{m} {rows[m]['ratio']:.4f}+/-{rows[m]['stderr']:.4f}" for m in ENSEMBLES)
           + " (ratio - 1 >= 1 SE)")
    assert ok


# ---------------------------------------------------------------- 10, 11


def test_criterion_10_ensemble_reduction():
    ideal, shadow = datagen.sample_process_params(stream(0, 0, "process"), 2, 0.3)
    agent = A.init_agent(stream(0, 0, "agent_init"), 10)
    env = F.TokenProcessEnv(ideal, shadow, 64)
    ilhf = F.ILHFLearner(agent, temperature=3.0)
    ens = F.EnsembleILHFLearner(agent, 1, stream(0, 0, "ens"), prior_scale=0.0, eta=0.0, temperature=3.0, bootstrap=False)

    def streams(tag):
        return F.EpisodeStreams(stream(0, 0, "p"), stream(0, 0, "r"), stream(0, 0, "l"), stream(0, 0, "m" + tag), stream(0, 0, "b" + tag))

    s1, s2 = streams("1"), streams("2")
    identical = True
    for _ in range(100):
        F.run_episode(ilhf, env, 64, s1)
        F.run_episode(ens, env, 64, s2)
        identical &= np.array_equal(ilhf.phi, ens.state.members[0])
    moved = not np.array_equal(ilhf.phi, agent.phi)
    ok = identical and moved
    report(10, ok, f"M=1, zero prior, eta=0, unit weights vs ILHF over 100 episodes at tau=64: bit-identical={identical}")
    assert ok


def test_criterion_11_autocorrelation(tmp_path):
    rng = stream(0, 0, "acceptance/autocorr")
    ok = True
    for tau in (2, 8, 64, 500):
        x = rng.standard_normal(tau)
        ok &= math.isclose(datagen.autocorrelation(x, 0), 1 / tau, rel_tol=1e-12)
        ok &= math.isclose(datagen.autocorrelation(x, 0, normalize=True), 1.0, rel_tol=1e-12)
    cfg = H.preset("main")
    result = H.RunResult(cfg, cfg.fingerprint(), {0: H.SeedResult(0, cfg.fingerprint(), {})})
    path = H.emit_plot_data(result, "autocorr", tmp_path)
    lines = path.read_text().splitlines()
    ok &= lines[0] == "lag,alpha" and len(lines) == cfg.eval.autocorr_max_lag + 2
    report(11, ok, "alpha(0) = 1/tau verbatim and 1 normalised on random series; autocorrelation plot data emitted")
    assert ok
