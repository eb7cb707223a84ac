import json
import statistics

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ilhf import harness as H
from ilhf.harness import AgentSpec, ExperimentConfig, SeedResult


def tiny_config(**overrides) -> ExperimentConfig:
    cfg = ExperimentConfig(
        experiment="main",
        D=3,
        taus=[4],
        pretrain=H.PretrainConfig(samples=16, epochs=1, batch_size=8),
        finetune=H.FinetuneConfig(
            episodes=3,
            prompts_per_episode=8,
            agents=[AgentSpec("ilhf"), AgentSpec("reinforce", beta=0.1), AgentSpec("ensemble_ilhf", ensemble_size=3)],
        ),
        eval=H.EvalConfig(batch=20, head2head_prompts=10, head2head=[["ensemble_ilhf_3", "ilhf"]], autocorr_length=60, autocorr_max_lag=5),
        seeds=[0, 1, 2],
    )
    for k, v in overrides.items():
        setattr(cfg, k, v)
    return cfg


def test_fingerprint_ignores_key_order():
    doc = tiny_config().to_dict()
    shuffled = json.loads(json.dumps(dict(reversed(list(doc.items())))))
    shuffled["eval"] = dict(reversed(list(shuffled["eval"].items())))
    assert ExperimentConfig.from_dict(shuffled).fingerprint() == tiny_config().fingerprint()


def test_fingerprint_changes_with_content():
    assert tiny_config().fingerprint() != tiny_config(master_seed=1).fingerprint()


def test_config_roundtrip():
    cfg = tiny_config()
    assert ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


@pytest.mark.parametrize(
    "mutate",
    [
        lambda c: setattr(c, "seeds", [0, 0]),
        lambda c: setattr(c, "experiment", "nope"),
        lambda c: setattr(c.finetune, "episodes", 0),
        lambda c: c.finetune.agents.append(AgentSpec("ilhf", beta=0.5)),
        lambda c: c.finetune.agents.append(AgentSpec("ilhf")),
        lambda c: setattr(c.eval, "head2head", [["ilhf", "missing"]]),
        lambda c: setattr(c, "taus", []),
    ],
)
def test_invalid_configs_rejected(mutate):
    cfg = tiny_config()
    mutate(cfg)
    with pytest.raises(H.ConfigError):
        cfg.validate()


def test_unknown_keys_rejected():
    with pytest.raises(H.ConfigError):
        ExperimentConfig.from_dict({"experiment": "main", "learning_rate": 1})


def test_merge_config_keeps_untouched_fields():
    cfg = H.merge_config(H.preset("main"), {"finetune": {"episodes": 7}, "seeds": [3, 4]})
    assert cfg.finetune.episodes == 7 and cfg.seeds == [3, 4]
    assert cfg.finetune.temperature == 3.0 and len(cfg.finetune.agents) == 9


@pytest.mark.parametrize("name", H.EXPERIMENTS)
def test_presets_validate(name):
    H.preset(name).validate()


def test_main_preset_values():
    cfg = H.preset("main")
    assert (cfg.taus, cfg.finetune.prompts_per_episode, cfg.finetune.episodes, len(cfg.seeds)) == ([64], 64, 100, 20)
    assert cfg.pretrain.samples == 1000 and cfg.eval.batch == 500 and cfg.D == 10
    assert H.preset("ablation_tau").taus == [128, 256]
    assert H.preset("ablation_tau").finetune.episodes == 150
    assert H.preset("didactic").eval.batch == 3000


def fake(seed, values):
    return SeedResult(seed, "x", {"kl/a": [[i, v] for i, v in enumerate(values)]})


def test_aggregate_identical_series():
    agg = H.aggregate([fake(0, [1.0, 0.5]), fake(1, [1.0, 0.5])])["kl/a"]
    np.testing.assert_array_equal(agg.stderr, 0.0)


def test_aggregate_two_seed_hand_case():
    agg = H.aggregate([fake(0, [0.0]), fake(1, [2.0])])["kl/a"]
    assert agg.mean[0] == 1.0 and agg.stderr[0] == pytest.approx(1.0)


def test_aggregate_needs_two_seeds():
    with pytest.raises(ValueError):
        H.aggregate([fake(0, [1.0])])


def test_aggregate_matches_statistics_module():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.integers(2, 8))
        data = rng.standard_normal((n, 5))
        agg = H.aggregate([fake(i, row) for i, row in enumerate(data)])["kl/a"]
        for e in range(5):
            col = list(data[:, e])
            assert agg.mean[e] == pytest.approx(statistics.fmean(col), abs=1e-12)
            assert agg.stderr[e] == pytest.approx(statistics.stdev(col) / n**0.5, rel=1e-10)


def test_aggregate_rejects_mismatched_episodes():
    with pytest.raises(ValueError):
        H.aggregate([fake(0, [1.0, 2.0]), fake(1, [1.0])])


@given(st.lists(st.floats(0, 10), min_size=1, max_size=20), st.floats(0, 10))
def test_episodes_to_threshold(values, threshold):
    series = [[i, v] for i, v in enumerate(values)]
    k = H.episodes_to_threshold(series, threshold)
    if k < len(values):
        assert values[k] <= threshold and all(v > threshold for v in values[:k])
    else:
        assert k == len(values) and all(v > threshold for v in values)


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    return out, H.run_experiment(tiny_config(), out)


def test_run_outputs(tiny_run):
    out, result = tiny_run
    assert set(result.seeds) == {0, 1, 2}
    lines = (out / "metrics.csv").read_text().splitlines()
    assert lines[0] == "seed,episode,metric_name,value"
    # 3 seeds x 3 agents x (episodes + 1)
    assert len(lines) == 1 + 3 * 3 * 4
    h2h = (out / "head2head.csv").read_text().splitlines()
    assert h2h[0] == "candidate,reference,score_c,score_r,ratio,stderr" and len(h2h) == 2
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["fingerprint"] == tiny_config().fingerprint()
    assert (out / "checkpoints" / "seed_0000" / "pretrain.json").exists()
    for series in result.seeds[0].metrics.values():
        assert [e for e, _ in series] == [0, 1, 2, 3]
        assert np.all(np.isfinite([v for _, v in series]))


def test_all_agents_start_from_same_point(tiny_run):
    _, result = tiny_run
    m = result.seeds[1].metrics
    assert m["kl/ilhf"][0] == m["kl/reinforce_beta=0.1"][0]


def test_rerun_is_byte_identical(tiny_run, tmp_path):
    out, _ = tiny_run
    H.run_experiment(tiny_config(), tmp_path)
    for name in ("metrics.csv", "head2head.csv", "manifest.json", "config.json"):
        assert (tmp_path / name).read_bytes() == (out / name).read_bytes()


def test_parallel_matches_serial(tiny_run, tmp_path):
    out, _ = tiny_run
    H.run_experiment(tiny_config(), tmp_path, parallel=2)
    assert (tmp_path / "metrics.csv").read_bytes() == (out / "metrics.csv").read_bytes()


def test_resume_after_interruption(tiny_run, tmp_path):
    out, _ = tiny_run
    cfg = tiny_config()
    H.run_experiment(cfg, tmp_path)
    # simulate a crash after seed 0: later seeds never landed on disk
    for s in (1, 2):
        (tmp_path / "seeds" / f"seed_{s:04d}.json").unlink()
    seen = []
    H.run_experiment(cfg, tmp_path, progress=lambda seed, sec: seen.append(seed))
    assert seen == [1, 2]
    assert (tmp_path / "metrics.csv").read_bytes() == (out / "metrics.csv").read_bytes()


def test_other_config_in_directory_refused(tiny_run):
    out, _ = tiny_run
    with pytest.raises(H.ConfigError):
        H.run_experiment(tiny_config(master_seed=9), out)


def test_load_run(tiny_run):
    out, result = tiny_run
    loaded = H.load_run(out)
    assert loaded.fingerprint == result.fingerprint
    assert loaded.seeds == result.seeds


def test_emit_plot_data(tiny_run, tmp_path):
    _, result = tiny_run
    path = H.emit_plot_data(result, "main-kl", tmp_path)
    rows = path.read_text().splitlines()
    assert rows[0] == "episode,series_label,mean,stderr"
    assert {r.split(",")[1] for r in rows[1:]} == {"ilhf", "reinforce_beta=0.1", "ensemble_ilhf_3"}
    ens = H.emit_plot_data(result, "ablate-ensemble", tmp_path).read_text()
    assert "reinforce" not in ens
    h2h = H.emit_plot_data(result, "head2head", tmp_path).read_text().splitlines()
    assert h2h[1].startswith("ensemble_ilhf_3,ilhf,")
    ac = H.emit_plot_data(result, "autocorr", tmp_path).read_text().splitlines()
    assert ac[0] == "lag,alpha" and float(ac[1].split(",")[1]) == pytest.approx(1.0)


def test_emit_plot_data_unknown_figure(tiny_run, tmp_path):
    with pytest.raises(ValueError):
        H.emit_plot_data(tiny_run[1], "fig-9", tmp_path)
    assert not any(tmp_path.iterdir())


def test_emit_plot_data_missing_series(tiny_run, tmp_path):
    with pytest.raises(ValueError):
        H.emit_plot_data(tiny_run[1], "didactic-rate", tmp_path)
    assert not any(tmp_path.iterdir())


def test_emit_plot_data_empty_result(tmp_path):
    empty = H.RunResult(tiny_config(), "x", {})
    with pytest.raises(ValueError):
        H.emit_plot_data(empty, "main-kl", tmp_path / "plots")
    assert not (tmp_path / "plots").exists()


def test_didactic_run_tracks_probability():
    cfg = H.preset("didactic")
    cfg.seeds = [0]
    cfg.pretrain.samples = 100
    cfg.pretrain.epochs = 5
    cfg.finetune.episodes = 5
    cfg.finetune.agents = [AgentSpec("ilhf"), AgentSpec("reinforce")]
    res = H.run_experiment(cfg)
    m = res.seeds[0].metrics
    assert set(m) == {"p_plus/ilhf", "kl/ilhf", "p_plus/reinforce_beta=0", "kl/reinforce_beta=0"}
    assert len(m["p_plus/ilhf"]) == 6
    assert all(0 < v < 1 for _, v in m["p_plus/ilhf"])


def test_tau_ablation_series_labels():
    cfg = tiny_config(taus=[3, 5], seeds=[0, 1])
    cfg.finetune.agents = [AgentSpec("ilhf")]
    cfg.eval.head2head = []
    res = H.run_experiment(cfg)
    assert set(res.seeds[0].metrics) == {"kl/ilhf@tau=3", "kl/ilhf@tau=5"}
