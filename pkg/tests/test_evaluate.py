import numpy as np
import pytest
import torch

from icav.diffusion import TrainConfig
from icav.evaluate import (AblationTable, MetricReport, Record, Variant, config_fingerprint,
                           env_adherence, eval_items, identity_similarity, item_metrics,
                           leakage_score, preset, run_ablation, sign_test, summarize)
from icav.model import ModelConfig
from icav.sampler import GuidanceConfig
from icav.synthworld import (CROSS, D_ID, N_ENV, SAME, World, WorldConfig, gen_identity, gen_pair,
                             gen_split)


@pytest.fixture(scope="module")
def world():
    return World(WorldConfig(seed=0))


@pytest.fixture(scope="module")
def clean_world():
    return World(WorldConfig(seed=0, noise=0.0, drift=0.0))


def test_oracle_consistency_on_noiseless_pairs(clean_world):
    rng = np.random.default_rng(0)
    for i in range(20):
        ident = gen_identity(i)
        p = gen_pair(clean_world, ident, i % N_ENV, i % 4, CROSS, rng)
        assert identity_similarity(p.target_audio, ident, clean_world) == pytest.approx(1.0, abs=1e-6)
        assert env_adherence(p.target_audio, p.env_code, clean_world) == pytest.approx(1.0, abs=1e-6)
        assert leakage_score(p.target_audio, p.ref_nuisance) == pytest.approx(0.0, abs=1e-6)


def test_similarity_against_an_orthogonal_identity_is_zero(clean_world):
    rng = np.random.default_rng(1)
    for i in range(100):
        ident = gen_identity(i)
        p = gen_pair(clean_world, ident, 0, 0, SAME, rng)
        other = rng.standard_normal(D_ID)
        other -= (other @ ident.speaker_signature) * ident.speaker_signature
        assert abs(identity_similarity(p.target_audio, other, clean_world)) < 0.1


def test_noise_latents_have_zero_mean_similarity(world):
    rng = np.random.default_rng(2)
    sims = [identity_similarity(rng.standard_normal((16, 64)), gen_identity(i), world)
            for i in range(1000)]
    assert abs(np.mean(sims)) < 0.05
    assert all(-1 <= s <= 1 for s in sims)


def test_env_adherence_prefers_the_true_code(world):
    rng = np.random.default_rng(3)
    wins = 0
    for i in range(100):
        env = i % N_ENV
        p = gen_pair(world, gen_identity(i), env, 0, SAME, rng)
        wrong = (env + 1 + i % (N_ENV - 1)) % N_ENV
        wins += env_adherence(p.target_audio, env, world) > env_adherence(p.target_audio, wrong, world)
    assert wins >= 95


def test_clean_reference_has_no_env_adherence(world):
    # only the noise floor lands in the env block, so adherence averages to 0 for every code
    rng = np.random.default_rng(4)
    refs = [gen_pair(world, gen_identity(i), i % N_ENV, 0, SAME, rng).ref_audio for i in range(200)]
    for code in range(N_ENV):
        assert abs(np.mean([env_adherence(r, code, world) for r in refs])) < 0.1


def test_leakage_worst_case_and_range(world):
    rng = np.random.default_rng(5)
    p = gen_pair(world.__class__(WorldConfig(seed=0, noise=0.0)), gen_identity(1), 0, 0, SAME, rng)
    # a target that is the reference itself leaks the full nuisance
    assert leakage_score(p.ref_audio, p.ref_nuisance) == pytest.approx(np.linalg.norm(p.ref_nuisance),
                                                                        rel=1e-5)
    assert leakage_score(np.zeros((4, 64)), np.zeros(64)) == 0.0
    assert leakage_score(-p.ref_audio, p.ref_nuisance) >= 0


def test_metric_errors_and_report_ranges(world):
    with pytest.raises(ValueError):
        identity_similarity(np.zeros((3, 64)), gen_identity(0), world)
    with pytest.raises(ValueError):
        env_adherence(np.ones((3, 64)), N_ENV, world)
    with pytest.raises(ValueError):
        MetricReport(1.5, 0.0, 0.0)
    with pytest.raises(ValueError):
        MetricReport(0.0, 0.0, -0.1)
    with pytest.raises(ValueError):
        summarize([])


def test_item_metrics_uses_the_target_clip_speaker(world):
    rng = np.random.default_rng(6)
    p = gen_pair(world, gen_identity(3), 2, 1, CROSS, rng)
    m = item_metrics(torch.from_numpy(p.target_audio), p, world)
    assert m["identity_similarity"] > 0.99
    assert set(m) == {"identity_similarity", "env_adherence", "leakage"}
    rep = summarize([m, m], "hard", "fp")
    assert rep.n == 2 and rep.split == "hard" and rep.identity_similarity == m["identity_similarity"]


def test_sign_test():
    assert sign_test([1, 2, 3], [0, 0, 0]) == (3, 3, 0.125)
    wins, n, p = sign_test([1.0] * 10, [0.0] * 10)
    assert (wins, n) == (10, 10) and p == pytest.approx(2 ** -10)
    assert sign_test([1, 1], [1, 1]) == (0, 0, 1.0)
    assert sign_test([0, 2], [1, 1])[2] == pytest.approx(0.75)
    with pytest.raises(ValueError):
        sign_test([1], [1, 2])


def test_presets_and_fingerprint():
    names = [v.name for v in preset("table3")]
    assert names == ["full", "no-identity-guidance", "standard-positions"]
    assert [v.guidance["s_id"] for v in preset("sweep")] == [0.0, 1.0, 2.0, 4.0, 8.0]
    with pytest.raises(KeyError):
        preset("nope")
    assert config_fingerprint(ModelConfig()) == config_fingerprint(ModelConfig())
    assert config_fingerprint(ModelConfig()) != config_fingerprint(ModelConfig(seed=1))
    assert config_fingerprint({"b": 1, "a": 2}) == config_fingerprint({"a": 2, "b": 1})


def test_eval_items_strides_evenly():
    items = list(range(100))
    assert eval_items(items, None) == items
    sub = eval_items(items, 5)
    assert sub == [0, 25, 50, 74, 99] or sub == [0, 25, 50, 75, 99]
    assert eval_items(items[:3], 10) == [0, 1, 2]


def test_table_records_and_rendering():
    t = AblationTable(fingerprint="abc")
    for seed, v in ((0, 0.5), (1, 0.7)):
        for m, val in (("identity_similarity", v), ("env_adherence", 0.1), ("leakage", 0.2)):
            t.records.append(Record("full", seed, "all", m, val))
    assert t.values("full", "identity_similarity") == [0.5, 0.7]
    assert t.variants() == ["full"]
    lines = t.tsv().splitlines()
    assert lines[0] == "# fingerprint abc" and lines[2] == "full\t0\tall\tidentity_similarity\t0.500000"
    assert "0.6000 ± 0.1000" in t.summary()


def test_run_ablation_one_variant_one_seed_gives_one_row_per_metric():
    ds = gen_split(6, 4, 0.5, seed=0)
    table = run_ablation([Variant("full")], ds, [0], ModelConfig(), TrainConfig(steps=2),
                         GuidanceConfig(steps=2), max_items=3, fingerprint="fp")
    assert len(table.records) == 3
    assert {r.metric for r in table.records} == {"identity_similarity", "env_adherence", "leakage"}
    assert all(r.variant == "full" and r.seed == 0 for r in table.records)
    assert len(table.paired("full", "leakage")) == 3
    assert all(r.value >= 0 for r in table.records if r.metric == "leakage")
