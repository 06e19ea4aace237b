import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from icav.diffusion import (CleanBatch, DropoutConfig, SampleCond, TrainConfig, TrainingDiverged,
                            base_fingerprint, cond_dropout, loss_grad_check, stack_samples, train,
                            trainable_parameters, training_loss)
from icav.model import ModelConfig, build_model
from icav.numerics import NonFiniteError
from icav.schedule import NoiseSchedule, add_noise
from icav.synthworld import CROSS, SAME, World, WorldConfig, derive_seed, gen_identity, gen_pair

SCHED = NoiseSchedule()


@pytest.fixture(scope="module")
def world():
    return World(WorldConfig(seed=0))


@pytest.fixture(scope="module")
def samples(world):
    rng = np.random.default_rng(0)
    return [gen_pair(world, gen_identity(i % 5), i % 8, i % 4, (SAME, CROSS)[i % 2], rng)
            for i in range(12)]


# ---------------------------------------------------------------------------
# schedule and forward noising
# ---------------------------------------------------------------------------


def test_schedule_endpoints_and_monotonicity():
    t = torch.linspace(0, 1, 101)
    ab = SCHED.alpha_bar(t)
    assert ab[0].item() == pytest.approx(1.0, abs=1e-12)
    assert ab[-1].item() < 1e-6
    assert (ab[1:] <= ab[:-1]).all()
    with pytest.raises(ValueError):
        NoiseSchedule(kind="linear")


def test_schedule_identity_over_100_times():
    t = torch.rand(100, generator=torch.Generator().manual_seed(0))
    a, b = SCHED.coefficients(t)
    assert ((a ** 2 + b ** 2 - 1).abs() < 1e-6).all()


def test_add_noise_examples():
    z0, eps = torch.randn(4, 8), torch.randn(4, 8)
    assert torch.allclose(add_noise(z0, eps, 0.0, SCHED), z0, atol=1e-6)
    assert torch.allclose(add_noise(z0, eps, 1.0, SCHED), eps, atol=1e-3)
    v = torch.randn(4, 8)
    ab = math.cos((0.3 + 0.008) / 1.008 * math.pi / 2) ** 2 / math.cos(0.008 / 1.008 * math.pi / 2) ** 2
    expected = (math.sqrt(ab) + math.sqrt(1 - ab)) * v
    assert torch.allclose(add_noise(v, v, 0.3, SCHED), expected, atol=1e-6)


def test_add_noise_batched_times_and_errors():
    z0, eps = torch.randn(3, 5, 2), torch.randn(3, 5, 2)
    t = torch.tensor([0.0, 0.5, 1.0])
    out = add_noise(z0, eps, t, SCHED)
    for i in range(3):
        assert torch.allclose(out[i], add_noise(z0[i], eps[i], t[i].item(), SCHED))
    with pytest.raises(ValueError):
        add_noise(z0, eps, 1.5, SCHED)
    with pytest.raises(ValueError):
        add_noise(z0, eps, -0.1, SCHED)
    with pytest.raises(ValueError):
        add_noise(z0, eps[:, :4], 0.5, SCHED)


# ---------------------------------------------------------------------------
# conditioning dropout
# ---------------------------------------------------------------------------


def test_dropout_config_validation():
    with pytest.raises(ValueError):
        DropoutConfig(p_drop_text=1.5)
    with pytest.raises(ValueError):
        DropoutConfig(p_first_frame=-0.1)


def test_cond_dropout_identity_when_nothing_drops():
    cfg = DropoutConfig(0.0, 0.0, 1.0)
    ff, ref = np.ones((4, 2)), np.zeros((3, 2))
    rng = np.random.default_rng(0)
    for _ in range(100):
        c, r = cond_dropout(SampleCond(3, 1, ff), ref, cfg, rng)
        assert (c.env, c.style) == (3, 1) and c.first_frame is ff and r is ref


def test_cond_dropout_reference_always_dropped():
    rng = np.random.default_rng(1)
    cfg = DropoutConfig(0.0, 1.0, 1.0)
    assert all(cond_dropout(SampleCond(0, 0), np.ones(2), cfg, rng)[1] is None for _ in range(1000))


def test_cond_dropout_text_rate_is_binomial():
    rng = np.random.default_rng(2)
    cfg = DropoutConfig(0.5, 0.0, 1.0)
    drops = sum(cond_dropout(SampleCond(1, 1), None, cfg, rng)[0].env is None for _ in range(10000))
    assert abs(drops - 5000) <= 3 * math.sqrt(10000 * 0.25)


def test_cond_dropout_first_frame_probability():
    rng = np.random.default_rng(3)
    cfg = DropoutConfig(0.0, 0.0, 0.9)
    kept = sum(cond_dropout(SampleCond(1, 1, np.ones(1)), None, cfg, rng)[0].first_frame is not None
               for _ in range(10000))
    assert abs(kept - 9000) <= 3 * math.sqrt(10000 * 0.09)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


class _EpsStub:
    """Returns the noise the loss will draw for ``seed`` plus a constant offset."""

    def __init__(self, seed, offset=0.0):
        self.seed, self.offset = seed, offset
        self.calls = []

    def __call__(self, joint, cond, adapters=None):
        self.calls.append((joint, cond))
        g = torch.Generator().manual_seed(derive_seed(self.seed, "noise"))
        torch.rand(joint.batch, generator=g, dtype=torch.float64)
        ev = torch.randn(joint.video.shape, generator=g)
        ea = torch.randn(joint.audio_target.shape, generator=g)
        return ev + self.offset, ea + self.offset


def test_loss_of_exact_noise_prediction_is_zero(samples):
    assert training_loss(samples[:4], _EpsStub(5), SCHED, seed=5).item() == 0.0


@pytest.mark.parametrize("c", [0.1, 0.5, 2.0])
def test_loss_of_offset_prediction_is_c_squared(samples, c):
    loss = training_loss(samples[:4], _EpsStub(5, c), SCHED, seed=5).item()
    assert loss == pytest.approx(c * c, rel=1e-5)


def test_stub_sees_clean_reference_and_noised_targets(samples):
    stub = _EpsStub(1)
    batch = stack_samples(samples[:3])
    training_loss(batch, stub, SCHED, DropoutConfig(0.0, 0.0, 1.0), seed=1)
    joint, cond = stub.calls[0]
    assert torch.equal(joint.audio_ref, batch.ref)
    assert not torch.equal(joint.audio_target, batch.audio)
    assert torch.equal(joint.first_frame, batch.first_frame)
    assert cond.env.tolist() == batch.env.tolist()


def test_loss_is_independent_of_reference_when_always_dropped(samples):
    model, adapters = build_model(ModelConfig(seed=0))
    a = stack_samples(samples[:4])
    b = CleanBatch(a.video, a.audio, a.ref + torch.randn(a.ref.shape), a.first_frame, a.env, a.style,
                   a.video_shape)
    cfg = DropoutConfig(p_drop_reference=1.0)
    la = training_loss(a, model, SCHED, cfg, seed=3, adapters=adapters)
    lb = training_loss(b, model, SCHED, cfg, seed=3, adapters=adapters)
    assert la.item() == lb.item()
    # without dropout the reference matters
    lc = training_loss(b, model, SCHED, DropoutConfig(0.0, 0.0, 1.0), seed=3, adapters=adapters)
    assert lc.item() != training_loss(a, model, SCHED, DropoutConfig(0.0, 0.0, 1.0), seed=3,
                                      adapters=adapters).item()


def test_loss_errors(samples):
    with pytest.raises(ValueError):
        training_loss([], _EpsStub(0), SCHED)
    nan_stub = lambda joint, cond, adapters=None: (joint.video * float("nan"), joint.audio_target)
    with pytest.raises(NonFiniteError):
        training_loss(samples[:2], nan_stub, SCHED)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2 ** 31), scale=st.floats(-3, 3))
def test_loss_is_non_negative_and_zero_only_at_the_noise(samples, seed, scale):
    stub = _EpsStub(seed)
    assert training_loss(samples[:2], stub, SCHED, seed=seed).item() == 0.0
    wrong = lambda j, c, a=None: tuple(x * scale for x in stub(j, c))
    loss = training_loss(samples[:2], wrong, SCHED, seed=seed).item()
    assert loss >= 0.0
    if scale != 1.0:
        assert loss > 0.0


def test_loss_gradient_matches_finite_differences():
    report = loss_grad_check()
    assert report.max_rel_error < 1e-3, report


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def _trainable_snapshot(model, adapters):
    return {k: v.detach().clone() for k, v in trainable_parameters(model, adapters).items()}


def test_zero_steps_leaves_model_unchanged(samples):
    model, adapters = build_model(ModelConfig(seed=2))
    before = {k: v.clone() for k, v in model.state_dict().items()}
    ad_before = _trainable_snapshot(model, adapters)
    res = train(samples, model, adapters, TrainConfig(steps=0))
    assert res.losses == []
    for k, v in model.state_dict().items():
        assert torch.equal(v, before[k])
    for k, v in _trainable_snapshot(model, adapters).items():
        assert torch.equal(v, ad_before[k])


def test_training_freezes_base_and_moves_adapters(samples):
    model, adapters = build_model(ModelConfig(seed=2))
    h0 = base_fingerprint(model)
    before = _trainable_snapshot(model, adapters)
    res = train(samples, model, adapters, TrainConfig(steps=5, lr=1e-2))
    assert len(res.losses) == 5 and all(math.isfinite(x) and x >= 0 for x in res.losses)
    assert base_fingerprint(model) == h0
    after = _trainable_snapshot(model, adapters)
    assert any(not torch.equal(before[k], after[k]) for k in before if k.endswith("/up"))
    assert any(not torch.equal(before[k], after[k]) for k in before if k.startswith("cond/"))
    assert res.optimizer.steps == 5


def test_training_is_deterministic(samples):
    runs = []
    for _ in range(2):
        model, adapters = build_model(ModelConfig(seed=1))
        res = train(samples, model, adapters, TrainConfig(steps=4, seed=9))
        runs.append((res.losses, _trainable_snapshot(model, adapters)))
    assert runs[0][0] == runs[1][0]
    for k, v in runs[0][1].items():
        assert torch.equal(v, runs[1][1][k])


def test_on_step_callback_and_empty_dataset(samples):
    seen = []
    model, adapters = build_model(ModelConfig(seed=0))
    train(samples, model, adapters, TrainConfig(steps=3), on_step=lambda s, l: seen.append(s))
    assert seen == [0, 1, 2]
    with pytest.raises(ValueError):
        train([], model, adapters, TrainConfig(steps=1))


def test_divergence_aborts_with_diagnostic(samples):
    model, adapters = build_model(ModelConfig(seed=0))
    with torch.no_grad():
        model.weight("audio.0.attn.q").fill_(float("inf"))
    with pytest.raises(TrainingDiverged, match="step 0"):
        train(samples, model, adapters, TrainConfig(steps=2))
