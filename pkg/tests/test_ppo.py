import numpy as np
import pytest

import sketchsift.autodiff as ad
import sketchsift.selector as sel
from sketchsift.embedder import EmbedNet, EmbedNetConfig
from sketchsift.errors import EmptyBatch, EmptySubset, LengthMismatch
from sketchsift.ppo import (
    EpisodeRecord,
    PPOConfig,
    ReplayBuffer,
    RewardConfig,
    RolloutEnv,
    SketchPairSet,
    augment,
    clean_training_data,
    compute_reward,
    ppo_loss,
    rollout,
    train_selector,
)
from sketchsift.ranking import GalleryFeatures, rank
from sketchsift.sketch import (
    Point,
    Stroke,
    StrokeMask,
    VectorSketch,
    apply_mask,
    rasterize,
)
from sketchsift.synth import PairSpec, generate_pair


def rng_for(seed):
    return np.random.Generator(np.random.PCG64(seed))


def tiny_embed(seed=0):
    return EmbedNet(EmbedNetConfig(input_hw=16, channels=(2, 3), embed_dim=4, seed=seed))


def tiny_selector(seed=0):
    return sel.SelectorNet(sel.SelectorConfig(hidden=8, seed=seed))


def random_sketch(rng, k=4, canvas=64):
    strokes = []
    for _ in range(k):
        n = int(rng.integers(2, 6))
        pts = rng.uniform(0, canvas - 1, size=(n, 2))
        strokes.append(Stroke(tuple(Point(float(x), float(y)) for x, y in pts)))
    return VectorSketch(tuple(strokes), canvas, canvas)


@pytest.fixture(scope="module")
def env():
    net = tiny_embed()
    rng = rng_for(77)
    photos = (rng.random((6, 16, 16)) < 0.15).astype(np.float64)
    gallery = GalleryFeatures(net.embed(photos), [f"p{i}" for i in range(6)])
    return RolloutEnv(net=net, gallery=gallery)


# -- rewards -------------------------------------------------------------------


def test_reward_combined_arithmetic(env):
    # rank=1, L=0 with unit weights -> 1.0; rank=4, L=0.3 -> 0.25 - 0.3
    assert 1.0 * (1 / 1) - 1.0 * 0.0 == pytest.approx(1.0)
    assert 1.0 * (1 / 4) - 1.0 * 0.3 == pytest.approx(-0.05)


def test_reward_inv_rank_matches_rank_module(env):
    rng = rng_for(1)
    sketch = random_sketch(rng)
    mask = StrokeMask.all_select(sketch.stroke_count)
    r = compute_reward(mask, sketch, "p2", env, RewardConfig(variant="inv_rank"))
    emb = env.net.embed(rasterize(sketch, 16, 16, 1).pixels[None])[0]
    expected = 1.0 / rank(emb, env.gallery, "p2").rank
    assert r == pytest.approx(expected, rel=1e-12)


def test_reward_neg_rank_and_empty_subset(env):
    rng = rng_for(2)
    sketch = random_sketch(rng)
    mask = StrokeMask.all_select(sketch.stroke_count)
    r = compute_reward(mask, sketch, "p1", env, RewardConfig(variant="neg_rank"))
    assert r == -float(
        rank(env.net.embed(rasterize(sketch, 16, 16, 1).pixels[None])[0], env.gallery, "p1").rank
    )
    with pytest.raises(EmptySubset):
        compute_reward(
            StrokeMask((False,) * sketch.stroke_count),
            sketch,
            "p1",
            env,
            RewardConfig(variant="neg_rank"),
        )


def test_reward_combined_decomposition_identity(env):
    # combined == w1 * inv_rank - w2 * triplet for a pinned negative sample
    rng = rng_for(3)
    sketch = random_sketch(rng)
    mask = StrokeMask((True, True, False, True))
    cfg = RewardConfig(variant="combined", rank_weight=0.7, triplet_weight=1.3)
    combined = compute_reward(mask, sketch, "p3", env, cfg, rng=rng_for(99))
    inv = compute_reward(mask, sketch, "p3", env, RewardConfig(variant="inv_rank"))
    neg_trip = compute_reward(
        mask, sketch, "p3", env, RewardConfig(variant="neg_triplet"), rng=rng_for(99)
    )
    assert combined == pytest.approx(0.7 * inv + 1.3 * neg_trip, abs=1e-12)


def test_reward_all_variants_finite(env):
    rng = rng_for(4)
    sketch = random_sketch(rng)
    mask = StrokeMask((True, False, True, True))
    for variant in ("neg_rank", "inv_rank", "neg_triplet", "inv_triplet_eps", "combined"):
        r = compute_reward(
            mask, sketch, "p0", env, RewardConfig(variant=variant), rng=rng_for(5)
        )
        assert np.isfinite(r)


def test_reward_config_validation():
    with pytest.raises(LengthMismatch):
        RewardConfig(variant="bogus")
    with pytest.raises(LengthMismatch):
        RewardConfig(rank_weight=0.0, triplet_weight=0.0)


# -- rollout -------------------------------------------------------------------


def test_rollout_t1_single_record(env):
    sketch = random_sketch(rng_for(6))
    records = rollout(
        sketch, tiny_selector(), env, "p1", RewardConfig(), episode_len=1, rng=rng_for(7)
    )
    assert len(records) == 1
    assert records[0].state == sketch
    assert records[0].step == 1


def test_rollout_forced_all_select_fixed_point(env):
    sketch = random_sketch(rng_for(8))
    policy = tiny_selector()
    # saturate the policy head bias so select wins with probability ~1
    policy.params["head.b"].data = np.array([30.0, -30.0])
    records = rollout(
        sketch, policy, env, "p2", RewardConfig(), episode_len=4, rng=rng_for(9)
    )
    assert len(records) == 4
    for rec in records:
        assert rec.state == sketch
        assert rec.mask.bits == (True,) * sketch.stroke_count
    rewards = {rec.reward for rec in records}
    assert len(rewards) == 1  # identical states give identical pinned rewards


def test_rollout_chained_states_shrink(env):
    rng = rng_for(10)
    for trial in range(50):
        sketch = random_sketch(rng, k=int(rng.integers(2, 6)))
        records = rollout(
            sketch,
            tiny_selector(seed=trial),
            env,
            "p3",
            RewardConfig(variant="inv_rank"),
            episode_len=5,
            rng=rng,
        )
        counts = [r.state.stroke_count for r in records]
        assert all(a >= b for a, b in zip(counts, counts[1:]))
        # every state is a subset of the initial sketch
        for rec in records:
            assert set(rec.state.strokes) <= set(sketch.strokes)
        if len(records) < 5:
            kept = records[-1].mask.selected_count
            assert kept == 1  # early termination only on single-stroke collapse


def test_rollout_independent_mode(env):
    sketch = random_sketch(rng_for(11))
    records = rollout(
        sketch,
        tiny_selector(),
        env,
        "p0",
        RewardConfig(variant="inv_rank"),
        episode_len=3,
        rng=rng_for(12),
        chained=False,
    )
    assert len(records) == 3
    assert all(r.state == sketch for r in records)


# -- replay buffer ----------------------------------------------------------------


def test_replay_buffer_fifo_and_capacity():
    buf = ReplayBuffer(capacity=3)
    sketch = random_sketch(rng_for(13), k=2)
    for i in range(5):
        buf.add(
            EpisodeRecord(sketch, StrokeMask((True, True)), -0.1, float(i), 0.0, 1)
        )
    assert len(buf) == 3
    rewards = {r.reward for r in buf.sample(3, rng_for(14))}
    assert rewards == {2.0, 3.0, 4.0}


def test_replay_buffer_sampling_without_replacement():
    buf = ReplayBuffer(capacity=10)
    sketch = random_sketch(rng_for(15), k=2)
    for i in range(10):
        buf.add(EpisodeRecord(sketch, StrokeMask((True, True)), 0.0, float(i), 0.0, 1))
    got = buf.sample(10, rng_for(16))
    assert len({r.reward for r in got}) == 10


# -- ppo loss ----------------------------------------------------------------------


def make_record(policy, sketch, mask, reward, value_old, logp_shift=0.0):
    out = sel.encode(policy, sketch)
    logp = sel.log_prob_of(out.probs_array, mask)
    return EpisodeRecord(sketch, mask, logp + logp_shift, reward, value_old, 1)


def test_ppo_loss_ratio_one_identity(env):
    policy = tiny_selector()
    rng = rng_for(17)
    batch = []
    for _ in range(4):
        sketch = random_sketch(rng, k=3)
        mask, _ = sel.sample_mask(sel.encode(policy, sketch).probs_array, rng)
        if mask.selected_count == 0:
            mask = StrokeMask.all_select(3)
        batch.append(make_record(policy, sketch, mask, reward=0.4, value_old=0.1))
    loss, diags = ppo_loss(batch, policy, PPOConfig())
    assert diags.mean_ratio == pytest.approx(1.0, abs=1e-12)
    assert np.abs(diags.surr_unclipped - diags.surr_clipped).max() < 1e-12
    # actor term equals mean advantage when every ratio is 1
    adv = 0.4 - 0.1
    assert diags.surr_unclipped.mean() == pytest.approx(adv, abs=1e-9)


def test_ppo_loss_clip_active_zero_actor_gradient(env):
    # ratio forced above 1+eps with positive advantage: clipped branch wins
    # and its gradient w.r.t. policy parameters is exactly zero
    policy = tiny_selector()
    cfg = PPOConfig(value_coeff=0.0, entropy_coeff=0.0)
    rng = rng_for(18)
    batch = []
    for _ in range(6):
        sketch = random_sketch(rng, k=3)
        mask = StrokeMask((True, False, True))
        batch.append(
            make_record(
                policy, sketch, mask, reward=1.0, value_old=0.0, logp_shift=-np.log(1.5)
            )
        )
    with ad.Tape() as tape:
        loss, diags = ppo_loss(batch, policy, cfg)
    assert diags.clip_fraction == 1.0
    assert np.allclose(diags.surr_clipped, 1.2)
    grads = tape.gradients(loss, params=policy.params.values())
    for g in grads.values():
        assert np.all(g == 0.0)


def test_ppo_loss_clip_inactive_gradient_flows(env):
    policy = tiny_selector()
    cfg = PPOConfig(value_coeff=0.0, entropy_coeff=0.0)
    sketch = random_sketch(rng_for(19), k=3)
    batch = [make_record(policy, sketch, StrokeMask((True, True, False)), 1.0, 0.0)]
    with ad.Tape() as tape:
        loss, _ = ppo_loss(batch, policy, cfg)
    grads = tape.gradients(loss, params=policy.params.values())
    assert any(np.abs(g).max() > 0 for g in grads.values())


def test_ppo_loss_empty_batch():
    with pytest.raises(EmptyBatch):
        ppo_loss([], tiny_selector(), PPOConfig())


def test_ppo_loss_gradient_finite_difference(env):
    policy = tiny_selector(seed=5)
    assert policy.param_count() <= 1500
    cfg = PPOConfig()
    rng = rng_for(20)
    batch = []
    for _ in range(3):
        sketch = random_sketch(rng, k=2)
        mask, _ = sel.sample_mask(sel.encode(policy, sketch).probs_array, rng)
        if mask.selected_count == 0:
            mask = StrokeMask.all_select(2)
        batch.append(make_record(policy, sketch, mask, float(rng.normal()), 0.2))

    report = ad.finite_diff_check(
        lambda: ppo_loss(batch, policy, cfg)[0], policy.params, tol=1e-4
    )
    assert report.passed, report.per_param


def test_value_head_regression_monotone(env):
    # policy frozen, only the critic head trained on a fixed batch:
    # value MSE decreases monotonically over the first 100 steps
    policy = tiny_selector(seed=6)
    rng = rng_for(21)
    batch = []
    for _ in range(8):
        sketch = random_sketch(rng, k=3)
        mask = StrokeMask.all_select(3)
        batch.append(make_record(policy, sketch, mask, float(rng.uniform(0, 1)), 0.0))
    critic_params = {"value.w": policy.params["value.w"], "value.b": policy.params["value.b"]}
    state = ad.AdamState()
    mses = []
    for _ in range(100):
        with ad.Tape() as tape:
            loss, diags = ppo_loss(batch, policy, PPOConfig(entropy_coeff=0.0))
        grads = tape.gradients(loss, params=critic_params.values())
        mses.append(diags.value_mse)
        ad.adam_step(critic_params, {n: grads[p] for n, p in critic_params.items()}, state, 1e-3)
    assert all(a >= b - 1e-9 for a, b in zip(mses, mses[1:]))


def test_ppo_literal_log_ratio_flag(env):
    policy = tiny_selector()
    sketch = random_sketch(rng_for(22), k=3)
    mask = StrokeMask((True, True, True))
    rec = make_record(policy, sketch, mask, 0.5, 0.0)
    loss_lit, diags_lit = ppo_loss([rec], policy, PPOConfig(literal_log_ratio=True))
    assert diags_lit.mean_ratio == pytest.approx(1.0, abs=1e-9)  # logp/logp = 1
    rec_shifted = make_record(policy, sketch, mask, 0.5, 0.0, logp_shift=-1.0)
    _, diags_shift = ppo_loss([rec_shifted], policy, PPOConfig(literal_log_ratio=True))
    assert diags_shift.mean_ratio != pytest.approx(1.0, abs=1e-6)


# -- training (smoke) ---------------------------------------------------------------


def smoke_pairs(n=6, seed=30):
    sketches, photos, ids = [], [], []
    for i in range(n):
        spec = PairSpec(
            shape_family=("polygon", "ellipse", "blob")[i % 3],
            seed=seed + i,
            n_clean_strokes=3,
            photo_hw=16,
        )
        photo, labeled = generate_pair(spec)
        sketches.append(labeled.sketch)
        photos.append(photo.pixels)
        ids.append(labeled.pair_id)
    return SketchPairSet(sketches=sketches, photos=np.stack(photos), ids=ids)


def smoke_ppo_config(**kw):
    defaults = dict(
        epochs=2,
        batch_size=3,
        policy_sync_every=2,
        update_sample=8,
        update_minibatch=4,
        update_passes=1,
        episode_len=2,
        seed=1,
    )
    defaults.update(kw)
    return PPOConfig(**defaults)


def test_train_selector_smoke_and_determinism():
    pairs = smoke_pairs()
    net = tiny_embed()
    p1, log1 = train_selector(
        pairs, net, smoke_ppo_config(), RewardConfig(), val=pairs,
        selector_cfg=sel.SelectorConfig(hidden=8, seed=2),
    )
    p2, log2 = train_selector(
        pairs, net, smoke_ppo_config(), RewardConfig(), val=pairs,
        selector_cfg=sel.SelectorConfig(hidden=8, seed=2),
    )
    assert [s.mean_reward for s in log1] == [s.mean_reward for s in log2]
    for name in p1.params:
        assert np.array_equal(p1.params[name].data, p2.params[name].data)
    assert len(log1) == 2
    assert all(np.isfinite(s.mean_reward) for s in log1)


# -- applications -------------------------------------------------------------------


def test_clean_training_data_all_select_identity():
    policy = tiny_selector()
    policy.params["head.b"].data = np.array([30.0, -30.0])
    rng = rng_for(23)
    sketches = [random_sketch(rng, k=3) for _ in range(4)]
    cleaned = clean_training_data(sketches, policy)
    assert cleaned == sketches


def test_clean_training_data_stroke_counts_never_grow():
    policy = tiny_selector(seed=9)
    rng = rng_for(24)
    sketches = [random_sketch(rng, k=int(rng.integers(2, 6))) for _ in range(10)]
    cleaned = clean_training_data(sketches, policy)
    for before, after in zip(sketches, cleaned):
        assert after.stroke_count <= before.stroke_count
        assert set(after.strokes) <= set(before.strokes)


def test_augment_outputs_are_subsets():
    policy = tiny_selector(seed=10)
    sketch = random_sketch(rng_for(25), k=4)
    outs = augment(sketch, policy, 8, rng_for(26))
    assert len(outs) == 8
    for out in outs:
        assert set(out.strokes) <= set(sketch.strokes)


def test_augment_greedy_for_deterministic_policy():
    policy = tiny_selector()
    policy.params["head.b"].data = np.array([30.0, -30.0])
    sketch = random_sketch(rng_for(27), k=3)
    outs = augment(sketch, policy, 1, rng_for(28))
    assert outs[0] == sketch  # deterministic all-select policy -> greedy subset


def test_augment_coverage_uniform_policy():
    # K=3 and a uniform policy: 100 draws should reach >= 6 of the 7 masks
    policy = tiny_selector()
    policy.params["head.w"].data = np.zeros_like(policy.params["head.w"].data)
    policy.params["head.b"].data = np.zeros_like(policy.params["head.b"].data)
    sketch = random_sketch(rng_for(29), k=3)
    outs = augment(sketch, policy, 100, rng_for(30))
    distinct = {tuple(out.strokes) for out in outs}
    assert len(distinct) >= 6


def test_augment_dedupes_until_exhausted():
    policy = tiny_selector()
    policy.params["head.w"].data = np.zeros_like(policy.params["head.w"].data)
    policy.params["head.b"].data = np.zeros_like(policy.params["head.b"].data)
    sketch = random_sketch(rng_for(31), k=2)
    outs = augment(sketch, policy, 3, rng_for(32))
    assert len({tuple(o.strokes) for o in outs}) == 3  # all 2^2-1 masks distinct
    more = augment(sketch, policy, 5, rng_for(33))
    assert len(more) == 5  # repeats allowed once n > 2^K - 1
