import csv

import numpy as np
import pytest

from arflow.checkpoint import payload_digest, save_bundle
from arflow.config import GRPOConfig
from arflow.errors import RatioError
from arflow.grammar import parse_prompt
from arflow.optim import Adam
from arflow.rl import (
    REWARD_COLUMNS,
    REWARDS_FILE,
    PolicyHandles,
    clipped_surrogate,
    compute_advantages,
    flow_grpo_step,
    flow_rollout,
    grpo_step,
    rollout,
    run_grpo,
    sample_prompts,
)
from arflow.tensor import Tensor, backward


@pytest.fixture
def config(tmp_path):
    return GRPOConfig(
        out_dir=str(tmp_path / "rl"),
        group_size=4,
        iterations=1,
        prompts_per_iter=2,
        ode_steps=2,
        sde_steps=3,
        lr=1e-2,
    )


@pytest.fixture
def prompt():
    return parse_prompt("a red circle")


def handles_and_optimizer(bundle, config, flow=False):
    handles = PolicyHandles.create(bundle, flow=flow)
    prefix = "dit." if flow else "ar."
    return handles, Adam(handles.policy.parameters(prefix), lr=config.lr)


def snapshot(model):
    return {k: v.copy() for k, v in model.state_dict().items()}


def unchanged(model, before):
    return all(np.array_equal(v, before[k]) for k, v in model.state_dict().items())


@pytest.mark.parametrize(
    "rewards, expected",
    [
        ([1, 0, 1, 0], [1, -1, 1, -1]),
        ([0.5, 0.5, 0.5], [0, 0, 0]),
        ([2, 0], [1, -1]),
    ],
)
def test_compute_advantages(rewards, expected):
    np.testing.assert_allclose(compute_advantages(rewards), expected)


def test_surrogate_without_change():
    objective, clip_fraction, ratios = clipped_surrogate(Tensor(np.zeros((2, 3))), np.array([1.0, -1.0]), 0.2)
    assert objective.item() == 0.0
    assert clip_fraction == 0.0
    np.testing.assert_array_equal(ratios, np.ones((2, 3)))


@pytest.mark.parametrize(
    "ratio, advantage, expected, clipped",
    [
        (1.5, 1.0, 1.2, True),
        (1.5, -1.0, -1.5, False),
        (0.5, -1.0, -0.8, True),
        (0.5, 1.0, 0.5, False),
        (1.1, 1.0, 1.1, False),
    ],
)
def test_surrogate_clipping(ratio, advantage, expected, clipped):
    log_ratio = Tensor(np.full((1, 4), np.log(ratio)), requires_grad=True)
    objective, clip_fraction, _ = clipped_surrogate(log_ratio, np.array([advantage]), 0.2)
    assert objective.item() == pytest.approx(expected, rel=1e-5)
    assert clip_fraction == (1.0 if abs(ratio - 1) > 0.2 else 0.0)

    backward(objective)
    assert (log_ratio.grad == 0).all() == clipped


def test_sequence_level_ratio():
    log_ratio = Tensor(np.full((1, 4), np.log(1.05)))
    objective, clip_fraction, ratios = clipped_surrogate(log_ratio, np.array([1.0]), 0.2, sequence=True)
    # 1.05^4 > 1.2 : the sequence ratio is clipped while each token ratio isn't
    assert ratios.shape == (1,)
    assert objective.item() == pytest.approx(1.2, rel=1e-5)
    assert clip_fraction == 1.0


def test_nan_ratio():
    _, clip_fraction, ratios = clipped_surrogate(Tensor(np.array([[0.0, np.nan]])), np.array([1.0]), 0.2)
    assert np.isnan(ratios).any() and np.isnan(clip_fraction)


def test_policy_handles(bundle):
    handles = PolicyHandles.create(bundle)
    assert handles.policy is bundle.ar
    assert all(p.requires_grad for p in bundle.ar.parameters().values())
    assert not any(p.requires_grad for p in bundle.dit.parameters().values())
    assert not any(p.requires_grad for p in handles.old.parameters().values())

    flow = PolicyHandles.create(bundle, flow=True)
    assert flow.policy is bundle.dit
    assert not any(p.requires_grad for p in bundle.ar.parameters().values())


def test_rollout(bundle, config, prompt):
    handles, _ = handles_and_optimizer(bundle, config)
    group = rollout(prompt, handles, config, seed=5)
    assert group.ids.shape[0] == config.group_size
    assert group.tokens.shape == (config.group_size, 64)
    assert group.old_logprobs.shape == (config.group_size, 64)
    assert group.images.shape == (config.group_size, 32, 32, 3)
    assert ((group.rewards >= 0) & (group.rewards <= 1)).all()

    again = rollout(prompt, handles, config, seed=5)
    np.testing.assert_array_equal(group.tokens, again.tokens)
    np.testing.assert_array_equal(group.rewards, again.rewards)


def test_rollout_dumps_images(bundle, config, prompt, tmp_path):
    config = config.model_copy(update={"dump": str(tmp_path / "dump")})
    handles, _ = handles_and_optimizer(bundle, config)
    rollout(prompt, handles, config, seed=0, dump_name="iter0000_p00")
    assert sorted(p.name for p in (tmp_path / "dump").iterdir()) == [f"iter0000_p00_g{i}.ppm" for i in range(4)]


def test_ratio_is_one_after_refresh(bundle, config, prompt):
    handles, optimizer = handles_and_optimizer(bundle, config)
    handles.refresh()
    group = rollout(prompt, handles, config, seed=1)
    group.advantages = np.array([1.0, -1.0, 1.0, -1.0])

    metrics = grpo_step([group], handles, optimizer, config)
    assert metrics["clip_fraction"] == 0.0
    assert metrics["kl"] == 0.0
    # With ratios of 1 the surrogate is the mean advantage
    assert metrics["objective"] == pytest.approx(0.0, abs=1e-7)


def test_grpo_updates_only_the_policy(bundle, config, prompt):
    handles, optimizer = handles_and_optimizer(bundle, config)
    ar, dit = snapshot(bundle.ar), snapshot(bundle.dit)
    group = rollout(prompt, handles, config, seed=1)
    group.advantages = np.array([1.0, -1.0, 1.0, -1.0])

    grpo_step([group], handles, optimizer, config)
    assert not unchanged(bundle.ar, ar)
    assert unchanged(bundle.dit, dit)


def test_degenerate_groups_apply_no_update(bundle, config, prompt):
    handles, optimizer = handles_and_optimizer(bundle, config)
    before = snapshot(bundle.ar)
    group = rollout(prompt, handles, config, seed=1)
    group.advantages = np.zeros(config.group_size)
    assert group.degenerate

    grpo_step([group], handles, optimizer, config)
    assert unchanged(bundle.ar, before)


def test_nan_ratio_raises(bundle, config, prompt):
    handles, optimizer = handles_and_optimizer(bundle, config)
    group = rollout(prompt, handles, config, seed=1)
    group.old_logprobs[2, 7] = np.nan
    with pytest.raises(RatioError, match="trajectories=\\[2\\]"):
        grpo_step([group], handles, optimizer, config)


def test_flow_rollout(bundle, config, prompt):
    handles, _ = handles_and_optimizer(bundle, config, flow=True)
    group = flow_rollout(prompt, handles, config, seed=2)
    # One deterministic warmup step, then the stochastic transitions
    assert group.old_logprobs.shape == (config.group_size, config.sde_steps - config.warmup_steps)
    assert group.trajectory.latent.shape == (config.group_size, 8, 8, 4)
    # The tokens are shared, only the SDE noise differs
    assert (group.tokens == group.tokens[0]).all()
    assert not np.array_equal(group.trajectory.latent[0], group.trajectory.latent[1])


def test_flow_ratio_is_one_after_refresh(bundle, config, prompt):
    handles, optimizer = handles_and_optimizer(bundle, config, flow=True)
    ar, dit = snapshot(bundle.ar), snapshot(bundle.dit)
    group = flow_rollout(prompt, handles, config, seed=2)
    group.advantages = np.array([1.0, -1.0, 1.0, -1.0])

    metrics = flow_grpo_step([group], handles, optimizer, config)
    assert metrics["clip_fraction"] == 0.0
    assert metrics["kl"] == 0.0
    assert unchanged(bundle.ar, ar)
    assert not unchanged(bundle.dit, dit)


def test_sample_prompts(config):
    a = sample_prompts(config, 0)
    assert len(a) == config.prompts_per_iter
    assert [p.text for p in a] == [p.text for p in sample_prompts(config, 0)]

    glyphs = config.model_copy(update={"reward": "glyph"})
    assert all(p.category == "text" for p in sample_prompts(glyphs, 3))


@pytest.mark.parametrize("flow", [False, True])
def test_run_grpo(bundle, config, tmp_path, flow):
    start = save_bundle(bundle, tmp_path / "start")
    config = config.model_copy(update={"flow_grpo": flow, "iterations": 2})
    path, curve = run_grpo(config, str(start))

    with open(curve) as f:
        rows = list(csv.DictReader(f))
    assert curve.name == REWARDS_FILE
    assert tuple(rows[0]) == REWARD_COLUMNS
    assert [int(r["iter"]) for r in rows] == [0, 1]

    frozen = ["ar."] if flow else ["dit."]
    assert payload_digest(path, frozen) == payload_digest(start, frozen)
    assert payload_digest(path, ["codebook.", "vae."]) == payload_digest(start, ["codebook.", "vae."])


def test_run_grpo_does_not_depend_on_threads(bundle, config, tmp_path):
    start = save_bundle(bundle, tmp_path / "start")
    curves = []
    for threads in (1, 2):
        run_config = config.model_copy(update={"threads": threads, "out_dir": str(tmp_path / f"t{threads}")})
        _, curve = run_grpo(run_config, str(start))
        curves.append(curve.read_text())
    assert curves[0] == curves[1]
