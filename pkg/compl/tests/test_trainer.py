import io

import pytest
import numpy as np

import compl.trainer as trainer
from compl.config import make_train_config
from compl.trainer import (DivergenceError, MissingHeadError, Streams,
                           Sampler, Trainer, build_joint_batch, evaluate,
                           make_datasets, plan_phases, run_training)


def _config(**kwargs):
    values = dict(image_size=16,
                  crop_size=8,
                  crop_offset=2,
                  grid=2,
                  train_size=8,
                  val_size=4,
                  max_iters=3,
                  batch_target=2,
                  eval_every=3,
                  seed=3)
    values.update(kwargs)
    return make_train_config(values)


@pytest.fixture
def joint_config():
    return _config(mode="joint", aux="moco")


@pytest.mark.parametrize("mode,aux,phases", [
    ("baseline", "none", [("target", True, False)]),
    ("joint", "none", [("target", True, False)]),
    ("joint", "rot", [("joint", True, True)]),
    ("pretrain_finetune", "moco", [("pretrain", False, True),
                                   ("finetune", True, False)]),
    ("pretrain_joint", "densecl", [("pretrain", False, True),
                                   ("joint", True, True)]),
])
def test_plan_phases(mode, aux, phases):
    planned = plan_phases(_config(mode=mode, aux=aux))
    assert [(p.name, p.target, p.aux) for p in planned] == phases
    assert all(p.iters == 3 for p in planned)


def test_sampler_permutes_each_epoch():
    sampler = Sampler(np.arange(5), np.random.default_rng(0))
    first = sampler.draw(5)
    assert sorted(first) == list(range(5))
    assert sorted(sampler.draw(5)) == list(range(5))
    assert sampler.epoch == 2


def test_sampler_state_round_trip():
    sampler = Sampler(np.arange(7), np.random.default_rng(1))
    sampler.draw(3)
    clone = Sampler(np.arange(7), np.random.default_rng(99))
    clone.load_state_dict(sampler.state_dict())
    np.testing.assert_array_equal(clone.draw(10), sampler.draw(10))


def test_sampler_rejects_empty_pool():
    with pytest.raises(ValueError):
        Sampler(np.arange(0), np.random.default_rng(0))


def test_joint_batch_draws_from_both_pools():
    config = _config(mode="joint", aux="moco", labeled_fraction=0.25)
    data = make_datasets(config)
    _, method = trainer.build_model(config)
    streams = Streams(config.seed, data.labeled, np.arange(len(data.train)))
    target, aux = build_joint_batch(data.train, streams, (2, 2), ("depth", ),
                                    method)
    assert set(target.ids) <= set(data.labeled)
    assert target.images.shape == (2, 3, 16, 16)
    assert target.labels["depth"].shape == (2, 16, 16)
    assert aux.inputs.shape == aux.key_inputs.shape == (2, 3, 8, 8)


def test_target_stream_ignores_auxiliary_batches(joint_config):
    data = make_datasets(joint_config)
    _, method = trainer.build_model(joint_config)
    pool = np.arange(len(data.train))
    with_aux = Streams(3, data.labeled, pool)
    without = Streams(3, data.labeled, pool)
    for _ in range(3):
        a, _ = build_joint_batch(data.train, with_aux, (2, 2), ("depth", ),
                                 method)
        b, aux = build_joint_batch(data.train, without, (2, 0), ("depth", ),
                                   method)
        assert aux is None
        np.testing.assert_array_equal(a.ids, b.ids)
        np.testing.assert_array_equal(a.images, b.images)


def test_step_loss_is_target_plus_weighted_aux(joint_config):
    history = run_training(joint_config).history
    assert len(history.rows) == 3
    assert all(r.lam == 0.2 for r in history.rows)
    np.testing.assert_array_equal(history.loss_residuals(), 0.0)


def test_joint_without_aux_is_the_baseline():
    data = make_datasets(_config())
    base = run_training(_config(mode="baseline"), data)
    joint = run_training(_config(mode="joint", aux="none"), data)
    assert base.model.params.bitwise_equal(joint.model.params)
    assert base.history.rows == joint.history.rows
    assert all(r.loss_aux == 0.0 and r.lam == 0.0 for r in joint.history.rows)


def test_zero_lambda_leaves_target_training_unchanged():
    data = make_datasets(_config())
    base = run_training(_config(mode="baseline"), data)
    joint = run_training(_config(mode="joint", aux="rot", lam=0.0), data)
    for prefix in ("trunk", "target"):
        assert base.model.params.partition(prefix).bitwise_equal(
            joint.model.params.partition(prefix))


def test_pretrain_then_finetune():
    history = run_training(_config(mode="pretrain_finetune",
                                   aux="rot")).history
    pretrain, finetune = history.rows[:3], history.rows[3:]
    assert [r.phase for r in pretrain] == ["pretrain"] * 3
    assert [r.phase for r in finetune] == ["finetune"] * 3
    assert all(r.lam == 1.0 and r.loss_target == 0.0 for r in pretrain)
    assert all(r.lam == 0.0 and r.loss_aux == 0.0 for r in finetune)
    assert [r.iter for r in history.rows] == [0, 1, 2, 0, 1, 2]
    assert [e.phase for e in history.evals] == ["finetune"]


def test_learning_rate_follows_poly_schedule():
    rows = run_training(_config(base_lr=0.1, poly_power=1.0)).history.rows
    assert [r.lr for r in rows] == pytest.approx([0.1, 0.1 * 2 / 3, 0.1 / 3])


def test_queue_fills_one_batch_per_step(joint_config):
    run = Trainer(joint_config)
    for k in range(1, 4):
        run.step()
        assert len(run.method.queue) == min(2 * k, joint_config.train_size)
    assert set(run.method.queue.stored_ids()) <= set(range(8))


def test_momentum_encoder_is_not_optimized(joint_config):
    run = Trainer(joint_config)
    key_before = run.method.key_params.copy()
    run.step()
    name = "trunk.enc1.conv.weight"
    query = run.model.params[name]
    m = joint_config.moco_m
    np.testing.assert_allclose(run.method.key_params[name],
                               m * key_before[name] + (1 - m) * query)
    assert not any(k.startswith("momentum") for k in run.model.params)


def test_training_is_deterministic(joint_config):
    first, second = io.StringIO(), io.StringIO()
    run_training(joint_config).history.write_csv(first)
    run_training(joint_config).history.write_csv(second)
    assert first.getvalue() == second.getvalue()


def test_history_csv_layout(joint_config):
    out = io.StringIO()
    run_training(joint_config).history.write_csv(out)
    lines = out.getvalue().splitlines()
    assert lines[0].startswith("kind,phase,iter,lr,lambda")
    assert [line.split(",")[0] for line in lines[1:]] == ["step"] * 3 + [
        "eval"
    ]


def test_resume_reproduces_uninterrupted_run(tmp_path):
    config = _config(mode="pretrain_joint", aux="moco", max_iters=2)
    data = make_datasets(config)
    full = Trainer(config, data).run()

    partial = Trainer(config, data).run(steps=3)
    partial.save(tmp_path / "ckpt.npz")
    resumed = Trainer.restore(tmp_path / "ckpt.npz", data).run()

    assert resumed.history.rows == full.history.rows[3:]
    assert resumed.model.params.bitwise_equal(full.model.params)
    assert resumed.method.key_params.bitwise_equal(full.method.key_params)
    np.testing.assert_array_equal(resumed.method.queue.contents(),
                                  full.method.queue.contents())


def test_evaluation_ignores_auxiliary_head(joint_config):
    result = run_training(joint_config)
    data = make_datasets(joint_config)
    with_aux = evaluate(result.model, data.val, "depth")
    without = evaluate(result.model.without_aux(), data.val, "depth")
    assert with_aux.value == without.value
    assert with_aux.name == "rmse"


def test_evaluating_missing_head(joint_config):
    model, _ = trainer.build_model(joint_config)
    data = make_datasets(joint_config)
    with pytest.raises(MissingHeadError):
        evaluate(model, data.val, "semseg")


def test_multitask_sums_task_losses():
    config = _config(mode="multitask", target_tasks=["depth", "semseg"])
    result = run_training(config)
    assert {e.task for e in result.history.evals} == {"depth", "semseg"}
    assert all(r.loss_target > 0 for r in result.history.rows)


def test_non_finite_loss_raises_divergence(monkeypatch):
    monkeypatch.setattr(trainer, "target_loss",
                        lambda task, out, labels: (out * 0.0).mean().log())
    with pytest.raises(DivergenceError):
        run_training(_config())


def test_shifted_split_uses_other_domain():
    data = make_datasets(_config(), shifted=True)
    assert data.shifted.params.palette_shift > data.val.params.palette_shift
    assert len(data.shifted) == len(data.val)


@pytest.mark.slow
def test_baseline_learns_depth():
    config = _config(max_iters=150, eval_every=50, base_lr=0.02)
    evals = run_training(config).history.evals
    assert evals[-1].value < evals[0].value


def _final_train_metric(result, config, task):
    data = make_datasets(config)
    return evaluate(result.model, data.train, task, config.num_classes).value


@pytest.mark.slow
def test_baseline_depth_rmse_halves():
    config = make_train_config({"max_iters": 500, "seed": 1})
    data = make_datasets(config)
    model, _ = trainer.build_model(config)
    initial = evaluate(model, data.train, "depth").value
    result = run_training(config, data)
    assert _final_train_metric(result, config, "depth") < 0.5 * initial


@pytest.mark.slow
@pytest.mark.parametrize("task,threshold", [("semseg", 0.6),
                                            ("boundary", 0.5)])
def test_baseline_fits_training_split(task, threshold):
    config = make_train_config({
        "max_iters": 500,
        "seed": 1,
        "target_tasks": [task]
    })
    result = run_training(config)
    assert _final_train_metric(result, config, task) > threshold


@pytest.mark.slow
@pytest.mark.parametrize("task", ["depth", "semseg"])
def test_baseline_is_worse_on_shifted_domain(task):
    config = make_train_config({
        "max_iters": 300,
        "seed": 1,
        "target_tasks": [task]
    })
    data = make_datasets(config, shifted=True)
    result = run_training(config, data)
    in_domain = evaluate(result.model, data.val, task).value
    shifted = evaluate(result.model, data.shifted, task).value
    if task == "depth":
        assert shifted > in_domain
    else:
        assert shifted < in_domain


@pytest.mark.slow
def test_queue_replays_auxiliary_draws_in_fifo_order():
    config = _config(mode="joint",
                     aux="moco",
                     train_size=16,
                     max_iters=100,
                     eval_every=100,
                     seed=1)
    run = Trainer(config)
    replay = Streams(config.seed, run.data.labeled,
                     np.arange(config.train_size)).aux
    pushed = []
    per_epoch = config.train_size // config.batch_aux
    for step in range(1, config.max_iters + 1):
        run.step()
        pushed.extend(replay.draw(config.batch_aux))
        queue = run.method.queue
        assert queue.capacity == config.train_size
        np.testing.assert_array_equal(queue.stored_ids(),
                                      pushed[-config.train_size:])
        if step % per_epoch == 0:
            assert sorted(queue.stored_ids()) == list(range(16))
    assert not any(k.startswith("momentum") for k in run.model.params)
