import math

import pytest
import torch

import src.core.trainer as trainer
from src.core.errors import ContractError, TrainingDivergedError
from src.core.events import Event, PresentMask, Response, TaskKind
from src.core.sequence_codec import build_sequence
from src.core.tokenizers import TaskTag
from src.core.toy_net import PARAMETER_GROUPS, ToyNet, collate
from src.core.trainer import (
    build_layouts,
    grad_check,
    load_checkpoint,
    loss,
    predict,
    save_checkpoint,
    train,
)
from tests.conftest import make_sample, random_response


def _model(d_model=8, n_layers=1):
    torch.manual_seed(0)
    return ToyNet(feature_dim=3, d_model=d_model, n_layers=n_layers, n_heads=2, slots_per_frame=2, max_length=256)


def _items(samples, append_stop=False):
    return [(build_sequence(s, s.gold, slots_per_frame=2, append_stop=append_stop), s) for s in samples]


def _vhd_samples(rng, count):
    samples = []
    for i in range(count):
        answer = random_response(rng, task_kind=TaskKind.VHD, max_events=3, duration=60.0)
        samples.append(make_sample(duration=60.0, events=list(answer.events), task_kind=TaskKind.VHD, seed=i))
    return samples


def _zero_heads(model):
    with torch.no_grad():
        for head in (model.head_time, model.head_score, model.head_text):
            head.weight.zero_()
            head.bias.zero_()


def test_uniform_heads_give_log_vocab_loss(rng):
    model = _model()
    _zero_heads(model)
    breakdown = loss(model, collate(_items(_vhd_samples(rng, 2))))
    means = breakdown.head_means()
    assert means["time"] == pytest.approx(math.log(13), rel=1e-5)
    assert means["score"] == pytest.approx(math.log(13), rel=1e-5)
    assert means["text"] == pytest.approx(math.log(258), rel=1e-5)


def test_total_is_position_weighted_head_sum(rng):
    breakdown = loss(_model(), collate(_items(_vhd_samples(rng, 3), append_stop=True)))
    summed = sum(breakdown.head_sums[h] for h in (TaskTag.TIME, TaskTag.SCORE, TaskTag.TEXT))
    assert breakdown.total.item() == pytest.approx(summed.item() / breakdown.count, rel=1e-6)
    expected = sum(sum(layout.loss_mask) for layout in breakdown.layouts)
    assert breakdown.count == expected


def test_answer_nll_equals_sum_of_event_factors(rng):
    model = _model().double()
    for _ in range(100):
        items = _items(_vhd_samples(rng, 2))
        breakdown = loss(model, collate(items, dtype=torch.float64))
        for row, factors in enumerate(breakdown.event_factors()):
            whole = breakdown.token_nll[row].sum().item()
            assert sum(sum(f) for f in factors) == pytest.approx(whole, rel=1e-6)
            assert len(factors) == len(items[row][1].gold)


def test_loss_needs_scored_positions():
    sample = make_sample()
    layout = build_sequence(sample, sample.gold, slots_per_frame=2)
    unscored = layout.model_copy(update={"loss_mask": (False,) * len(layout)})
    with pytest.raises(ContractError):
        loss(_model(), collate([(unscored, sample)]))


def test_grad_check_small_model(rng):
    batch = collate(_items(_vhd_samples(rng, 2)))
    report = grad_check(_model(), batch, epsilon=1e-5, samples_per_group=40)
    assert set(report.groups) == set(PARAMETER_GROUPS)
    assert all(group.checked > 0 for group in report.groups.values())
    assert report.max_rel_error < 1e-4


def test_grad_check_leaves_model_untouched(rng):
    model = _model()
    before = {k: v.clone() for k, v in model.state_dict().items()}
    grad_check(model, collate(_items(_vhd_samples(rng, 1))), samples_per_group=5)
    for key, value in model.state_dict().items():
        assert torch.equal(value, before[key])
        assert value.dtype == torch.float32


def test_zero_loss_region_has_vanishing_gradient():
    empty = Event(present_mask=PresentMask(has_time=False, has_score=False, has_text=False))
    sample = make_sample(events=[])
    items = [(build_sequence(sample, Response(events=(empty,)), slots_per_frame=2), sample)]
    model = _model()
    _zero_heads(model)
    with torch.no_grad():
        model.head_time.bias[12] = 60.0
        model.head_score.bias[12] = 60.0
        model.head_text.bias[256] = 60.0
    report = grad_check(model, collate(items), samples_per_group=10)
    assert report.grad_norm < 1e-6


def test_checkpoint_round_trip(tmp_path, tiny_config, rng):
    model = ToyNet.from_config(tiny_config)
    path = save_checkpoint(tmp_path / "model.pt", model, tiny_config)
    loaded, config = load_checkpoint(path)
    assert config == tiny_config
    batch = collate(_items(_vhd_samples(rng, 1)))
    assert torch.equal(model.eval()(batch), loaded(batch))

    payload = torch.load(path, weights_only=True)
    assert payload["format_version"] == 1
    assert set(payload["groups"]) == set(PARAMETER_GROUPS)


def test_checkpoint_version_is_checked(tmp_path, tiny_config):
    path = save_checkpoint(tmp_path / "model.pt", ToyNet.from_config(tiny_config), tiny_config)
    payload = torch.load(path, weights_only=True)
    payload["format_version"] = 99
    torch.save(payload, path)
    with pytest.raises(ContractError, match="format version"):
        load_checkpoint(path)


def test_training_is_deterministic(tiny_config):
    config = tiny_config.model_copy(update={"train_epochs": 2, "batch_size": 2})
    samples = [make_sample(seed=i) for i in range(3)]
    a = train(config, samples, show_progress=False)
    b = train(config, samples, show_progress=False)
    assert a.loss_curve() == b.loss_curve()
    for key, value in a.model.state_dict().items():
        assert torch.equal(value, b.model.state_dict()[key])


def test_history_records_every_epoch(tiny_config):
    config = tiny_config.model_copy(update={"train_epochs": 3})
    result = train(config, [make_sample()], show_progress=False)
    assert [r.epoch for r in result.history] == [1, 2, 3]
    assert set(result.history[0].head_losses) == {"time", "score", "text"}
    assert result.final_loss == result.history[-1].loss


def test_divergence_is_reported(tiny_config, monkeypatch):
    real_loss = trainer.loss

    def poisoned(model, batch):
        breakdown = real_loss(model, batch)
        breakdown.total = breakdown.total * float("nan")
        return breakdown

    monkeypatch.setattr(trainer, "loss", poisoned)
    with pytest.raises(TrainingDivergedError) as info:
        train(tiny_config, [make_sample()], show_progress=False)
    assert info.value.diagnostics["epoch"] == 1
    assert info.value.diagnostics["step"] == 0


def test_overlong_sequence_is_rejected(tiny_config):
    config = tiny_config.model_copy(update={"model_max_length": 20})
    with pytest.raises(ContractError, match="model_max_length"):
        build_layouts([make_sample()], config)


def test_empty_training_set(tiny_config):
    with pytest.raises(ContractError):
        train(tiny_config, [], show_progress=False)


@pytest.mark.slow
def test_overfit_one_sample_and_regenerate(smoke_config):
    config = smoke_config.model_copy(update={"train_epochs": 300, "batch_size": 1})
    sample = make_sample(num_frames=8, duration=40.0, patch_count=2, feature_dim=8, events=[
        Event.for_task(TaskKind.DVC, caption="wash", start=5.0, end=15.0),
    ])
    result = train(config, [sample], show_progress=False)
    assert result.final_loss < 0.01
    generated = predict(result.model, sample, config)
    assert generated.response == sample.gold


@pytest.mark.slow
def test_grad_check_acceptance_model(rng):
    batch = collate(_items(_vhd_samples(rng, 2)))
    report = grad_check(_model(d_model=32, n_layers=2), batch, epsilon=1e-5, samples_per_group=200)
    assert all(group.checked == 200 for group in report.groups.values())
    assert report.max_rel_error < 1e-4
