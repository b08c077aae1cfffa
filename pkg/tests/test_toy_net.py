import pytest
import torch

from src.core.errors import ContractError
from src.core.events import Event, TaskKind
from src.core.sequence_codec import build_sequence
from src.core.tokenizers import TEXT_VOCAB, TIME_VOCAB, TaskTag
from src.core.toy_net import (
    OUTPUT_WIDTH,
    PARAMETER_GROUPS,
    TAG_CODES,
    FrameCompressor,
    ToyNet,
    ToyNetScorer,
    collate,
    collate_tokens,
    parameter_groups,
)
from tests.conftest import make_sample


def _model(**kwargs):
    torch.manual_seed(0)
    params = dict(feature_dim=3, d_model=16, n_layers=2, n_heads=2, slots_per_frame=2, max_length=128)
    params.update(kwargs)
    return ToyNet(**params).eval()


def _batch(samples=None, dtype=torch.float32):
    if samples is None:
        samples = [
            make_sample(seed=0, task_kind=TaskKind.VHD),
            make_sample(seed=1, task_kind=TaskKind.VHD, events=[
                Event.for_task(TaskKind.VHD, caption="pour", start=2.0, end=6.0, score=4.2),
            ]),
        ]
    items = [(build_sequence(s, s.gold, slots_per_frame=2), s) for s in samples]
    return collate(items, dtype=dtype)


def test_compressor_shape():
    compressor = FrameCompressor(feature_dim=32, d_model=24, slots=8)
    assert compressor(torch.randn(4, 16, 32)).shape == (4, 8, 24)
    assert compressor(torch.randn(2, 4, 16, 32)).shape == (2, 4, 8, 24)


def test_compressor_zero_features_give_zero_slots():
    compressor = FrameCompressor(feature_dim=5, d_model=8, slots=8)
    out = compressor(torch.zeros(3, 4, 5))
    assert torch.equal(out, torch.zeros(3, 8, 8))


def test_compressor_shape_mismatch():
    compressor = FrameCompressor(feature_dim=5, d_model=8, slots=8)
    with pytest.raises(ContractError):
        compressor(torch.zeros(3, 4, 6))


def test_forward_rows_are_normalized():
    batch = _batch()
    out = _model()(batch)
    assert out.shape == (2, batch.token_ids.shape[1], OUTPUT_WIDTH)
    for head, size in ((TaskTag.TIME, 13), (TaskTag.SCORE, 13), (TaskTag.TEXT, 258)):
        rows = out[batch.head_codes == TAG_CODES[head]]
        assert rows.shape[0] > 0
        assert torch.isfinite(rows[:, :size]).all()
        assert torch.allclose(torch.logsumexp(rows[:, :size], dim=-1), torch.zeros(rows.shape[0]), atol=1e-5)
        if size < OUTPUT_WIDTH:
            assert torch.isinf(rows[:, size:]).all()


def test_rows_without_head_are_zero():
    batch = _batch()
    out = _model()(batch)
    assert torch.equal(out[batch.head_codes == -1], torch.zeros_like(out[batch.head_codes == -1]))


def test_batch_permutation_equivariance():
    samples = [make_sample(seed=0), make_sample(seed=1)]
    model = _model()
    out = model(_batch(samples))
    swapped = model(_batch(samples[::-1]))
    assert torch.allclose(out, swapped.flip(0), atol=1e-6)


def test_causality():
    sample = make_sample()
    layout = build_sequence(sample, sample.gold, slots_per_frame=2)
    batch = collate([(layout, sample)])
    model = _model()
    base = model(batch)

    p = layout.prompt_length + 3
    perturbed = collate([(layout, sample)])
    perturbed.token_ids[0, p] = (perturbed.token_ids[0, p] + 1) % 10
    out = model(perturbed)
    assert torch.allclose(out[:, :p], base[:, :p], atol=1e-6)
    assert not torch.allclose(out[:, p:], base[:, p:])


def test_zeroing_score_head_only_touches_score_rows():
    batch = _batch()
    model = _model()
    base = model(batch)
    with torch.no_grad():
        model.head_score.weight.zero_()
        model.head_score.bias.zero_()
    out = model(batch)
    score_rows = batch.head_codes == TAG_CODES[TaskTag.SCORE]
    assert torch.equal(out[~score_rows], base[~score_rows])
    assert not torch.allclose(out[score_rows], base[score_rows])


def test_embedding_tables_are_separate():
    batch = _batch()
    model = _model()
    base = model.embed(batch)
    with torch.no_grad():
        model.embed_text.weight.add_(1.0)
    out = model.embed(batch)
    text = batch.tag_codes == TAG_CODES[TaskTag.TEXT]
    assert torch.equal(out[~text], base[~text])
    assert not torch.allclose(out[text], base[text])


def test_digit_rows_start_from_text_rows():
    model = _model()
    for symbol in "0123456789.":
        assert torch.equal(model.embed_time.weight[TIME_VOCAB.id_of(symbol)], model.embed_text.weight[ord(symbol)])


def test_frame_times_reach_the_logits():
    sample = make_sample(duration=20.0)
    shifted = sample.model_copy(update={"frame_times": tuple(t + 5.0 for t in sample.frame_times)})
    model = _model()
    a = model(_batch([sample]))
    b = model(_batch([shifted]))
    assert not torch.allclose(a, b)


def test_visual_index_out_of_range():
    sample = make_sample()
    layout = build_sequence(sample, sample.gold, slots_per_frame=4)
    batch = collate([(layout, sample)])
    with pytest.raises(ContractError):
        _model(slots_per_frame=2)(batch)


def test_sequence_longer_than_max_length():
    with pytest.raises(ContractError):
        _model(max_length=16)(_batch())


def test_collate_rejects_empty_batch():
    with pytest.raises(ContractError):
        collate_tokens([], [])


def test_parameter_groups_cover_every_parameter():
    model = _model()
    groups = parameter_groups(model)
    assert set(groups) == set(PARAMETER_GROUPS)
    assert all(groups[name] for name in groups)
    grouped = sum(len(named) for named in groups.values())
    assert grouped == len(list(model.parameters()))


def test_scorer_returns_head_sized_logits():
    sample = make_sample()
    layout = build_sequence(sample, sample.gold, slots_per_frame=2)
    scorer = ToyNetScorer(_model(), sample)
    logits = scorer.next_token_logits(layout.prompt, TaskTag.TIME)
    assert logits.shape == (13,)
    logits = scorer.next_token_logits(layout.prompt, TaskTag.TEXT)
    assert logits.shape == (len(TEXT_VOCAB),)
