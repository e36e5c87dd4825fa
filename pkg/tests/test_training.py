import json

import numpy as np
import pytest
import torch

from kptlm.data import CropTransform, PoseSample
from kptlm.errors import ConfigError, TrainingError
from kptlm.instructions import KeypointSpec, PromptKind, Registry
from kptlm.model import ModelBundle, set_finetune_mode
from kptlm.training import TrainConfig, batch_loss, build_epoch, lr_at, pretrain_stage, train


def _sample(K, image_id=0, size=16, seed=0):
    g = np.random.default_rng(seed)
    kps = np.concatenate([g.uniform(0.05, 0.95, (K, 2)), np.ones((K, 1))], axis=1)
    return PoseSample(image_id, g.random((size, size, 3)).astype(np.float32), "bird", kps,
                      (0.0, 0.0, float(size), float(size)), CropTransform(0, 0, size, size))


def _registry(K):
    return Registry({"bird": [KeypointSpec(f"part {chr(97 + i)}", "", "bird") for i in range(K)]})


def test_epoch_counts(vocab):
    s = _sample(15)
    reg = _registry(15)
    rng = np.random.default_rng(0)
    assert len(build_epoch([s], reg, vocab, "fixed", 5, rng)) == 3
    assert len(build_epoch([s], reg, vocab, "locllm_style", 5, rng)) == 1
    with pytest.raises(ValueError):
        build_epoch([], reg, vocab)


def _covered(examples, vocab, K):
    seen = set()
    for e in examples:
        for i in range(K):
            if f"part {chr(97 + i)}?" in e.convo.text:
                seen.add((e.image_id, i))
    return seen


def test_strategy_coverage(vocab):
    K, k = 9, 4
    samples = [_sample(K, i, seed=i) for i in range(6)]
    reg = _registry(K)
    full = {(i, j) for i in range(6) for j in range(K)}
    for strat in ("fixed", "dynamic"):
        ex = build_epoch(samples, reg, vocab, strat, k, np.random.default_rng(3))
        assert _covered(ex, vocab, K) == full
    ex = build_epoch(samples, reg, vocab, "locllm_style", k, np.random.default_rng(3))
    assert _covered(ex, vocab, K) < full


def test_dynamic_stream_is_seeded(vocab):
    samples = [_sample(9, i, seed=i) for i in range(3)]
    a = build_epoch(samples, _registry(9), vocab, "dynamic", 4, np.random.default_rng(11))
    b = build_epoch(samples, _registry(9), vocab, "dynamic", 4, np.random.default_rng(11))
    assert [e.convo.text for e in a] == [e.convo.text for e in b]


def test_invisible_keypoints_are_not_trained(vocab):
    s = _sample(4)
    s.keypoints[2, 2] = 0
    ex = build_epoch([s], _registry(4), vocab, "fixed", 4, np.random.default_rng(0))
    assert "part c?" not in ex[0].convo.text


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(warmup=1.0)
    with pytest.raises(ConfigError):
        TrainConfig(accumulation=0)
    with pytest.raises(ConfigError):
        TrainConfig(strategy="random")
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"learning_rate": 1})
    assert TrainConfig(accumulation=32, device_count=4).effective_batch == 128


def test_warmup_endpoints():
    cfg = TrainConfig(lr=5e-4, warmup=0.03)
    total = 1000
    assert lr_at(0, total, cfg) == 0.0
    assert abs(lr_at(30, total, cfg) - 5e-4) <= 1e-9
    assert lr_at(15, total, cfg) == pytest.approx(2.5e-4)
    assert lr_at(999, total, cfg) == 5e-4
    cos = TrainConfig(lr=1.0, warmup=0.0, schedule="cosine")
    assert lr_at(0, 10, cos) == 1.0 and lr_at(10, 10, cos) == pytest.approx(0.0)


def test_accumulation_equals_mean_gradient_step(vocab, tiny_cfg):
    # one keypoint, so both micro-batches render the identical conversation
    s = _sample(1)
    reg = _registry(1)
    base = dict(lr=1e-2, epochs=1, warmup=0.0, k=1, grad_clip=0.0)
    a = ModelBundle(tiny_cfg, seed=1)
    b = ModelBundle(tiny_cfg, seed=1)
    train(a, TrainConfig(**base, accumulation=2), [s, s], reg, vocab)
    train(b, TrainConfig(**base, accumulation=1), [s], reg, vocab)
    for (n, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
        torch.testing.assert_close(p, q, rtol=1e-5, atol=1e-6, msg=n)


def test_loss_ignores_non_answer_targets(vocab, tiny_model):
    s = _sample(3)
    ex = build_epoch([s], _registry(3), vocab, "fixed", 3, np.random.default_rng(0))
    with torch.no_grad():
        logits = tiny_model(s.image, ex[0].convo.ids)
    from kptlm.nn import softmax_cross_entropy

    ids = torch.from_numpy(ex[0].convo.ids)
    mask = torch.from_numpy(ex[0].convo.mask).double()
    n = len(ids)
    pred = logits[-n - 1:-1]
    zeroed = torch.where(mask.bool(), ids, torch.zeros_like(ids))
    assert float(softmax_cross_entropy(pred, ids, mask)) == float(softmax_cross_entropy(pred, zeroed, mask))
    with torch.no_grad():
        loss = batch_loss(tiny_model, ex)
    assert float(loss) == pytest.approx(float(softmax_cross_entropy(pred, ids, mask)), rel=1e-6)


def test_training_is_deterministic_and_checkpoints(tmp_path, vocab, tiny_cfg):
    samples = [_sample(5, i, seed=i) for i in range(3)]
    cfg = TrainConfig(lr=1e-3, epochs=2, accumulation=2, k=2, seed=4)
    for run in ("a", "b"):
        train(ModelBundle(tiny_cfg, seed=0), cfg, samples, _registry(5), vocab, tmp_path / run)
    for name in ("epoch_000.ckpt", "epoch_001.ckpt", "train_log.jsonl"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    rows = [json.loads(x) for x in (tmp_path / "a" / "train_log.jsonl").read_text().splitlines()]
    assert set(rows[0]) == {"step", "epoch", "lr", "loss"}
    assert rows[0]["lr"] == 0.0


def test_non_finite_loss_aborts_with_provenance(vocab, tiny_model):
    with torch.no_grad():
        tiny_model.logit.fill_(float("nan"))
    with pytest.raises(TrainingError, match="images"):
        train(tiny_model, TrainConfig(epochs=1, accumulation=1), [_sample(2, 42)], _registry(2), vocab)


def test_pretrain_updates_only_projection(vocab, tiny_model):
    before = {n: p.detach().clone() for n, p in tiny_model.named_parameters()}
    cfg = TrainConfig(lr=1e-2, epochs=1, accumulation=1, warmup=0.0)
    samples = [_sample(3, i, seed=i) for i in range(2)]
    pretrain_stage(tiny_model, cfg, samples, _registry(3), vocab, PromptKind.DIRECT_QA_PRETRAIN)
    for n, p in tiny_model.named_parameters():
        if n == "proj":
            assert not torch.equal(p, before[n])
        else:
            assert torch.equal(p, before[n]), n
    assert tiny_model.cfg.finetune_mode == "full"
    ex = build_epoch(samples, _registry(3), vocab, "fixed", 3, np.random.default_rng(0),
                     style=cfg.style.__class__(kind="direct_qa_pretrain"))
    answers = {vocab.decode(ex[0].convo.ids[a:b]) for a, b in ex[0].convo.spans}
    assert answers <= {"part a", "part b", "part c"}
    train(tiny_model, cfg, samples, _registry(3), vocab)


def test_no_trainable_parameters(vocab, tiny_model):
    for p in tiny_model.parameters():
        p.requires_grad_(False)
    with pytest.raises(ConfigError):
        train(tiny_model, TrainConfig(epochs=1), [_sample(2)], _registry(2), vocab)
    set_finetune_mode(tiny_model, "frozen")
