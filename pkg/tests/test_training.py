import math
import warnings

import numpy as np
import pytest
import torch

from cmim.data import SyntheticConfig, generate_synthetic_classification, generate_synthetic_segmentation, make_batches, split_dataset
from cmim.encoders import ClassificationNet, SegmentationNet
from cmim.losses import LossWeights, model_losses
from cmim.mi_estimators import make_marginal_pairing
from cmim.training import (
    CheckpointError,
    NumericalError,
    TrainConfig,
    config_fingerprint,
    load_checkpoint,
    save_checkpoint,
    train,
    write_history_csv,
)

TASK_ONLY = LossWeights(0.0, 0.0, 0.0, 1.0)


def _small_cls_net(seed=0):
    torch.manual_seed(seed)
    return ClassificationNet(image_size=16, image_widths=(4, 8), embed_dim=8, text_channels=8, text_blocks=1,
                             fused_local_dim=8, fused_dim=16, rank=4, num_classes=4, critic_hidden=8)


def _small_seg_net(seed=0):
    torch.manual_seed(seed)
    return SegmentationNet(image_size=16, widths=(4, 4, 8, 8), critic_hidden=8)


def _cls_splits(n=60, seed=0):
    ds = generate_synthetic_classification(SyntheticConfig(task="classification", num_samples=n, image_size=16,
                                                           num_classes=4, seed=seed))
    return split_dataset(ds, {"train": 0.7, "val": 0.3}, seed=seed)


def _seg_splits(n=24, seed=0):
    ds = generate_synthetic_segmentation(SyntheticConfig(task="segmentation", num_samples=n, image_size=16, seed=seed))
    return split_dataset(ds, {"train": 0.5, "val": 0.5}, seed=seed)


def test_config_validation():
    for bad in (dict(learning_rate=0.0), dict(patience=0), dict(batch_size=1), dict(task="x"), dict(max_epochs=0)):
        with pytest.raises(ValueError):
            TrainConfig(**bad)
    assert TrainConfig(weights={"lambda_ll": 2.0}).weights.lambda_ll == 2.0
    assert TrainConfig().learning_rate == 1e-4


def test_patience_one_with_constant_metric_stops_after_two_epochs():
    cfg = TrainConfig(task="classification", batch_size=8, max_epochs=10, patience=1)
    ckpt, history = train(_small_cls_net(), _cls_splits(), cfg, val_metric_fn=lambda *a: 0.5)
    assert max(r.epoch for r in history) == 2
    assert ckpt.epoch == 1


def test_best_checkpoint_not_last():
    scores = iter([0.2, 0.9, 0.4, 0.3])
    cfg = TrainConfig(task="classification", batch_size=8, max_epochs=4, patience=5, eval_modality_schedule=[["image"]])
    model = _small_cls_net()
    ckpt, history = train(model, _cls_splits(), cfg, val_metric_fn=lambda *a: next(scores))
    assert ckpt.epoch == 2 and ckpt.best_metric == 0.9
    assert all(torch.equal(v, model.state_dict()[k]) for k, v in ckpt.model_state.items())


def test_task_loss_decreases_over_first_epochs():
    decreasing = 0
    for seed in range(3):
        ds = generate_synthetic_classification(SyntheticConfig(task="classification", num_samples=200, image_size=16,
                                                               num_classes=4, seed=seed))
        splits = split_dataset(ds, {"train": 0.8, "val": 0.2}, seed=seed)
        cfg = TrainConfig(task="classification", max_epochs=5, patience=20, weights=TASK_ONLY, seed=seed)
        _, history = train(_small_cls_net(seed), splits, cfg)
        losses = [r.value for r in history if r.metric_name == "loss_task"]
        decreasing += all(b < a for a, b in zip(losses, losses[1:]))
    assert decreasing >= 2


def test_training_is_deterministic():
    cfg = TrainConfig(task="segmentation", batch_size=4, max_epochs=2, seed=3)
    _, h1 = train(_small_seg_net(), _seg_splits(), cfg)
    _, h2 = train(_small_seg_net(), _seg_splits(), cfg)
    assert [(r.epoch, r.metric_name, r.modality_subset, r.value) for r in h1] == \
           [(r.epoch, r.metric_name, r.modality_subset, r.value) for r in h2]


def test_history_rows_and_csv(tmp_path):
    cfg = TrainConfig(task="segmentation", batch_size=4, max_epochs=1)
    _, history = train(_small_seg_net(), _seg_splits(), cfg)
    subsets = {r.modality_subset for r in history if r.split == "val"}
    assert subsets == {"flair", "t1", "t1c", "t2", "mean"}
    path = tmp_path / "metrics.csv"
    write_history_csv(history, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "epoch,split,modality_subset,metric_name,value"
    assert len(lines) == len(history) + 1


def test_one_small_step_decreases_task_loss():
    for seed in range(3):
        model = _small_seg_net(seed).double()
        ds = _seg_splits(seed=seed)["train"].binarized()
        batch = next(make_batches(ds, 8, seed=seed))
        inputs = {k: v.double() for k, v in batch.inputs.items()}
        pairing = make_marginal_pairing(len(batch), 0)
        opt = torch.optim.Adam(model.parameters(), lr=1e-5)

        def loss():
            return model_losses(model, model(inputs, batch.present), batch.targets, TASK_ONLY, pairing).total

        before = loss()
        opt.zero_grad()
        before.backward()
        opt.step()
        with torch.no_grad():
            assert loss().item() < before.item()


def test_numerical_error_names_first_bad_component():
    model = _small_cls_net()
    with torch.no_grad():
        model.critics["ll/image"].out.bias.fill_(float("nan"))
    cfg = TrainConfig(task="classification", batch_size=8, max_epochs=1)
    with pytest.raises(NumericalError, match="'ll'"):
        train(model, _cls_splits(), cfg)


def test_task_mismatch():
    with pytest.raises(ValueError):
        train(_small_cls_net(), _seg_splits(), TrainConfig(task="segmentation"))


# -- checkpoints ----------------------------------------------------------------------

@pytest.fixture(scope="module")
def trained():
    torch.manual_seed(0)
    cfg = TrainConfig(task="classification", batch_size=8, max_epochs=2, patience=5)
    model = _small_cls_net()
    ckpt, _ = train(model, _cls_splits(), cfg)
    return ckpt, cfg


def test_checkpoint_round_trip_bit_exact(trained, tmp_path):
    ckpt, _ = trained
    path = tmp_path / "best.ckpt"
    save_checkpoint(ckpt, path)
    back = load_checkpoint(path)
    assert back.model_state.keys() == ckpt.model_state.keys()
    for k, v in ckpt.model_state.items():
        assert back.model_state[k].dtype == v.dtype and torch.equal(back.model_state[k], v)
    for idx, state in ckpt.optimizer_state["state"].items():
        for key, value in state.items():
            assert torch.equal(back.optimizer_state["state"][idx][key], value)
    assert back.optimizer_state["param_groups"] == ckpt.optimizer_state["param_groups"]
    assert (back.epoch, back.best_metric, back.fingerprint) == (ckpt.epoch, ckpt.best_metric, ckpt.fingerprint)
    save_checkpoint(back, tmp_path / "again.ckpt")
    assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()


def test_checkpoint_starts_with_versioned_header(trained, tmp_path):
    path = tmp_path / "c.ckpt"
    save_checkpoint(trained[0], path)
    raw = path.read_bytes()
    assert raw[:4] == b"CMIM" and int.from_bytes(raw[4:8], "little") == 1


@pytest.mark.parametrize("cut", [3, 10, 200, -5])
def test_truncated_checkpoint_raises_with_offset(trained, tmp_path, cut):
    path = tmp_path / "c.ckpt"
    save_checkpoint(trained[0], path)
    raw = path.read_bytes()
    path.write_bytes(raw[:cut])
    with pytest.raises(CheckpointError, match="offset"):
        load_checkpoint(path)


def test_corrupt_checkpoint_errors(trained, tmp_path):
    path = tmp_path / "c.ckpt"
    save_checkpoint(trained[0], path)
    raw = path.read_bytes()
    path.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)
    path.write_bytes(raw + b"\x00")
    with pytest.raises(CheckpointError, match="trailing"):
        load_checkpoint(path)


def test_loaded_checkpoint_predicts_identically(trained, tmp_path):
    ckpt, _ = trained
    save_checkpoint(ckpt, tmp_path / "c.ckpt")
    a, b = ckpt.build_model(), load_checkpoint(tmp_path / "c.ckpt").build_model()
    val = _cls_splits()["val"]
    inputs = {m: torch.from_numpy(val.modalities[m]) for m in val.modality_names}
    present = torch.from_numpy(val.present)
    assert torch.equal(a(inputs, present).logits, b(inputs, present).logits)


def test_resume_continues_epoch_numbering(trained):
    ckpt, cfg = trained
    model = ckpt.build_model()
    longer = TrainConfig(**{**cfg.to_dict(), "max_epochs": 4, "patience": 10})
    _, history = train(model, _cls_splits(), longer, resume=ckpt)
    assert sorted({r.epoch for r in history}) == [ckpt.epoch + 1 + i for i in range(4 - ckpt.epoch)]


def test_resume_fingerprint_mismatch_warns(trained):
    ckpt, cfg = trained
    changed = TrainConfig(**{**cfg.to_dict(), "learning_rate": 1e-3, "max_epochs": ckpt.epoch + 1})
    with pytest.warns(UserWarning, match="fingerprint"):
        train(ckpt.build_model(), _cls_splits(), changed, resume=ckpt)


def test_fingerprint_ignores_stopping_budget():
    model = _small_cls_net()
    a = config_fingerprint(model.config, TrainConfig(task="classification", max_epochs=3))
    b = config_fingerprint(model.config, TrainConfig(task="classification", max_epochs=30, patience=2))
    c = config_fingerprint(model.config, TrainConfig(task="classification", seed=1))
    assert a == b != c
