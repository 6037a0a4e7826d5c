import numpy as np
import pandas as pd
import pytest
import torch
import torchvision
import yaml
from torch import nn

from conftest import make_patch
from imc_io import DatasetSplit
from trainer import (
    Backbone,
    TrainConfig,
    TrainedModel,
    TrainingError,
    adapt_input_channels,
    build_model,
    first_layer,
    load_trained_model,
    predict,
    predict_many,
    save_trained_model,
    train,
)


def _toy_split(rng, per_class=6, size=16):
    def patches(label, level, subject):
        return [
            make_patch(
                np.clip(rng.normal(level, 0.05, (size, size, 1)), 0, 1),
                label=label,
                subject=subject,
                origin=(0, k),
                names=["VDAC1"],
            )
            for k in range(per_class)
        ]

    control = patches("control", 0.2, "C01")
    patient = patches("patient", 0.8, "P01")
    return DatasetSplit(
        train=control[:4] + patient[:4],
        validation=control[4:5] + patient[4:5],
        test=control[5:] + patient[5:],
        ratios=(0.8, 0.1, 0.1),
        seed=0,
    )


def _wrap(model, channels, names=None):
    return TrainedModel(
        model=model,
        config=TrainConfig(),
        input_channels=channels,
        channel_names=tuple(names or [f"ch{k}" for k in range(channels)]),
        split_fingerprint="",
        history=pd.DataFrame(),
        stopped_epoch=0,
        best_epoch=0,
    )


@pytest.fixture
def pretrained_kernel():
    torch.manual_seed(0)
    return torch.randn(8, 3, 7, 7)


def test_three_channel_target_keeps_pretrained_weights(pretrained_kernel):
    assert torch.equal(adapt_input_channels(pretrained_kernel, 3), pretrained_kernel)


def test_single_channel_target_uses_the_channel_mean(pretrained_kernel):
    adapted = adapt_input_channels(pretrained_kernel, 1)
    assert adapted.shape == (8, 1, 7, 7)
    torch.testing.assert_close(adapted, pretrained_kernel.mean(dim=1, keepdim=True))


def test_wider_target_preserves_the_summed_response(pretrained_kernel):
    adapted = adapt_input_channels(pretrained_kernel, 10)
    assert adapted.shape == (8, 10, 7, 7)
    torch.testing.assert_close(adapted.sum(dim=1), pretrained_kernel.sum(dim=1), rtol=1e-5, atol=1e-5)


def test_invalid_configs_are_rejected():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(ValueError):
        TrainConfig(optimizer="sgd")
    with pytest.raises(ValueError, match="pretrained"):
        TrainConfig(backbone="smallcnn", init="pretrained_imagenet")


def test_smallcnn_accepts_any_channel_count():
    model = build_model(TrainConfig(), 10)
    assert first_layer(model).in_channels == 10
    assert model(torch.zeros(2, 10, 32, 32)).shape == (2, 2)


def test_replicated_rgb_resnet_folds_to_one_input_channel():
    config = TrainConfig(backbone=Backbone.RESNET50, replicate_to_rgb=True, channel_selection="VDAC1")
    assert first_layer(build_model(config, 1)).weight.shape == (64, 1, 7, 7)
    with pytest.raises(ValueError):
        build_model(config, 2)


@pytest.mark.network
def test_pretrained_resnet_adapts_to_ten_channels():
    config = TrainConfig(backbone=Backbone.RESNET50, init="pretrained_imagenet")
    try:
        model = build_model(config, 10)
    except (OSError, RuntimeError) as e:
        pytest.skip(f"pretrained weights unavailable: {e}")
    weight = first_layer(model).weight.detach()
    assert weight.shape == (64, 10, 7, 7)

    original = torchvision.models.resnet50(weights=torchvision.models.ResNet50_Weights.IMAGENET1K_V1).conv1.weight.detach()
    torch.testing.assert_close(weight[:, :3], original * 0.3)
    for extra in range(3, 10):
        torch.testing.assert_close(weight[:, extra], original.mean(dim=1) * 0.3)


def test_zero_output_layer_gives_even_odds():
    model = build_model(TrainConfig(), 1)
    with torch.no_grad():
        model[-1].weight.zero_()
        model[-1].bias.zero_()
    scores = predict(_wrap(model, 1), make_patch(np.ones((16, 16, 1))))
    np.testing.assert_allclose(scores.probabilities, [0.5, 0.5])


def test_prediction_follows_the_logits():
    model = nn.Sequential(nn.Flatten(), nn.Linear(2, 2, bias=False))
    with torch.no_grad():
        model[1].weight.copy_(torch.tensor([[0.0, 0.0], [3.0, -2.0]]))
    scores = predict(_wrap(model, 2), make_patch(np.ones((1, 1, 2))))

    np.testing.assert_allclose(scores.logits, [0.0, 1.0])
    np.testing.assert_allclose(scores.probabilities, [1 / (1 + np.e), np.e / (1 + np.e)])
    assert scores.predicted_class == 1


def test_prediction_rejects_the_wrong_channel_count():
    with pytest.raises(TrainingError, match="channels"):
        predict(_wrap(build_model(TrainConfig(), 2), 2), make_patch(np.ones((16, 16, 1))))


def test_batched_prediction_matches_single_prediction(rng):
    trained = _wrap(build_model(TrainConfig(), 1), 1)
    patches = [make_patch(rng.random((16, 16, 1)), origin=(0, k)) for k in range(5)]
    batched = predict_many(trained, patches, batch_size=2)
    for patch, scores in zip(patches, batched):
        np.testing.assert_allclose(scores.logits, predict(trained, patch).logits, rtol=1e-5, atol=1e-6)


def test_flat_validation_accuracy_stops_after_patience(rng):
    config = TrainConfig(learning_rate=1e-12, early_stop_patience=3, max_epochs=50, batch_size=4, channel_selection="VDAC1")
    trained = train(build_model(config, 1), _toy_split(rng), config, progress_callback=lambda *_: None)
    assert trained.best_epoch == 1
    assert trained.stopped_epoch == 4
    assert list(trained.history["epoch"]) == [1, 2, 3, 4]


def test_progress_callback_receives_every_epoch(rng):
    config = TrainConfig(max_epochs=3, early_stop_patience=10, batch_size=4)
    calls = []
    train(build_model(config, 1), _toy_split(rng), config, progress_callback=lambda message, i: calls.append(i))
    assert calls == [1, 2, 3]


def test_training_is_deterministic_under_a_seed():
    config = TrainConfig(max_epochs=3, early_stop_patience=10, batch_size=4, seed=4)
    checksums = [
        train(build_model(config, 1), _toy_split(np.random.default_rng(9)), config, lambda *_: None).weights_checksum()
        for _ in range(2)
    ]
    assert checksums[0] == checksums[1]


def test_separable_patches_are_learned(rng):
    config = TrainConfig(learning_rate=1e-2, max_epochs=60, early_stop_patience=60, batch_size=8, smallcnn_pool="avg")
    trained = train(build_model(config, 1), _toy_split(rng), config, progress_callback=lambda *_: None)

    assert trained.history["train_acc"].iloc[-1] == 1.0
    tail = trained.history["train_loss"].to_numpy()[-10:]
    assert np.all(np.diff(tail) <= 1e-3)


def test_empty_partition_is_rejected(rng):
    split = _toy_split(rng)
    split.validation = []
    config = TrainConfig(max_epochs=1)
    with pytest.raises(TrainingError, match="validation"):
        train(build_model(config, 1), split, config, lambda *_: None)


def test_saved_model_reloads_with_identical_weights(tmp_path, rng):
    config = TrainConfig(max_epochs=2, early_stop_patience=5, batch_size=4, channel_selection=["VDAC1"])
    split = _toy_split(rng)
    trained = train(build_model(config, 1), split, config, lambda *_: None)
    save_trained_model(trained, tmp_path)

    loaded = load_trained_model(tmp_path)

    assert loaded.weights_checksum() == trained.weights_checksum()
    assert loaded.channel_names == ("VDAC1",)
    assert loaded.split_fingerprint == split.fingerprint()
    np.testing.assert_allclose(
        predict(loaded, split.test[0]).probabilities, predict(trained, split.test[0]).probabilities
    )


def test_tampered_checksum_is_detected(tmp_path, rng):
    config = TrainConfig(max_epochs=1, batch_size=4)
    save_trained_model(train(build_model(config, 1), _toy_split(rng), config, lambda *_: None), tmp_path)
    path = tmp_path / "config.yaml"
    record = yaml.safe_load(path.read_text(encoding="utf-8"))
    record["weights_sha256"] = "0" * 64
    path.write_text(yaml.safe_dump(record), encoding="utf-8")
    with pytest.raises(TrainingError, match="checksum"):
        load_trained_model(tmp_path)


def test_constant_offset_shifts_a_bias_free_first_layer_independently_of_the_input():
    conv = first_layer(build_model(TrainConfig(smallcnn_bias=False), 1))
    shift = torch.full((1, 1, 16, 16), 0.25)
    with torch.no_grad():
        deltas = [conv(x + shift) - conv(x) for x in (torch.rand(1, 1, 16, 16), torch.rand(1, 1, 16, 16))]
    torch.testing.assert_close(deltas[0], deltas[1], rtol=1e-5, atol=1e-5)


def test_constant_offset_shifts_linear_logits_by_the_weight_row_sums(rng):
    model = nn.Sequential(nn.Flatten(), nn.Linear(4, 2, bias=False))
    trained = _wrap(model, 1)
    weight = model[1].weight.detach().numpy()
    for _ in range(3):
        data = rng.random((2, 2, 1))
        shifted = predict(trained, make_patch(data + 0.5)).logits - predict(trained, make_patch(data)).logits
        np.testing.assert_allclose(shifted, 0.5 * weight.sum(axis=1), rtol=1e-4, atol=1e-5)
