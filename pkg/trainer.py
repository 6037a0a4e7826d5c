from __future__ import annotations

import copy
import hashlib
import logging
from dataclasses import asdict, dataclass, replace
from enum import Enum
from pathlib import Path

import numpy as np
import pandas as pd
import torch
import torchvision
import yaml
from colorama import Fore
from torch import nn
from tqdm import tqdm

from imc_io import select_channels

logger = logging.getLogger(__name__)

ALL_CHANNELS = "ALL"
HISTORY_COLUMNS = ["epoch", "train_loss", "train_acc", "val_loss", "val_acc"]
SMALLCNN_WIDTHS = (16, 32, 64, 128)


class TrainingError(Exception):
    pass


class Backbone(Enum):
    RESNET50 = "resnet50"
    VGG16 = "vgg16"
    SMALLCNN = "smallcnn"


class Init(Enum):
    PRETRAINED_IMAGENET = "pretrained_imagenet"
    RANDOM = "random"


_FIXED_CHOICES = {
    "pooling": ("avg",),
    "output_activation": ("softmax",),
    "optimizer": ("adam",),
    "loss": ("categorical_crossentropy",),
    "early_stop_monitor": ("validation_accuracy",),
    "smallcnn_pool": ("max", "avg"),
}


@dataclass(frozen=True)
class TrainConfig:
    backbone: Backbone = Backbone.SMALLCNN
    init: Init = Init.RANDOM
    pooling: str = "avg"
    output_activation: str = "softmax"
    optimizer: str = "adam"
    learning_rate: float = 0.001
    loss: str = "categorical_crossentropy"
    early_stop_patience: int = 200
    early_stop_monitor: str = "validation_accuracy"
    max_epochs: int = 1000
    batch_size: int = 16
    seed: int = 0
    channel_selection: tuple | str = ALL_CHANNELS
    replicate_to_rgb: bool = False
    smallcnn_bias: bool = True
    smallcnn_pool: str = "max"

    def __post_init__(self):
        object.__setattr__(self, "backbone", Backbone(self.backbone))
        object.__setattr__(self, "init", Init(self.init))
        if self.channel_selection != ALL_CHANNELS:
            if isinstance(self.channel_selection, str):
                object.__setattr__(self, "channel_selection", (self.channel_selection,))
            else:
                object.__setattr__(self, "channel_selection", tuple(self.channel_selection))
            if not self.channel_selection:
                raise ValueError("channel_selection must be ALL or a non-empty list of names")
        for name, allowed in _FIXED_CHOICES.items():
            if getattr(self, name) not in allowed:
                raise ValueError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.max_epochs < 1 or self.early_stop_patience < 1 or self.batch_size < 1:
            raise ValueError("max_epochs, early_stop_patience and batch_size must be >= 1")
        if self.backbone is Backbone.SMALLCNN and self.init is Init.PRETRAINED_IMAGENET:
            raise ValueError("smallcnn has no pretrained weights; use init 'random'")

    @classmethod
    def from_dict(cls, values):
        values = dict(values)
        unknown = set(values) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"Unknown training fields: {', '.join(sorted(unknown))}")
        return cls(**values)

    def to_dict(self):
        values = asdict(self)
        values["backbone"] = self.backbone.value
        values["init"] = self.init.value
        if self.channel_selection != ALL_CHANNELS:
            values["channel_selection"] = list(self.channel_selection)
        return values

    @property
    def channel_tag(self):
        if self.channel_selection == ALL_CHANNELS:
            return "all"
        return "+".join(self.channel_selection)

    def resolve_channels(self, available):
        """Returns the channel names this config trains on, given the names a patch carries."""
        if self.channel_selection == ALL_CHANNELS:
            return list(available)
        return list(self.channel_selection)


@dataclass
class ClassScores:
    probabilities: np.ndarray
    logits: np.ndarray

    def __post_init__(self):
        if np.any(self.probabilities < 0) or abs(float(self.probabilities.sum()) - 1.0) > 1e-6:
            raise TrainingError(f"Invalid class probabilities {self.probabilities}")

    @property
    def predicted_class(self):
        return int(np.argmax(self.logits))


@dataclass
class TrainedModel:
    model: nn.Module
    config: TrainConfig
    input_channels: int
    channel_names: tuple
    split_fingerprint: str
    history: pd.DataFrame
    stopped_epoch: int
    best_epoch: int

    def weights_checksum(self):
        return weights_checksum(self.model)


def weights_checksum(model):
    digest = hashlib.sha256()
    for name, tensor in sorted(model.state_dict().items()):
        digest.update(name.encode())
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def first_layer(model):
    for module in model.modules():
        if isinstance(module, (nn.Conv2d, nn.Linear)):
            return module
    raise TrainingError("Model has no convolution or dense layer")


def input_channels_of(model):
    layer = first_layer(model)
    return layer.in_channels if isinstance(layer, nn.Conv2d) else layer.in_features


def adapt_input_channels(pretrained_first_layer, target_channels):
    """
    Maps a pretrained first-layer kernel (out, 3, kh, kw) onto `target_channels` inputs.

    Three targets keep the weights. Fewer fill every slice with the channel
    mean. More keep the original slices, fill the extra ones with the mean and
    scale everything by 3/target, so the summed response to inputs with equal
    channel statistics is unchanged.
    """
    if target_channels < 1:
        raise ValueError(f"target_channels must be >= 1, got {target_channels}")
    weight = pretrained_first_layer.detach()
    original = weight.shape[1]
    if target_channels == original:
        return weight.clone()
    mean = weight.mean(dim=1, keepdim=True)
    if target_channels < original:
        return mean.repeat(1, target_channels, 1, 1)
    extra = mean.repeat(1, target_channels - original, 1, 1)
    return torch.cat([weight, extra], dim=1) * (original / target_channels)


def _smallcnn(input_channels, bias, pool):
    layers = []
    width_in = input_channels
    for width in SMALLCNN_WIDTHS:
        layers += [
            nn.Conv2d(width_in, width, kernel_size=3, padding=1, bias=bias),
            nn.ReLU(),
            nn.MaxPool2d(2) if pool == "max" else nn.AvgPool2d(2),
        ]
        width_in = width
    layers += [nn.AdaptiveAvgPool2d(1), nn.Flatten(), nn.Linear(width_in, 2, bias=bias)]
    return nn.Sequential(*layers)


def _replace_first_conv(old, input_channels, config):
    new = nn.Conv2d(
        input_channels,
        old.out_channels,
        kernel_size=old.kernel_size,
        stride=old.stride,
        padding=old.padding,
        bias=old.bias is not None,
    )
    with torch.no_grad():
        if config.replicate_to_rgb:
            # Replicating one plane into three slices (a, b, c) is the single slice a + b + c.
            new.weight.copy_(old.weight.sum(dim=1, keepdim=True))
        elif config.init is Init.PRETRAINED_IMAGENET:
            new.weight.copy_(adapt_input_channels(old.weight, input_channels))
        if old.bias is not None:
            new.bias.copy_(old.bias)
    return new


def _torchvision_backbone(config, input_channels):
    pretrained = config.init is Init.PRETRAINED_IMAGENET
    if config.backbone is Backbone.RESNET50:
        weights = torchvision.models.ResNet50_Weights.IMAGENET1K_V1 if pretrained else None
        net = torchvision.models.resnet50(weights=weights)
        stem = [net.conv1, net.bn1, net.relu, net.maxpool]
        body = nn.Sequential(*stem, net.layer1, net.layer2, net.layer3, net.layer4)
        features = net.fc.in_features
    else:
        weights = torchvision.models.VGG16_Weights.IMAGENET1K_V1 if pretrained else None
        net = torchvision.models.vgg16(weights=weights)
        body = net.features
        features = 512
    if input_channels != 3 or config.replicate_to_rgb:
        body[0] = _replace_first_conv(body[0], input_channels, config)
    return body, features


def build_model(config, input_channels):
    """
    Builds an untrained classifier: backbone, global average pooling, flatten, dense 2.

    Raises:
        TrainingError: For an unsupported backbone.
        ValueError: For input_channels < 1 or replicate_to_rgb with more than one channel.
    """
    if input_channels < 1:
        raise ValueError(f"input_channels must be >= 1, got {input_channels}")
    if config.replicate_to_rgb and input_channels != 1:
        raise ValueError("replicate_to_rgb only applies to single-channel input")
    backbone = Backbone(config.backbone)
    torch.manual_seed(config.seed)
    if backbone is Backbone.SMALLCNN:
        return _smallcnn(input_channels, config.smallcnn_bias, config.smallcnn_pool)
    if backbone in (Backbone.RESNET50, Backbone.VGG16):
        body, features = _torchvision_backbone(config, input_channels)
        return nn.Sequential(body, nn.AdaptiveAvgPool2d(1), nn.Flatten(), nn.Linear(features, 2))
    raise TrainingError(f"Unsupported backbone {backbone}")


def patches_to_tensor(patches):
    return torch.from_numpy(np.stack([p.data for p in patches]).astype(np.float32)).permute(0, 3, 1, 2)


def _labels(patches):
    return torch.tensor([p.class_label.value for p in patches], dtype=torch.long)


def _evaluate(model, inputs, labels, batch_size, criterion):
    model.eval()
    total_loss = 0.0
    correct = 0
    with torch.no_grad():
        for start in range(0, len(labels), batch_size):
            logits = model(inputs[start : start + batch_size])
            target = labels[start : start + batch_size]
            total_loss += criterion(logits, target).item() * len(target)
            correct += int((logits.argmax(dim=1) == target).sum())
    return total_loss / len(labels), correct / len(labels)


def _select(patches, names):
    if tuple(patches[0].channel_names) == tuple(names):
        return patches
    return [select_channels(p, names) for p in patches]


def train(model, split, config, progress_callback=None):
    """
    Trains `model` in place with Adam and cross-entropy, monitoring validation accuracy.

    Epochs are numbered from 1. An epoch whose validation accuracy is strictly
    higher than every earlier one becomes the best epoch; training stops once
    `epoch - best_epoch` reaches the patience or after max_epochs, and the best
    epoch's weights are restored.

    Params:
        model (nn.Module): Output of build_model.
        split (DatasetSplit): Non-empty train, validation and test partitions.
        config (TrainConfig): Optimization settings and seed.
        progress_callback (callable, optional): Called as (message, epoch) instead of drawing a bar.

    Returns:
        TrainedModel

    Raises:
        TrainingError: On empty partitions, a channel mismatch or a non-finite loss.
    """
    for name in ("train", "validation", "test"):
        if not getattr(split, name):
            raise TrainingError(f"Partition {name} is empty")
    names = config.resolve_channels(split.train[0].channel_names)
    train_patches = _select(split.train, names)
    val_patches = _select(split.validation, names)
    expected = input_channels_of(model)
    if len(names) != expected:
        raise TrainingError(f"Patches carry {len(names)} channels but the model expects {expected}")

    torch.manual_seed(config.seed)
    torch.use_deterministic_algorithms(True, warn_only=True)
    generator = torch.Generator().manual_seed(config.seed)
    train_x, train_y = patches_to_tensor(train_patches), _labels(train_patches)
    val_x, val_y = patches_to_tensor(val_patches), _labels(val_patches)

    criterion = nn.CrossEntropyLoss()
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    history = []
    best_acc = -1.0
    best_epoch = 0
    best_state = copy.deepcopy(model.state_dict())

    def run_epochs(report):
        nonlocal best_acc, best_epoch, best_state
        for epoch in range(1, config.max_epochs + 1):
            model.train()
            order = torch.randperm(len(train_y), generator=generator)
            for start in range(0, len(order), config.batch_size):
                batch = order[start : start + config.batch_size]
                optimizer.zero_grad()
                loss = criterion(model(train_x[batch]), train_y[batch])
                if not torch.isfinite(loss):
                    raise TrainingError(
                        f"Non-finite loss {loss.item()} at epoch {epoch}, batch starting {start} "
                        f"(backbone {config.backbone.value}, seed {config.seed})"
                    )
                loss.backward()
                optimizer.step()

            train_loss, train_acc = _evaluate(model, train_x, train_y, config.batch_size, criterion)
            val_loss, val_acc = _evaluate(model, val_x, val_y, config.batch_size, criterion)
            history.append((epoch, train_loss, train_acc, val_loss, val_acc))
            if val_acc > best_acc:
                best_acc, best_epoch = val_acc, epoch
                best_state = copy.deepcopy(model.state_dict())
            report(epoch, train_loss, val_acc)
            if epoch - best_epoch >= config.early_stop_patience:
                logger.debug("Early stop at epoch %d (best %d)", epoch, best_epoch)
                break

    if progress_callback is None:
        with tqdm(
            total=config.max_epochs,
            bar_format="{l_bar}%s{bar}%s{r_bar}" % (Fore.CYAN, Fore.RESET),
            ascii=False,
            dynamic_ncols=True,
            leave=False,
        ) as pbar:
            run_epochs(
                lambda epoch, loss, acc: (
                    pbar.set_description(f"{config.backbone.value}/{config.channel_tag} seed {config.seed}"),
                    pbar.set_postfix(loss=f"{loss:.4f}", val_acc=f"{acc:.3f}"),
                    pbar.update(1),
                )
            )
    else:

        def report(epoch, loss, acc):
            message = (
                f"Epoch {epoch} of at most {config.max_epochs} - "
                f"train loss {loss:.4f}, validation accuracy {acc:.3f}"
            )
            progress_callback(message, epoch)

        run_epochs(report)

    model.load_state_dict(best_state)
    model.eval()
    frame = pd.DataFrame(history, columns=HISTORY_COLUMNS)
    logger.info(
        "Trained %s/%s seed %d: stopped at epoch %d, best epoch %d (val acc %.3f)",
        config.backbone.value,
        config.channel_tag,
        config.seed,
        len(frame),
        best_epoch,
        best_acc,
    )
    return TrainedModel(
        model=model,
        config=config,
        input_channels=expected,
        channel_names=tuple(names),
        split_fingerprint=split.fingerprint(),
        history=frame,
        stopped_epoch=len(frame),
        best_epoch=best_epoch,
    )


def scores_from_logits(logits):
    logits = logits.astype(np.float64)
    shifted = np.exp(logits - logits.max())
    return ClassScores(probabilities=shifted / shifted.sum(), logits=logits)


def _check_channels(trained, patch):
    if patch.data.shape[2] != trained.input_channels:
        raise TrainingError(
            f"Patch {patch.patch_id} has {patch.data.shape[2]} channels, model expects {trained.input_channels}"
        )


def predict(trained, patch):
    _check_channels(trained, patch)
    trained.model.eval()
    with torch.no_grad():
        logits = trained.model(patches_to_tensor([patch]))[0].double().numpy()
    return scores_from_logits(logits)


def predict_many(trained, patches, batch_size=16):
    """Batched predict; returns one ClassScores per patch, in order."""
    for patch in patches:
        _check_channels(trained, patch)
    trained.model.eval()
    scores = []
    with torch.no_grad():
        for start in range(0, len(patches), batch_size):
            logits = trained.model(patches_to_tensor(patches[start : start + batch_size])).double().numpy()
            scores.extend(scores_from_logits(row) for row in logits)
    return scores


def save_trained_model(trained, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    torch.save(trained.model.state_dict(), directory / "weights.pt")
    record = {
        "train_config": trained.config.to_dict(),
        "input_channels": trained.input_channels,
        "channel_names": list(trained.channel_names),
        "stopped_epoch": trained.stopped_epoch,
        "best_epoch": trained.best_epoch,
        "weights_sha256": trained.weights_checksum(),
    }
    with open(directory / "config.yaml", "w", encoding="utf-8") as f:
        yaml.safe_dump(record, f, sort_keys=False)
    trained.history.to_csv(directory / "history.csv", index=False)
    (directory / "split.sha256").write_text(trained.split_fingerprint + "\n", encoding="utf-8")


def load_trained_model(directory):
    directory = Path(directory)
    try:
        with open(directory / "config.yaml", encoding="utf-8") as f:
            record = yaml.safe_load(f)
        config = TrainConfig.from_dict(record["train_config"])
        # Saved weights replace any pretrained ones, so skip the download.
        model = build_model(replace(config, init=Init.RANDOM), record["input_channels"])
        model.load_state_dict(torch.load(directory / "weights.pt", weights_only=True))
    except (OSError, KeyError, RuntimeError) as e:
        raise TrainingError(f"Cannot load trained model from {directory}: {e}") from e
    model.eval()
    if weights_checksum(model) != record["weights_sha256"]:
        raise TrainingError(f"Weights checksum mismatch in {directory}")
    return TrainedModel(
        model=model,
        config=config,
        input_channels=record["input_channels"],
        channel_names=tuple(record["channel_names"]),
        split_fingerprint=(directory / "split.sha256").read_text(encoding="utf-8").strip(),
        history=pd.read_csv(directory / "history.csv"),
        stopped_epoch=record["stopped_epoch"],
        best_epoch=record["best_epoch"],
    )
