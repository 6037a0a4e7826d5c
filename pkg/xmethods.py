from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
import yaml
from torch import nn
from torchvision.models.resnet import BasicBlock, Bottleneck

from imc_io import Patch
from trainer import scores_from_logits

logger = logging.getLogger(__name__)

DEFAULT_EPSILON = 1e-7
_LINEAR_KINDS = ("conv", "dense", "pool")


class ExplanationError(Exception):
    pass


class MethodName(Enum):
    GRADIENTS = "gradients"
    DECONVNET = "deconvnet"
    GUIDED_BACKPROP = "guided_backprop"
    INPUT_TIMES_GRADIENT = "input_times_gradient"
    DEEP_TAYLOR = "deep_taylor"
    LRP_EPSILON = "lrp_epsilon"
    LRP_Z = "lrp_z"
    LRP_PRESET_A_FLAT = "lrp_preset_a_flat"
    LRP_PRESET_B_FLAT = "lrp_preset_b_flat"

    def __str__(self):
        return self.value

    @property
    def is_signal(self):
        """Signal methods show input patterns; the others attribute the logit to input elements."""
        return self in (MethodName.GRADIENTS, MethodName.DECONVNET, MethodName.GUIDED_BACKPROP)


@dataclass(frozen=True)
class Rule:
    kind: str
    epsilon: float = 0.0
    alpha: float = 1.0
    beta: float = 0.0
    lo: float = 0.0
    hi: float = 1.0

    def __post_init__(self):
        if self.kind not in ("z", "epsilon", "alpha_beta", "flat", "zplus", "zbox"):
            raise ValueError(f"Unknown LRP rule {self.kind!r}")
        if self.kind == "epsilon" and not self.epsilon > 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")
        if self.kind == "alpha_beta" and abs(self.alpha - self.beta - 1.0) > 1e-9:
            raise ValueError(f"alpha - beta must equal 1, got alpha={self.alpha}, beta={self.beta}")
        if self.kind == "zbox" and not self.lo <= self.hi:
            raise ValueError(f"zbox needs lo <= hi, got [{self.lo}, {self.hi}]")

    @classmethod
    def z(cls):
        return cls("z")

    @classmethod
    def eps(cls, epsilon):
        return cls("epsilon", epsilon=epsilon)

    @classmethod
    def alpha_beta(cls, alpha, beta):
        return cls("alpha_beta", alpha=alpha, beta=beta)

    @classmethod
    def flat(cls):
        return cls("flat")

    @classmethod
    def zplus(cls):
        return cls("zplus")

    @classmethod
    def zbox(cls, lo=0.0, hi=1.0):
        return cls("zbox", lo=lo, hi=hi)


@dataclass(frozen=True)
class LrpRuleConfig:
    """Rule per layer class; `first` overrides the rule of the input-nearest conv or dense layer."""

    dense: Rule
    conv: Rule
    first: Rule | None = None
    stabilizer: float = DEFAULT_EPSILON

    def rule_for(self, record, is_first):
        if is_first and self.first is not None:
            return self.first
        return self.dense if record.kind == "dense" else self.conv


def preset_rules(name):
    if name == "a_flat":
        return LrpRuleConfig(dense=Rule.eps(0.1), conv=Rule.alpha_beta(1, 0), first=Rule.flat())
    if name == "b_flat":
        return LrpRuleConfig(dense=Rule.eps(0.1), conv=Rule.alpha_beta(2, 1), first=Rule.flat())
    raise ValueError(f"Unknown LRP preset {name!r}; expected a_flat or b_flat")


def deep_taylor_rules(lo=0.0, hi=1.0):
    return LrpRuleConfig(dense=Rule.zplus(), conv=Rule.zplus(), first=Rule.zbox(lo, hi))


@dataclass
class LayerRecord:
    kind: str
    name: str
    params: dict = field(default_factory=dict)
    branches: list = field(default_factory=list)
    input: torch.Tensor | None = None
    output: torch.Tensor | None = None


@dataclass
class ActivationTrace:
    input: torch.Tensor
    layers: list
    output: torch.Tensor

    def layer_count(self):
        return _count(self.layers)

    def replay(self):
        """Re-runs the recorded layers from the recorded input; returns the output logits."""
        return _run(self.layers, self.input, keep=False)

    def first_linear(self):
        return _first_linear(self.layers)


@dataclass
class RelevanceMap:
    method: MethodName
    values: np.ndarray
    target_class: int
    target_score: float
    patch_ref: str = ""

    def __post_init__(self):
        self.method = MethodName(self.method)
        if not np.all(np.isfinite(self.values)):
            raise ExplanationError(f"{self.method} produced non-finite relevance for {self.patch_ref}")


def _count(records):
    total = 0
    for record in records:
        total += 1 + sum(_count(branch) for branch in record.branches)
    return total


def _first_linear(records):
    for record in records:
        if record.kind in ("conv", "dense"):
            return record
        for branch in record.branches[:1]:
            found = _first_linear(branch)
            if found is not None:
                return found
    return None


def _tensor(t):
    return None if t is None else t.detach().to(torch.float64).clone()


def _join(prefix, name):
    return f"{prefix}.{name}" if prefix else name


def _fold_batchnorm(records):
    folded = []
    for record in records:
        if record.kind != "batchnorm":
            folded.append(record)
            continue
        if not folded or folded[-1].kind != "conv":
            raise ExplanationError(f"Batch norm {record.name} does not follow a convolution")
        conv = folded[-1].params
        p = record.params
        scale = p["weight"] / torch.sqrt(p["running_var"] + p["eps"])
        bias = conv["bias"] if conv["bias"] is not None else torch.zeros_like(p["running_mean"])
        conv["weight"] = conv["weight"] * scale.view(-1, 1, 1, 1)
        conv["bias"] = (bias - p["running_mean"]) * scale + p["bias"]
    return folded


def _compile(module, name=""):
    if isinstance(module, nn.Sequential):
        records = []
        for child_name, child in module.named_children():
            records.extend(_compile(child, _join(name, child_name)))
        return _fold_batchnorm(records)
    if isinstance(module, (Bottleneck, BasicBlock)):
        parts = ["conv1", "bn1", "relu", "conv2", "bn2"]
        if isinstance(module, Bottleneck):
            parts += ["relu", "conv3", "bn3"]
        main = []
        for part in parts:
            main.extend(_compile(getattr(module, part), _join(name, part)))
        shortcut = [] if module.downsample is None else _compile(module.downsample, _join(name, "downsample"))
        return [
            LayerRecord("residual", name, branches=[_fold_batchnorm(main), shortcut]),
            LayerRecord("relu", _join(name, "relu")),
        ]
    if isinstance(module, nn.Conv2d):
        if module.padding_mode != "zeros" or isinstance(module.padding, str):
            raise ExplanationError(f"Convolution {name} uses unsupported padding {module.padding!r}")
        params = {
            "weight": _tensor(module.weight),
            "bias": _tensor(module.bias),
            "stride": module.stride,
            "padding": module.padding,
            "dilation": module.dilation,
            "groups": module.groups,
        }
        return [LayerRecord("conv", name, params)]
    if isinstance(module, nn.Linear):
        return [LayerRecord("dense", name, {"weight": _tensor(module.weight), "bias": _tensor(module.bias)})]
    if isinstance(module, nn.ReLU):
        return [LayerRecord("relu", name)]
    if isinstance(module, nn.MaxPool2d):
        params = {
            "kernel_size": module.kernel_size,
            "stride": module.stride,
            "padding": module.padding,
            "dilation": module.dilation,
            "ceil_mode": module.ceil_mode,
        }
        return [LayerRecord("maxpool", name, params)]
    if isinstance(module, nn.AvgPool2d):
        if module.ceil_mode or (module.padding and not module.count_include_pad):
            raise ExplanationError(f"Average pool {name} with ceil_mode or excluded padding is not supported")
        params = {"kernel_size": module.kernel_size, "stride": module.stride or module.kernel_size, "padding": module.padding}
        return [LayerRecord("avgpool", name, params)]
    if isinstance(module, nn.AdaptiveAvgPool2d):
        return [LayerRecord("adaptive_avgpool", name, {"output_size": module.output_size})]
    if isinstance(module, nn.Flatten):
        if module.start_dim != 1 or module.end_dim != -1:
            raise ExplanationError(f"Flatten {name} must flatten all but the batch dimension")
        return [LayerRecord("flatten", name)]
    if isinstance(module, nn.BatchNorm2d):
        params = {
            "weight": _tensor(module.weight),
            "bias": _tensor(module.bias),
            "running_mean": _tensor(module.running_mean),
            "running_var": _tensor(module.running_var),
            "eps": module.eps,
        }
        return [LayerRecord("batchnorm", name, params)]
    if isinstance(module, (nn.Dropout, nn.Identity)):
        return []
    raise ExplanationError(f"Unsupported layer {name or '<root>'} ({type(module).__name__})")


def _pair(value):
    return (value, value) if isinstance(value, int) else tuple(value)


def _as_pool_conv(record, x):
    """Rewrites an average pool as a depthwise convolution with constant weights."""
    channels, height, width = x.shape[1:]
    if record.kind == "avgpool":
        kernel = _pair(record.params["kernel_size"])
        stride = _pair(record.params["stride"])
        padding = _pair(record.params["padding"])
    else:
        out_h, out_w = _pair(record.params["output_size"])
        out_h, out_w = out_h or height, out_w or width
        if height % out_h or width % out_w:
            raise ExplanationError(f"Adaptive pool {record.name} does not tile a {height}x{width} input")
        kernel = stride = (height // out_h, width // out_w)
        padding = (0, 0)
    weight = torch.full((channels, 1, *kernel), 1.0 / (kernel[0] * kernel[1]), dtype=torch.float64)
    record.kind = "pool"
    record.params = {
        "weight": weight,
        "bias": None,
        "stride": stride,
        "padding": padding,
        "dilation": (1, 1),
        "groups": channels,
    }


def _linear_forward(record, x, weight, bias):
    p = record.params
    if record.kind == "dense":
        return F.linear(x, weight, bias)
    return F.conv2d(x, weight, bias, p["stride"], p["padding"], p["dilation"], p["groups"])


def _linear_backward(record, signal, weight):
    p = record.params
    if record.kind == "dense":
        return signal @ weight
    return torch.nn.grad.conv2d_input(
        record.input.shape, weight, signal, p["stride"], p["padding"], p["dilation"], p["groups"]
    )


def _apply(record, x, keep):
    if record.kind in ("avgpool", "adaptive_avgpool"):
        _as_pool_conv(record, x)
    p = record.params
    if record.kind in _LINEAR_KINDS:
        return _linear_forward(record, x, p["weight"], p["bias"])
    if record.kind == "relu":
        return F.relu(x)
    if record.kind == "maxpool":
        out, indices = F.max_pool2d(
            x, p["kernel_size"], p["stride"], p["padding"], p["dilation"], p["ceil_mode"], return_indices=True
        )
        if keep:
            p["indices"] = indices
        return out
    if record.kind == "flatten":
        return x.flatten(1)
    if record.kind == "residual":
        main = _run(record.branches[0], x, keep)
        shortcut = _run(record.branches[1], x, keep)
        if keep:
            p["branch_outputs"] = (main, shortcut)
        return main + shortcut
    raise ExplanationError(f"Unsupported layer {record.name} ({record.kind})")


def _run(records, x, keep=True):
    for layer in records:
        out = _apply(layer, x, keep)
        if keep:
            layer.input, layer.output = x, out
        x = out
    return x


def _module_of(model):
    return model.model if hasattr(model, "model") else model


def _to_input(data):
    """Returns (1 x ... input tensor, function mapping an input-shaped tensor back to data layout, ref)."""
    if isinstance(data, Patch):
        tensor = torch.from_numpy(np.asarray(data.data, dtype=np.float64)).permute(2, 0, 1).unsqueeze(0)
        return tensor, lambda t: t[0].permute(1, 2, 0).numpy(), data.patch_id
    array = np.asarray(data, dtype=np.float64)
    return torch.from_numpy(array).unsqueeze(0), lambda t: t[0].numpy(), "array"


def record_forward(model, data):
    """
    Runs the model once in float64 and records every layer's input and output.

    Batch norm is folded into the preceding convolution and average pools are
    recorded as depthwise convolutions, so the trace holds only conv, dense,
    pool, relu, maxpool, flatten and residual records.

    Returns:
        tuple: (ClassScores, ActivationTrace)

    Raises:
        ExplanationError: For layers the traversal does not support, or a
            channel count the model does not accept.
    """
    module = _module_of(model)
    records = _compile(module)
    x, _, ref = _to_input(data)
    first = _first_linear(records)
    if first is not None:
        expected = first.params["weight"].shape[1] * (first.params.get("groups") or 1)
        if x.dim() == 4 and first.kind == "conv" and x.shape[1] != expected:
            raise ExplanationError(f"Input {ref} has {x.shape[1]} channels, model expects {expected}")
    try:
        with torch.no_grad():
            output = _run(records, x)
    except RuntimeError as e:
        raise ExplanationError(f"Forward pass failed for {ref}: {e}") from e
    return scores_from_logits(output[0].numpy()), ActivationTrace(input=x, layers=records, output=output)


def _target(trace, target_class):
    n_outputs = trace.output.shape[1]
    if target_class is None:
        return int(torch.argmax(trace.output[0]))
    if not 0 <= int(target_class) < n_outputs:
        raise ExplanationError(f"Target class {target_class} outside [0, {n_outputs})")
    return int(target_class)


def _relu_backward(record, signal, mode):
    if mode == "gradients":
        return signal * (record.input > 0)
    if mode == "deconvnet":
        return signal.clamp(min=0)
    return signal * (record.input > 0) * (signal > 0)


def _gradient_backward(records, signal, mode):
    for record in reversed(records):
        if record.kind in _LINEAR_KINDS:
            signal = _linear_backward(record, signal, record.params["weight"])
        elif record.kind == "relu":
            signal = _relu_backward(record, signal, mode)
        elif record.kind == "maxpool":
            signal = _unpool(record, signal)
        elif record.kind == "flatten":
            signal = signal.reshape(record.input.shape)
        elif record.kind == "residual":
            main, shortcut = record.branches
            signal = _gradient_backward(main, signal, mode) + _gradient_backward(shortcut, signal, mode)
    return signal


def _unpool(record, signal):
    """Sends every output value back to the input position its max came from."""
    batch, channels = record.input.shape[:2]
    routed = torch.zeros(batch, channels, record.input[0, 0].numel(), dtype=signal.dtype)
    routed.scatter_add_(2, record.params["indices"].reshape(batch, channels, -1), signal.reshape(batch, channels, -1))
    return routed.reshape(record.input.shape)


def _one_hot(trace, target):
    signal = torch.zeros_like(trace.output)
    signal[0, target] = 1.0
    return signal


def _backward_map(model, data, target_class, mode, method):
    _, trace = record_forward(model, data)
    target = _target(trace, target_class)
    _, to_layout, ref = _to_input(data)
    grad = _gradient_backward(trace.layers, _one_hot(trace, target), mode)
    values = to_layout(grad)
    if method is MethodName.INPUT_TIMES_GRADIENT:
        values = values * to_layout(trace.input)
    return RelevanceMap(method, values, target, float(trace.output[0, target]), ref)


def gradient_map(model, data, target_class=None):
    """Exact derivative of the target logit with respect to every input element."""
    return _backward_map(model, data, target_class, "gradients", MethodName.GRADIENTS)


def deconvnet_map(model, data, target_class=None):
    return _backward_map(model, data, target_class, "deconvnet", MethodName.DECONVNET)


def guided_backprop_map(model, data, target_class=None):
    return _backward_map(model, data, target_class, "guided", MethodName.GUIDED_BACKPROP)


def input_times_gradient_map(model, data, target_class=None):
    return _backward_map(model, data, target_class, "gradients", MethodName.INPUT_TIMES_GRADIENT)


def _stabilize(z, eps):
    return z + eps * torch.where(z >= 0, torch.ones_like(z), -torch.ones_like(z))


def _safe(z, eps):
    # Only exact zeros are shifted; every other denominator is used as is.
    return torch.where(z == 0, torch.full_like(z, eps), z)


def _lrp_linear(record, relevance, rule, stabilizer):
    x = record.input
    w = record.params["weight"]
    b = record.params["bias"]

    def forward(inputs, weight, bias=None):
        return _linear_forward(record, inputs, weight, bias)

    def backward(signal, weight):
        return _linear_backward(record, signal, weight)

    if rule.kind == "epsilon":
        s = relevance / _stabilize(forward(x, w, b), rule.epsilon)
        return x * backward(s, w)
    if rule.kind == "z":
        s = relevance / _safe(forward(x, w, b), stabilizer)
        return x * backward(s, w)
    if rule.kind == "flat":
        ones = torch.ones_like(w)
        s = relevance / _safe(forward(torch.ones_like(x), ones), stabilizer)
        return backward(s, ones)
    if rule.kind == "zplus":
        positive = w.clamp(min=0)
        s = relevance / _safe(forward(x, positive), stabilizer)
        return x * backward(s, positive)
    if rule.kind == "zbox":
        lo = torch.full_like(x, rule.lo)
        hi = torch.full_like(x, rule.hi)
        positive, negative = w.clamp(min=0), w.clamp(max=0)
        z = forward(x, w) - forward(lo, positive) - forward(hi, negative)
        s = relevance / _safe(z, stabilizer)
        return x * backward(s, w) - lo * backward(s, positive) - hi * backward(s, negative)

    x_pos, x_neg = x.clamp(min=0), x.clamp(max=0)
    w_pos, w_neg = w.clamp(min=0), w.clamp(max=0)

    def part(x1, w1, x2, w2, bias):
        z = forward(x1, w1, bias) + forward(x2, w2)
        s = relevance / _safe(z, stabilizer)
        return x1 * backward(s, w1) + x2 * backward(s, w2)

    result = rule.alpha * part(x_pos, w_pos, x_neg, w_neg, None if b is None else b.clamp(min=0))
    if rule.beta:
        result = result - rule.beta * part(x_pos, w_neg, x_neg, w_pos, None if b is None else b.clamp(max=0))
    return result


def _lrp_backward(records, relevance, rules, first):
    for record in reversed(records):
        if record.kind == "pool":
            relevance = _lrp_linear(record, relevance, Rule.z(), rules.stabilizer)
        elif record.kind in ("conv", "dense"):
            relevance = _lrp_linear(record, relevance, rules.rule_for(record, record is first), rules.stabilizer)
        elif record.kind == "maxpool":
            relevance = _unpool(record, relevance)
        elif record.kind == "flatten":
            relevance = relevance.reshape(record.input.shape)
        elif record.kind == "residual":
            main, shortcut = record.params["branch_outputs"]
            total = _safe(main + shortcut, rules.stabilizer)
            relevance = _lrp_backward(record.branches[0], relevance * main / total, rules, first) + _lrp_backward(
                record.branches[1], relevance * shortcut / total, rules, first
            )
    return relevance


def lrp_map(model, data, target_class=None, rules=None, method=MethodName.LRP_Z):
    """
    Layer-wise relevance propagation from the target logit down to the input.

    Relevance starts as the target logit on its output unit. Conv and dense
    layers apply their configured rule, pools the stabilized z-rule, max pools
    route to the winning input, ReLUs pass relevance through and residual
    additions split it in proportion to each branch's contribution. Biases
    keep the relevance they receive.
    """
    rules = rules or LrpRuleConfig(dense=Rule.z(), conv=Rule.z())
    _, trace = record_forward(model, data)
    target = _target(trace, target_class)
    _, to_layout, ref = _to_input(data)
    score = float(trace.output[0, target])
    relevance = _lrp_backward(trace.layers, _one_hot(trace, target) * score, rules, trace.first_linear())
    return RelevanceMap(method, to_layout(relevance), target, score, ref)


def deep_taylor_map(model, data, target_class=None, lo=0.0, hi=1.0):
    """z+ decomposition on hidden layers and the box rule on the input layer; inputs must lie in [lo, hi]."""
    x, _, ref = _to_input(data)
    if float(x.min()) < lo:
        raise ExplanationError(
            f"Deep Taylor needs inputs >= {lo} but {ref} has minimum {float(x.min()):.4g}; "
            "normalize with unit_max or percentile_clip first"
        )
    return lrp_map(model, data, target_class, deep_taylor_rules(lo, hi), MethodName.DEEP_TAYLOR)


def conservation_residual(relevance_map):
    score = relevance_map.target_score
    return abs(float(relevance_map.values.sum()) - score) / max(abs(score), 1e-12)


def explain(model, data, method, target_class=None, epsilon=DEFAULT_EPSILON):
    """Dispatches to one of the nine methods; LRP presets use their named rule sets."""
    method = MethodName(method)
    if method is MethodName.GRADIENTS:
        return gradient_map(model, data, target_class)
    if method is MethodName.DECONVNET:
        return deconvnet_map(model, data, target_class)
    if method is MethodName.GUIDED_BACKPROP:
        return guided_backprop_map(model, data, target_class)
    if method is MethodName.INPUT_TIMES_GRADIENT:
        return input_times_gradient_map(model, data, target_class)
    if method is MethodName.DEEP_TAYLOR:
        return deep_taylor_map(model, data, target_class)
    if method is MethodName.LRP_EPSILON:
        rules = LrpRuleConfig(dense=Rule.eps(epsilon), conv=Rule.eps(epsilon))
    elif method is MethodName.LRP_Z:
        rules = LrpRuleConfig(dense=Rule.z(), conv=Rule.z())
    elif method is MethodName.LRP_PRESET_A_FLAT:
        rules = preset_rules("a_flat")
    else:
        rules = preset_rules("b_flat")
    return lrp_map(model, data, target_class, rules, method)


def finite_difference_gradient(model, data, target_class, step=1e-3, sample=None, seed=0):
    """
    Central differences of the target logit, in float64.

    With `sample`, only that many randomly chosen input elements are
    estimated and the rest are NaN.
    """
    module = copy.deepcopy(_module_of(model)).double().eval()
    x, to_layout, _ = _to_input(data)
    flat = x.reshape(-1)
    positions = np.arange(flat.numel())
    if sample is not None and sample < positions.size:
        positions = np.sort(np.random.default_rng(seed).choice(positions, size=sample, replace=False))
    estimate = torch.full_like(flat, float("nan"))
    with torch.no_grad():
        for i in positions:
            shifted = flat.clone()
            shifted[i] += step
            up = module(shifted.reshape(x.shape))[0, target_class]
            shifted[i] -= 2 * step
            down = module(shifted.reshape(x.shape))[0, target_class]
            estimate[i] = (up - down) / (2 * step)
    return to_layout(estimate.reshape(x.shape))


def save_relevance_map(relevance_map, directory, stem, model_checksum=None):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    np.save(directory / f"{stem}.npy", relevance_map.values.astype(np.float32))
    record = {
        "method": relevance_map.method.value,
        "target_class": relevance_map.target_class,
        "target_score": relevance_map.target_score,
        "model_checksum": model_checksum,
        "patch_ref": relevance_map.patch_ref,
        "shape": list(relevance_map.values.shape),
    }
    with open(directory / f"{stem}.yaml", "w", encoding="utf-8") as f:
        yaml.safe_dump(record, f, sort_keys=False)
    return directory / f"{stem}.npy"


def load_relevance_map(directory, stem):
    directory = Path(directory)
    with open(directory / f"{stem}.yaml", encoding="utf-8") as f:
        record = yaml.safe_load(f)
    return RelevanceMap(
        method=record["method"],
        values=np.load(directory / f"{stem}.npy").astype(np.float64),
        target_class=record["target_class"],
        target_score=record["target_score"],
        patch_ref=record["patch_ref"],
    )
