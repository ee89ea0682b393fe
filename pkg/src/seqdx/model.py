"""Many-to-one CNN-LSTM classifier.

An image encoder maps each image to a feature vector, an LSTM folds the
features of one patient's images into a hidden state, and a linear head with
independent sigmoids turns the hidden state into disease probabilities.  A
probability vector is produced after every image; only the last one is the
patient-level prediction.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .layers import (Conv2dLayer, LinearLayer, LstmParams, LstmState,
                     lstm_cell_step, maxpool2d)
from .tensor import ShapeError, Tensor, linear, relu, reshape, sigmoid


class ConfigError(ValueError):
    pass


class EmptySequenceError(ValueError):
    pass


@dataclass
class ModelConfig:
    image_size: int = 32
    encoder_channels: list = field(default_factory=lambda: [8, 16, 32])
    fc_sizes: list = field(default_factory=lambda: [512, 512])
    lstm_hidden: int = 600
    num_outputs: int = 1
    freeze_first_n: int = 0

    def validate(self):
        if self.num_outputs not in (1, 5):
            raise ConfigError(f"num_outputs must be 1 or 5, got {self.num_outputs}")
        if self.image_size < 1 or self.lstm_hidden < 1:
            raise ConfigError("image_size and lstm_hidden must be positive")
        if not self.fc_sizes or any(s < 1 for s in self.fc_sizes):
            raise ConfigError("fc_sizes needs at least one positive width")
        if any(c < 1 for c in self.encoder_channels):
            raise ConfigError("encoder channel counts must be positive")
        stride = 2 ** len(self.encoder_channels)
        if self.image_size % stride:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by 2^{len(self.encoder_channels)}")
        n_layers = len(self.encoder_channels) + len(self.fc_sizes)
        if not 0 <= self.freeze_first_n <= n_layers:
            raise ConfigError(f"freeze_first_n must lie in [0, {n_layers}]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: (list(v) if isinstance(v, (list, tuple)) else v) for k, v in d.items()})

    @property
    def feature_size(self) -> int:
        return self.fc_sizes[-1]


@dataclass
class SequencePrediction:
    per_step_probs: list
    final_probs: Tensor
    hidden: list  # LSTM hidden state after each image


class Model:
    def __init__(self, config: ModelConfig, convs, fcs, lstm: LstmParams, head: LinearLayer):
        self.config = config
        self.convs = list(convs)
        self.fcs = list(fcs)
        self.lstm = lstm
        self.head = head

    @property
    def encoder_layers(self) -> list:
        return self.convs + self.fcs

    def named_parameters(self) -> dict:
        out = {}
        for i, layer in enumerate(self.convs):
            out[f"encoder.conv{i}.weight"] = layer.weight
            out[f"encoder.conv{i}.bias"] = layer.bias
        for i, layer in enumerate(self.fcs):
            out[f"encoder.fc{i}.weight"] = layer.weight
            out[f"encoder.fc{i}.bias"] = layer.bias
        for name, p in self.lstm.parameters().items():
            out[f"lstm.{name}"] = p
        out["head.weight"] = self.head.weight
        out["head.bias"] = self.head.bias
        return out

    def trainable_parameters(self) -> dict:
        return {k: p for k, p in self.named_parameters().items() if p.requires_grad}

    def zero_grad(self):
        for p in self.named_parameters().values():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.named_parameters().values())

    def apply_freezing(self):
        for i, layer in enumerate(self.encoder_layers):
            layer.frozen = i < self.config.freeze_first_n


def layer_shapes(config: ModelConfig) -> dict:
    """Parameter shapes implied by ``config``, in the order of ``named_parameters``."""
    shapes = {}
    in_ch = 3
    for i, ch in enumerate(config.encoder_channels):
        shapes[f"encoder.conv{i}.weight"] = (ch, in_ch, 3, 3)
        shapes[f"encoder.conv{i}.bias"] = (ch,)
        in_ch = ch
    side = config.image_size // 2 ** len(config.encoder_channels)
    width = in_ch * side * side
    for i, out in enumerate(config.fc_sizes):
        shapes[f"encoder.fc{i}.weight"] = (out, width)
        shapes[f"encoder.fc{i}.bias"] = (out,)
        width = out
    H, D = config.lstm_hidden, config.feature_size
    for k in "ifog":
        shapes[f"lstm.W_{k}"] = (H, D)
        shapes[f"lstm.U_{k}"] = (H, H)
        shapes[f"lstm.b_{k}"] = (H,)
    shapes["head.weight"] = (config.num_outputs, H)
    shapes["head.bias"] = (config.num_outputs,)
    return shapes


def init_model(config: ModelConfig, seed: int = 0) -> Model:
    config.validate()
    rng = np.random.default_rng(seed)
    convs = []
    in_ch = 3
    for ch in config.encoder_channels:
        convs.append(Conv2dLayer.init(in_ch, ch, kernel=3, stride=1, padding=1, rng=rng))
        in_ch = ch
    side = config.image_size // 2 ** len(config.encoder_channels)
    width = in_ch * side * side
    fcs = []
    for out in config.fc_sizes:
        fcs.append(LinearLayer.init(width, out, rng=rng))
        width = out
    lstm = LstmParams.init(width, config.lstm_hidden, rng=rng)
    bound = 1.0 / np.sqrt(config.lstm_hidden)
    head = LinearLayer(Tensor(rng.uniform(-bound, bound, (config.num_outputs, config.lstm_hidden))),
                       Tensor(np.zeros(config.num_outputs)))
    model = Model(config, convs, fcs, lstm, head)
    model.apply_freezing()
    return model


def encode_image(model: Model, image: Tensor) -> Tensor:
    """Feature vector [fc_last] of one [3, s, s] image."""
    s = model.config.image_size
    if image.shape != (3, s, s):
        raise ShapeError(f"image must be [3,{s},{s}], got {list(image.shape)}")
    x = image
    for conv in model.convs:
        x = maxpool2d(relu(conv(x)), 2)
    x = reshape(x, (-1,))
    last = len(model.fcs) - 1
    for i, fc in enumerate(model.fcs):
        x = fc(x)
        if i < last:
            x = relu(x)
    return x


def head_probs(model: Model, h: Tensor) -> Tensor:
    return sigmoid(linear(h, model.head.weight, model.head.bias))


def forward_sequence(model: Model, images) -> SequencePrediction:
    """Run one patient's images through encoder, LSTM and head, one image per step.

    Images are encoded one at a time on purpose: batched BLAS products round
    differently depending on the number of rows, which would make step t's
    output depend on how many images follow it.
    """
    images = list(images)
    if not images:
        raise EmptySequenceError("a patient needs at least one image")
    state = LstmState.zeros(model.config.lstm_hidden)
    probs, hidden = [], []
    for image in images:
        state = lstm_cell_step(model.lstm, encode_image(model, image), state)
        hidden.append(state.h)
        probs.append(head_probs(model, state.h))
    return SequencePrediction(per_step_probs=probs, final_probs=probs[-1], hidden=hidden)
