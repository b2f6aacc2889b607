"""Forecaster architectures mapping an input window [B, m_in, 3] to a
scour-depth forecast [B, m_out], plus parameter/FLOP accounting and a
binary checkpoint format.

FLOP conventions (multiplications + additions for one forward pass,
nonlinearities and normalization excluded):

  dense in->out:      2 · in · out
  conv (stride 1):    2 · kh · kw · C_in · C_out · H_out · W_out
  LSTM, one step:     2 · 4 · h · (i + h)

so NLinear = 2·m_in·m_out; LSTM = m_in·(2·4·h·(i+h)) + 2·(m_in·h)·m_out;
CNN = conv1 + conv2 + dense over the flattened feature map.

Weights draw from uniform(±1/sqrt(fan_in)); biases start at zero;
batchnorm starts as the identity (gamma 1, beta 0, running stats 0/1).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, ShapeError, Tensor

ARCHITECTURES = ("nlinear", "lstm", "cnn")

CHECKPOINT_MAGIC = b"SCOURCAST-CKPT-1\n"


@dataclass(frozen=True)
class ModelConfig:
    architecture: str
    m_in: int = 168
    m_out: int = 168
    n_features: int = 3
    hidden: int = 128
    cnn_channels: tuple = (128, 256)
    cnn_kernel: int = 5
    cnn_padding: int = 2

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.architecture!r}")
        if self.m_in <= 0 or self.m_out <= 0 or self.n_features < 1:
            raise ValueError("m_in, m_out must be positive and n_features >= 1")


class Forecaster:
    """Base class: a named parameter registry plus a train/eval switch."""

    def __init__(self, config):
        self.config = config
        self.params = {}
        self.training = True

    def _add(self, name, array, trainable=True):
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        tensor = Tensor(np.asarray(array, dtype=np.float64),
                        requires_grad=trainable)
        self.params[name] = Parameter(name, tensor, trainable)
        return tensor

    def parameters(self, trainable_only=True):
        return [p for p in self.params.values()
                if p.trainable or not trainable_only]

    def train(self, mode=True):
        self.training = mode
        return self

    def eval(self):
        return self.train(False)

    def state_copy(self):
        return {name: p.tensor.data.copy() for name, p in self.params.items()}

    def load_state(self, state):
        for name, values in state.items():
            self.params[name].tensor.data = values.copy()

    def _check_input(self, x):
        cfg = self.config
        if x.ndim != 3 or x.shape[1] != cfg.m_in or x.shape[2] != cfg.n_features:
            raise ShapeError(cfg.architecture,
                             f"expected [B, {cfg.m_in}, {cfg.n_features}], "
                             f"got {tuple(x.shape)}")

    def forward(self, x):
        raise NotImplementedError

    def __call__(self, x):
        return self.forward(x)


def _uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class NLinearForecaster(Forecaster):
    """One dense layer over a last-value-centered input window.

    The scour channel is recentered on its final input value, mapped
    m_in -> m_out by a single dense layer, and the final value is added
    back, which makes the output translation-equivariant in that channel.
    The dense map is shared across channels; since only the scour channel
    is emitted, only that channel is computed.
    """

    def __init__(self, config, rng):
        super().__init__(config)
        self.w = self._add("dense.weight",
                           _uniform(rng, config.m_in, (config.m_in, config.m_out)))
        self.b = self._add("dense.bias", np.zeros(config.m_out))

    def forward(self, x):
        self._check_input(x)
        x = x if isinstance(x, Tensor) else Tensor(x)
        scour = x[:, :, 0]
        last = scour[:, self.config.m_in - 1:self.config.m_in]
        centered = scour - last
        return ad.affine(centered, self.w, self.b) + last


class LSTMForecaster(Forecaster):
    """Single-layer LSTM with a dense head on the full hidden sequence.

    Packed gate weights use the (input, forget, cell, output) layout along
    the last axis; both input-to-hidden and hidden-to-hidden paths carry
    their own bias vector. Initial hidden and cell states are zero. Hidden
    states from all m_in steps are concatenated and mapped to m_out by a
    linear dense layer.
    """

    def __init__(self, config, rng):
        super().__init__(config)
        h, f = config.hidden, config.n_features
        self.w_ih = self._add("lstm.weight_ih", _uniform(rng, f, (f, 4 * h)))
        self.w_hh = self._add("lstm.weight_hh", _uniform(rng, h, (h, 4 * h)))
        self.b_ih = self._add("lstm.bias_ih", np.zeros(4 * h))
        self.b_hh = self._add("lstm.bias_hh", np.zeros(4 * h))
        self.head_w = self._add("head.weight",
                                _uniform(rng, config.m_in * h,
                                         (config.m_in * h, config.m_out)))
        self.head_b = self._add("head.bias", np.zeros(config.m_out))

    def forward(self, x):
        self._check_input(x)
        x = x if isinstance(x, Tensor) else Tensor(x)
        batch = x.shape[0]
        h_size = self.config.hidden
        h = Tensor(np.zeros((batch, h_size)))
        c = Tensor(np.zeros((batch, h_size)))
        states = []
        for t in range(self.config.m_in):
            xt = x[:, t, :]
            z = ad.affine(xt, self.w_ih, self.b_ih) + ad.affine(h, self.w_hh,
                                                                self.b_hh)
            gi = ad.sigmoid(z[:, 0:h_size])
            gf = ad.sigmoid(z[:, h_size:2 * h_size])
            gc = ad.tanh(z[:, 2 * h_size:3 * h_size])
            go = ad.sigmoid(z[:, 3 * h_size:4 * h_size])
            c = gf * c + gi * gc
            h = go * ad.tanh(c)
            states.append(h)
        seq = ad.concat(states, axis=1)
        return ad.affine(seq, self.head_w, self.head_b)


class CNNForecaster(Forecaster):
    """Two 2-D conv layers over the window treated as a 1-channel image.

    [B, m_in, F] -> [B, 1, m_in, F] -> conv -> batchnorm -> relu, twice,
    then flatten and a dense head. Kernel/padding keep the spatial size.
    """

    def __init__(self, config, rng):
        super().__init__(config)
        c1, c2 = config.cnn_channels
        k = config.cnn_kernel
        self.conv1_w = self._add("conv1.weight", _uniform(rng, k * k, (c1, 1, k, k)))
        self.conv1_b = self._add("conv1.bias", np.zeros(c1))
        self.bn1_gamma = self._add("bn1.gamma", np.ones(c1))
        self.bn1_beta = self._add("bn1.beta", np.zeros(c1))
        self.bn1_mean = self._add("bn1.running_mean", np.zeros(c1), trainable=False)
        self.bn1_var = self._add("bn1.running_var", np.ones(c1), trainable=False)
        self.conv2_w = self._add("conv2.weight",
                                 _uniform(rng, c1 * k * k, (c2, c1, k, k)))
        self.conv2_b = self._add("conv2.bias", np.zeros(c2))
        self.bn2_gamma = self._add("bn2.gamma", np.ones(c2))
        self.bn2_beta = self._add("bn2.beta", np.zeros(c2))
        self.bn2_mean = self._add("bn2.running_mean", np.zeros(c2), trainable=False)
        self.bn2_var = self._add("bn2.running_var", np.ones(c2), trainable=False)
        flat = c2 * config.m_in * config.n_features
        self.head_w = self._add("head.weight",
                                _uniform(rng, flat, (flat, config.m_out)))
        self.head_b = self._add("head.bias", np.zeros(config.m_out))

    def forward(self, x):
        self._check_input(x)
        x = x if isinstance(x, Tensor) else Tensor(x)
        cfg = self.config
        batch = x.shape[0]
        img = ad.reshape(x, (batch, 1, cfg.m_in, cfg.n_features))
        y = ad.conv2d(img, self.conv1_w, self.conv1_b, padding=cfg.cnn_padding)
        y = ad.batchnorm(y, self.bn1_gamma, self.bn1_beta,
                         self.bn1_mean.data, self.bn1_var.data, self.training)
        y = ad.relu(y)
        y = ad.conv2d(y, self.conv2_w, self.conv2_b, padding=cfg.cnn_padding)
        y = ad.batchnorm(y, self.bn2_gamma, self.bn2_beta,
                         self.bn2_mean.data, self.bn2_var.data, self.training)
        y = ad.relu(y)
        flat = ad.reshape(y, (batch, cfg.cnn_channels[1] * cfg.m_in * cfg.n_features))
        return ad.affine(flat, self.head_w, self.head_b)


_CLASSES = {"nlinear": NLinearForecaster, "lstm": LSTMForecaster,
            "cnn": CNNForecaster}


def build_forecaster(config, seed=0):
    """Instantiate a forecaster with deterministic seeded initialization."""
    rng = np.random.default_rng(seed) if not isinstance(seed, np.random.Generator) \
        else seed
    return _CLASSES[config.architecture](config, rng)


def count_parameters(model):
    """Total count of trainable scalar values."""
    return sum(p.tensor.data.size for p in model.params.values() if p.trainable)


def lstm_core_parameters(config):
    """Trainable values in the recurrent core (gates and both bias sets)."""
    h, f = config.hidden, config.n_features
    return 4 * h * f + 4 * h * h + 2 * 4 * h


def lstm_step_flops(config):
    """One recurrence step: 2·4·h·(i+h)."""
    h, f = config.hidden, config.n_features
    return 2 * 4 * h * (f + h)


def estimate_flops(model):
    """Forward-pass multiply+add count per the module's documented formulas."""
    cfg = model.config
    if cfg.architecture == "nlinear":
        return 2 * cfg.m_in * cfg.m_out
    if cfg.architecture == "lstm":
        return cfg.m_in * lstm_step_flops(cfg) + 2 * (cfg.m_in * cfg.hidden) * cfg.m_out
    c1, c2 = cfg.cnn_channels
    k = cfg.cnn_kernel
    spatial = cfg.m_in * cfg.n_features  # padding preserves the map size
    conv1 = 2 * k * k * 1 * c1 * spatial
    conv2 = 2 * k * k * c1 * c2 * spatial
    dense = 2 * (c2 * spatial) * cfg.m_out
    return conv1 + conv2 + dense


def save_checkpoint(path, model, extras=None):
    """Write a self-describing binary checkpoint.

    Layout: magic line, little-endian uint64 header length, JSON header
    (architecture, config, named block table, extras), then the parameter
    blocks as raw little-endian float64 in header order. Round trips are
    bit-exact.
    """
    names = list(model.params.keys())
    header = {
        "architecture": model.config.architecture,
        "config": asdict(model.config),
        "blocks": [{"name": n,
                    "shape": list(model.params[n].tensor.data.shape),
                    "trainable": model.params[n].trainable}
                   for n in names],
        "extras": extras or {},
    }
    payload = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(payload)))
        fh.write(payload)
        for n in names:
            fh.write(np.ascontiguousarray(
                model.params[n].tensor.data, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Rebuild (model, extras) from a checkpoint file."""
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode())
        cfg_fields = dict(header["config"])
        cfg_fields["cnn_channels"] = tuple(cfg_fields["cnn_channels"])
        config = ModelConfig(**cfg_fields)
        model = build_forecaster(config, seed=0)
        for block in header["blocks"]:
            shape = tuple(block["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(8 * count)
            values = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
            model.params[block["name"]].tensor.data = values
    return model, header["extras"]
