"""The eight-layer strided 1-D conv net: conv -> activation -> batchnorm, x8, then dense."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from ..errors import MissingCache, ShapeMismatch, UnsupportedLeadCount
from . import layers


@dataclass(frozen=True)
class Architecture:
    num_leads: int
    channels: int = 32
    kernel: int = 3
    stride: int = 2
    num_layers: int = 8
    input_len: int = 10_000
    activation: str = "relu"
    num_classes: int = 2
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def lengths(self) -> list[int]:
        """Sequence length after each conv layer (input first)."""
        out = [self.input_len]
        for _ in range(self.num_layers):
            out.append(layers.conv_out_len(out[-1], self.stride))
        return out

    @property
    def flatten_dim(self) -> int:
        return self.lengths()[-1] * self.channels

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ConvLayerParams:
    weights: np.ndarray
    bias: np.ndarray
    bn_gamma: np.ndarray
    bn_beta: np.ndarray
    bn_running_mean: np.ndarray
    bn_running_var: np.ndarray


@dataclass
class ModelParams:
    arch: Architecture
    conv_layers: list[ConvLayerParams]
    dense_weights: np.ndarray
    dense_bias: np.ndarray

    LAYER_FIELDS = ("weights", "bias", "bn_gamma", "bn_beta")
    BUFFER_FIELDS = ("bn_running_mean", "bn_running_var")

    @property
    def dtype(self):
        return self.dense_weights.dtype

    def learnables(self) -> dict[str, np.ndarray]:
        """Learnable arrays in declaration order (by reference)."""
        out = {}
        for i, layer in enumerate(self.conv_layers):
            for f in self.LAYER_FIELDS:
                out[f"conv{i}.{f}"] = getattr(layer, f)
        out["dense.weights"] = self.dense_weights
        out["dense.bias"] = self.dense_bias
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        return {f"conv{i}.{f}": getattr(layer, f)
                for i, layer in enumerate(self.conv_layers) for f in self.BUFFER_FIELDS}

    def expected_shapes(self) -> dict[str, tuple[int, ...]]:
        a = self.arch
        shapes = {}
        for i in range(a.num_layers):
            cin = a.num_leads if i == 0 else a.channels
            shapes[f"conv{i}.weights"] = (a.channels, cin, a.kernel)
            for f in ("bias", "bn_gamma", "bn_beta", "bn_running_mean", "bn_running_var"):
                shapes[f"conv{i}.{f}"] = (a.channels,)
        shapes["dense.weights"] = (a.flatten_dim, a.num_classes)
        shapes["dense.bias"] = (a.num_classes,)
        return shapes

    def replace_arrays(self, arrays: dict[str, np.ndarray]) -> ModelParams:
        """New params with the named arrays swapped in (others shared)."""
        convs = []
        for i, layer in enumerate(self.conv_layers):
            kw = {f: arrays[f"conv{i}.{f}"] for f in self.LAYER_FIELDS + self.BUFFER_FIELDS
                  if f"conv{i}.{f}" in arrays}
            convs.append(replace(layer, **kw))
        return ModelParams(self.arch, convs, arrays.get("dense.weights", self.dense_weights),
                           arrays.get("dense.bias", self.dense_bias))

    def copy(self) -> ModelParams:
        return self.replace_arrays({k: v.copy() for k, v in {**self.learnables(), **self.buffers()}.items()})

    def astype(self, dtype) -> ModelParams:
        return self.replace_arrays({k: v.astype(dtype) for k, v in {**self.learnables(), **self.buffers()}.items()})

    def num_parameters(self) -> int:
        return sum(v.size for v in self.learnables().values())


def build_model(num_leads: int, rng: np.random.Generator, dtype=np.float32, **arch_overrides) -> ModelParams:
    """Fresh parameters: U(-s, s) weights with s = sqrt(2 / fan_in), zero biases, identity batchnorm."""
    if num_leads not in (1, 2, 3):
        raise UnsupportedLeadCount(f"num_leads must be 1, 2 or 3, got {num_leads}")
    arch = Architecture(num_leads=num_leads, **arch_overrides)

    def uniform(shape, fan_in):
        s = np.sqrt(2.0 / fan_in)
        return rng.uniform(-s, s, size=shape).astype(dtype)

    convs = []
    for i in range(arch.num_layers):
        cin = num_leads if i == 0 else arch.channels
        c = arch.channels
        convs.append(ConvLayerParams(
            weights=uniform((c, cin, arch.kernel), cin * arch.kernel),
            bias=np.zeros(c, dtype),
            bn_gamma=np.ones(c, dtype),
            bn_beta=np.zeros(c, dtype),
            bn_running_mean=np.zeros(c, dtype),
            bn_running_var=np.ones(c, dtype),
        ))
    dense_w = uniform((arch.flatten_dim, arch.num_classes), arch.flatten_dim)
    return ModelParams(arch, convs, dense_w, np.zeros(arch.num_classes, dtype))


@dataclass
class ForwardCache:
    layer_caches: list = field(default_factory=list)
    dense_cache: tuple | None = None
    flat_shape: tuple | None = None
    masks: list = field(default_factory=list)
    running: list = field(default_factory=list)
    train: bool = True


def model_forward(x: np.ndarray, params: ModelParams, mode: str = "eval", masks=None):
    """Logits for a [batch x leads x length] input, plus the cache.

    Never mutates ``params``. In train mode the updated batchnorm running
    statistics are returned in ``cache.running``; apply them with
    :func:`commit_running_stats`. ``masks`` pins each activation gate (for
    finite-difference checks across kinks).
    """
    arch = params.arch
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if x.ndim != 3 or x.shape[1] != arch.num_leads or x.shape[2] != arch.input_len:
        raise ShapeMismatch(f"expected [batch x {arch.num_leads} x {arch.input_len}], got {x.shape}")
    train = mode == "train"
    cache = ForwardCache(train=train)
    # channels-last from here on; flatten order is (length, channel)
    h = np.ascontiguousarray(x.transpose(0, 2, 1), dtype=params.dtype)
    for i, layer in enumerate(params.conv_layers):
        h, conv_cache = layers.conv1d_forward(h, layer.weights, layer.bias, arch.stride, channels_last=True)
        h, act_cache = layers.activation_forward(h, arch.activation, None if masks is None else masks[i])
        h, bn_cache, rm, rv = layers.batchnorm_forward(
            h, layer.bn_gamma, layer.bn_beta, layer.bn_running_mean, layer.bn_running_var,
            train, arch.bn_momentum, arch.bn_eps, channels_last=True)
        cache.layer_caches.append((conv_cache, act_cache, bn_cache))
        cache.masks.append(act_cache[0])
        cache.running.append((rm, rv))
    cache.flat_shape = h.shape
    logits, cache.dense_cache = layers.dense_forward(h.reshape(h.shape[0], -1), params.dense_weights,
                                                     params.dense_bias)
    return logits, cache


def commit_running_stats(params: ModelParams, cache: ForwardCache) -> None:
    if not cache.train:
        return
    for layer, (rm, rv) in zip(params.conv_layers, cache.running):
        layer.bn_running_mean = rm
        layer.bn_running_var = rv


def model_backward(cache: ForwardCache | None, dlogits: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of the loss for every learnable, keyed like ``ModelParams.learnables``."""
    if cache is None or not cache.train or cache.dense_cache is None:
        raise MissingCache("model_backward needs the cache of a train-mode forward pass")
    grads: dict[str, np.ndarray] = {}
    dh, grads["dense.weights"], grads["dense.bias"] = layers.dense_backward(dlogits, cache.dense_cache)
    dh = dh.reshape(cache.flat_shape)
    for i in reversed(range(len(cache.layer_caches))):
        conv_cache, act_cache, bn_cache = cache.layer_caches[i]
        dh, grads[f"conv{i}.bn_gamma"], grads[f"conv{i}.bn_beta"] = layers.batchnorm_backward(dh, bn_cache)
        dh = layers.activation_backward(dh, act_cache)
        dh, grads[f"conv{i}.weights"], grads[f"conv{i}.bias"] = layers.conv1d_backward(dh, conv_cache, need_dx=i > 0)
    n = len(cache.layer_caches)
    order = [f"conv{i}.{f}" for i in range(n) for f in ModelParams.LAYER_FIELDS] + ["dense.weights", "dense.bias"]
    return {k: grads[k] for k in order}


def predict(x: np.ndarray, params: ModelParams, batch_size: int = 32) -> np.ndarray:
    """Argmax class per window, eval mode, chunked to bound memory."""
    out = []
    for s in range(0, len(x), batch_size):
        logits, _ = model_forward(x[s:s + batch_size], params, "eval")
        out.append(np.argmax(logits, axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)
