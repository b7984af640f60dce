from collections import OrderedDict

import numpy as np

from app.errors import TensorError
from app.tensornet import functional as F
from app.tensornet.tensor import Parameter, Tensor


def kaiming_uniform(shape, fan_in, rng):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def row_coordinates(shape):
    """Constant (N, 1, H, W) map of row positions in [-1, 1]."""
    n, _, height, width = shape
    rows = np.linspace(-1.0, 1.0, height)[None, None, :, None]
    return Tensor(np.broadcast_to(rows, (n, 1, height, width)))


class Module:
    """Base class for layers; parameters and buffers are discovered from attributes."""

    _buffers = ()

    def __init__(self):
        self.training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def children(self):
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value

    def named_parameters(self, prefix=''):
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield f'{prefix}{name}', value
            elif isinstance(value, Module):
                yield from value.named_parameters(f'{prefix}{name}.')

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=''):
        for name in self._buffers:
            yield f'{prefix}{name}', getattr(self, name)
        for name, child in self.children():
            yield from child.named_buffers(f'{prefix}{name}.')

    def train(self, mode=True):
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self):
        state = OrderedDict((name, p.data.copy()) for name, p in self.named_parameters())
        state.update((name, b.copy()) for name, b in self.named_buffers())
        return state

    def load_state_dict(self, state):
        targets = OrderedDict(self.named_parameters())
        buffers = OrderedDict(self.named_buffers())
        missing = [name for name in list(targets) + list(buffers) if name not in state]
        if missing:
            raise TensorError(f"checkpoint lacks entries: {missing}")
        for name, param in targets.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != param.shape:
                raise TensorError(f"shape mismatch for {name}: checkpoint {value.shape}, model {param.shape}")
            param.data = value.copy()
            param.zero_grad()
            param.velocity = np.zeros_like(param.data)
        for name, buffer in buffers.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != buffer.shape:
                raise TensorError(f"shape mismatch for {name}: checkpoint {value.shape}, model {buffer.shape}")
            buffer[...] = value


class Conv2d(Module):
    def __init__(self, in_channels, out_channels, kernel_size, rng, stride=1, pad=0):
        super().__init__()
        fan_in = in_channels * kernel_size * kernel_size
        self.weight = Parameter(kaiming_uniform((out_channels, in_channels, kernel_size, kernel_size), fan_in, rng))
        self.bias = Parameter(np.zeros(out_channels))
        self.stride = stride
        self.pad = pad

    def forward(self, x):
        return F.conv2d(x, self.weight, self.bias, stride=self.stride, pad=self.pad)


class BatchNorm2d(Module):
    _buffers = ('running_mean', 'running_var')

    def __init__(self, channels, momentum=F.BN_MOMENTUM, eps=F.BN_EPSILON):
        super().__init__()
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum
        self.eps = eps

    def forward(self, x):
        return F.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                            self.training, momentum=self.momentum, eps=self.eps)


class Linear(Module):
    def __init__(self, in_features, out_features, rng):
        super().__init__()
        self.weight = Parameter(kaiming_uniform((out_features, in_features), in_features, rng))
        self.bias = Parameter(np.zeros(out_features))

    def forward(self, x):
        return F.linear(x, self.weight, self.bias)


class SEBlock(Module):
    """Channel attention with a bottleneck of channels // reduction."""

    def __init__(self, channels, reduction, rng):
        super().__init__()
        if reduction < 1 or channels % reduction:
            raise TensorError(f"{channels} channels are not divisible by reduction {reduction}")
        self.reduction = reduction
        self.squeeze = Linear(channels, channels // reduction, rng)
        self.excite = Linear(channels // reduction, channels, rng)

    def forward(self, x):
        return F.se_block(x, self.squeeze.weight, self.squeeze.bias,
                          self.excite.weight, self.excite.bias, self.reduction)


class ConvBlock(Module):
    """conv -> batch norm, optionally followed by ReLU."""

    def __init__(self, in_channels, out_channels, rng, stride=1, activate=True):
        super().__init__()
        pad = (0, 1) if stride == 2 else 1
        self.conv = Conv2d(in_channels, out_channels, 3, rng, stride=stride, pad=pad)
        self.bn = BatchNorm2d(out_channels)
        self.activate = activate

    def forward(self, x):
        out = self.bn(self.conv(x))
        return out.relu() if self.activate else out


class MiniExtractor(Module):
    """Small convolutional classifier; the body yields feature maps, the head class logits.

    With `row_channel` a fixed map running from -1 on the top row to 1 on
    the bottom row is appended to the input, so pooled features still know
    at which height a pattern sits.
    """

    FEATURE_CHANNELS = 64

    def __init__(self, num_classes, rng, in_channels=1, se_reduction=4, row_channel=True):
        super().__init__()
        self.row_channel = row_channel
        self.block1 = ConvBlock(in_channels + int(row_channel), 16, rng)
        self.block2 = ConvBlock(16, 32, rng, stride=2)
        self.se = SEBlock(32, se_reduction, rng)
        self.block3 = ConvBlock(32, self.FEATURE_CHANNELS, rng, stride=2)
        self.head = Linear(self.FEATURE_CHANNELS, num_classes, rng)

    def features(self, x):
        if self.row_channel:
            x = Tensor.concat([x, row_coordinates(x.shape)], axis=1)
        return self.block3(self.se(self.block2(self.block1(x))))

    def forward(self, x):
        """Return (feature maps, feature vectors, logits)."""
        maps = self.features(x)
        vectors = F.global_avg_pool(maps)
        return maps, vectors, self.head(vectors)

    def body_parameters(self):
        return [p for name, p in self.named_parameters() if not name.startswith('head.')]

    def head_parameters(self):
        return self.head.parameters()


class RelationWeightNetwork(Module):
    """Scores a (sample map, prototype map) pair in [0, 1].

    Four 3x3 conv layers with batch norm, ReLU after the first and third,
    an SE block after each of those two, then global pooling and a sigmoid fc.
    """

    def __init__(self, in_channels, rng, width=64, se_reduction=4):
        super().__init__()
        self.block1 = ConvBlock(2 * in_channels, width, rng, stride=2)
        self.se1 = SEBlock(width, se_reduction, rng)
        self.block2 = ConvBlock(width, width, rng, activate=False)
        self.block3 = ConvBlock(width, width, rng)
        self.se2 = SEBlock(width, se_reduction, rng)
        self.block4 = ConvBlock(width, width, rng, activate=False)
        self.fc = Linear(width, 1, rng)

    def forward(self, sample_maps, prototype_maps):
        if tuple(sample_maps.shape) != tuple(prototype_maps.shape):
            raise TensorError(f"relation pair shape mismatch: {sample_maps.shape} vs {prototype_maps.shape}")
        pair = Tensor.concat([sample_maps, prototype_maps], axis=1)
        out = self.se1(self.block1(pair))
        out = self.block2(out)
        out = self.se2(self.block3(out))
        out = self.block4(out)
        return self.fc(F.global_avg_pool(out)).sigmoid().reshape(-1)
