# Reverse-mode autodiff engine
from .checkpoint import load_checkpoint, save_checkpoint
from .functional import (batch_norm, conv2d, global_avg_pool, linear, relu, se_block, sigmoid, softmax,
                         softmax_ce)
from .layers import (BatchNorm2d, Conv2d, ConvBlock, Linear, MiniExtractor, Module, RelationWeightNetwork,
                     SEBlock)
from .optim import SGD
from .state import TrainState
from .tensor import Parameter, Tensor

__all__ = ['Tensor', 'Parameter', 'conv2d', 'batch_norm', 'relu', 'sigmoid', 'global_avg_pool', 'linear',
           'se_block', 'softmax', 'softmax_ce', 'Module', 'Conv2d', 'BatchNorm2d', 'Linear', 'SEBlock',
           'ConvBlock', 'MiniExtractor', 'RelationWeightNetwork', 'SGD', 'TrainState', 'save_checkpoint',
           'load_checkpoint']
