import hashlib
from collections import OrderedDict

import numpy as np

from app.errors import TensorError
from app.tensornet.checkpoint import load_checkpoint, save_checkpoint
from app.tensornet.layers import MiniExtractor, RelationWeightNetwork


class TrainState:
    """Extractor body (theta_s), classifier head (phi) and relation network (theta_R)."""

    def __init__(self, extractor, rwn, meta=None):
        self.extractor = extractor
        self.rwn = rwn
        self.meta = dict(meta or {})

    @classmethod
    def build(cls, num_classes, rng, rwn_width=64, se_reduction=4, crop_size=(32, 32)):
        extractor = MiniExtractor(num_classes, rng, se_reduction=se_reduction)
        rwn = RelationWeightNetwork(MiniExtractor.FEATURE_CHANNELS, rng, width=rwn_width,
                                    se_reduction=se_reduction)
        meta = {'num_classes': int(num_classes), 'rwn_width': int(rwn_width),
                'se_reduction': int(se_reduction), 'crop_size': [int(v) for v in crop_size]}
        return cls(extractor, rwn, meta)

    def groups(self):
        return {
            'theta_s': self.extractor.body_parameters(),
            'phi': self.extractor.head_parameters(),
            'theta_r': self.rwn.parameters(),
        }

    def checksum(self, group):
        """Digest of one parameter group's values."""
        digest = hashlib.sha256()
        for p in self.groups()[group]:
            digest.update(np.ascontiguousarray(p.data).tobytes())
        return digest.hexdigest()

    def state_dict(self):
        state = OrderedDict()
        state.update((f'extractor.{k}', v) for k, v in self.extractor.state_dict().items())
        state.update((f'rwn.{k}', v) for k, v in self.rwn.state_dict().items())
        return state

    def load_state_dict(self, state):
        for prefix, module in (('extractor.', self.extractor), ('rwn.', self.rwn)):
            module.load_state_dict({k[len(prefix):]: v for k, v in state.items() if k.startswith(prefix)})

    def copy(self):
        clone = TrainState.build(self.meta['num_classes'], np.random.default_rng(0),
                                 self.meta['rwn_width'], self.meta['se_reduction'], self.meta['crop_size'])
        clone.load_state_dict(self.state_dict())
        return clone

    def save(self, path):
        save_checkpoint(path, self.state_dict(), meta=self.meta)

    @classmethod
    def load(cls, path):
        arrays, meta = load_checkpoint(path)
        required = ('num_classes', 'rwn_width', 'se_reduction')
        if any(key not in meta for key in required):
            raise TensorError(f"checkpoint {path} lacks model metadata")
        state = cls.build(meta['num_classes'], np.random.default_rng(0), meta['rwn_width'],
                          meta['se_reduction'], meta.get('crop_size', (32, 32)))
        state.load_state_dict(arrays)
        return state
