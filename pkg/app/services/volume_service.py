import json
import os
import struct

import numpy as np
from marshmallow import Schema, ValidationError, fields, validate, validates
from scipy import ndimage

from app.errors import GeometryError, VolumeFormatError
from app.models.volume import BBox, Mask, Volume
from app.services.base_service import BaseService

MAGIC = b'RVOL0001'
LENGTH_PREFIX = struct.Struct('<I')
DTYPES = {'f32': np.dtype('<f4'), 'u8': np.dtype('u1')}
AXES = {'x': 0, 'y': 1, 'z': 2}
LABEL_SMOOTHING_VOXELS = 0.6


class VolumeHeaderSchema(Schema):
    """Schema for the JSON header of an RVOL file."""

    dims = fields.List(fields.Int(strict=True), required=True, validate=validate.Length(equal=3))
    spacing = fields.List(fields.Float(allow_nan=False), required=True, validate=validate.Length(equal=3))
    origin = fields.List(fields.Float(allow_nan=False), required=True, validate=validate.Length(equal=3))
    dtype = fields.Str(required=True, validate=validate.OneOf(list(DTYPES)))
    kind = fields.Str(required=True, validate=validate.OneOf(['volume', 'mask']))

    @validates('dims')
    def validate_dims(self, dims, **kwargs):
        if any(d <= 0 for d in dims):
            raise ValidationError(f'nonpositive dimension: {dims}')

    @validates('spacing')
    def validate_spacing(self, spacing, **kwargs):
        if any(s <= 0 for s in spacing):
            raise ValidationError(f'nonpositive spacing: {spacing}')


class VolumeService(BaseService):
    """Voxel volume I/O and preprocessing."""

    def __init__(self, config=None):
        super().__init__(config)
        self.header_schema = VolumeHeaderSchema()

    # ------------------------------------------------------------------ I/O

    def load_volume(self, path):
        """Read an RVOL file into a Volume or Mask."""
        try:
            with open(path, 'rb') as handle:
                raw = handle.read()
        except OSError as e:
            self.logger.error(f"Error reading volume {path}: {str(e)}")
            raise VolumeFormatError(f"cannot read {path}: {e.strerror}") from e

        if raw[:len(MAGIC)] != MAGIC:
            raise VolumeFormatError(f"malformed header in {path}: bad magic")
        offset = len(MAGIC)
        if len(raw) < offset + LENGTH_PREFIX.size:
            raise VolumeFormatError(f"malformed header in {path}: missing length prefix")
        (header_length,) = LENGTH_PREFIX.unpack_from(raw, offset)
        offset += LENGTH_PREFIX.size
        if len(raw) < offset + header_length:
            raise VolumeFormatError(f"malformed header in {path}: header truncated")
        try:
            header = self.header_schema.load(json.loads(raw[offset:offset + header_length].decode('utf-8')))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise VolumeFormatError(f"malformed header in {path}: {str(e)}") from e
        except ValidationError as e:
            message = '; '.join(f"{k}: {' '.join(map(str, v))}" for k, v in e.messages.items())
            raise VolumeFormatError(f"malformed header in {path}: {message}") from e
        offset += header_length

        dtype = DTYPES[header['dtype']]
        expected = int(np.prod(header['dims'])) * dtype.itemsize
        payload = raw[offset:]
        if len(payload) < expected:
            raise VolumeFormatError(f"truncated payload in {path}: {len(payload)} of {expected} bytes")
        if len(payload) > expected:
            raise VolumeFormatError(f"dims/payload mismatch in {path}: {len(payload)} bytes for {expected}")

        data = np.frombuffer(payload, dtype=dtype).reshape(header['dims'], order='F')
        model = Mask if header['kind'] == 'mask' else Volume
        return model(data=data.copy(), spacing=tuple(header['spacing']), origin=tuple(header['origin']))

    def save_volume(self, volume, path):
        """Write a Volume (f32) or Mask (u8) as RVOL, x-fastest."""
        is_mask = isinstance(volume, Mask)
        dtype = 'u8' if is_mask else 'f32'
        header = json.dumps({
            'dims': list(volume.dims),
            'spacing': list(volume.spacing),
            'origin': list(volume.origin),
            'dtype': dtype,
            'kind': volume.kind,
        }, sort_keys=True).encode('utf-8')
        payload = np.asarray(volume.data, dtype=DTYPES[dtype]).tobytes(order='F')
        try:
            directory = os.path.dirname(os.path.abspath(path))
            os.makedirs(directory, exist_ok=True)
            with open(path, 'wb') as handle:
                handle.write(MAGIC)
                handle.write(LENGTH_PREFIX.pack(len(header)))
                handle.write(header)
                handle.write(payload)
        except OSError as e:
            self.logger.error(f"Error writing volume {path}: {str(e)}")
            raise VolumeFormatError(f"cannot write {path}: {e.strerror}") from e

    # ------------------------------------------------------- preprocessing

    def hu_window_normalize(self, volume, lo=-1000.0, hi=1000.0):
        """Clamp (x - lo) / (hi - lo) to [0, 1]."""
        if not lo < hi:
            raise GeometryError(f"HU window requires lo < hi, got [{lo}, {hi}]")
        scaled = (volume.data - lo) / (hi - lo)
        return Volume(data=np.clip(scaled, 0.0, 1.0), spacing=volume.spacing, origin=volume.origin)

    def resample(self, volume, target_spacing):
        """Nearest-neighbour for masks, trilinear for intensity volumes."""
        target = np.asarray(target_spacing, dtype=np.float64).reshape(-1)
        if target.shape != (3,) or np.any(target <= 0):
            raise GeometryError(f"target spacing must be 3 positive values, got {target_spacing}")
        spacing = np.asarray(volume.spacing)
        out_dims = np.round(np.asarray(volume.dims) * spacing / target).astype(int)
        if np.any(out_dims <= 0):
            raise GeometryError(f"degenerate output dims {tuple(out_dims)}")

        # continuous source index of each output voxel centre, per axis
        coords = [((np.arange(n) + 0.5) * target[a]) / spacing[a] - 0.5 for a, n in enumerate(out_dims)]
        if isinstance(volume, Mask):
            index = [np.clip(np.floor(c + 0.5).astype(int), 0, d - 1) for c, d in zip(coords, volume.dims)]
            data = volume.data[np.ix_(*index)]
        else:
            grid = np.meshgrid(*coords, indexing='ij')
            data = ndimage.map_coordinates(volume.data, grid, order=1, mode='nearest')
        return type(volume)(data=data, spacing=tuple(target), origin=volume.origin)

    def flip(self, mask, axis):
        """Mirror index i to dims - 1 - i along an axis; origin is unchanged."""
        if axis not in AXES:
            raise GeometryError(f"unknown axis: {axis}")
        return mask.with_data(np.flip(mask.data, axis=AXES[axis]).copy())

    def crop(self, mask, box):
        """Extract a box; origin advances by min corner times spacing."""
        if not box.within(mask.dims):
            raise GeometryError(f"bounding box {box.to_string()} outside dims {mask.dims}")
        origin = np.asarray(mask.origin) + np.asarray(box.min_corner) * np.asarray(mask.spacing)
        return type(mask)(data=mask.data[box.slices()].copy(), spacing=mask.spacing, origin=tuple(origin))

    def resize_slice(self, image, height, width, mode='bilinear'):
        """Resize a 2D grid; bilinear for intensities, nearest for label crops."""
        if height <= 0 or width <= 0:
            raise GeometryError(f"resize target must be positive, got {height}x{width}")
        image = np.asarray(image, dtype=np.float64)
        if image.ndim != 2:
            raise GeometryError(f"resize expects a 2D grid, got shape {image.shape}")
        rows = np.clip((np.arange(height) + 0.5) * image.shape[0] / height - 0.5, 0, image.shape[0] - 1)
        cols = np.clip((np.arange(width) + 0.5) * image.shape[1] / width - 0.5, 0, image.shape[1] - 1)
        if mode == 'nearest':
            r = np.floor(rows + 0.5).astype(int)
            c = np.floor(cols + 0.5).astype(int)
            return image[np.ix_(r, c)]
        if mode != 'bilinear':
            raise GeometryError(f"unknown resize mode: {mode}")
        grid = np.meshgrid(rows, cols, indexing='ij')
        return ndimage.map_coordinates(image, grid, order=1, mode='nearest')

    # ----------------------------------------------------------- warping

    def warp(self, mask, transform, reference=None):
        """Resample `mask` under `transform` onto `reference`'s grid by inverse mapping.

        `transform` maps source physical coordinates to target coordinates.
        Samples falling outside the source grid become background.
        """
        reference = mask if reference is None else reference
        points = reference.grid_points().reshape(-1, 3)
        source = transform.inverse().apply(points)
        index = np.floor(mask.physical_to_index(source) + 0.5).astype(np.int64)
        inside = np.all((index >= 0) & (index < np.asarray(mask.dims)), axis=1)
        out = np.zeros(points.shape[0], dtype=mask.data.dtype)
        hits = index[inside]
        out[inside] = mask.data[hits[:, 0], hits[:, 1], hits[:, 2]]
        return type(mask)(data=out.reshape(reference.dims), spacing=reference.spacing, origin=reference.origin)

    def warp_labels(self, mask, transform, reference=None, sigma=LABEL_SMOOTHING_VOXELS):
        """Anti-aliased variant of warp for label masks.

        Each label's indicator is blurred by `sigma` voxels and sampled
        trilinearly; a target voxel takes the strongest label when its
        value reaches one half, background otherwise. Labels never mix.
        """
        reference = mask if reference is None else reference
        points = reference.grid_points().reshape(-1, 3)
        coords = mask.physical_to_index(transform.inverse().apply(points)).T
        best = np.full(points.shape[0], 0.5)
        out = np.zeros(points.shape[0], dtype=mask.data.dtype)
        for label in np.unique(mask.data[mask.data > 0]):
            field = ndimage.gaussian_filter((mask.data == label).astype(np.float64), sigma=sigma, mode='constant')
            value = ndimage.map_coordinates(field, coords, order=1, mode='constant', cval=0.0)
            wins = value >= best
            out[wins] = label
            best = np.where(wins, value, best)
        return type(mask)(data=out.reshape(reference.dims), spacing=reference.spacing, origin=reference.origin)

    def project_labels(self, mask, axis='y'):
        """Max-projection of labels into a 2D image scaled to [0, 1]; rows run along z."""
        projected = mask.data.max(axis=AXES[axis]).astype(np.float64) / 2.0
        # remaining axes are (x, z) or (x, y); put the last axis on rows, distal end at the bottom
        return np.flipud(projected.T)

    def to_crop_image(self, mask, box, size):
        """Crop, project and resize a registered mask for the classifier."""
        cropped = self.crop(mask, box)
        image = self.project_labels(cropped)
        return self.resize_slice(image, size[0], size[1], mode='nearest')
