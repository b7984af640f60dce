import os

import click

from app.controllers.base_controller import BaseController
from app.models.geometry import IcpConfig
from app.models.volume import BBox
from app.services.registration_service import RegistrationService
from app.services.volume_service import VolumeService


class RegistrationController(BaseController):
    """Mask registration and syndesmosis cropping commands."""

    def __init__(self, group, config=None):
        super().__init__(group, config)
        self.registration_service = RegistrationService(self.config)
        self.volume_service = VolumeService(self.config)

    def _register_commands(self):
        self.add_command('register', self.register, [
            click.Option(['--moving'], required=True, type=click.Path(dir_okay=False),
                         help='Fractured mask (RVOL)'),
            click.Option(['--fixed'], required=True, type=click.Path(dir_okay=False),
                         help='Healthy template mask (RVOL)'),
            click.Option(['--out', 'out_path'], required=True, type=click.Path(dir_okay=False),
                         help='Transform JSON'),
            click.Option(['--warped'], type=click.Path(dir_okay=False), default=None,
                         help='Registered mask (RVOL)'),
            click.Option(['--scale/--no-scale'], default=self.config.ICP_ALLOW_SCALE,
                         help='Fit a uniform scale as well'),
            click.Option(['--mirror/--no-mirror'], default=True,
                         help='Mirror the moving mask before ICP'),
            click.Option(['--max-iterations'], type=click.IntRange(min=1),
                         default=self.config.ICP_MAX_ITERATIONS),
            click.Option(['--max-distance'], type=click.FloatRange(min=0, min_open=True), default=None,
                         help='Correspondence distance cap in mm'),
        ])
        self.add_command('crop', self.crop, [
            click.Option(['--mask'], required=True, type=click.Path(dir_okay=False)),
            click.Option(['--box'], required=True, help='"x0 y0 z0 x1 y1 z1", max exclusive'),
            click.Option(['--out', 'out_path'], required=True, type=click.Path(dir_okay=False)),
        ])

    def register(self, moving, fixed, out_path, warped, scale, mirror, max_iterations, max_distance):
        """Align a fractured mask to its healthy template with mirror + ICP."""
        fractured = self.run_stage('register', self.volume_service.load_volume, moving)
        healthy = self.run_stage('register', self.volume_service.load_volume, fixed)
        cfg = IcpConfig(max_iterations=max_iterations,
                        convergence_epsilon=self.config.ICP_CONVERGENCE_EPSILON,
                        allow_scale=scale, max_correspondence_distance=max_distance)
        result = self.run_stage('register', self.registration_service.register_pair,
                                fractured, healthy, cfg, mirror=mirror)
        self.run_stage('register', self.registration_service.save_transform, result, out_path)
        if warped:
            self.run_stage('register', self.volume_service.save_volume, result.transformed, warped)
        return self.success_response(
            f"rms={result.rms_residual:.6f} mm after {result.iterations} iterations; "
            f"transform written to {os.path.abspath(out_path)}")

    def crop(self, mask, box, out_path):
        """Crop a registered mask with a healthy-template bounding box."""
        volume = self.run_stage('crop', self.volume_service.load_volume, mask)
        bbox = self.run_stage('crop', BBox.from_string, box, volume.dims)
        cropped = self.run_stage('crop', self.registration_service.crop_syndesmosis, volume, bbox)
        self.run_stage('crop', self.volume_service.save_volume, cropped, out_path)
        return self.success_response(f"Cropped {volume.dims} to {cropped.dims}")
