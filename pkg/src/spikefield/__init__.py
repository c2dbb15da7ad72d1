"""Spike-camera radiance fields: simulate spike streams, fit voxel fields to them, render views and spikes."""
from .core import (
    BadMagicError, BadVersionError, CameraPose, FormatError, SpikeStream, Trajectory, TruncatedError,
    load_stream, load_trajectory, pack_frame, read_image, read_stream, read_trajectory, save_stream,
    save_trajectory, unpack_frame, write_image, write_stream, write_trajectory,
)
from .dataset import (
    Box, Dataset, OrbitParams, SceneSpec, Sphere, build_dataset, desk_scene, make_scene, make_trajectory,
)
from .field import (
    GridGrad, Ray, RenderResult, VoxelGrid, field_query, load_grid, render_image, render_ray,
    render_ray_backward, save_grid,
)
from .kernels import BACKEND
from .metrics import psnr, ssim
from .recon import ReconConfig, apply_mask, build_mask, reconstruct, tfi_reconstruct, tfp_reconstruct
from .sim import (
    AccumulatorState, StartupMode, count_oracle, encode_sequence, init_accumulator, step_encode,
)
from .spiking import generate_spikes, render_sequence, settle_prefix
from .train import (
    OptimizerState, TrainConfig, ValidationSet, adam_step, loss_recon, loss_spike, total_loss, train,
)

__version__ = "0.1.0"
