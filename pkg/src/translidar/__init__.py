"""Transient lidar simulation and few-view SDF reconstruction."""

from .errors import (EXIT_DOMAIN, EXIT_IO, EXIT_NUMERIC, EXIT_OK, ConfigError,
                     DatasetIoError, DatasetTruncatedError,
                     DatasetValidationError, DatasetVersionError,
                     DegenerateConfigError, DomainError, NumericalAbortError,
                     TranslidarError)
from .autodiff import Node, Tape, backward, value_of
from .geometry import (CameraPose, Ray, look_at, mean_focus_point,
                       pixel_directions, rays_for_pixel, sample_unseen_camera)
from .field import (AnalyticSdf, Box, CoarseToFineSchedule, GridSdf, Sphere,
                    Torus, active_levels, density_along_ray, density_from_phi,
                    fd_eps_at, fd_eps_bounds, grid_from_function,
                    init_sphere_grid, interp_coeffs, load_field, save_field,
                    sdf_eval, sdf_eval_many, sdf_gradient, sphere_trace_batch,
                    voxel_size)
from .renderer import (PulseKernel, RaySamples, RenderConfig, RenderResult,
                       TransientImage, argmax_depth, bin_transient,
                       convolve_pulse, expected_depth, gaussian_pulse,
                       integrate_intensity, march_ray, render_view,
                       transmittance_weights)
from .sensor import (SensorModel, add_background, background_per_bin,
                     expected_counts, sample_poisson, scale_to_photon_level,
                     snr, thin_histogram)
from .losses import (LossWeights, lambda_ref_for_photon_level, loss_depth_tv,
                     loss_eikonal, loss_hdr_transient, loss_photometric,
                     loss_reflectivity, loss_space_carving, loss_sparsity,
                     loss_total, loss_transient_l1, loss_weight_variance)
from .optim import (AdamState, LrSchedule, adam_step, default_warmup,
                    grad_check, lr_at, train)
from .metrics import (TriangleMesh, chamfer_distance, extract_mesh,
                      l1_depth_masked, log_matched_depth,
                      log_matched_depth_map, normals_from_depth, psnr,
                      sample_mesh_points, transient_iou, write_obj, write_ply)
from .dataset import (Dataset, DatasetManifest, ExperimentConfig,
                      config_from_file, parse_scene, parse_scene_file,
                      read_array_bin, read_dataset, ring_poses,
                      write_array_bin, write_dataset)

__version__ = "0.1.0"
