"""Rotation-, density- and scale-robust cylindrical-kernel point descriptors.

Modules
-------
pointcloud    clouds, meshes, rigid transforms, synthetic shapes
formats       ASCII OFF / XYZ readers and writers
spatial       exact kNN with deterministic tie-breaking
kernels       normal-aligned cylindrical kernel frames and sign groups
features      angle/distance feature projection and scale adaptation
autodiff      minimal reverse-mode tensor graph and parameter store
network       ring-convolution encoder and classification head
registration  soft correspondence, SVD alignment, metrics, ICP baseline
config        experiment configuration grammar
harness       dataset assembly, training loops, invariance bench, reports
cli           command-line entry point
"""

from .pointcloud import (PointCloud, RigidTransform, TriangleMesh, apply_rigid,
                         estimate_normals, gen_synthetic, normalize_unit_sphere,
                         random_rotation, sample_mesh)
from .formats import parse_off, parse_xyz, write_xyz
from .spatial import NeighborIndex, build_index
from .kernels import KernelLayout, build_layout, place_kernels, tangent_basis
from .features import (KernelFeatureGrid, ScaleSet, multiscale_extract,
                       project_features, weighted_average)
from .autodiff import ParamStore, SGD, Tensor, grad_check, no_grad
from .network import Encoder, EncoderConfig, compute_descriptors
from .registration import (compute_metrics, euler_zyx, icp_baseline, loss_rt,
                           procrustes, soft_correspondence)

__version__ = "0.1.0"
