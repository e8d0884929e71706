"""Left-atrium shape completion from sparse catheter paths: synthetic shape
and path generation, a tied-weight dense encoder-decoder reconstructor, and
surface/overlap evaluation metrics."""

from .ded import DedModel, LossConfig, infer, train
from .estimator import DedReconstructor
from .grid import (
    GridSpec,
    OccupancyVolume,
    ScalarField,
    VoxelSet,
    boundary_weight_mask,
    extract_boundary,
    gaussian_smooth,
    load_volume,
    marching_cubes,
    mean_shape,
    save_volume,
    signed_distance_transform,
    voxelize,
)
from .mesh import (
    Landmarks,
    RigidTransform,
    TriMesh,
    find_point_in_pv,
    load_landmarks,
    load_obj,
    nearest_vertex,
    rigid_register,
    sample_septum,
    save_landmarks,
    save_obj,
    vertex_normal,
)
from .metrics import (
    MetricReport,
    avdist,
    compare_to_mean_shape,
    dice,
    point_to_mesh,
    radius_limited_surface_distance,
)
from .pathgen import (
    AugmentConfig,
    PathCloud,
    VoxelGraph,
    augment_path,
    build_graph,
    compose_path,
    dijkstra,
    path_to_volume,
    project_landmarks,
)
from .shapegen import (
    AtriumParams,
    MvnSpec,
    build_atrium,
    default_mvn_spec,
    generate_dataset,
    load_mvn_spec,
    sample_params,
)

__version__ = "0.1.0"
