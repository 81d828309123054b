"""svx: fully sparse voxel 3D object detection and tracking engine."""

from .backbone import (
    BackboneConfig,
    BackboneWeights,
    StageWeights,
    forward_backbone,
    merge_stride_ladder,
    profile_backbone,
    residual_block,
)
from .config import PipelineConfig, default_config, load_config
from .head import (
    Detection,
    GroundTruthBox,
    HeadConfig,
    HeadWeights,
    QueryVoxel,
    RegressionOutput,
    TargetAssignment,
    assign_targets,
    classify_voxels,
    decode_boxes,
    focal_loss,
    l1_regression_loss,
    regress_boxes,
    select_query_voxels,
)
from .metrics import EvalReport, iou_3d, iou_bev, match_and_score
from .sparse import (
    ConvLayer,
    FlopsEntry,
    FlopsReport,
    SparseTensor,
    build_sparse_tensor,
    count_flops,
    height_compress,
    select_dilation_set,
    sparse_max_pool,
    strided_conv_downsample,
    submanifold_conv,
)
from .tracker import AssociationConfig, Track, Tracker, associate, count_id_switches
from .voxelize import GridConfig, PointCloud, voxelize

__version__ = "0.1.0"
