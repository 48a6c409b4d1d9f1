"""depthfuse: two-stream RGB-D detection and semantic segmentation on
monocular depth estimated by a continuous CRF over superpixels."""

from .crf import (
    CrfInstance,
    CrfSolution,
    DcnfDepthEstimator,
    energy,
    log_partition,
    map_inference,
    nll,
    nll_grads,
    pairwise_weight,
)
from .depth_io import DepthMap, EncodedDepthImage, decode_depth, encode_depth
from .detector import LinearHingeSvm, Proposal, assign_labels, hard_negative_mine, nms
from .evaluation import (
    Detection,
    EvalReport,
    GroundTruth,
    average_precision,
    iou,
    mean_average_precision,
    segmentation_iou,
)
from .fusion import (
    BoxTarget,
    ConcatChannels,
    LossBundle,
    RoIBox,
    RoIPool,
    SpatialSoftmaxLoss,
    UpscaleNearest,
    combined_seg_loss,
    concat_features,
    depth_regression_loss,
    detection_loss,
    smooth_l1,
    spatial_softmax_loss,
    upscale_nearest,
)
from .models import ConcatSegmenter, FastRcnnDetector, MultiTaskSegmenter, PatchClassifier
from .netcore import FeatureMap, LayerParams, load_checkpoint, save_checkpoint, sgd_step
from .superpixel import Superpixel, SuperpixelGraph, SuperpixelPool, oversegment, similarity
from .synthetic import SyntheticScene, generate_proposals, generate_synthetic

__version__ = "0.1.0"
