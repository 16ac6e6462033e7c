"""Prompt-injected ViT segmentation with boundary-aligned test-time adaptation."""

from .adapt import (
    AdaptationConfig,
    AdaptationTrace,
    adapt_sample,
    finetune_for_adaptation,
    run_stream,
    sample_record,
    select_tunable_params,
)
from .boundary import (
    AlignmentReport,
    GateThresholds,
    alignment_loss,
    boundary_map,
    mask_features,
    masked_pearson,
    quality_gate,
    sobel_gradients,
)
from .data import (
    Benchmark,
    Sample,
    ShiftSpec,
    apply_shift,
    build_benchmark,
    gen_clean,
    load_folder,
    minimal_box,
    sample_point,
    write_dataset,
)
from .encoder import EncoderConfig, EncoderTrace, ViTEncoder, select_features
from .heatmap import (
    GaussianCenter,
    SigmaPolicy,
    aggregate_heatmap,
    broadcast_inject,
    gaussian_at,
    prompt_heatmap,
    prompts_to_centers,
)
from .metrics import RunSummary, aggregate, dice, emit_plots, gradcam_map, iou_fg, miou
from .model import (
    MaskDecoder,
    PromptEncoder,
    SegmentationResult,
    SegModel,
    dice_loss,
    focal_loss,
    pretrain,
    supervised_loss,
)
from .prompts import BoxXYXY, Point2D, PromptSet

__version__ = "0.1.0"

__all__ = [
    "AdaptationConfig",
    "AdaptationTrace",
    "AlignmentReport",
    "Benchmark",
    "BoxXYXY",
    "EncoderConfig",
    "EncoderTrace",
    "GateThresholds",
    "GaussianCenter",
    "MaskDecoder",
    "Point2D",
    "PromptEncoder",
    "PromptSet",
    "RunSummary",
    "Sample",
    "SegModel",
    "SegmentationResult",
    "ShiftSpec",
    "SigmaPolicy",
    "ViTEncoder",
    "adapt_sample",
    "aggregate",
    "aggregate_heatmap",
    "alignment_loss",
    "apply_shift",
    "boundary_map",
    "broadcast_inject",
    "build_benchmark",
    "dice",
    "dice_loss",
    "emit_plots",
    "finetune_for_adaptation",
    "focal_loss",
    "gaussian_at",
    "gen_clean",
    "gradcam_map",
    "iou_fg",
    "load_folder",
    "mask_features",
    "masked_pearson",
    "minimal_box",
    "miou",
    "pretrain",
    "prompt_heatmap",
    "prompts_to_centers",
    "quality_gate",
    "run_stream",
    "sample_point",
    "sample_record",
    "select_features",
    "select_tunable_params",
    "sobel_gradients",
    "supervised_loss",
    "write_dataset",
]
