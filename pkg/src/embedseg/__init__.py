"""Cross-modal contrastive pixel embeddings for instance segmentation, desk scale.

Pipeline: render synthetic multi-modal scenes, sample embeddings evenly
across instances, train small per-modality conv nets with a temperature-
scaled contrastive loss plus a norm regularizer, cluster embeddings with
cosine mean shift into masks, and evaluate AP and temporal stability.
"""

from .clustering import (ClusterConfig, InstanceMask, MaskSet, assign_semantics,
                         concat_semantics, filter_masks, mean_shift_cluster,
                         scaled_cosine_distance, segment)
from .errors import (ConfigError, DegenerateEmbeddingError, EmbedSegError, FormatError,
                     NoNegativesError)
from .fields import (EmbeddingMap, FlowField, Frame, FrameGroup, LabelMap, merge_groups,
                     select_frames)
from .fileio import load_field, load_flo, load_label_png, save_field, save_flo, save_label_png
from .loss import LossConfig, LossResult, contrastive_loss, cosine_sim, pair_loss, reg_loss, \
    total_loss_and_grad
from .metrics import (APReport, TemporalConsistencyReport, embedding_to_rgb, instance_ap,
                      similarity_map, temporal_consistency)
from .model import Adam, ToyNet, TrainConfig, TrainResult, load_checkpoint, lr_at, \
    save_checkpoint, train
from .sampling import Sample, SamplerConfig, SampleSet, boundary_band_mask, sample_group
from .scenes import SceneSpec, generate, one_hot_scores
from .warp import WarpResult, range_map_occlusion, round_half_away, warp_embeddings, warp_labels

__version__ = "0.1.0"

__all__ = [
    "APReport", "Adam", "ClusterConfig", "ConfigError", "DegenerateEmbeddingError",
    "EmbedSegError", "EmbeddingMap", "FlowField", "FormatError", "Frame", "FrameGroup",
    "InstanceMask", "LabelMap", "LossConfig", "LossResult", "MaskSet", "NoNegativesError",
    "Sample", "SampleSet", "SamplerConfig", "SceneSpec", "TemporalConsistencyReport",
    "ToyNet", "TrainConfig", "TrainResult", "WarpResult", "assign_semantics",
    "boundary_band_mask", "concat_semantics", "contrastive_loss", "cosine_sim",
    "embedding_to_rgb", "filter_masks", "generate", "instance_ap", "load_checkpoint",
    "load_field", "load_flo", "load_label_png", "lr_at", "mean_shift_cluster",
    "merge_groups", "one_hot_scores", "pair_loss", "range_map_occlusion", "reg_loss",
    "round_half_away", "sample_group", "save_checkpoint", "save_field", "save_flo",
    "save_label_png", "scaled_cosine_distance", "segment", "select_frames",
    "similarity_map", "temporal_consistency", "total_loss_and_grad", "train",
    "warp_embeddings", "warp_labels",
]
