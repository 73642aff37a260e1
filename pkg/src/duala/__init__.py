"""Dual-level alignment for cross-subject brain-to-image decoding.

Subject-specific ridge adapters map voxel responses into a shared latent
space; a residual MLP backbone decodes latents into token and retrieval
embeddings. New subjects are adapted with a frozen backbone plus low-rank
update matrices, guided by a statistical distribution perturbation and two
alignment losses (triplet-based semantic alignment, relational consistency
against a reference class-similarity matrix).
"""

from duala.backbone import (BackboneDims, backbone_backward,
                            backbone_forward, init_backbone, init_lora,
                            lora_effective_weight)
from duala.data import (DatasetPack, SubjectDataset, SynthConfig,
                        generate_synthetic, load_pack, save_pack,
                        session_subset, validate_pack)
from duala.errors import (BadMagicError, ConfigError, DanglingStimulusError,
                          DegenerateEmbeddingError, DegeneratePrototypeError,
                          DimensionMismatchError, DualaError,
                          DuplicateTensorError, EmptyOverlapError,
                          FormatError, FormatVersionError, NonFiniteError,
                          SingularSystemError, TruncatedFileError,
                          ValidationError)
from duala.evaluate import (RetrievalReport, StructureReport,
                            class_structure_metrics, emit_report,
                            pca_components, pca_project, retrieval_accuracy)
from duala.losses import (LossOutput, Prototypes, ReferenceMatrix,
                          SimilarityMatrix, bidirectional_contrastive_loss,
                          class_prototypes, class_similarity_matrix,
                          combined_objective, mine_triplets, mixco_targets,
                          reference_matrix, relational_consistency_loss,
                          semantic_alignment_loss, softclip_targets)
from duala.optim import AdamW, LRSchedule, grad_check, lr_at
from duala.perturb import (CategoryStats, fit_category_stats, perturb,
                           perturb_backward, perturb_stochastic)
from duala.ridge import (RidgeAdapter, adapter_apply, adapter_backward,
                         random_adapter, ridge_fit_closed)
from duala.train import (Checkpoint, TrainConfig, compute_reference,
                         embed_subject, finetune, load_checkpoint, pretrain,
                         save_checkpoint, write_trace)

__version__ = "0.1.0"

__all__ = [
    "AdamW", "BackboneDims", "BadMagicError", "CategoryStats", "Checkpoint",
    "ConfigError", "DanglingStimulusError",
    "DatasetPack", "DegenerateEmbeddingError", "DegeneratePrototypeError",
    "DimensionMismatchError", "DualaError", "DuplicateTensorError",
    "EmptyOverlapError", "FormatError", "FormatVersionError", "LRSchedule",
    "LossOutput", "NonFiniteError", "Prototypes", "ReferenceMatrix",
    "RetrievalReport", "RidgeAdapter", "SimilarityMatrix", "SingularSystemError",
    "StructureReport", "SubjectDataset", "SynthConfig", "TrainConfig",
    "TruncatedFileError", "ValidationError", "adapter_apply",
    "adapter_backward", "backbone_backward", "backbone_forward",
    "bidirectional_contrastive_loss", "class_prototypes",
    "class_similarity_matrix", "class_structure_metrics",
    "combined_objective", "compute_reference", "embed_subject",
    "emit_report", "finetune", "fit_category_stats", "generate_synthetic",
    "grad_check", "init_backbone", "init_lora", "load_checkpoint",
    "load_pack", "lora_effective_weight", "lr_at", "mine_triplets",
    "mixco_targets", "pca_components", "pca_project", "perturb",
    "perturb_backward", "perturb_stochastic", "pretrain", "random_adapter",
    "reference_matrix", "relational_consistency_loss", "retrieval_accuracy",
    "ridge_fit_closed", "save_checkpoint", "save_pack",
    "semantic_alignment_loss", "session_subset", "softclip_targets",
    "validate_pack", "write_trace",
]
