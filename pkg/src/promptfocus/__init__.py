"""Semantic prompt selection and prompt-guided feature focusing on a toy
segmentation harness, built on a small recorded-tape autodiff core."""

from .embeddings import (CategoryLibrary, EmbeddingTable, SimilarityScores,
                         image_class_similarity, load_fixture, save_fixture,
                         supplement_library)
from .errors import (ConfigurationError, ContractError, DataError, DimensionError,
                     EmptySelectionError, FixtureFormatError, PromptFocusError,
                     StateError, TrainAbortError)
from .focuser import (FusedPrompt, PffParams, encode_class_prompts, fuse,
                      load_checkpoint, load_checkpoint_into, normalize_similarity,
                      pff_layer_forward, pff_layer_forward_batched,
                      pff_trainable_parameters, save_checkpoint)
from .gradcheck import check_gradients, run_all_checks, run_op_check
from .harness import (LinearHead, MetricsReport, MockBackbone, SceneFactory,
                      SceneStyle, SegmentationModel, ToyScene, TrainConfig,
                      TrainReport, evaluate, generate_scene, scene_image_embedding,
                      synthetic_library, train)
from .rng import RngState
from .selection import (ClusterTree, DcpConfig, PromptSelection, category_filter,
                        hierarchical_cluster, select_prompts)
from .tensor import (AttentionParams, MlpParams, Tensor, backward, matmul,
                     mlp_forward, multi_head_attention, softmax_rows)

__version__ = "0.1.0"
