"""softtree: a soft-routed binary neural tree classifier.

Images flow through a small convolutional backbone into a full binary
tree whose internal nodes gate probability mass between children, whose
edges apply dilated-convolution attention transformers, and whose leaves
emit class distributions; the final prediction is the path-probability
weighted sum of the leaves.  Everything runs on a self-contained numpy
reverse-mode autodiff core.
"""

from .autodiff import Tape, Tensor, backward, no_grad
from .backbone import (DeskBackboneSpec, FeatureExtractor, build_desk_backbone,
                       extract)
from .checkpoint import build_model, load_checkpoint, save_checkpoint
from .config import RunConfig, format_config, load_config, parse_config
from .data import (AugmentPolicy, Dataset, NormStats, Sample, augment, batches,
                   compute_stats, generate_synthetic, load_dataset, normalize,
                   read_image)
from .errors import (CheckpointError, ConfigError, DataError, InputError,
                     NumericError, SoftTreeError, StateError)
from .gradcam import Heatmap, all_sites, grad_cam, parse_site, write_pgm
from .gradcheck import finite_diff_gradcheck, run_primitive_gradchecks
from .ops import ConvSpec
from .training import (SGD, StagePlan, TrainPlan, desk_plan, evaluate,
                       fit_two_stage, lr_at, nll, paper_plan, sgd_step,
                       total_loss)
from .tree import (AttentionTransformer, LeafHead, Prediction, RoutingUnit,
                   TreeConfig, TreeModel, accumulate_path_probabilities,
                   aggregate, build_tree)

__version__ = "0.1.0"
