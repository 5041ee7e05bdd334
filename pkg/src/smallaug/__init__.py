"""Small-object copy-paste augmentation with K-fold TPE policy search."""

from .augment import Operation, PlacementConfig, Policy, apply_policy, apply_policy_set, augment_dataset
from .data_model import (AnnotatedImage, BBox, Dataset, Instance, Origin, SizeClass, classify_size,
                         load_manifest, parse_coco, parse_dota, write_coco, write_manifest)
from .metrics import Detection, EvalResult, evaluate, iou
from .search import (LossEvaluator, OracleSpec, PolicySet, SearchConfig, kfold_split, loss_weighted_mean_m,
                     run_search, subprocess_evaluator, synthetic_oracle)
from .tpe import POLICY_SPACE, TpeConfig, Trial, optimize, suggest

__version__ = "0.1.0"
