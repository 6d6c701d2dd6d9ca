"""Attention-regularized VQA training on a synthetic changing-priors
benchmark, with faithfulness evaluation tools."""

from .attreg import (CuratedSample, KeyObjectReport, RegConfig, combined_loss,
                     curate, finetune_with_attreg, identify_key_objects,
                     locate_ignored)
from .config import ExperimentConfig, load_data_config, load_experiment_config
from .data import (DataConfig, DatasetSplit, EmbeddingTable, ObjectDetection,
                   QAInstance, Scene, extract_nouns, generate_benchmark,
                   read_split, soft_targets, write_split)
from .estimators import AttRegFineTuner, UpDnClassifier
from .faitheval import (SweepResult, TVDRecord, gradient_saliency,
                        ignored_key_count, keep_interval_eval,
                        region_tvd_curve, spearman, tvd)
from .harness import (MetricsRecord, accuracy, evaluate, report, run_baseline,
                      run_experiment, score_predictions)
from .model import (ModelConfig, ModelOutput, VqaModel, load_checkpoint,
                    save_checkpoint)

__version__ = "0.1.0"
