"""Edge-featured graph transformer and massive-activation analysis."""

from .detect import (AnalysisConfig, MAReport, RatioStats, activation_ratios, batch_max_ratios,
                     build_report, capture_activations, distribution_report, edge_median,
                     flag_massive, layer_ratio_curves, read_capture, write_capture)
from .errors import (CaptureFormatError, ConvergenceError, GraphMAError, NumericalError,
                     ShapeError, ValidationError)
from .estimators import GraphTransformerModel, MassiveActivationDetector
from .graphs import (BatchedGraph, Dataset, GeneratorConfig, Graph, add_dummy_node,
                     augment_dataset, batch_graphs, edge_type_frequencies, generate_synthetic,
                     load_jsonl, remove_dummy_node, write_jsonl)
from .interpret import (HeatmapTable, aggregate_heatmap_summary, information_content,
                        ma_heatmap, run_ablation)
from .model import ActivationRecord, ModelConfig, ModelParams, init_params, model_forward
from .stats import (GammaFit, gamma_cdf, gamma_mle_fit, ks_statistic,
                    regularized_lower_incomplete_gamma, sample_gamma)
from .trainer import TrainConfig, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"
