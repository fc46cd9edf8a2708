"""Evidence-aligned green-list watermarking for autoregressive generation.

The package embeds a keyed, statistically detectable signal in generated
token streams while concentrating watermark strength on tokens the visual
scene actually supports: a trained prefix extracts per-token evidence
weights, an uncertainty-scaled swap pulls high-evidence tokens into the
fixed-size green list, and the green bias is calibrated by evidence and
entropy. Detection, text attacks, and an experiment harness are included,
along with a toy grounded language model that makes every quantity exact.
"""

from .core import (EmbeddingTable, Partition, PartitionSeed, Vocabulary,
                   cosine, green_list_size, seed_partition, softmax)
from .detect import (AttackSpec, DetectionReport, accuracy_at_threshold, attack,
                     auc, build_synonym_table, roc_points, score_text)
from .engine import (StepRecord, WatermarkConfig, candidate_set, entropy,
                     evidence_ratio, generate, green_bias, normalized_entropy,
                     perturb_logits, regulating_factor, swap_partition)
from .evidence import (EntitySet, EvidenceWeights, TrainTarget,
                       contrastive_weights, extract_entities, make_train_target,
                       relevance_scores, target_offsets)
from .harness import (ExperimentConfig, ExperimentReport, TimingConfig, World,
                      WorldSpec, build_world, run_experiment, time_components)
from .model import (PrefixVector, Scene, ToyLM, hallucination_rate, load_toylm,
                    next_logits, next_logits_with_prefix, perplexity, save_toylm)
from .prefixtune import (TrainConfig, TrainTrace, finite_difference_gradient,
                         initialize_prefix, kl_prefix_loss, loss_gradient,
                         train_prefix)

__version__ = "0.1.0"
