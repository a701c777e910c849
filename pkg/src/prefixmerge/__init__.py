"""prefixmerge: multi-task knowledge merging into trainable key-value
prefixes of a small frozen encoder-decoder transformer, with manual and
Fisher-driven self-adaptive prefix designs, few-shot transfer, ROUGE
evaluation, and prefix-attention analysis."""

from .autodiff import (GradientMap, Tensor, backward, cross_entropy,
                       finite_diff_grad, softmax)
from .model import (AttentionTrace, EncoderDecoder, ModelConfig,
                    PrefixActivations, attend_with_prefix, prefix_row_dim)
from .prefix import (ManualDesign, PrefixMatrix, SelfAdaptiveDesign,
                     apply_selection, gather, indices_for_task, load_prefix,
                     merge_for_target, save_prefix)
from .fisher import (FisherAccumulator, FisherReport, accumulate, finalize,
                     export_reports_csv)
from .tasks import (Example, TaskSpec, build_examples, default_task_suite,
                    leakage_check, load_jsonl)
from .training import (AdamW, RunReport, TrainConfig, fine_tune, merge_train,
                       multi_seed_report, optimizer_step, run_two_stage,
                       self_adaptive_train, transfer)
from .evaluation import (AttentionProfile, PRF, RougeScore,
                         attention_profile, export_metrics, export_profile,
                         rouge_l, rouge_n, rouge_score, score_dataset)

__version__ = "0.1.0"
