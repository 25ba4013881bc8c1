"""Desk-scale multimodal knowledge-graph reasoning.

A small numpy library that trains a pluggable KG structure encoder,
injects its frozen entity table into tiny text/vision/fusion
transformer stacks by weighted summation and alignment-constraint
losses, and evaluates masked-entity link prediction with filtered
ranking metrics.
"""

from . import autodiff
from .autodiff import Module, Parameter, Tensor
from .backbone import KGTransformer, ModelConfig, count_parameters, cross_entropy_loss
from .data import (MultimodalKG, TokenizedQuery, Triple, Vocabulary,
                   build_pretrain_template, build_reason_template,
                   build_vocabulary, load_triples)
from .evaluate import (EvalReport, FilterIndex, evaluate_ranks, hits_at_k,
                       mean_rank, rank_entities)
from .fusion import (FusionConfig, StructureSource, TransformerTailScorer,
                     align_loss_text, align_loss_vision, expand_structural,
                     forward_fused, query_loss, replace_entity_row, total_loss,
                     train_step, weighted_sum_text, weighted_sum_vision)
from .gradcheck import finite_diff_check
from .optim import Adam
from .structure import (StructuralEmbeddingTable, StructureEncoderConfig,
                        export_table, import_table, project_to_dim, score_triple,
                        train_structure_encoder)
from .synth import SynthConfig, generate_synthetic_mkg
from .training import (TrainConfig, finetune_queries, pretrain_queries,
                       run_training, run_training_plain)

__version__ = "0.1.0"
