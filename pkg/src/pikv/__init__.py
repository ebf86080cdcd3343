"""Desk-scale transformer inference with position-independent KV reuse.

KV caches are precomputed per chunk, stitched together at query time, and
selectively repaired: the query's own attention decides which stale cache
entries are worth recomputing under a token budget. The package bundles
the engine, the competing selection strategies, a loss/overlap metrics
suite, a synthetic task generator, and a CLI for sweeps.
"""

from .chunkstore import (AssembledCache, ChunkKV, assemble, chunk_content_id,
                         load_chunk, precompute_chunk, replace_entries, store_chunk)
from .errors import (ArgumentError, ConfigError, EngineError, FormatError,
                     IncompatibleError, InputError, NumericsError, ShapeError,
                     StateError, TruncatedError)
from .metrics import (DEFAULT_P_GRID, AttnSummary, LossReport, OverlapReport,
                      build_loss_report, decode_reference_set, overlap_ratio,
                      per_token_losses, query_reference_set, residual_curve,
                      residual_loss, semantic_loss)
from .model import (FlopTally, GenerationResult, KVCache, ModelConfig, ModelWeights,
                    PrefillTrace, decode_step, full_prefill, greedy_generate,
                    query_pass, random_weights)
from .modelio import load_model, load_tokenizer, save_model, save_tokenizer
from .recompute import (AnswerRecord, FinalizeResult, RecomputePlan, StrategyRun,
                        finalize_query, recompute_selected, run_strategy,
                        selection_digest)
from .selection import (STRATEGIES, IdealBreakdown, SelectionResult, ValueScores,
                        fuse_layers, score_cacheblend_l1, score_epic,
                        score_ideal_oracle, score_kvshare_l1, score_prophet,
                        score_random, scores_to_csv, select_top_p)
from .tasks import (RagTask, Tokenizer, build_vocab, calibrate_tasks, chunk_corpus,
                    full_prefill_answer, gen_bridge_task, gen_multivalue_task,
                    gen_needle_task, showcase_task)
from .tensor import FlopCounter, ratio_budget, top_k_indices

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
