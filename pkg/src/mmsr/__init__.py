"""Multimodal symbolic regression at desk scale.

A set-transformer encoder embeds sampled (X, y) point sets; a causal
transformer decoder — contrastively aligned with the encoder — emits
expression skeletons token by token; beam search plus quasi-Newton constant
refinement turns model samples into closed-form candidates.
"""

from .corpus import (Corpus, GenConfig, PointSet, TrainingPair, generate_corpus,
                     load_corpus)
from .errors import MmsrError
from .exprs import (Expr, TokenizedExpr, constant, encode_constant, evaluate,
                    expr_equal, from_preorder, parse_infix, to_preorder, variable)
from .inference import (BeamConfig, Candidate, beam_search, predict, r2_score,
                        refine_bfgs)
from .model import Model, ModelConfig
from .suites import SuiteEntry, builtin_suite, indistribution_suite, load_suite_csv
from .training import TrainConfig, TrainReport, train
from .vocab import Vocabulary

__version__ = "0.1.0"

__all__ = [
    "BeamConfig", "Candidate", "Corpus", "Expr", "GenConfig", "MmsrError",
    "Model", "ModelConfig", "PointSet", "SuiteEntry", "TokenizedExpr",
    "TrainConfig", "TrainReport", "TrainingPair", "Vocabulary", "beam_search",
    "builtin_suite", "constant", "encode_constant", "evaluate", "expr_equal",
    "from_preorder", "generate_corpus", "indistribution_suite", "load_corpus",
    "load_suite_csv", "parse_infix", "predict", "r2_score", "refine_bfgs",
    "to_preorder", "train", "variable",
]
