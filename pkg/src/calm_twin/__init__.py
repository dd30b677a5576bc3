"""Retrieval-augmented language-model digital twins for controlled dynamical systems."""

from .codec import (CodecError, MissingVariable, NumberParse, ParseDiagnostics, WrongStepCount,
                    decode_states, encode_actions, encode_states)
from .core import (GENERAL, HistoryFuturePair, KnowledgeEntry, ModellingEnvironment, SchemaError,
                   SimulationConfig, TimeStep, Trajectory, VariableSchema, environment_update,
                   load_environment, read_jsonl, save_environment, write_jsonl)
from .encoder import (BiEncoderRetriever, ContrastiveExample, HashingEncoder, TrainConfig,
                      compose_retrieval_text, featurize, info_nce, info_nce_grad,
                      summarize_trends, train)
from .knowledge import extract_relevant
from .retrieval import (ScoredCandidate, extract_pair, filter_valid, select_context,
                        select_context_full, select_context_random, unique_actions)
from .simulator import (CalmDT, ConstantPolicy, RepeatLastPolicy, ReplayPolicy, SimulationResult,
                        ThresholdPolicy, simulate, simulate_ensemble_stats)

__version__ = "0.1.0"

__all__ = [
    "BiEncoderRetriever", "CalmDT", "CodecError", "ConstantPolicy", "ContrastiveExample",
    "GENERAL", "HashingEncoder", "HistoryFuturePair", "KnowledgeEntry", "MissingVariable",
    "ModellingEnvironment", "NumberParse", "ParseDiagnostics", "RepeatLastPolicy",
    "ReplayPolicy", "SchemaError", "ScoredCandidate", "SimulationConfig", "SimulationResult",
    "ThresholdPolicy", "TimeStep", "TrainConfig", "Trajectory", "VariableSchema",
    "WrongStepCount", "compose_retrieval_text", "decode_states", "encode_actions",
    "encode_states", "environment_update", "extract_pair", "extract_relevant", "featurize",
    "filter_valid", "info_nce", "info_nce_grad", "load_environment", "read_jsonl",
    "save_environment", "select_context", "select_context_full", "select_context_random",
    "simulate", "simulate_ensemble_stats", "summarize_trends", "train", "unique_actions",
    "write_jsonl",
]
