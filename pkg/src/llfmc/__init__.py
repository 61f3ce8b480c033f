"""Low-rank matrix completion with (non-)convex pairwise penalties on latent factors."""
from .core import (ConfigError, DataError, DivergenceError, FactorPair, LLFMCError,
                   ObservedMatrix, ParseError, RunConfig, load_config, load_csv_coo,
                   load_movielens, load_movielens_split, save_csv_coo, split_train_test)
from .graph import (PairGraph, build_knn_graph, cut_cycles, distance_d1, distance_d2,
                    distance_source, incidence_gram_nnz, refine_weights)
from .penalty import PenaltySpec, evaluate, group_prox
from .solver import IterationRecord, SolveResult, SolverState, descent_excess, solve

__version__ = "0.1.0"
