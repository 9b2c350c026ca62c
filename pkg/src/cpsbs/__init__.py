"""Conditional Poisson stochastic beam search and its estimators."""

from .cp_design import (
    SymmetricPolyTable,
    anneal_weights,
    build_table,
    cp_mass,
    cp_sample,
    cp_sample_forced,
    inclusion_probabilities,
    normalizer_gradient,
    normalizing_constant,
    odds_weights,
)
from .decoders import Beam, Trajectory, beam_search, cpsbs, diverse_beam_search, hindsight_cpsbs, sbs
from .errors import (
    BudgetExceededError,
    ConfigError,
    ContractError,
    CPSBSError,
    DegenerateDesignError,
    DesignError,
    ImpossibleConditioningError,
    SizeError,
    ZeroInclusionError,
)
from .estimators import (
    EstimateReport,
    cpsbs_ht_pipeline,
    ht_estimate,
    incl_is,
    incl_mc,
    mc_estimate,
    sas_estimate,
    sbs_estimate,
)
from .metrics import neg_logprob, ngram_diversity, sentence_bleu
from .seq_model import BOS, EOS, Hypothesis, ToyModel, ancestral_sample, random_model

__all__ = [name for name in dir() if not name.startswith("_")]
