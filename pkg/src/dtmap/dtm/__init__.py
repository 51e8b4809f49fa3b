"""Disease trajectory maps: kernelized reduced-rank mixed models fitted by SVI."""
from .inference import fit_dtm, global_natural_step, hyper_step, learning_rate, local_step
from .objective import (
    ElboBreakdown,
    elbo,
    expected_local_loglik,
    global_cache,
    global_gradients,
    hyper_gradients,
    local_objective,
    natural_targets,
)
from .predict import (
    coeff_posterior,
    coeff_posterior_batch,
    dtm_embed,
    embed_new,
    heldout_ll_at,
    mc_heldout_ll,
    predict_trajectory,
)
from .state import DtmConfig, DtmHyper, DtmState, HyperPrior, init_dtm

__all__ = [
    "DtmConfig", "DtmHyper", "DtmState", "ElboBreakdown", "HyperPrior",
    "coeff_posterior", "coeff_posterior_batch", "dtm_embed", "elbo", "embed_new",
    "expected_local_loglik", "fit_dtm", "global_cache", "global_gradients",
    "global_natural_step", "heldout_ll_at", "hyper_gradients", "hyper_step", "init_dtm",
    "learning_rate", "local_objective", "local_step", "mc_heldout_ll", "natural_targets",
    "predict_trajectory",
]
