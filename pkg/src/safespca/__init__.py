"""Large-scale sparse PCA: safe feature elimination plus a block coordinate
ascent solver for the l1-penalized semidefinite relaxation."""

from safespca.errors import (
    FormatError,
    InfeasibleError,
    NotPositiveDefiniteError,
    NumericalError,
    SafeSPCAError,
)
from safespca.covariance import (
    CovarianceMatrix,
    SpikedModelSpec,
    gaussian_model,
    gram_accumulate,
    leading_eigenvector,
    spiked_model,
)
from safespca.screening import (
    FeatureStats,
    ScreeningResult,
    compute_variances,
    lambda_for_size,
    screen,
)
from safespca.solver import (
    SolverConfig,
    SolverState,
    SparseComponent,
    box_qp,
    eta_update,
    extract_component,
    objective,
    recover_Z,
    row_update,
    search_lambda,
    solve,
    tau_solve,
)
from safespca.corpus import BagOfWordsCorpus, Vocabulary, load_vocab, parse_docword

__version__ = "0.1.0"

__all__ = [
    "BagOfWordsCorpus",
    "CovarianceMatrix",
    "FeatureStats",
    "FormatError",
    "InfeasibleError",
    "NotPositiveDefiniteError",
    "NumericalError",
    "SafeSPCAError",
    "ScreeningResult",
    "SolverConfig",
    "SolverState",
    "SparseComponent",
    "SpikedModelSpec",
    "Vocabulary",
    "box_qp",
    "compute_variances",
    "eta_update",
    "extract_component",
    "gaussian_model",
    "gram_accumulate",
    "lambda_for_size",
    "leading_eigenvector",
    "load_vocab",
    "objective",
    "parse_docword",
    "recover_Z",
    "row_update",
    "screen",
    "search_lambda",
    "solve",
    "spiked_model",
    "tau_solve",
]
