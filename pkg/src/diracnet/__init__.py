"""A small numpy deep-learning framework for Dirac-parameterized plain networks."""

from .autograd import Variable, backward, finite_diff_check, no_grad, zero_grads
from .dirac import (
    BatchNormStats,
    DiracConvParams,
    build_dirac_delta,
    effective_weight,
    fold_batchnorm,
    fold_dirac,
    fold_network,
    weight_norm,
)
from .nn import (
    Network,
    NetworkSpec,
    build_diracnet,
    build_network,
    build_plainnet,
    build_resnet_dirac_init,
)

__version__ = "0.1.0"
