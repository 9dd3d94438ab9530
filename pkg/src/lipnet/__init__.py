"""Feed-forward networks with per-layer Lipschitz bounds and constrained training."""

from .constraint import ConstraintConfig, constrain_network, project_layer, project_matrix, strict_project
from .errors import (
    CacheError,
    ConfigError,
    DimensionError,
    DivergenceError,
    FormatError,
    GeometryError,
    InitError,
    LipnetError,
    NumericError,
)
from .layers import (
    BatchNorm,
    Conv2D,
    Dense,
    Dropout,
    MaxPool,
    Network,
    ReLU,
    Residual,
    Softmax,
    compute_loss,
    glorot_init,
    mlp,
    spread_kinks,
)
from .modelio import Dataset, gen_synthetic, load_model, read_xy_csv, save_model, write_predictions_csv
from .norms import L1, L2, LINF, NormKind, audit, empirical_lipschitz, network_lipschitz, parse_norm
from .optim import AMSGrad, SGDNesterov, TrainConfig, train

__version__ = "0.1.0"
