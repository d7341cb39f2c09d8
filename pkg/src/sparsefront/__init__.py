"""Sparsifying wavelet front ends and locally-linear attacks for MNIST robustness."""

__version__ = "0.1.0"

from .transform import Basis, CoeffVector, forward, inverse, basis_vector, max_l1_norm
from .frontend import FrontEndConfig, SparseCode, top_k, apply, support_of, check_high_snr
from .models import (
    LinearModel,
    FeedforwardNetwork,
    TrainConfig,
    train_linear_svm,
    train_network,
    logits,
    softmax,
)
from .attacks import (
    Perturbation,
    LocallyLinearModel,
    AttackResult,
    AttackSpec,
    projection,
    semi_white_linear,
    white_linear,
    distortion_linear,
    extract_locally_linear,
    pairwise_attack,
    fgsm,
    evaluate,
)
from .attenuation import EnsembleConfig, AttenuationReport, run_ensemble
from .data import Dataset, load_idx, load_mnist, filter_pair, fetch_mnist
