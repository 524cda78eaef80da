"""CEPAM: joint differential privacy and compression via layered randomized quantization."""

from .coding import decode_message, encode_message, estimate_rate, golomb_decode, golomb_encode
from .lattice import LatticePoint, LatticeSpec, nearest_point
from .layered_noise import (
    GaussianNoise,
    LaplaceNoise,
    LatentSample,
    acceptance_probability,
    beta,
    sample_latent,
    sample_noise_direct,
    sample_noise_mixture,
    superlevel_contains,
)
from .privacy import (
    PrivacyProfile,
    RoundPrivacyReport,
    amplified_delta_subsampling,
    calibrate_sigma,
    cepam_gaussian_round,
    cepam_laplace_round,
    gaussian_profile_delta,
    group_profile_bound,
    laplace_profile_delta,
)
from .quantizer import EncodedBlock, RsuqConfig, lrsuq_decode, lrsuq_encode, rsuq_decode, rsuq_encode, sdq_decode, sdq_encode
from .rng import RandomStream

__version__ = "0.1.0"
