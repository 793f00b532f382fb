"""Sparse common-support channel estimation from uniform DFT pilots.

Krylov (Lanczos) projection of the block-Toeplitz Gram operator, partial
effective rank sparsity detection, ESPRIT delay recovery, and the lowpass and
RA-ORMP baselines.
"""
from .baselines import build_delay_grid, lowpass_interpolate, ra_ormp
from .channel_model import (ChannelSpec, PilotLayout, PilotMeasurements, add_awgn,
                            sample_pilots, synth_clustered_channel, synth_scs_channel)
from .esprit import (SupportEstimate, delays_from_eigs, eig_small, fit_amplitudes,
                     reconstruct_full_grid, solve_rotation)
from .estimators import EstimationReport, fri_perk, run_estimator
from .exceptions import (ConfigError, ConvergenceError, DenseCapExceeded, FriPerkError,
                         IllPosedSupportError, LayoutError, PlacementError)
from .lanczos_per import (PerDecision, dense_eig_reference, estimate_K, fri_per_dense,
                          lanczos_run, per, per_trace)
from .toeplitz_ops import ToeplitzGramOperator, apply_gram, build_operator, dense_materialize

__version__ = "0.1.0"
