from .calculus import (
    CylindricalTestFunction,
    gaussian_basis,
    hamiltonian,
    identity_outer,
    ito_wentzell_residual,
    ito_wentzell_scaling,
    linear_basis,
    lions_fd_check,
    product_outer,
    quadratic_basis,
    sine_basis,
    square_outer,
)
from .compact import compactness_probe, dp_matrix, greedy_net, sample_PL
from .dpp import dpp_enumeration_bound, dpp_residual, fit_value_table, law_invariance_gap
from .uniqueness import bsde_closed_form, bsde_envelope, envelope_constant, fit_C_K, nplayer_cauchy, sandwich_check
