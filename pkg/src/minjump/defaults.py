"""Central configuration block: every tolerance and CLI default lives here.

Reports echo the effective values so that numbers in output files can be
traced back to a named constant.
"""

# Conservativity of rate kernels: |row sum| below PASS is accepted as-is,
# between PASS and REPAIR the diagonal is adjusted (with a warning), above
# REPAIR the kernel is rejected.
ROW_SUM_PASS = 1e-12
ROW_SUM_REPAIR = 1e-9

# Sub-stochasticity slack for transition tables.
SUBSTOCHASTIC_SLACK = 1e-9

# Term-sum controls.
TERM_TOL = 1e-7
N_MAX_TERMS = 10_000

# Grid step for quadrature / residual evaluation.
GRID_STEP = 1e-3

# Supremum of a closed-form rate function is taken over this many grid
# points when no analytic bound is declared.
QBAR_GRID_POINTS = 10_000

# Monte Carlo defaults.
MC_PATHS = 100_000
MAX_JUMPS = 10_000
SE_FACTOR = 3.0

# Markov-policy time bin width.
POLICY_BIN_WIDTH = 0.05

# Mass at which a marginal table counts as "full" (equality regime of the
# dominance check).
FULL_MASS_TOL = 1e-6


def as_dict() -> dict:
    """Effective configuration, embedded verbatim into run reports."""
    return {
        k: v
        for k, v in globals().items()
        if k.isupper() and isinstance(v, (int, float))
    }
