"""
Lipschitz probes and stability constants
========================================

How sensitive is the feedback operator to the delay function, and how
large a control error can a closed loop tolerate?  Sample pairs of delays,
compare empirical difference quotients with their analytic ceilings, then
compute the decay-plus-ball constants for the benchmark short delay.

Run with ``python3 demos/04_robustness_constants.py``.
"""

# %%
from delaybs.analysis import PROBE_KINDS, constants_for, lipschitz_probe, stability_constants
from delaybs.coefficients import make_delay, standard_coefficients
from delaybs.controller import build_law

# %%
# Each probe draws random delay pairs from the sampler and reports the
# largest quotient seen next to the ceiling built from the delay bounds.
for kind in PROBE_KINDS:
    res = lipschitz_probe(kind, n_pairs=20, seed=0)
    print(f"{kind:>14}: max quotient {res.max:.3g}, median {res.median:.3g}, "
          f"ceiling {res.ceiling:.3g}, skipped {res.skipped}")

# %%
# Constants for the benchmark short delay. eps_star is the largest control
# error for which the residual ball still fits inside the state bounds.
coeffs = standard_coefficients()
law = build_law(coeffs, make_delay("exponential", {"amplitude": 0.5, "rate": -1.6}, 41))
sc = constants_for(law, B_x=10.0, B_u=10.0, epsilon=1e-3)
print(f"a = {sc.a:.3f}, M1 = {sc.M1:.3g}, M2 = {sc.M2:.3g}, eps_star = {sc.eps_star:.3g}")
for note in sc.assumptions:
    print("  assumes", note)

# %%
# A larger kernel bound shrinks the admissible error.
for K in (0.5, 1.0, 2.0, 4.0):
    c = stability_constants(1.0, 1.0, 1.0, 0.2, K, 2.0, 1.0, B_x=1.0, B_u=1.0)
    print(f"K_bar = {K}: eps_star = {c.eps_star:.3e}")

# %%
# The Lyapunov weights trade decay rate against the size of the envelope.
for b1, b2 in [(0.5, 0.5), (1.0, 1.0), (2.0, 2.0)]:
    c = constants_for(law, b1=b1, b2=b2)
    print(f"b1 = b2 = {b1}: a = {c.a:.3f}, M1 = {c.M1:.3g}, M2 = {c.M2:.3g}")
