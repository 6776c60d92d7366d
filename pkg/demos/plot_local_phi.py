"""
Local functionals: phi with a jump
==================================

For the value F(t) the right-hand side of the integral equation stops at
t, and phi jumps there.  Exponential noise has a closed-form solution to
compare with; for the elbow density we only look at the jump.
Figure: ``local_phi.png``.
"""

import numpy as np

from npinteq.deconv import (ConvolutionKernel, exponential_closed_forms,
                            local_scaling_constant_deconv, solve_phi_local)

t = 0.5

# %%
# Exponential noise: the numerical and closed-form solutions agree.
expo = ConvolutionKernel.exponential()
phi_exp = solve_phi_local(t, None, expo, 2000)
K, theta, exact, sigma2 = exponential_closed_forms(t)
x = np.linspace(0, 1, 401)
x = x[x != t]
print(f"max |phi - closed form| = {np.max(np.abs(phi_exp(x) - exact(x))):.1e}")
print(f"K_t = {K:.6f}, sigma_t^2 = {sigma2:.5f}")

# %%
# Elbow noise: the solution jumps exactly at t.
elbow = ConvolutionKernel.elbow()
phi_elbow = solve_phi_local(t, None, elbow, 2000)
print(f"jump at {phi_elbow.jump_point}: {phi_elbow.value_left:.4f} -> {phi_elbow.value_right:.4f}")
print(f"cube-root standardizing factor at t: {local_scaling_constant_deconv(t, None, elbow):.4f}")

# %%
try:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
except ImportError:
    plt = None
if plt is not None:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for phi, name in ((phi_exp, "exponential"), (phi_elbow, "elbow")):
        left = phi.grid < t
        ax.plot(phi.grid[left], phi.values[left], label=name)
        ax.plot(phi.grid[~left], phi.values[~left], color=ax.lines[-1].get_color())
    ax.axvline(t, color="grey", lw=0.5)
    ax.legend()
    fig.tight_layout()
    fig.savefig("local_phi.png", dpi=120)
