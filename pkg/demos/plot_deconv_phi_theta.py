"""
Deconvolution with the elbow density
====================================

Z = X + Y with X uniform and Y with density g(y) = 2(1 - y) on [0, 1].
For the mean we solve for phi, turn it into the observation-space score
theta, and integrate theta^2 against h0; then we repeat the construction
at the MLE of a simulated sample, where theta needs an extension outside
[tau_1, tau_m + 1).  Figure: ``deconv_phi_theta.png``.
"""

import numpy as np

from npinteq.core_types import first_moment
from npinteq.deconv import (ConvolutionKernel, bar_phi_matrix, fit_mle_deconv,
                            integrate_theta_h0, observation_density, solve_phi_deconv,
                            theta_and_variance_deconv, theta_at_mle)
from npinteq.simulate import gen_deconv

g = ConvolutionKernel.elbow()
spec = first_moment()

# %%
# phi is pinned to zero at both ends; theta is unbounded near z = 2 but
# square integrable, and the variance quadrature refines toward that end.
phi = solve_phi_deconv(None, g, spec, 2000)
theta, var = theta_and_variance_deconv(phi, None, g)
print(f"int theta^2 h0 = {var:.5f}, int theta h0 = {integrate_theta_h0(theta, None, g):.1e}")

# %%
# At the MLE the same equation is solved with the fitted density hhat.
sample = gen_deconv(1000, None, g, seed=3)
fit = fit_mle_deconv(sample, g)
print(f"MLE: {fit.F.jump_points.size} support points in [{fit.tau1:.3f}, {fit.taum:.3f}]")
th = theta_at_mle(fit, spec)
h0 = observation_density(None, g)
mean_hat = float(fit.F.jump_points @ fit.F.masses)
print(f"int x d(Fhat - F0) = {mean_hat - 0.5:+.6f}, -int theta dH0 = {-th.integrate(h0):+.6f}")
print(f"point mass of theta at {th.atom[0]:.3f}: {th.atom[1]:+.4f}")

# %%
# The finite adjoint system gives the step-function analogue bar phi, whose
# theta integrates to zero against the empirical distribution of the Z's.
bar, _ = bar_phi_matrix(fit, sample, spec)
print(f"|int bar theta dHn| = {bar.residual_sup:.1e}")

# %%
try:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
except ImportError:
    plt = None
if plt is not None:
    fig, (a, b) = plt.subplots(1, 2, figsize=(9, 3.5))
    x = np.linspace(0, 1, 501)
    a.plot(x, phi(x), label="phi at F0")
    a.plot(th.phi.grid, th.phi.values, lw=0.8, label="phi at the MLE")
    a.step(x, bar(x), where="post", lw=0.8, label="bar phi")
    a.legend()
    z = theta.grid
    keep = z < 1.98
    b.plot(z[keep], theta.values[keep], label="theta at F0")
    b.plot(th.quadrature.nodes, th.values, lw=0.8, label="theta at the MLE")
    b.legend()
    fig.tight_layout()
    fig.savefig("deconv_phi_theta.png", dpi=120)
