"""Particle approximation of McKean-Vlasov SDEs with irregular coefficients.

Modules: ``model`` (coefficients and regularity checks), ``measure``
(Wasserstein distances), ``engine`` (Euler-Maruyama particle systems and
shared Brownian grids), ``yamada`` (smoothed absolute value),
``experiments`` (convergence sweeps), ``acceptance`` and ``cli``.
"""

__version__ = "0.1.0"
