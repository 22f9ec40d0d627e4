"""Initial-state reconstruction for stochastic parabolic equations.

P1 finite elements in space, semi-implicit Euler in time, a deterministic
representation of the discrete adjoint equation, and Tikhonov-regularized
conjugate-gradient minimization with Carleman-type diagnostics.
"""

__version__ = "0.1.0"
