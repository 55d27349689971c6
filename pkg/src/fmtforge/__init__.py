"""fmtforge: force-aware multimodal transformer diffusion policy at desk scale.

A numpy package with a small reverse-mode autodiff core, asynchronous
RGB / force-torque stream alignment, tool gravity compensation, a synthetic
contact-rich simulator (numba-accelerated with a pure-numpy fallback), and
an experiment harness for force-vs-vision ablations and sampling-rate sweeps.
"""

__version__ = "0.1.0"
