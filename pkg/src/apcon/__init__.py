"""Asymptotic-preserving convolutional DeepONets for the 1D linear transport equation."""

import os

if os.environ.get("APCON_DETERMINISTIC", "1") != "0":
    # single-threaded XLA CPU kernels give a fixed reduction order
    _flags = os.environ.get("XLA_FLAGS", "")
    if "xla_cpu_multi_thread_eigen" not in _flags:
        os.environ["XLA_FLAGS"] = (_flags + " --xla_cpu_multi_thread_eigen=false").strip()

import jax

jax.config.update("jax_enable_x64", True)

__version__ = "0.1.0"
