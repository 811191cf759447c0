"""Domain-incremental Wi-Fi RSS indoor localization toolkit.

Subpackages follow the pipeline: `nn` (dense kernel + Adam + gradient
checker), `mlvae` (disentangling VAE and its losses), `cesa` (prototype
memory + MMD alignment), `incremental` (lifecycle orchestration), `simgen`
(synthetic multi-domain scenarios), `dataio` (formats and persistence),
`evaluate` (metrics and reports), `cli` (command line). The hot kernels run
on a compiled core when built, with a numpy fallback (`dailoc.backend`).
"""

from .backend import BACKEND_NAME

__version__ = "0.1.0"
__all__ = ["BACKEND_NAME", "__version__"]
