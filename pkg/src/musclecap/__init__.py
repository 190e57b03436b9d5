"""Differentiable quasistatic muscle simulation for blendshape-driven face capture.

Submodules are imported lazily so the command line entry point can configure
BLAS thread counts before numpy is first loaded.
"""

__version__ = "0.1.0"

_SUBMODULES = (
    "geometry",
    "rig",
    "anatomy",
    "material",
    "quasistatic",
    "sensitivity",
    "imaging",
    "capture",
    "assets",
    "fileio",
    "cli",
)


def __getattr__(name):
    if name in _SUBMODULES:
        import importlib

        module = importlib.import_module(f"{__name__}.{name}")
        globals()[name] = module
        return module
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return sorted(list(globals()) + list(_SUBMODULES))
