"""Dual prior-control diffusion training, sampling, and evaluation."""

__version__ = "0.1.0"

_SUBMODULES = ("tensor", "schedule", "model", "optim", "trainer", "sampler",
               "dataset", "metrics", "harness", "cli", "common")


def __getattr__(name):
    # Lazy so the CLI can pin BLAS thread env vars before numpy loads.
    if name in _SUBMODULES:
        import importlib
        return importlib.import_module(f".{name}", __name__)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
