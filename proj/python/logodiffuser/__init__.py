"""Python bindings for the logodiffuser core library."""

import json as _json

from ._core import (
    Error,
    RunConfig,
    __version__,
    cfg_combine,
    char_f1,
    config_keys,
    core_token_count,
    euler_step,
    exact_match,
    gaussian_noise,
    noise_to,
    rasterize,
    select_core_tokens,
)
from . import _core


def generate(config=None):
    """Run one generation. Returns a dict with `image` (uint8, HxW),
    `checksum` and the parsed `manifest`."""
    out = _core.generate(config if config is not None else RunConfig())
    out["manifest"] = _json.loads(out["manifest"])
    return out


def sweep(config=None):
    """Run the (ratio, cutoff) grid. Returns `csv`, `failures` and `manifest`."""
    out = _core.sweep(config if config is not None else RunConfig())
    out["manifest"] = _json.loads(out["manifest"])
    return out


__all__ = [
    "Error",
    "RunConfig",
    "cfg_combine",
    "char_f1",
    "config_keys",
    "core_token_count",
    "euler_step",
    "exact_match",
    "gaussian_noise",
    "generate",
    "noise_to",
    "rasterize",
    "select_core_tokens",
    "sweep",
]
