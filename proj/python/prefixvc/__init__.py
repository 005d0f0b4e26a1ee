"""Emotion-controllable two-stage sequence conversion.

Thin re-export of the compiled core. Installed wheels carry ``_core`` inside
this package; source checkouts pick it up from the CMake build tree via
PYTHONPATH instead.
"""

try:
    from . import _core
except ImportError:  # running against the build tree
    import _core

Config = _core.Config
default_config_text = _core.default_config_text
parse_config = _core.parse_config
load_config = _core.load_config
gen_data = _core.gen_data
train = _core.train
convert = _core.convert
evaluate = _core.evaluate
ablate = _core.ablate
eer = _core.eer
load_mel = _core.load_mel

__version__ = _core.__version__

__all__ = [
    "Config",
    "default_config_text",
    "parse_config",
    "load_config",
    "gen_data",
    "train",
    "convert",
    "evaluate",
    "ablate",
    "eer",
    "load_mel",
    "__version__",
]
