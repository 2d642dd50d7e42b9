"""Hot-kernel backend selection.

The compiled extension is used when it imports; otherwise the numpy fallback.
Set ``PRIORDEPTH_BACKEND=python`` to force the fallback.
"""
import importlib
import os

_NAMES = {"cython": "priordepth._ckernels", "python": "priordepth._pykernels"}


def load(name):
    """Import a backend module by short name (``"cython"`` or ``"python"``)."""
    return importlib.import_module(_NAMES[name])


def available():
    found = []
    for name in _NAMES:
        try:
            load(name)
        except ImportError:
            continue
        found.append(name)
    return found


def _select():
    forced = os.environ.get("PRIORDEPTH_BACKEND")
    if forced:
        return forced, load(forced)
    try:
        return "cython", load("cython")
    except ImportError:
        return "python", load("python")


BACKEND, impl = _select()
