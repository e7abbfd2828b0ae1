"""Convolution kernel backend selection.

The compiled Cython backend is used when its extension module is
importable; otherwise the pure-numpy twin takes over. Override with
ZIPKIT_KERNELS=numpy|cython (cython raises if the extension is missing).
Both backends implement the same functions with identical padding and
length conventions; tests assert their outputs agree.
"""

import os

from . import numpy_backend

_choice = os.environ.get("ZIPKIT_KERNELS", "auto")

if _choice == "numpy":
    backend = numpy_backend
elif _choice == "cython":
    from . import _conv_cy as backend  # type: ignore[no-redef]
else:
    try:
        from . import _conv_cy as backend  # type: ignore[no-redef]
    except ImportError:
        backend = numpy_backend

BACKEND_NAME = backend.NAME


def available_backends():
    """Returns the importable backends keyed by name."""
    found = {numpy_backend.NAME: numpy_backend}
    try:
        from . import _conv_cy
        found[_conv_cy.NAME] = _conv_cy
    except ImportError:
        pass
    return found
