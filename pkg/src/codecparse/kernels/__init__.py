"""Hot-kernel backend selection.

The compiled extension (`_conv_core`, Cython + BLAS) is preferred when it
imported cleanly; the numpy fallback is always available. Set
CODECPARSE_PURE=1 to force the fallback, e.g. for benchmarking the two
backends against each other.
"""

import os

from . import fallback

impl = fallback
if os.environ.get("CODECPARSE_PURE") != "1":
    try:
        from . import _conv_core as impl  # type: ignore[no-redef]
    except ImportError:
        impl = fallback

BACKEND = impl.BACKEND
