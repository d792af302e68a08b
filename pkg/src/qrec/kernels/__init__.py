"""Kernel backend selection.

The compiled extension is used when present; set ``QREC_PURE_PYTHON=1`` to
force the numpy fallback (the benchmark and parity tests rely on this).
Both backends are bit-identical, so the choice never affects results.
"""

import os

from . import _py

if os.environ.get("QREC_PURE_PYTHON", "0") not in ("", "0"):
    _impl = _py
else:
    try:
        from . import _ext as _impl  # type: ignore[no-redef]
    except ImportError:
        _impl = _py

BACKEND = _impl.BACKEND_NAME

maxabs = _impl.maxabs
row_maxabs = _impl.row_maxabs
quantize = _impl.quantize
dequantize = _impl.dequantize
fake_quantize = _impl.fake_quantize
fake_quantize_rows = _impl.fake_quantize_rows
embedding_bag_fq = _impl.embedding_bag_fq
embedding_bag = _impl.embedding_bag
pack_int4 = _impl.pack_int4
unpack_int4 = _impl.unpack_int4

__all__ = [
    "BACKEND",
    "maxabs",
    "row_maxabs",
    "quantize",
    "dequantize",
    "fake_quantize",
    "fake_quantize_rows",
    "embedding_bag_fq",
    "embedding_bag",
    "pack_int4",
    "unpack_int4",
]
