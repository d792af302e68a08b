"""Quantization-aware training for CTR recommendation models.

Subpackages and modules:

* ``quant``    scalar/tensor quantization primitives and 4-bit packing
* ``model``    the embedding + MLP network with explicit backprop
* ``modelio``  bit-packed 4-bit model container
* ``data``     Criteo-format ingestion and the synthetic generator
* ``comm``     deterministic data-parallel simulation with gradient
               sparsification, quantization, and error compensation
* ``metrics``  accuracy / ROC AUC / structured run logs
* ``kernels``  compiled hot loops with a bit-identical numpy fallback
"""

__version__ = "0.1.0"

from . import comm, config, data, kernels, metrics, model, modelio, quant  # noqa: F401
