"""nestvit: a desk-scale nested hierarchical vision transformer.

Blocked local self-attention with image-plane block aggregation, GradCAT /
CAM interpretability, and a transposed decoder generating 64x64 images — all
on a small numpy autodiff tape.
"""

import os as _os

# Cap BLAS/OpenMP pools before anything pulls in numpy; explicit settings in
# the environment win over the cap.
_threads = _os.environ.get("NEST_NUM_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                 "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

from .tensor import Tensor, ShapeError, GraphError, no_grad

__version__ = "0.1.0"

__all__ = ["Tensor", "ShapeError", "GraphError", "no_grad", "__version__"]
