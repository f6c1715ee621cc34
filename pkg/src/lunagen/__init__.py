"""Synthetic lunar-landing image datasets with exact ground truth.

Submodules are imported on demand; importing the package itself is cheap and
does not start the compiled kernels.
"""

import warnings

__version__ = "0.1.0"

# numba probes for TBB and warns when the system copy is too old; the OpenMP
# or workqueue layer is used instead, which is all we need.
warnings.filterwarnings("ignore", message="The TBB threading layer requires TBB")
