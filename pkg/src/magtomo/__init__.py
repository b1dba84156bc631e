"""magtomo: magnetic ray transform of tensor fields on chart domains.

Forward transform along magnetic geodesics, gauge structure and Witten-type
solenoidal projection, localized conjugated normal operators with symbol
ellipticity scans, and gauge-constrained local/global inversion by layer
stripping.
"""

__version__ = "0.1.0"

from . import errors, flow, geometry, grids, inversion, normalop, tensorfields, transform  # noqa: F401
