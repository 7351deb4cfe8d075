"""Low-rank tensor completion for daily gridded satellite columns.

Point observations are rasterized into a day x latitude x longitude tensor,
gaps are filled by a masked CP decomposition fitted with alternating least
squares, and the result is compared against per-day spatial baselines
(ordinary kriging, inverse-distance weighting, mean fill).
"""

__version__ = "0.1.0"
