"""styleforge: style-transfer image synthesis as a training-data source.

Synthesizes images that merge the content of one class with the texture
of another, pseudo-labels them with a class-balancing threshold, trains
classifiers on the synthetic images only (validating and testing on the
originals), and reports per-fold AUC with and without the synthesis step.
"""

__version__ = "0.1.0"

from .errors import StyleforgeError  # noqa: F401
