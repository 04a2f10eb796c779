"""No-reference photo quality assessment with a multi-task CNN.

Modules:

- ``imaging``: grayscale conversion, local contrast normalization, patches
- ``scene``: 37-dim scene descriptors and K-means scene labels
- ``network``: shared-backbone CNN with quality and scene heads, checkpoints
- ``training``: losses, label encoding, Adam training loop
- ``evaluation``: image aggregation, per-scene SROCC, scene accuracy, reports
- ``data``: dataset layout, synthetic datasets, sample building
- ``experiments``: end-to-end helpers and the alpha comparison
"""

__version__ = "0.1.0"
