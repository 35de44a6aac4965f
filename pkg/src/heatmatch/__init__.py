"""Spectral shape correspondence with heat-kernel supervision.

Library layout mirrors the processing pipeline: `mesh` (ingestion and
geometry), `spectral` (Laplace-Beltrami eigenbasis and heat kernels),
`geodesic` (graph shortest-path distances), `descriptor` (SHOT inputs),
`corrnet` (residual network, functional-map solve, unsupervised loss and
its gradients), `curriculum` (diffusion-time schedules), `evaluation`
(geodesic-error curves), and `pipeline` (configs, caches, training loop,
CLI entry points).
"""

__version__ = "0.1.0"
