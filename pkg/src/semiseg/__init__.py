"""Semi-supervised semantic segmentation via weak-to-strong consistency.

Provides image- and feature-level perturbation pipelines, the consistency
training step with configurable perturbation streams, a tiny reference
segmentation network for CPU-scale experiments, synthetic dataset tooling,
metrics, and a FastAPI service plus thin-client CLI on top.
"""

__version__ = "0.1.0"
