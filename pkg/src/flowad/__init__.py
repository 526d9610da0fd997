"""Self-supervised anomaly detection toolkit.

Pipeline: saliency-constrained defect synthesis -> toy/ingested feature
maps -> invertible-flow density model trained with contrastive and
smoothed-classification objectives -> per-pixel/per-image anomaly
scoring with AUROC evaluation.
"""

from flowad.tensor import Tensor, no_grad

__all__ = ["Tensor", "no_grad"]
__version__ = "0.1.0"
