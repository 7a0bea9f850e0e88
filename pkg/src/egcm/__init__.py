"""Edge-classification GNN for NetFlow intrusion detection with Mixup and contrastive training."""

from .config import ARTIFACT_VERSION as __version__

__all__ = ["__version__"]
