"""Deep feature-space malware classification: byte images, two small CNN
feature extractors, concatenated features and a soft-margin SVM."""

from dfsmc.errors import DfsmcError

__version__ = "0.1.0"

__all__ = ["DfsmcError", "__version__"]
