"""Per-sample P/QRS/T delineation of single-lead ECG with a conv + BiLSTM labeller."""

from .dataset import CLASS_NAMES, SEGMENT_LENGTH, SampleClass
from .nn import Model, ModelConfig, param_count

__version__ = "0.1.0"

__all__ = ["CLASS_NAMES", "SEGMENT_LENGTH", "SampleClass", "Model", "ModelConfig", "param_count", "__version__"]
