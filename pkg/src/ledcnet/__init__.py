"""LEDCNet: a lightweight dense-connected backbone with an ASPP + OCR decoder
for building and road segmentation in aerial imagery."""
from .config import RunConfig, preset
from .decoder import DecoderOutput
from .metrics import ConfusionMatrix, MetricReport
from .model import LEDCNet, build_model, load_checkpoint, save_checkpoint

__all__ = ["ConfusionMatrix", "DecoderOutput", "LEDCNet", "MetricReport", "RunConfig",
           "build_model", "load_checkpoint", "preset", "save_checkpoint"]
__version__ = "0.1.0"
