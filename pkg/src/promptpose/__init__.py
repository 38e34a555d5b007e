"""Zero- and few-shot keypoint detection with visual and text prompts."""

from . import (auxgen, corpus, detector, diverseprompt, encoder, gateway,
               harness, objective, prototype, synthetic)

__all__ = ["auxgen", "corpus", "detector", "diverseprompt", "encoder",
           "gateway", "harness", "objective", "prototype", "synthetic"]

__version__ = "0.1.0"
