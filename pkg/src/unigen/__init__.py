"""unigen: a desk-scale unified image/video generator.

One diffusion transformer conditioned on an interleaved multimodal context
(text, reference images, reference video, learnable query tokens), trained
through a progressive curriculum on a synthetic shape corpus with exact
oracles.
"""

__version__ = "0.1.0"

from .context import ConditioningSpec, Task  # noqa: F401
from .pipeline import GeneratorSystem, SystemConfig  # noqa: F401
