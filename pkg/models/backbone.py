from typing import Sequence

from .layers import ConvStack, Frozen, init_parameters


class Backbone(ConvStack):
    """Seeded convolution stack standing in for a pretrained feature extractor.

    Never trained; shared by the peripheral, foveal and attention paths.
    """

    def __init__(self, specs: Sequence, seed: int = 1234):
        super().__init__(specs, norm=False, dropout=0.0)
        self.seed = seed
        init_parameters(self, seed)


def frozen_backbone(specs: Sequence, seed: int = 1234) -> Frozen:
    return Frozen(Backbone(specs, seed))
