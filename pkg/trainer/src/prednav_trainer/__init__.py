"""Offline trainer for the occupancy-map prediction network.

Interacts with the navigation stack only through files: reads grid-format
training pairs, writes OMPW weight bundles.
"""

__version__ = "0.1.0"

FREE, OCCUPIED, UNKNOWN = 0, 1, 2
NUM_CLASSES = 3
INPUT_SIZE = 120
OUTPUT_SIZE = 150
ENCODER_FILTERS = (64, 128, 256, 512, 512, 512, 512)
DECODER_FILTERS = (512, 1024, 1024, 1024, 512, 256, 128)
