from .conv import submanifold_conv
from .encoder import EncodedCloud, EncoderConfig, SparseEncoder, encoder_forward, masked_average, prepare
from .voxel import CENTER, OFFSETS, Rulebook, VoxelGrid, build_rulebook, voxelize
