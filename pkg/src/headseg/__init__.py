"""Head-model generation from paired T1/T2 volumes: preprocessing,
rule-based and network segmentation, tri-axial label fusion and tissue
morphometry."""
from .volcore import TISSUES, IntensityVolume, LabelVolume, TissueId, VoxelNeighborhood

__version__ = "0.1.0"
__all__ = ["TISSUES", "IntensityVolume", "LabelVolume", "TissueId", "VoxelNeighborhood"]
