"""The five-class CAVF label space shared across the pipeline."""

BACKGROUND = 0
CAPILLARY = 1
ARTERY = 2
VEIN = 3
FAZ = 4

N_CLASSES = 5
CLASS_NAMES = ("background", "capillary", "artery", "vein", "faz")

# Classes carried by the wide-field auxiliary modality.
SHARED_AUX_CLASSES = (ARTERY, VEIN)
