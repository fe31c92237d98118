"""Runtime configuration and tunables for keypatch."""

# --------- SIFT ----------
SIFT_OCTAVES           = 0      # 0 -> derived from image size
SIFT_MAX_OCTAVES       = 4
SIFT_MIN_OCTAVE_DIM    = 16     # octave-count floor (pixels)
SIFT_SCALES_PER_OCTAVE = 3
SIFT_BASE_SIGMA        = 1.6
SIFT_ASSUMED_BLUR      = 0.5
SIFT_CONTRAST          = 0.03   # on [0,1] intensities
SIFT_EDGE_RATIO        = 10.0
SIFT_UPSAMPLE          = False
SIFT_REFINE_STEPS      = 5

# --------- ViT (desk scale) ----------
VIT_IMAGE_SIZE   = 64
VIT_PATCH_SIZE   = 8
VIT_LAYERS       = 4
VIT_HEADS        = 4
VIT_EMBED_DIM    = 64
VIT_MLP_RATIO    = 4.0
VIT_USE_CLS      = False
VIT_INIT_STD     = 0.02
SEED             = 0

# --------- Analysis ----------
GAMMA            = 1.0
THETA_LAYERS     = ""     # comma separated layer indices, empty -> all layers
THETA_WEIGHTING  = "weighted"   # weighted (keypoint counts t_j) | unweighted (patch counts)

# --------- Masking ----------
MASK_MODE        = "guided"   # top | bottom | guided | random
MASK_RATIO       = 0.5
MASK_BETA        = 0.5
MASK_FILL        = "mean"     # mean | gray | black
CURRICULUM_BETAS = [0.1, 0.2, 0.3, 0.4, 0.5]
CURRICULUM_ROUNDS = 10        # rounds per curriculum stage

# --------- Report ----------
IMAGE_FORMAT     = "png"      # png | ppm for masked images
