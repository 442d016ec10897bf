# Pinned generator and evaluation constants for the 2-D toy suite.
# Changing any value changes reference KL / JSD numbers.

EIGHT_GAUSSIANS_RADIUS = 2.0
EIGHT_GAUSSIANS_NOISE = 0.2
EIGHT_GAUSSIANS_MODES = 8

SPIRAL_THETA_MAX_PI = 3.0      # theta in [0, 3 pi]
SPIRAL_RADIUS_MAX = 4.0        # r = 4 theta / (3 pi)
SPIRAL_NOISE = 0.1             # radial

CHECKERBOARD_CELLS = 4         # per axis
CHECKERBOARD_EXTENT = 4.0      # [-4, 4]^2

RINGS_RADII = (0.8, 1.6, 2.4, 3.2)
RINGS_JITTER = 0.08

HISTOGRAM_EXTENT = 4.5         # [-4.5, 4.5]^2
HISTOGRAM_BINS = 100
HISTOGRAM_EPS = 1e-10          # added to every bin count before normalizing

TOY_ITERATIONS = 30000
TOY_SAMPLES = 5000
TOY_TRAIN_POINTS = 100000
TOY_BATCH_SIZE = 4096

# smaller network than the representation default; 2-D inputs
TOY_HIDDEN_DIM = 256
TOY_NUM_BLOCKS = 4
