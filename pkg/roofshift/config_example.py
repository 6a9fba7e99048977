"""
roofshift

Config File

This configuration file is read as Python so things can be customized as
desired. Any missing items go to the defaults already specified. A JSON
file with the same keys is also accepted.

Coordinates are pixels, x to the right and y down. Angles for scenes are
in radians except `nadir_angle` (degrees); training angles are in degrees.
"""
_roofshift_version = "__VERSION__"

# Seed for every randomized command. `synth` and `train-toy` also require
# --seed on the command line, which wins over this value.
seed = 0

## Synthetic scenes (synth)

scene_width = 512
scene_height = 512
n_images = 1
n_buildings = 20

# Building heights in meters and ground sample distance in meters/pixel.
# The roof-to-footprint offset has length height * tan(nadir_angle) / gsd
height_range = (6.0, 60.0)
gsd = 0.6
nadir_angle = 30.0  # degrees, [0, 60]

# Offset direction in radians (image frame). None draws one per image, or
# one per building when azimuth_per_building = True
azimuth = None
azimuth_per_building = False

# Roof shape: "rectangle" or "l_shape"
footprint_kind = "rectangle"

# Roof side lengths (pixels) and the minimum spacing between buildings
size_range = (16.0, 48.0)
building_gap = 2.0

# Split recorded in the written dataset: train, val, test or unsplit
split = "unsplit"

## Prediction noise (synth --pred-out)

vertex_jitter_sigma = 0.0  # pixels, per roof vertex coordinate
offset_noise_sigma = 0.0  # pixels, per offset component
drop_rate = 0.0  # probability a building gets no prediction
spurious_rate = 0.0  # expected spurious predictions per image

# "iou_linked": score is the footprint Mask IoU with its source clipped to
# [0.05, 1]. "uniform": every prediction scores 1.0
score_model = "iou_linked"

# None uses `seed`
noise_seed = None

## Evaluation (evaluate)

iou_threshold = 0.5
boundary_threshold = 0.5

# Boundary band radius in pixels. None is 0.02 x the image diagonal
boundary_d = None

# Polygons are rasterized at image resolution times this
raster_scale = 1.0

# Images evaluated concurrently. __CPU_COUNT__ is available here
jobs = 1

## Toy offset regressor (train-toy)

train_angles = [0, 90, 180, 270]  # degrees. The first must be 0
train_fusion = "max_norm"  # "max_norm", "mean" or "max_component"
train_steps = 4000
train_lr = 0.01
train_hidden = 32

# Synthetic pooled features: channels x size x size. Offsets have length
# drawn from train_offset_range and are encoded against a square proposal
feature_channels = 2
feature_size = 9
feature_scale = 16.0
train_offset_range = (2.0, 16.0)
train_proposal_size = 32.0
train_n_test = 500

# Also train the single-angle ([0]) model and report both
train_baseline = True
