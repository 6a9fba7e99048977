"""
Offset encoding against a proposal box, the smooth-L1 offset loss and its
gradient, the joint-loss composition, and a desk-scale offset regressor
(two-layer perceptron on the flattened pooled feature) trained with the
multi-branch FOA objective and SGD.

Regressor parameters are shared by every rotation branch. Per-branch losses
are summed into one objective before each update.
"""
import math
import time
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Tuple

import numpy as np

from . import debug, log
from . import utils
from .data_model import BBox, InvalidBoxError, OffsetVector, read_json
from .foa import (
    EmptyBranchError,
    FeatureMap,
    FusionStrategy,
    RotationAngleSet,
    fuse_offsets,
    from_polar,
    inverse_rotate_offset,
    rotate_feature_map,
    rotate_offset,
)

CHECKPOINT_FORMAT = "roofshift-regressor"
LAYERS = ("w1", "b1", "w2", "b2")


class ProposalError(InvalidBoxError):
    pass


class ParamShapeError(ValueError):
    pass


@dataclass(frozen=True)
class Proposal:
    """The matched building proposal whose size normalizes the offset"""

    bbox: BBox

    @classmethod
    def of_size(cls, w, h, x=0.0, y=0.0):
        try:
            return cls(BBox(float(x), float(y), float(w), float(h)))
        except InvalidBoxError as E:
            raise ProposalError(str(E))

    @property
    def w(self):
        return self.bbox.w

    @property
    def h(self):
        return self.bbox.h


def _proposal_dims(proposal):
    """Accepts a Proposal, a BBox or a (w, h) pair"""
    if isinstance(proposal, Proposal):
        proposal = proposal.bbox
    if isinstance(proposal, BBox):
        w, h = proposal.w, proposal.h
    else:
        w, h = (float(v) for v in proposal)
    if not (w > 0 and h > 0):
        raise ProposalError(f"Proposal width and height must be > 0. Got {w}x{h}")
    return w, h


class EncodedOffset(NamedTuple):
    phi_x: float
    phi_y: float


@dataclass(frozen=True)
class LossWeights:
    alpha1: float = 1.0
    alpha2: float = 1.0
    alpha3: float = 2.0

    def __post_init__(self):
        if min(self.alpha1, self.alpha2, self.alpha3) < 0:
            raise ValueError("Loss weights must be >= 0")


## Encoding and losses


def encode_offset(offset, proposal):
    w, h = _proposal_dims(proposal)
    return EncodedOffset(offset[0] / w, offset[1] / h)


def decode_offset(encoded, proposal):
    w, h = _proposal_dims(proposal)
    return OffsetVector(encoded[0] * w, encoded[1] * h)


def _check_beta(beta):
    if not beta > 0:
        raise ValueError(f"beta must be > 0. Got {beta}")


def smooth_l1(pred, target, beta=1.0):
    _check_beta(beta)
    x = np.abs(np.asarray(pred, dtype=float) - np.asarray(target, dtype=float))
    return float(np.sum(np.where(x < beta, 0.5 * x * x / beta, x - 0.5 * beta)))


def smooth_l1_grad(pred, target, beta=1.0):
    """d smooth_l1 / d pred, a 2-vector"""
    _check_beta(beta)
    x = np.asarray(pred, dtype=float) - np.asarray(target, dtype=float)
    return np.where(np.abs(x) < beta, x / beta, np.sign(x))


def joint_loss(l_rpn, l_rcnn, l_mask, l_offset, weights=None):
    """L = L_rpn + a1 L_rcnn + a2 L_mask + a3 L_offset"""
    weights = weights or LossWeights()
    if min(l_rpn, l_rcnn, l_mask, l_offset) < 0:
        raise ValueError("Loss terms must be >= 0")
    return (
        l_rpn
        + weights.alpha1 * l_rcnn
        + weights.alpha2 * l_mask
        + weights.alpha3 * l_offset
    )


## Regressor


@dataclass(frozen=True, eq=False)
class RegressorParams:
    """
    w1 (hidden, C*H*W), b1 (hidden,), w2 (2, hidden), b2 (2,). `velocity`
    holds the momentum buffers (same shapes) once a step has been taken.
    """

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    velocity: Optional[Tuple[np.ndarray, ...]] = None

    def __post_init__(self):
        hidden, in_dim = np.shape(self.w1)
        shapes = {
            "b1": (hidden,),
            "w2": (2, hidden),
            "b2": (2,),
        }
        for name, shape in shapes.items():
            if np.shape(getattr(self, name)) != shape:
                raise ParamShapeError(
                    f"{name} must have shape {shape}. Got {np.shape(getattr(self, name))}"
                )
        for name in LAYERS:
            arr = np.array(getattr(self, name), dtype=float)
            if not np.all(np.isfinite(arr)):
                raise ParamShapeError(f"{name} has non-finite values")
            object.__setattr__(self, name, arr)

    @property
    def in_dim(self):
        return self.w1.shape[1]

    @property
    def hidden(self):
        return self.w1.shape[0]

    def arrays(self):
        return tuple(getattr(self, name) for name in LAYERS)

    @classmethod
    def zeros(cls, in_dim, hidden):
        return cls(
            np.zeros((hidden, in_dim)),
            np.zeros(hidden),
            np.zeros((2, hidden)),
            np.zeros(2),
        )


def init_params(in_dim, hidden=32, seed=0):
    """Uniform +/- sqrt(6 / (fan_in + fan_out)) weights, zero biases"""
    rng = np.random.default_rng([int(seed), 0])
    lim1 = math.sqrt(6.0 / (in_dim + hidden))
    lim2 = math.sqrt(6.0 / (hidden + 2))
    return RegressorParams(
        w1=rng.uniform(-lim1, lim1, size=(hidden, in_dim)),
        b1=np.zeros(hidden),
        w2=rng.uniform(-lim2, lim2, size=(2, hidden)),
        b2=np.zeros(2),
    )


def _flatten(params, feature):
    if not isinstance(feature, FeatureMap):
        feature = FeatureMap(feature)
    x = feature.values.ravel()
    if x.size != params.in_dim:
        raise ParamShapeError(
            f"Feature has {x.size} values but the regressor expects {params.in_dim}"
        )
    return x


def _forward(params, x):
    z1 = params.w1 @ x + params.b1
    h = np.maximum(z1, 0.0)
    return z1, h, params.w2 @ h + params.b2


def forward_regressor(params, feature):
    _, _, out = _forward(params, _flatten(params, feature))
    return EncodedOffset(float(out[0]), float(out[1]))


def foa_objective(params, feature, gt, proposal, angles, beta=1.0):
    """
    Summed smooth-L1 objective over every rotation branch and its analytic
    gradient.

    Each branch rotates the feature map and the ground-truth offset by the
    same angle, encodes the rotated offset against the proposal and
    regresses it with the shared parameters.

    Returns:
    --------
    total, branch_losses, grads
        grads is a tuple (gw1, gb1, gw2, gb2) in LAYERS order
    """
    angles = _angle_list(angles)
    grads = [np.zeros_like(a) for a in params.arrays()]
    branch_losses = []
    for theta in angles:
        x = _flatten(params, rotate_feature_map(feature, theta))
        target = np.array(encode_offset(rotate_offset(gt, theta), proposal))
        z1, h, out = _forward(params, x)

        branch_losses.append(smooth_l1(out, target, beta))
        g_out = smooth_l1_grad(out, target, beta)
        g_z1 = (params.w2.T @ g_out) * (z1 > 0)

        grads[0] += np.outer(g_z1, x)
        grads[1] += g_z1
        grads[2] += np.outer(g_out, h)
        grads[3] += g_out

    return float(sum(branch_losses)), branch_losses, tuple(grads)


def sgd_step(params, grads, lr, momentum=0.9, weight_decay=1e-4):
    """
    One SGD update with momentum and (coupled) weight decay:

        d = g + wd * p
        v = d                 (first step)
        v = momentum * v + d  (after)
        p = p - lr * v
    """
    if lr < 0:
        raise ValueError(f"lr must be >= 0. Got {lr}")
    new, vel = [], []
    for ii, (p, g) in enumerate(zip(params.arrays(), grads)):
        d = g + weight_decay * p
        v = d if params.velocity is None else momentum * params.velocity[ii] + d
        vel.append(v)
        new.append(p - lr * v)
    return RegressorParams(*new, velocity=tuple(vel))


def foa_training_step(
    params,
    feature,
    gt,
    proposal,
    angles,
    lr=0.01,
    beta=1.0,
    momentum=0.9,
    weight_decay=1e-4,
):
    """Returns (updated params, per-branch losses)"""
    _, branch_losses, grads = foa_objective(params, feature, gt, proposal, angles, beta)
    return sgd_step(params, grads, lr, momentum, weight_decay), branch_losses


def _angle_list(angles):
    if isinstance(angles, RotationAngleSet):
        return list(angles.angles)
    angles = [float(a) for a in angles]
    if not angles:
        raise EmptyBranchError("Need at least one rotation angle")
    return angles


def foa_predict(
    params,
    feature,
    proposal,
    angles,
    strategy=FusionStrategy.MAX_NORM,
    forward=forward_regressor,
):
    """
    Regress on each rotated copy of the feature, decode against the proposal,
    rotate each prediction back and fuse. `forward` is the per-branch
    regressor (params, FeatureMap) -> EncodedOffset.
    """
    candidates = []
    for theta in _angle_list(angles):
        encoded = forward(params, rotate_feature_map(feature, theta))
        candidates.append(
            inverse_rotate_offset(decode_offset(encoded, proposal), theta)
        )
    return fuse_offsets(candidates, strategy)


## Checkpoints


def save_checkpoint(params, path, header=None):
    """
    JSON checkpoint: a header (seed, angles, hyperparameters...) and each
    layer's shape with its row-major values.
    """
    obj = {
        "format": CHECKPOINT_FORMAT,
        "header": dict(header or {}),
        "layers": [
            {
                "name": name,
                "shape": list(arr.shape),
                "values": [float(v) for v in arr.ravel()],
            }
            for name, arr in zip(LAYERS, params.arrays())
        ],
    }
    utils.write_json(obj, path, indent=None)


def load_checkpoint(path):
    """Returns (params, header)"""
    obj = read_json(path)
    if not isinstance(obj, dict) or obj.get("format") != CHECKPOINT_FORMAT:
        raise ParamShapeError(f"'{path}' is not a {CHECKPOINT_FORMAT} checkpoint")
    arrays = {}
    for layer in obj["layers"]:
        arrays[layer["name"]] = np.array(layer["values"], dtype=float).reshape(
            layer["shape"]
        )
    return RegressorParams(*(arrays[name] for name in LAYERS)), obj.get("header", {})


## Desk-scale training


@dataclass(frozen=True)
class TrainConfig:
    angles: RotationAngleSet = field(default_factory=RotationAngleSet)
    fusion: FusionStrategy = FusionStrategy.MAX_NORM
    steps: int = 4000
    seed: int = 0
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    beta: float = 1.0
    hidden: int = 32
    channels: int = 2
    size: int = 9
    min_offset: float = 2.0
    max_offset: float = 16.0
    proposal_size: float = 32.0
    feature_scale: float = 16.0
    n_test: int = 500

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if not 0 <= self.min_offset <= self.max_offset:
            raise ValueError("Need 0 <= min_offset <= max_offset")
        object.__setattr__(self, "fusion", FusionStrategy(self.fusion))
        if not isinstance(self.angles, RotationAngleSet):
            object.__setattr__(self, "angles", RotationAngleSet(tuple(self.angles)))

    @classmethod
    def from_config(cls, config, **overrides):
        kwargs = {
            "angles": RotationAngleSet.from_degrees(config.train_angles),
            "fusion": config.train_fusion,
            "steps": config.train_steps,
            "seed": config.seed,
            "lr": config.train_lr,
            "hidden": config.train_hidden,
            "channels": config.feature_channels,
            "size": config.feature_size,
            "min_offset": config.train_offset_range[0],
            "max_offset": config.train_offset_range[1],
            "proposal_size": config.train_proposal_size,
            "feature_scale": config.feature_scale,
            "n_test": config.train_n_test,
        }
        kwargs.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**kwargs)

    @property
    def in_dim(self):
        return self.channels * self.size * self.size

    def proposal(self):
        return Proposal.of_size(self.proposal_size, self.proposal_size)

    def header(self):
        return {
            "seed": self.seed,
            "angles_deg": self.angles.degrees(),
            "fusion": self.fusion.value,
            "steps": self.steps,
            "lr": self.lr,
            "momentum": self.momentum,
            "weight_decay": self.weight_decay,
            "beta": self.beta,
            "hidden": self.hidden,
            "feature": [self.channels, self.size, self.size],
            "feature_scale": self.feature_scale,
            "offset_range": [self.min_offset, self.max_offset],
            "proposal_size": self.proposal_size,
        }


def sample_offsets(rng, n, min_offset, max_offset):
    """Offsets with uniform length in [min, max] and uniform direction"""
    rho = rng.uniform(min_offset, max_offset, size=n)
    theta = rng.uniform(0.0, 2.0 * math.pi, size=n)
    return [from_polar(float(r), float(t)) for r, t in zip(rho, theta)]


def _feature(config, offset):
    from .synth import generate_feature_for_offset

    return generate_feature_for_offset(
        offset, config.channels, config.size, config.size, scale=config.feature_scale
    )


def train_toy_regressor(config):
    """
    Train on offsets drawn from the seeded stream, one sample per step.
    Returns (params, final branch losses).
    """
    t0 = time.time()
    params = init_params(config.in_dim, config.hidden, config.seed)
    rng = np.random.default_rng([int(config.seed), 1])
    proposal = config.proposal()
    offsets = sample_offsets(rng, config.steps, config.min_offset, config.max_offset)

    losses = []
    for step, gt in enumerate(offsets):
        params, losses = foa_training_step(
            params,
            _feature(config, gt),
            gt,
            proposal,
            config.angles,
            lr=config.lr,
            beta=config.beta,
            momentum=config.momentum,
            weight_decay=config.weight_decay,
        )
        if step % 500 == 0:
            debug(f"step {step}: branch losses {[f'{l:.3g}' for l in losses]}")

    debug(
        f"Trained {len(config.angles)} branch(es) for {config.steps} steps "
        f"in {utils.time_format(time.time() - t0)}"
    )
    return params, losses


def evaluate_toy_regressor(params, config, n_test=None, seed=None):
    """
    Held-out end-point errors (pixels). The test stream depends only on the
    seed so every configuration with the same seed sees the same test set.
    """
    seed = config.seed if seed is None else seed
    n_test = config.n_test if n_test is None else n_test
    rng = np.random.default_rng([int(seed), 2])
    proposal = config.proposal()
    errors = []
    for gt in sample_offsets(rng, n_test, config.min_offset, config.max_offset):
        pred = foa_predict(
            params, _feature(config, gt), proposal, config.angles, config.fusion
        )
        errors.append(math.hypot(pred.ox - gt.ox, pred.oy - gt.oy))
    return np.array(errors)


def toy_report(config, errors, final_losses):
    return {
        "angles_deg": config.angles.degrees(),
        "fusion": config.fusion.value,
        "steps": config.steps,
        "seed": config.seed,
        "n_test": int(len(errors)),
        "mean_epe": float(np.mean(errors)) if len(errors) else None,
        "median_epe": float(np.median(errors)) if len(errors) else None,
        "final_branch_losses": [float(l) for l in final_losses],
    }


def run_toy(config):
    """Train, evaluate and report one configuration"""
    params, losses = train_toy_regressor(config)
    errors = evaluate_toy_regressor(params, config)
    report = toy_report(config, errors, losses)
    if report["mean_epe"] is not None:
        log(
            f"angles {report['angles_deg']} fusion {report['fusion']}: "
            f"mean EPE {report['mean_epe']:.4f} px over {report['n_test']} test offsets"
        )
    return params, report
