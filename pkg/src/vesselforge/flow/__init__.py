"""Conditional flow matching at toy scale: linear path, CFM loss, Euler sampling."""

from vesselforge.flow.fields import AnalyticField, ConstantField, LinearField, MLPField, VelocityField, make_field
from vesselforge.flow.path import (
    EPS,
    Batch,
    Conditioning,
    FlowError,
    PathSample,
    cfm_loss,
    draw_batch,
    forward_interpolate,
    loss_gradient_check,
    make_batch,
    path_sample,
    target_velocity,
)
from vesselforge.flow.store import load_field, save_field
from vesselforge.flow.train import (
    EulerSchedule,
    FlowPair,
    dataset_stats,
    euler_sample,
    foreground_gap,
    generate_dflow,
    toy_dataset,
    train_toy,
)
