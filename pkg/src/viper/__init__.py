"""Volume-invariant position-based elastic rods."""

from viper.rod import (
    DofLayout,
    InvalidInput,
    MaterialParams,
    RodRestPose,
    RodState,
    make_rest_pose,
    straight_rest_pose,
)

__all__ = [
    "DofLayout",
    "InvalidInput",
    "MaterialParams",
    "RodRestPose",
    "RodState",
    "make_rest_pose",
    "straight_rest_pose",
]
