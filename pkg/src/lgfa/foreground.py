"""Reprojection of the ego vehicle and detected boxes into the completed-map frame."""
from __future__ import annotations

from typing import Iterable, Optional

from .map_model import AugmentedFrame, FrameObservation, ObjectBox, Pose2D, wrap_angle


def box_to_map(box: ObjectBox, theta: Pose2D) -> ObjectBox:
    cx, cy = theta.apply((box.cx, box.cy))
    return ObjectBox(float(cx), float(cy), wrap_angle(box.yaw + theta.phi), box.length, box.width, box.label)


def augment(frame: FrameObservation, objects: Optional[Iterable[ObjectBox]], theta: Pose2D,
            completed) -> AugmentedFrame:
    """Ego pose and ego-frame boxes expressed in the global frame of `completed`."""
    boxes = [box_to_map(b, theta) for b in (objects or ())]
    return AugmentedFrame(frame.frame_index, theta, completed, theta, boxes)
