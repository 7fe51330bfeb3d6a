"""Per-frame gated execution over six-camera sets, with executed-MAC accounting."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from gatedssd.detector import Detection
from gatedssd.errors import ShapeError
from gatedssd.gate import gate_decide
from gatedssd.tensor import MacCounter, softmax

NUM_CAMERAS = 6


@dataclass(frozen=True)
class PipelineMode:
    """``gated=False`` runs every stage on every frame; otherwise frames with p < tau stop after the gate."""

    gated: bool = False
    tau: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError(f"tau {self.tau} outside [0, 1]")

    @property
    def name(self) -> str:
        return "gated" if self.gated else "baseline"


BASELINE = PipelineMode()


def gated(tau: float = 0.5) -> PipelineMode:
    return PipelineMode(True, tau)


@dataclass
class FrameResult:
    camera_id: int
    skipped: bool
    p_object: float | None
    detections: list[Detection]
    mac_count: int

    @property
    def verdict(self) -> str:
        return "skipped" if self.skipped else "detected"


@dataclass
class CameraFrameSet:
    frames: list

    def __post_init__(self):
        if len(self.frames) != NUM_CAMERAS:
            raise ShapeError(f"a camera set holds exactly {NUM_CAMERAS} frames, got {len(self.frames)}")
        shapes = {np.shape(f) for f in self.frames}
        if len(shapes) != 1:
            raise ShapeError(f"camera frames differ in shape: {sorted(shapes)}")


@dataclass
class CameraSetResult:
    frames: list[FrameResult] = field(default_factory=list)

    @property
    def total_macs(self) -> int:
        return sum(r.mac_count for r in self.frames)


def process_frame(model, frame, mode: PipelineMode = BASELINE, camera_id: int = 0,
                  preprocessed: bool = False, oracle_label: bool | None = None) -> FrameResult:
    """Run one frame through the detector.

    Baseline: backbone, extra layers, heads, postprocess. Gated: the gate runs
    on the backbone output first and a skip returns before any detection
    stage. ``oracle_label`` overrides the gate's verdict (the gate still runs,
    so its cost is paid) to separate pipeline speed from gate accuracy.
    """
    x = frame if preprocessed else model.preprocess(frame)
    if x.ndim == 3:
        x = x[None]
    if x.shape[0] != 1:
        raise ShapeError("process_frame takes a single frame")
    macs = MacCounter()
    taps = model.features(x, macs)
    p_object = None
    if mode.gated:
        p_object = float(softmax(model.gate_logits(taps, macs))[0, 1])
        passed = gate_decide(p_object, mode.tau).passed if oracle_label is None else bool(oracle_label)
        if not passed:
            return FrameResult(camera_id, True, p_object, [], macs.total)
    loc, conf = model.detect_raw(taps, macs)
    detections = model.decode_detections(loc, conf)[0]
    return FrameResult(camera_id, False, p_object, detections, macs.total)


def process_camera_set(model, frames, mode: PipelineMode = BASELINE, preprocessed: bool = False,
                       oracle_labels=None, workers: int = 1) -> CameraSetResult:
    """Process six frames independently, in camera-id order.

    ``workers > 1`` runs frames concurrently (not for timing); results keep
    camera order either way.
    """
    frame_set = frames if isinstance(frames, CameraFrameSet) else CameraFrameSet(list(frames))
    labels = oracle_labels if oracle_labels is not None else [None] * NUM_CAMERAS

    def run(cam):
        return process_frame(model, frame_set.frames[cam], mode, cam, preprocessed, labels[cam])

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, range(NUM_CAMERAS)))
    else:
        results = [run(cam) for cam in range(NUM_CAMERAS)]
    return CameraSetResult(results)


def expected_macs(model, passed: bool, mode: PipelineMode) -> int:
    """Closed-form MACs for one frame from the layer specs."""
    total = model.backbone_macs()
    if mode.gated:
        total += model.gate_macs()
    if passed or not mode.gated:
        total += model.detection_macs()
    return total
