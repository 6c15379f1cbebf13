"""Height-based bird's-eye-view construction at desk scale.

Modules:
    geometry: pinhole cameras and the depth/height error bounds with oracles.
    bevgrid: BEV grid, boxes, ground-truth height maps, file formats.
    sampling: anchor heights and multi-camera feature gathering.
    predictor: the layer-wise height predictor, its loss and training.
    metrics: detection matching, mAP and the detection score.
    synthscene: synthetic scenes, feature rendering and a LiDAR stand-in.
    pipeline: scene preparation, inference, readout and evaluation.
    cli: the ``heightbev`` command.
"""

__version__ = "0.1.0"
