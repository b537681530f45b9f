"""feddet: a desk-scale federated object detection simulator.

The heavy lifting lives in the C++ extension; this package re-exports it.
"""

from feddet._core import (  # noqa: F401
    BBox,
    Benchmark,
    DetectorConfig,
    DetectorModel,
    EnsembleModel,
    FederationState,
    Scene,
    build_benchmark,
    combine_indicators,
    distill_aggregate,
    ensemble_predict,
    ensemble_step,
    evaluate_detections,
    evaluate_split,
    fedavg_aggregate,
    init_federation,
    init_student,
    iou,
    kl_channelwise,
    l2_loss,
    load_benchmark,
    load_model,
    make_ensemble,
    nms,
    nwm,
    run_round,
    save_benchmark,
    soft_nms,
    spatial_softmax,
    wbf,
)

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
