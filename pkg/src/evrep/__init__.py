"""Event-camera streams to LLM-compatible image representations.

Pipeline: parse event files -> encode Tencode / event frames -> run or
train the encoder-decoder generator -> benchmark representations with a
zero-shot recognition harness over pluggable LLM backends.
"""

from .errors import EvrepError
from .events import (
    DatasetIndex,
    Event,
    EventStream,
    SampleRef,
    encode_nmnist_bin,
    parse_csv_events,
    parse_nmnist_bin,
    split_dataset,
    window_events,
)
from .generator import (
    CheckpointMeta,
    Generator,
    GeneratorConfig,
    build_generator,
    crop_to_record,
    load_checkpoint,
    pad_to_grid,
    save_checkpoint,
)
from .llm import (
    BackendConfig,
    CaptionRequest,
    HttpBackend,
    LLMResponse,
    MockBackend,
    RecordingBackend,
    ReplayBackend,
    build_backend,
    caption,
    parse_prediction,
    recognize,
)
from .losses import (
    DualLossBreakdown,
    EdgeMap,
    LossWeights,
    dual_loss,
    fidelity_loss,
    jaccard_loss,
    sobel_edge_map,
    tokenize_words,
)
from .representation import (
    RepImage,
    TencodeFrame,
    encode_event_frame,
    encode_tencode,
    export_png,
    load_image,
)
from .training import TrainConfig, TrainPair, evaluate_semantic, semantic_gradient_spsa, spsa_gradient, train
from .evaluation import (
    AccuracyReport,
    EvalRecord,
    aggregate,
    compare_representations,
    load_external_frames,
    run_recognition,
)

__version__ = "0.1.0"
