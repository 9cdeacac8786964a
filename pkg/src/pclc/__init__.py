"""Zero-shot cross-domain slot filling via prototypical contrastive learning
with dynamic label confusion, on a self-contained float64 autodiff core."""

from .autodiff import Tape, Tensor, apply_primitive, backward
from .classifier import (
    PclcHyperparams,
    PrototypeMatrix,
    build_prototypes,
    confusion_target,
    encode_entity,
    kl_confusion_loss,
    predict_slot_type,
    proto_contrastive_loss,
    smooth_distribution,
)
from .data import (
    ExperimentSplit,
    SlotSchema,
    Utterance,
    Vocab,
    build_vocab,
    classify_seen_unseen,
    fewshot_select,
    load_corpus,
    load_embeddings,
    parse_conll,
    split_leave_one_out,
)
from .evaluate import EvalReport, SpanPrediction, export_prototypes, seen_unseen_report, span_f1
from .model import ModelDims, PclcModel
from .optim import Adam
from .tagger import CrfLayer, EncoderConfig, crf_nll, extract_spans, viterbi_decode
from .trainer import (
    Checkpoint,
    TrainConfig,
    early_stop_check,
    load_checkpoint,
    save_checkpoint,
    total_loss,
    train_run,
)

__version__ = "0.1.0"
