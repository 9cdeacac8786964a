"""Two-stage slot filling model: BIO tagging, then prototype classification.

Holds every trainable tensor under a stable name so the optimizer and the
checkpoint format can address parameters consistently.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .classifier import EntityEncoder, PrototypeMatrix, build_prototypes, predict_slot_type
from .data import SlotSchema, Utterance, Vocab
from .errors import ShapeError
from .evaluate import SpanPrediction
from .layers import Linear, Mlp
from .tagger import CrfLayer, EncodedBatch, Encoder, EncoderConfig, N_TAGS, extract_spans, viterbi_decode


@dataclass
class ModelDims:
    word_dim: int = 300
    char_dim: int = 25
    char_hidden: int = 25
    hidden: int = 200
    layers: int = 2
    dropout: float = 0.3
    entity_hidden: int = 200
    proto_dim: int = 200

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            word_dim=self.word_dim,
            char_dim=self.char_dim,
            char_hidden=self.char_hidden,
            hidden=self.hidden,
            layers=self.layers,
            dropout=self.dropout,
        )


class PclcModel:
    def __init__(
        self,
        schema: SlotSchema,
        target_domain: str,
        vocab: Vocab,
        word_matrix: np.ndarray,
        dims: ModelDims,
        rng,
    ):
        self.schema = schema
        self.target_domain = target_domain
        self.source_domains = [d for d in schema.domains if d != target_domain]
        self.vocab = vocab
        self.dims = dims
        self.encoder = Encoder(vocab, word_matrix, dims.encoder_config(), rng)
        self.emission = Linear(2 * dims.hidden, N_TAGS, rng, "emission")
        self.crf = CrfLayer(rng)
        self.entity_encoder = EntityEncoder(
            2 * dims.hidden, dims.entity_hidden, dims.proto_dim, rng
        )
        self.proto_mlp = Mlp(dims.word_dim, dims.proto_dim, dims.proto_dim, rng, "proto_mlp")
        params = (
            self.encoder.parameters()
            + self.emission.parameters()
            + self.crf.parameters()
            + self.entity_encoder.parameters()
            + self.proto_mlp.parameters()
        )
        self._params = dict(params)
        if len(self._params) != len(params):
            raise ShapeError("duplicate parameter names in model registry")

    def named_parameters(self) -> dict[str, Tensor]:
        return self._params

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def prototypes(self) -> PrototypeMatrix:
        return build_prototypes(
            self.schema,
            self.source_domains,
            self.target_domain,
            self.vocab,
            self.encoder.word_table,
            self.proto_mlp,
        )

    def encode(self, utterances: list[Utterance], training: bool, rng=None) -> EncodedBatch:
        return self.encoder.encode_batch(utterances, self.vocab, training, rng)

    def emissions(self, enc: EncodedBatch) -> tuple[Tensor, list[Tensor]]:
        """All-position emission scores and the per-utterance (T_b, 3) views."""
        all_scores = self.emission(enc.hidden)
        per_utt = [ad.take_rows(all_scores, enc.utterance_rows(b)) for b in range(enc.batch_size)]
        return all_scores, per_utt

    def entity_representations(
        self, enc: EncodedBatch, spans: list[tuple[int, int, int]]
    ) -> Tensor:
        """Representations for (batch_row, start, end) spans, shape (N, proto_dim).

        Spans are batched with end padding; padded steps repeat an in-span
        row and are masked out of the recurrence.
        """
        if not spans:
            raise ShapeError("entity_representations: no spans")
        for b, start, end in spans:
            if not 0 <= start <= end < enc.lengths[b]:
                raise ShapeError(f"span ({start}, {end}) outside utterance of length {enc.lengths[b]}")
        lengths = [end - start + 1 for _, start, end in spans]
        s_max = max(lengths)
        steps_fwd, steps_bwd, masks = [], [], []
        for s in range(s_max):
            fwd_rows = [enc.flat(b, min(start + s, end)) for b, start, end in spans]
            bwd_rows = [enc.flat(b, max(end - s, start)) for b, start, end in spans]
            steps_fwd.append(ad.take_rows(enc.hidden, fwd_rows))
            steps_bwd.append(ad.take_rows(enc.hidden, bwd_rows))
            col = np.array([[1.0] if s < n else [0.0] for n in lengths])
            masks.append(None if col.all() else col)
        return self.entity_encoder.encode_steps(steps_fwd, steps_bwd, masks)

    def predict(
        self, utterances: list[Utterance], batch_size: int = 64
    ) -> list[list[SpanPrediction]]:
        """Full two-stage inference: Viterbi spans, then prototype argmax."""
        out: list[list[SpanPrediction]] = []
        protos = self.prototypes()
        for lo in range(0, len(utterances), batch_size):
            chunk = utterances[lo : lo + batch_size]
            enc = self.encode(chunk, training=False)
            _, per_utt = self.emissions(enc)
            chunk_spans: list[tuple[int, int, int]] = []
            span_home: list[tuple[int, int, int]] = []
            predictions: list[list[SpanPrediction]] = [[] for _ in chunk]
            for b, emis in enumerate(per_utt):
                tags = viterbi_decode(emis, self.crf)
                for span in extract_spans(tags):
                    chunk_spans.append((b, span.start, span.end))
                    span_home.append((b, span.start, span.end))
            if chunk_spans:
                reps = self.entity_representations(enc, chunk_spans)
                for i, (b, start, end) in enumerate(span_home):
                    r = ad.take_rows(reps, [i])
                    label = predict_slot_type(r, protos, chunk[b].domain)
                    predictions[b].append(SpanPrediction(start, end, label))
            out.extend(predictions)
        return out
