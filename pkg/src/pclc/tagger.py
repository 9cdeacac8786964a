"""Coarse BIO entity tagging: word+char BiLSTM encoder and a 3-tag CRF.

Tag indices are fixed: O=0, B=1, I=2. The encoder runs over a padded batch
with per-step masks; `EncodedBatch.hidden` stacks all per-position states
into one matrix so downstream consumers gather rows by (utterance, position)
flat index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import PAD_INDEX, Utterance, Vocab
from .errors import ShapeError
from .layers import LstmCell, run_lstm, stack_steps

N_TAGS = 3
O_IDX, B_IDX, I_IDX = 0, 1, 2
TAG_NAMES = ("O", "B", "I")


@dataclass
class EncoderConfig:
    word_dim: int = 300
    char_dim: int = 25
    char_hidden: int = 25  # per direction
    hidden: int = 200  # per direction
    layers: int = 2
    dropout: float = 0.3

    @property
    def output_dim(self) -> int:
        return 2 * self.hidden


@dataclass
class TaggedSpan:
    start: int  # inclusive
    end: int  # inclusive
    utterance: Utterance | None = None


@dataclass
class EncodedBatch:
    hidden: Tensor  # ((t_max * batch), 2*hidden); row t*batch + b = (b, t)
    lengths: list[int]
    batch_size: int
    t_max: int

    def flat(self, b: int, t: int) -> int:
        return t * self.batch_size + b

    def utterance_rows(self, b: int) -> list[int]:
        return [self.flat(b, t) for t in range(self.lengths[b])]


class Encoder:
    """Concatenated word + char-BiLSTM embeddings fed to a stacked BiLSTM."""

    def __init__(self, vocab: Vocab, word_matrix: np.ndarray, config: EncoderConfig, rng):
        if word_matrix.shape != (vocab.n_words, config.word_dim):
            raise ShapeError(
                f"word embedding matrix {word_matrix.shape} does not match "
                f"vocab {vocab.n_words} x dim {config.word_dim}"
            )
        self.config = config
        self.word_table = Tensor(np.array(word_matrix, dtype=np.float64), requires_grad=True)
        char_matrix = rng.uniform(-0.1, 0.1, size=(vocab.n_chars, config.char_dim))
        char_matrix[PAD_INDEX] = 0.0
        self.char_table = Tensor(char_matrix, requires_grad=True)
        self.char_fwd = LstmCell(config.char_dim, config.char_hidden, rng, "char_fwd")
        self.char_bwd = LstmCell(config.char_dim, config.char_hidden, rng, "char_bwd")
        self.layers: list[tuple[LstmCell, LstmCell]] = []
        in_dim = config.word_dim + 2 * config.char_hidden
        for layer in range(config.layers):
            fwd = LstmCell(in_dim, config.hidden, rng, f"lstm{layer}_fwd")
            bwd = LstmCell(in_dim, config.hidden, rng, f"lstm{layer}_bwd")
            self.layers.append((fwd, bwd))
            in_dim = 2 * config.hidden

    def parameters(self):
        params = [("word_table", self.word_table), ("char_table", self.char_table)]
        params += self.char_fwd.parameters() + self.char_bwd.parameters()
        for fwd, bwd in self.layers:
            params += fwd.parameters() + bwd.parameters()
        return params

    def _char_features(self, utterances, vocab) -> tuple[Tensor, list[list[int]]]:
        """Char-BiLSTM final states per token, flattened over the batch.

        Returns the ((n_tokens+1), 2*char_hidden) matrix (last row is a zero
        pad) and, per utterance, each token's row index in it.
        """
        tokens: list[str] = []
        row_of: list[list[int]] = []
        for utt in utterances:
            rows = []
            for token in utt.tokens:
                rows.append(len(tokens))
                tokens.append(token)
            row_of.append(rows)
        n_tok = len(tokens)
        c_max = max(len(t) for t in tokens)
        char_ids = np.full((c_max, n_tok), PAD_INDEX, dtype=np.intp)
        char_ids_rev = np.full((c_max, n_tok), PAD_INDEX, dtype=np.intp)
        masks = np.zeros((c_max, n_tok, 1))
        for j, token in enumerate(tokens):
            ids = [vocab.char_id(c) for c in token]
            n = len(ids)
            char_ids[:n, j] = ids
            char_ids_rev[:n, j] = ids[::-1]
            masks[:n, j, 0] = 1.0
        out_parts = []
        for cell, ids in ((self.char_fwd, char_ids), (self.char_bwd, char_ids_rev)):
            steps = [ad.embedding_lookup(self.char_table, ids[t]) for t in range(c_max)]
            step_masks = [None if masks[t].all() else masks[t] for t in range(c_max)]
            _, final = run_lstm(cell, steps, step_masks)
            out_parts.append(final)
        char_final = ad.concat(out_parts, axis=1)
        zero_row = Tensor(np.zeros((1, 2 * self.config.char_hidden)))
        return ad.concat([char_final, zero_row], axis=0), row_of

    def encode_batch(
        self, utterances: list[Utterance], vocab: Vocab, training: bool, rng=None
    ) -> EncodedBatch:
        if not utterances or any(len(u.tokens) == 0 for u in utterances):
            raise ShapeError("encode_batch: empty utterance")
        cfg = self.config
        batch = len(utterances)
        lengths = [len(u.tokens) for u in utterances]
        t_max = max(lengths)

        char_mat, char_rows = self._char_features(utterances, vocab)
        pad_char_row = char_mat.shape[0] - 1

        word_ids = np.full((t_max, batch), PAD_INDEX, dtype=np.intp)
        char_row_ids = np.full((t_max, batch), pad_char_row, dtype=np.intp)
        masks = np.zeros((t_max, batch, 1))
        # rev_map[t] gathers row (b, L_b-1-t) from a stacked ((t_max*batch), d)
        # matrix; applying it twice restores the original order.
        rev_map = np.zeros((t_max, batch), dtype=np.intp)
        for b, utt in enumerate(utterances):
            n = lengths[b]
            for t, token in enumerate(utt.tokens):
                word_ids[t, b] = vocab.word_id(token)
                char_row_ids[t, b] = char_rows[b][t]
            masks[:n, b, 0] = 1.0
            for t in range(t_max):
                src = n - 1 - t if t < n else 0
                rev_map[t, b] = src * batch + b
        step_masks = [None if masks[t].all() else masks[t] for t in range(t_max)]

        xs = []
        for t in range(t_max):
            word_x = ad.embedding_lookup(self.word_table, word_ids[t])
            char_x = ad.take_rows(char_mat, char_row_ids[t])
            x = ad.concat([word_x, char_x], axis=1)
            xs.append(ad.dropout(x, cfg.dropout, rng=rng, training=training))

        for layer_idx, (fwd, bwd) in enumerate(self.layers):
            fwd_out, _ = run_lstm(fwd, xs, step_masks)
            xs_stacked = stack_steps(xs)
            xs_rev = [ad.take_rows(xs_stacked, rev_map[t]) for t in range(t_max)]
            bwd_out_rev, _ = run_lstm(bwd, xs_rev, step_masks)
            bwd_stacked = stack_steps(bwd_out_rev)
            xs = [
                ad.concat([fwd_out[t], ad.take_rows(bwd_stacked, rev_map[t])], axis=1)
                for t in range(t_max)
            ]
            if layer_idx + 1 < len(self.layers):
                xs = [ad.dropout(x, cfg.dropout, rng=rng, training=training) for x in xs]

        return EncodedBatch(stack_steps(xs), lengths, batch, t_max)


def encode_utterance(
    encoder: Encoder, utterance: Utterance, vocab: Vocab, training: bool = False, rng=None
) -> Tensor:
    """Per-token hidden states for one utterance, shape (T, 2*hidden)."""
    enc = encoder.encode_batch([utterance], vocab, training, rng)
    return ad.take_rows(enc.hidden, enc.utterance_rows(0))


# ---------------------------------------------------------------------------
# CRF


class CrfLayer:
    """Linear-chain CRF over {O, B, I} with explicit start/end scores."""

    def __init__(self, rng=None):
        def init(shape):
            if rng is None:
                return np.zeros(shape)
            return rng.uniform(-0.1, 0.1, size=shape)

        self.transitions = Tensor(init((N_TAGS, N_TAGS)), requires_grad=True)
        self.start = Tensor(init(N_TAGS), requires_grad=True)
        self.end = Tensor(init(N_TAGS), requires_grad=True)

    def parameters(self):
        return [
            ("crf.transitions", self.transitions),
            ("crf.start", self.start),
            ("crf.end", self.end),
        ]


def crf_nll(emissions: Tensor, gold_tags: list[int], crf: CrfLayer) -> Tensor:
    """Negative log-likelihood: log Z - score(gold path).

    The partition runs the forward algorithm in log space with
    max-subtracted log-sum-exp; the result is >= 0.
    """
    T = emissions.shape[0]
    if emissions.shape != (T, N_TAGS):
        raise ShapeError(f"crf_nll: emissions must be (T, {N_TAGS}), got {emissions.shape}")
    if len(gold_tags) != T:
        raise ShapeError(f"crf_nll: {len(gold_tags)} gold tags for {T} emissions")
    if any(not 0 <= y < N_TAGS for y in gold_tags):
        raise ShapeError(f"crf_nll: gold tags out of range: {gold_tags}")

    emis_mask = np.zeros((T, N_TAGS))
    emis_mask[np.arange(T), gold_tags] = 1.0
    trans_count = np.zeros((N_TAGS, N_TAGS))
    for prev, cur in zip(gold_tags, gold_tags[1:]):
        trans_count[prev, cur] += 1.0
    start_mask = np.zeros(N_TAGS)
    start_mask[gold_tags[0]] = 1.0
    end_mask = np.zeros(N_TAGS)
    end_mask[gold_tags[-1]] = 1.0

    gold_score = ad.tensor_sum(ad.mul(emissions, Tensor(emis_mask)))
    gold_score = ad.add(gold_score, ad.tensor_sum(ad.mul(crf.transitions, Tensor(trans_count))))
    gold_score = ad.add(gold_score, ad.tensor_sum(ad.mul(crf.start, Tensor(start_mask))))
    gold_score = ad.add(gold_score, ad.tensor_sum(ad.mul(crf.end, Tensor(end_mask))))

    alpha = ad.add(ad.reshape(crf.start, (1, N_TAGS)), ad.take_rows(emissions, [0]))
    for t in range(1, T):
        scores = ad.add(
            ad.add(ad.reshape(alpha, (N_TAGS, 1)), crf.transitions),
            ad.take_rows(emissions, [t]),
        )
        alpha = ad.reshape(ad.log_sum_exp(scores, axis=0), (1, N_TAGS))
    final = ad.add(alpha, ad.reshape(crf.end, (1, N_TAGS)))
    log_z = ad.reshape(ad.log_sum_exp(final, axis=1), ())
    return ad.sub(log_z, gold_score)


def viterbi_decode(emissions, crf: CrfLayer) -> list[int]:
    """Highest-scoring tag sequence; ties resolve to the lowest tag index."""
    emis = emissions.values if isinstance(emissions, Tensor) else np.asarray(emissions)
    if emis.ndim != 2 or emis.shape[1] != N_TAGS:
        raise ShapeError(f"viterbi_decode: emissions must be (T, {N_TAGS}), got {emis.shape}")
    T = emis.shape[0]
    trans = crf.transitions.values
    score = crf.start.values + emis[0]
    back: list[np.ndarray] = []
    for t in range(1, T):
        total = score[:, None] + trans  # [prev, cur]
        best_prev = total.argmax(axis=0)  # argmax picks the lowest index on ties
        score = total[best_prev, np.arange(N_TAGS)] + emis[t]
        back.append(best_prev)
    score = score + crf.end.values
    tag = int(score.argmax())
    path = [tag]
    for best_prev in reversed(back):
        tag = int(best_prev[tag])
        path.append(tag)
    return path[::-1]


def extract_spans(bio_sequence, utterance: Utterance | None = None) -> list[TaggedSpan]:
    """Maximal B(I)* runs as spans; a leading I or an I after O opens a new B."""
    tags = [TAG_NAMES[t] if isinstance(t, (int, np.integer)) else t for t in bio_sequence]
    if any(t not in TAG_NAMES for t in tags):
        raise ShapeError(f"extract_spans: tags must be in {TAG_NAMES}")
    spans: list[TaggedSpan] = []
    start = None
    for i, tag in enumerate(tags):
        if tag == "O":
            if start is not None:
                spans.append(TaggedSpan(start, i - 1, utterance))
                start = None
        elif tag == "B":
            if start is not None:
                spans.append(TaggedSpan(start, i - 1, utterance))
            start = i
        else:  # I continues a span, or repairs into a new B
            if start is None:
                start = i
    if start is not None:
        spans.append(TaggedSpan(start, len(tags) - 1, utterance))
    return spans


def gold_spans(utterance: Utterance) -> list[tuple[int, int, str]]:
    """(start, end, slot) triples from gold BIO tags and slot types."""
    out = []
    for span in extract_spans(utterance.bio_tags):
        slot = utterance.slot_types[span.start]
        out.append((span.start, span.end, slot))
    return out
