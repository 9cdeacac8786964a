"""Fine-grained slot typing against a refined prototype space.

Slot prototypes are MLP images of slot-name embeddings (mean of the
description-token word vectors), rebuilt on every forward pass so the label
space keeps moving with training. The prototype matrix has a source block
followed by a target block; a slot living in both domains gets one row in
each block.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import SlotSchema, Vocab
from .errors import ShapeError
from .layers import LstmCell, Linear, Mlp, run_lstm


@dataclass
class PclcHyperparams:
    temperature: float = 1.0
    confusion_lambda: float = 0.6
    kl_weight: float = 1.0

    def __post_init__(self):
        if self.temperature <= 0:
            raise ShapeError(f"temperature must be > 0, got {self.temperature}")
        if not 0.0 <= self.confusion_lambda <= 1.0:
            raise ShapeError(f"confusion factor must be in [0, 1], got {self.confusion_lambda}")
        if self.kl_weight < 0:
            raise ShapeError(f"kl weight must be >= 0, got {self.kl_weight}")


@dataclass
class PrototypeMatrix:
    matrix: Tensor  # (n_source + n_target, dim)
    source_labels: list[str]
    target_labels: list[str]
    target_domain: str
    slots_of: dict[str, list[str]]  # for candidate-row lookup per domain

    @property
    def block_boundary(self) -> int:
        return len(self.source_labels)

    @property
    def n_rows(self) -> int:
        return len(self.source_labels) + len(self.target_labels)

    @property
    def labels(self) -> list[str]:
        return self.source_labels + self.target_labels

    def source_row(self, label: str) -> int:
        return self.source_labels.index(label)

    def target_row(self, label: str) -> int:
        return self.block_boundary + self.target_labels.index(label)

    def candidate_rows(self, domain: str) -> tuple[list[int], list[str]]:
        """Rows eligible at inference time for an utterance of `domain`:
        the target block for the target domain, otherwise the domain's
        slots within the source block."""
        if domain == self.target_domain:
            rows = list(range(self.block_boundary, self.n_rows))
            return rows, list(self.target_labels)
        labels = self.slots_of[domain]
        return [self.source_row(s) for s in labels], list(labels)

    def target_block(self) -> Tensor:
        return ad.take_rows(self.matrix, list(range(self.block_boundary, self.n_rows)))


def source_block_order(schema: SlotSchema, source_domains: list[str]) -> list[str]:
    order: list[str] = []
    for d in source_domains:
        for s in schema.slots_of[d]:
            if s not in order:
                order.append(s)
    return order


def build_prototypes(
    schema: SlotSchema,
    source_domains: list[str],
    target_domain: str,
    vocab: Vocab,
    word_table: Tensor,
    mlp: Mlp,
) -> PrototypeMatrix:
    """Prototype rows = MLP(mean of description-token word embeddings)."""
    source_labels = source_block_order(schema, source_domains)
    target_labels = list(schema.slots_of[target_domain])
    name_rows = []
    for label in source_labels + target_labels:
        tokens = schema.description_tokens[label]
        if not tokens:
            raise ShapeError(f"slot {label!r} has an empty description")
        ids = []
        for t in tokens:
            if t not in vocab.word_index:
                raise ShapeError(f"description token {t!r} of slot {label!r} not in vocab")
            ids.append(vocab.word_index[t])
        looked = ad.embedding_lookup(word_table, np.asarray(ids, dtype=np.intp))
        mean = ad.mul(ad.tensor_sum(looked, axis=0, keepdims=True), Tensor(1.0 / len(ids)))
        name_rows.append(mean)
    name_matrix = ad.concat(name_rows, axis=0)
    matrix = mlp(name_matrix)
    return PrototypeMatrix(
        matrix=matrix,
        source_labels=source_labels,
        target_labels=target_labels,
        target_domain=target_domain,
        slots_of={d: list(schema.slots_of[d]) for d in schema.domains},
    )


class EntityEncoder:
    """BiLSTM over a span's encoder states, projected to the prototype dim."""

    def __init__(self, in_dim: int, hidden: int, out_dim: int, rng):
        self.hidden = hidden
        self.fwd = LstmCell(in_dim, hidden, rng, "entity_fwd")
        self.bwd = LstmCell(in_dim, hidden, rng, "entity_bwd")
        self.proj = Linear(2 * hidden, out_dim, rng, "entity_proj")

    def parameters(self):
        return self.fwd.parameters() + self.bwd.parameters() + self.proj.parameters()

    def encode_steps(
        self,
        steps_fwd: list[Tensor],
        steps_bwd: list[Tensor],
        masks: list[np.ndarray | None],
    ) -> Tensor:
        """`steps_bwd` must hold each row's sequence reversed in place (same
        end padding as `steps_fwd`), so one mask list serves both runs."""
        _, final_fwd = run_lstm(self.fwd, steps_fwd, masks)
        _, final_bwd = run_lstm(self.bwd, steps_bwd, masks)
        return self.proj(ad.concat([final_fwd, final_bwd], axis=1))


def encode_entity(span_hidden: Tensor, encoder: EntityEncoder) -> Tensor:
    """Entity representation r for one span, shape (1, dim)."""
    if span_hidden.shape[0] == 0:
        raise ShapeError("encode_entity: empty span")
    steps = [ad.take_rows(span_hidden, [t]) for t in range(span_hidden.shape[0])]
    return encoder.encode_steps(steps, steps[::-1], [None] * len(steps))


# ---------------------------------------------------------------------------
# losses


def proto_contrastive_loss(
    r: Tensor, y: int, protos: PrototypeMatrix, temperature: float = 1.0
) -> Tensor:
    """Temperature-scaled softmax loss over dot products with every prototype."""
    if temperature <= 0:
        raise ShapeError(f"temperature must be > 0, got {temperature}")
    row = r if r.values.ndim == 2 else ad.reshape(r, (1, r.shape[0]))
    scores = ad.mul(ad.matmul(row, ad.transpose(protos.matrix)), Tensor(1.0 / temperature))
    if not 0 <= y < protos.n_rows:
        raise ShapeError(f"gold row {y} out of range for {protos.n_rows} prototypes")
    log_probs = ad.log_softmax(scores, axis=1)
    pick = np.zeros((1, protos.n_rows))
    pick[0, y] = 1.0
    return ad.reshape(ad.mul(ad.tensor_sum(ad.mul(log_probs, Tensor(pick))), Tensor(-1.0)), ())


def confusion_target(z_y: Tensor, target_block: Tensor) -> Tensor:
    """Soft distribution over target slots by similarity to the gold prototype.

    Cosine similarities are clamped at zero before L1 normalization so the
    result is a valid distribution; if nothing is positive the distribution
    falls back to uniform.
    """
    n_target = target_block.shape[0]
    if n_target == 0:
        raise ShapeError("confusion_target: empty target block")
    z = z_y if z_y.values.ndim == 1 else ad.reshape(z_y, (z_y.size,))
    if float(np.linalg.norm(z.values)) == 0.0:
        raise ShapeError("confusion_target: zero-norm gold prototype")
    norms_sq = ad.tensor_sum(ad.mul(target_block, target_block), axis=1)
    if float(norms_sq.values.min()) == 0.0:
        raise ShapeError("confusion_target: zero-norm target prototype row")
    dots = ad.reshape(ad.matmul(target_block, ad.reshape(z, (z.size, 1))), (n_target,))
    z_norm = ad.sqrt(ad.tensor_sum(ad.mul(z, z)))
    sims = ad.div(dots, ad.mul(ad.sqrt(norms_sq), z_norm))
    clamped = ad.relu(sims)
    total = float(clamped.values.sum())
    if total == 0.0:
        return Tensor(np.full(n_target, 1.0 / n_target))
    return ad.div(clamped, ad.tensor_sum(clamped))


def smooth_distribution(y: int, d_tgt: Tensor, lam: float, n_source: int) -> Tensor:
    """Concatenate lam * one_hot(y) over the source block with
    (1 - lam) * d_tgt over the target block."""
    if not 0.0 <= lam <= 1.0:
        raise ShapeError(f"confusion factor must be in [0, 1], got {lam}")
    if not 0 <= y < n_source:
        raise ShapeError(f"source label index {y} out of range for {n_source} slots")
    src = np.zeros(n_source)
    src[y] = lam
    scaled_tgt = ad.mul(d_tgt, Tensor(1.0 - lam))
    return ad.concat([Tensor(src), scaled_tgt], axis=0)


def kl_divergence_from_log(pred_log: Tensor, target: Tensor) -> Tensor:
    """KL(target || exp(pred_log)) with the 0*log(0) := 0 convention."""
    if pred_log.shape != target.shape:
        raise ShapeError(f"kl: shapes {pred_log.shape} vs {target.shape} disagree")
    entropy_part = ad.tensor_sum(ad.xlogx(target))
    cross_part = ad.tensor_sum(ad.mul(target, pred_log))
    return ad.reshape(ad.sub(entropy_part, cross_part), ())


def kl_divergence_reverse(pred_log: Tensor, target: Tensor) -> Tensor:
    """KL(exp(pred_log) || target), restricted to the target's support.

    Entries where the target is exactly zero are excluded (a faithful
    reverse KL would be infinite there and untrainable).
    """
    support = (target.values > 0.0).astype(np.float64)
    safe_target = ad.add(ad.mul(target, Tensor(support)), Tensor(1.0 - support))
    pred = ad.exp(pred_log)
    log_ratio = ad.sub(pred_log, ad.log(safe_target))
    return ad.reshape(ad.tensor_sum(ad.mul(ad.mul(pred, log_ratio), Tensor(support))), ())


def kl_confusion_loss(r: Tensor, protos: PrototypeMatrix, d_smooth: Tensor) -> Tensor:
    """KL between the smoothed label distribution and the model's
    log-softmax over prototype dot products."""
    if d_smooth.size != protos.n_rows:
        raise ShapeError(
            f"kl_confusion_loss: distribution length {d_smooth.size} != {protos.n_rows} rows"
        )
    row = r if r.values.ndim == 2 else ad.reshape(r, (1, r.shape[0]))
    scores = ad.matmul(row, ad.transpose(protos.matrix))
    pred_log = ad.reshape(ad.log_softmax(scores, axis=1), (protos.n_rows,))
    target = d_smooth if d_smooth.values.ndim == 1 else ad.reshape(d_smooth, (d_smooth.size,))
    return kl_divergence_from_log(pred_log, target)


def predict_slot_type(r: Tensor, protos: PrototypeMatrix, domain: str) -> str:
    """Argmax of prototype dot products over the domain's candidate rows;
    ties go to the lower row index."""
    rows, labels = protos.candidate_rows(domain)
    if not rows:
        raise ShapeError(f"no candidate prototypes for domain {domain!r}")
    vec = r.values.reshape(-1)
    scores = protos.matrix.values[rows] @ vec
    return labels[int(np.argmax(scores))]
