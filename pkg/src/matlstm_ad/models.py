"""Detection architectures built from the recurrent cells.

Two strategies are supported.  The autoencoder folds the whole sequence into
the encoder state and decodes it back in reverse order; the encoder-predictor
folds a context prefix and predicts the remaining frames.  In both cases the
anomaly score of a sequence is its mean per-step loss.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Iterable, Sequence

import numpy as np

from . import cells
from . import matgrad as mg
from .errors import ContractError, ShapeError

log = logging.getLogger(__name__)

CELLS = ("matlstm", "veclstm")
STRATEGIES = ("autoencoder", "encoder_predictor")
TRANSFORMS = ("identity", "temporal_difference")
LAYER_TRAINING = ("layerwise", "joint")
UNLABELLED = -1


# ------------------------------------------------------------------ data


@dataclass
class MatrixSequence:
    frames: np.ndarray  # (T, n_r, n_c)
    label: int | None = None
    id: str = ""

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 3:
            raise ShapeError(f"sequence frames must be (T, rows, cols), got {self.frames.shape}")
        if len(self.frames) < 2:
            raise ContractError("a sequence needs at least two frames")

    @property
    def T(self) -> int:
        return len(self.frames)


@dataclass
class SequenceDataset:
    """Equal-shape sequences stored as one ``(N, T, n_r, n_c)`` array."""

    frames: np.ndarray
    labels: np.ndarray = None  # int8, UNLABELLED where unknown
    ids: list[str] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 4:
            raise ShapeError(f"dataset frames must be (N, T, rows, cols), got {self.frames.shape}")
        n = len(self.frames)
        if self.labels is None:
            self.labels = np.full(n, UNLABELLED, dtype=np.int8)
        self.labels = np.asarray(self.labels, dtype=np.int8)
        if self.ids is None:
            self.ids = [str(i) for i in range(n)]
        if len(self.labels) != n or len(self.ids) != n:
            raise ShapeError("labels/ids length differs from number of sequences")

    def __len__(self):
        return len(self.frames)

    def __getitem__(self, i) -> MatrixSequence:
        lab = int(self.labels[i])
        return MatrixSequence(self.frames[i], None if lab == UNLABELLED else lab, self.ids[i])

    def subset(self, idx) -> "SequenceDataset":
        idx = np.asarray(idx, dtype=int)
        return SequenceDataset(self.frames[idx], self.labels[idx], [self.ids[i] for i in idx], dict(self.meta))

    @classmethod
    def from_sequences(cls, seqs: Sequence[MatrixSequence]) -> "SequenceDataset":
        labels = [UNLABELLED if s.label is None else s.label for s in seqs]
        return cls(np.stack([s.frames for s in seqs]), np.array(labels), [s.id for s in seqs])

    @property
    def frame_shape(self) -> tuple[int, int]:
        return tuple(self.frames.shape[2:])

    @property
    def T(self) -> int:
        return self.frames.shape[1]


@dataclass
class ScoredSequence:
    id: str
    score: float
    label: int | None = None


# ------------------------------------------------------------------ spec


@dataclass(frozen=True)
class ModelSpec:
    """Architecture of a detector.

    ``hidden`` is ``(k_r, k_c)`` for matrix cells and ``(k,)`` for vector
    cells.  ``head_layers`` counts bilinear layers in the output head
    including the output layer; hidden head layers have the cell's hidden
    shape.
    """

    input_shape: tuple[int, int]
    cell: str = "matlstm"
    strategy: str = "encoder_predictor"
    hidden: tuple[int, ...] = (10, 10)
    layers: int = 1
    loss: str = "bce_with_logits"
    conditional_decoding: bool = True
    input_transform: str = "identity"
    context_len: int | None = None
    head_layers: int = 2
    dropout: float = 0.1
    tied_decoder: bool = False
    layer_training: str = "layerwise"

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(x) for x in self.input_shape))
        object.__setattr__(self, "hidden", tuple(int(x) for x in self.hidden))
        if self.cell not in CELLS:
            raise ContractError(f"unknown cell {self.cell!r}")
        if self.strategy not in STRATEGIES:
            raise ContractError(f"unknown strategy {self.strategy!r}")
        if self.loss not in mg.LOSS_KINDS:
            raise ContractError(f"unknown loss {self.loss!r}")
        if self.input_transform not in TRANSFORMS:
            raise ContractError(f"unknown input transform {self.input_transform!r}")
        if self.layer_training not in LAYER_TRAINING:
            raise ContractError(f"unknown layer training {self.layer_training!r}")
        if self.layers not in (1, 2):
            raise ContractError("layers must be 1 or 2")
        if self.head_layers < 1:
            raise ContractError("head needs at least the output layer")
        if not 0.0 <= self.dropout < 1.0:
            raise ContractError("dropout must be in [0, 1)")
        want = 2 if self.cell == "matlstm" else 1
        if len(self.hidden) != want or min(self.hidden) < 1:
            raise ContractError(f"{self.cell} needs {want} positive hidden dims, got {self.hidden}")

    @property
    def layerwise(self) -> bool:
        return self.layers == 2 and self.layer_training == "layerwise"

    @property
    def binary(self) -> bool:
        return self.loss == "bce_with_logits"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        d["input_shape"] = tuple(d["input_shape"])
        d["hidden"] = tuple(d["hidden"])
        return cls(**d)


def layer_specs(spec: ModelSpec) -> list[ModelSpec]:
    """Independent single-layer specs making up a layerwise stack."""
    if not spec.layerwise:
        return [spec]
    bottom = replace(spec, layers=1)
    top_in = spec.hidden if spec.cell == "matlstm" else (1, spec.hidden[0])
    top = replace(
        bottom,
        input_shape=top_in,
        loss="frobenius_mse",
        input_transform="identity",
    )
    return [bottom, top]


def _cell_io(spec: ModelSpec) -> tuple[tuple[int, int], tuple[int, int]]:
    """(working input shape, hidden shape) after vector flattening."""
    n_r, n_c = spec.input_shape
    if spec.cell == "matlstm":
        return (n_r, n_c), tuple(spec.hidden)
    return (1, n_r * n_c), (1, spec.hidden[0])


def _cell_shapes(spec: ModelSpec, in_shape, hid) -> dict:
    if spec.cell == "matlstm":
        return cells.matlstm_shapes(in_shape[0], in_shape[1], hid[0], hid[1])
    return cells.veclstm_shapes(in_shape[1], hid[1])


def param_shapes(spec: ModelSpec) -> dict[str, tuple[int, int]]:
    if spec.layerwise:
        out = {}
        for li, sub in enumerate(layer_specs(spec)):
            out.update({f"L{li}.{k}": v for k, v in param_shapes(sub).items()})
        return out
    in_shape, hid = _cell_io(spec)
    shapes = {}
    layer_in = in_shape
    for l in range(spec.layers):
        cs = _cell_shapes(spec, layer_in, hid)
        shapes.update({f"enc{l}.{k}": v for k, v in cs.items()})
        if not spec.tied_decoder:
            shapes.update({f"dec{l}.{k}": v for k, v in cs.items()})
        layer_in = hid
    sizes = [hid] * (spec.head_layers - 1) + [in_shape]
    head = cells.matnet_shapes(hid, sizes, vector=spec.cell == "veclstm")
    shapes.update({f"head.{k}": v for k, v in head.items()})
    return shapes


def init_params(spec: ModelSpec, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    return cells.init_from_shapes(rng, param_shapes(spec))


# ------------------------------------------------------------------ model


@dataclass
class Model:
    spec: ModelSpec
    params: dict[str, np.ndarray]

    @classmethod
    def init(cls, spec: ModelSpec, seed: int = 0) -> "Model":
        return cls(spec, init_params(spec, seed))

    def layer(self, i: int) -> "Model":
        """Sub-model ``i`` of a layerwise stack."""
        subs = layer_specs(self.spec)
        if len(subs) == 1:
            if i != 0:
                raise IndexError(i)
            return self
        pre = f"L{i}."
        return Model(subs[i], {k[len(pre):]: v for k, v in self.params.items() if k.startswith(pre)})

    @property
    def n_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))


def _cell_list(spec: ModelSpec, params, role: str) -> list:
    view = cells.matlstm_view if spec.cell == "matlstm" else cells.veclstm_view
    prefix = "enc" if (role == "enc" or spec.tied_decoder) else "dec"
    return [view(params, f"{prefix}{l}") for l in range(spec.layers)]


def _step(spec: ModelSpec):
    return cells.matlstm_step if spec.cell == "matlstm" else cells.lstm_step


def _head(spec: ModelSpec, params):
    return cells.matnet_view(params, "head", spec.head_layers, spec.dropout)


def prepare_frames(spec: ModelSpec, frames: np.ndarray) -> np.ndarray:
    """Apply the input transform and vector flattening to ``(..., T, r, c)`` frames."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.shape[-2:] != tuple(spec.input_shape):
        raise ShapeError(f"frames are {frames.shape[-2:]}, model expects {spec.input_shape}")
    if spec.input_transform == "temporal_difference":
        frames = np.diff(frames, axis=-3)
    if spec.cell == "veclstm":
        frames = frames.reshape(frames.shape[:-2] + (1, -1))
    return frames


def to_steps(frames: np.ndarray) -> np.ndarray:
    """``(B, T, r, c)`` -> ``(T, r, B, c)``, the per-step batched layout used on tapes."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim == 3:
        return frames
    return np.ascontiguousarray(frames.transpose(1, 2, 0, 3))


def from_step(x: np.ndarray) -> np.ndarray:
    """``(r, B, c)`` -> ``(B, r, c)``; plain matrices pass through."""
    x = np.asarray(x)
    return x.transpose(1, 0, 2) if x.ndim == 3 else x


def context_length(spec: ModelSpec, T: int) -> int:
    t_e = spec.context_len if spec.context_len is not None else T // 2
    if not 1 <= t_e < T:
        raise ContractError(f"context length {t_e} must satisfy 1 <= T_e < T={T}")
    return t_e


def _hidden_shape(p) -> tuple[int, int]:
    return mg.value(p.i.B if isinstance(p, cells.MatLstmParams) else p.i.b).shape


def fold(steps, cell_list, step, states=None):
    """Run stacked cells over ``steps[t]``; returns per-layer final states."""
    if states is None:
        batch = mg.batch_size(steps[0])
        states = [cells.zero_state(_hidden_shape(p), batch) for p in cell_list]
    states = list(states)
    for t in range(len(steps)):
        inp = steps[t]
        for l, p in enumerate(cell_list):
            states[l] = step(inp, states[l], p)
            inp = states[l].H
    return states


def encode(frames, cell_params, cell: str = "matlstm"):
    """Final state after folding every frame through one cell (or a stack).

    Accepts ``(T, r, c)`` or batched ``(B, T, r, c)`` frames; batched states
    come back in the ``(rows, batch, cols)`` layout.  For a list of cell
    parameters the per-layer final states are returned.
    """
    step = cells.matlstm_step if cell == "matlstm" else cells.lstm_step
    stack = isinstance(cell_params, (list, tuple))
    states = fold(to_steps(frames), list(cell_params) if stack else [cell_params], step)
    return states if stack else states[0]


def _decode(spec, params, states, first_input, n_steps, training, rng):
    step = _step(spec)
    dec = _cell_list(spec, params, "dec")
    head = _head(spec, params)
    states = list(states)
    zero = np.zeros_like(mg.value(first_input))
    inp = first_input if spec.conditional_decoding else zero
    outputs = []
    for _ in range(n_steps):
        x = inp
        for l, p in enumerate(dec):
            states[l] = step(x, states[l], p)
            x = states[l].H
        out = cells.matnet_forward(x, head, training=training, rng=rng)
        outputs.append(out)
        if spec.conditional_decoding:
            inp = mg.sigmoid(out) if spec.binary else out
        else:
            inp = zero
    return outputs


def forward(spec: ModelSpec, params, steps, training=False, rng=None):
    """Decoder outputs and matching targets for prepared frames in step layout.

    Output ``s`` of the autoencoder targets frame ``T - s`` (reverse order);
    output ``s`` of the predictor targets frame ``T_e + s``.
    """
    T = len(steps)
    enc = _cell_list(spec, params, "enc")
    step = _step(spec)
    if spec.strategy == "autoencoder":
        states = fold(steps, enc, step)
        outs = _decode(spec, params, states, np.zeros_like(steps[0]), T, training, rng)
        targets = [steps[T - 1 - s] for s in range(T)]
    else:
        t_e = context_length(spec, T)
        states = fold(steps[:t_e], enc, step)
        outs = _decode(spec, params, states, steps[t_e - 1], T - t_e, training, rng)
        targets = [steps[t_e + s] for s in range(T - t_e)]
    return outs, targets


def loss_node(spec: ModelSpec, params, frames, training=False, rng=None):
    """Mean per-step loss over a batch of prepared ``(B, T, r, c)`` frames (1x1)."""
    outs, targets = forward(spec, params, to_steps(frames), training, rng)
    fn = mg.LOSSES[spec.loss]
    return mg.mean_of(fn(t, o) for t, o in zip(targets, outs))


def per_sequence_losses(spec: ModelSpec, params, frames) -> np.ndarray:
    """Per-sequence mean per-step loss for prepared ``(B, T, r, c)`` frames."""
    outs, targets = forward(spec, params, to_steps(frames), training=False)
    per_step = [mg.loss_elements(spec.loss, t, o).mean(axis=(0, 2)) for t, o in zip(targets, outs)]
    return np.mean(per_step, axis=0)


def hidden_sequence(model: Model, frames: np.ndarray) -> np.ndarray:
    """Encoder hidden states ``H_1..H_T`` of a single-layer model, as ``(B, T, k_r, k_c)``."""
    spec = model.spec
    steps = to_steps(prepare_frames(spec, frames))
    p = _cell_list(spec, model.params, "enc")[0]
    step = _step(spec)
    state = cells.zero_state(_hidden_shape(p), mg.batch_size(steps[0]))
    hs = []
    for t in range(len(steps)):
        state = step(steps[t], state, p)
        hs.append(from_step(state.H))
    return np.stack(hs, axis=-3)


def model_losses(model: Model, frames: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Anomaly scores of raw ``(B, T, r, c)`` frames; top layer for stacks."""
    frames = np.asarray(frames, dtype=np.float64)
    out = []
    for start in range(0, len(frames), chunk):
        block = frames[start:start + chunk]
        if model.spec.layerwise:
            h = hidden_sequence(model.layer(0), block)
            top = model.layer(1)
            out.append(per_sequence_losses(top.spec, top.params, prepare_frames(top.spec, h)))
        else:
            out.append(per_sequence_losses(model.spec, model.params, prepare_frames(model.spec, block)))
    return np.concatenate(out) if out else np.zeros(0)


# ------------------------------------------------------------------ public ops


def _frames_of(seq) -> np.ndarray:
    return seq.frames if isinstance(seq, MatrixSequence) else np.asarray(seq, dtype=np.float64)


def _decoded(seq, model: Model) -> list[np.ndarray]:
    m = model.layer(0) if model.spec.layerwise else model
    x = prepare_frames(m.spec, _frames_of(seq))
    outs, _ = forward(m.spec, m.params, to_steps(x))
    lead = x.shape[:-3]
    return [from_step(o).reshape(lead + tuple(m.spec.input_shape)) for o in outs]


def reconstruct(seq, model: Model) -> list[np.ndarray]:
    """Decoder outputs in decode order (raw head outputs; logits for binary data)."""
    if model.spec.strategy != "autoencoder":
        raise ContractError("reconstruct needs an autoencoder model")
    return _decoded(seq, model)


def predict_future(seq, model: Model) -> list[np.ndarray]:
    """Predicted frames ``T_e+1..T`` (raw head outputs; logits for binary data)."""
    if model.spec.strategy != "encoder_predictor":
        raise ContractError("predict_future needs an encoder-predictor model")
    return _decoded(seq, model)


def score_reconstruction(seq, recon: Sequence[np.ndarray], loss: str) -> float:
    """Mean per-step loss pairing frame ``t`` with decode step ``T - t + 1``."""
    frames = _frames_of(seq)
    T = len(frames)
    if len(recon) != T:
        raise ContractError(f"{len(recon)} reconstructions for {T} frames")
    terms = [mg.loss_elements(loss, frames[t], np.asarray(recon[T - 1 - t])).mean() for t in range(T)]
    return float(np.mean(terms))


def score_prediction(seq, preds: Sequence[np.ndarray], context_len: int, loss: str) -> float:
    frames = _frames_of(seq)
    T = len(frames)
    if len(preds) != T - context_len:
        raise ContractError(f"{len(preds)} predictions for {T - context_len} future frames")
    terms = [
        mg.loss_elements(loss, frames[context_len + s], np.asarray(p)).mean()
        for s, p in enumerate(preds)
    ]
    return float(np.mean(terms))


def temporal_difference(seq):
    """Frames ``X_{t+1} - X_t``; returns the same container type it was given."""
    frames = _frames_of(seq)
    if len(frames) < 2:
        raise ContractError("temporal difference needs at least two frames")
    diff = np.diff(frames, axis=0)
    if isinstance(seq, MatrixSequence):
        if len(diff) < 2:
            raise ContractError("differenced sequence would have fewer than two frames")
        return MatrixSequence(diff, seq.label, seq.id)
    return diff


def vectors_to_matrix_blocks(vectors, N: int, label=None, id: str = "") -> MatrixSequence | np.ndarray:
    """Stack consecutive groups of ``N`` vectors as matrix rows.

    Returns ``⌊T/N⌋`` frames of shape ``(N, d)``; a tail shorter than ``N`` is
    dropped.  A :class:`MatrixSequence` is returned when at least two frames
    result, otherwise the raw ``(frames, N, d)`` array.
    """
    v = np.asarray(vectors, dtype=np.float64)
    if v.ndim != 2:
        raise ShapeError(f"expected (T, d) vectors, got {v.shape}")
    if N < 1:
        raise ContractError("block size must be >= 1")
    T, d = v.shape
    if T < N:
        raise ContractError(f"{T} vectors cannot fill a block of {N}")
    k = T // N
    blocks = v[: k * N].reshape(k, N, d)
    if k >= 2:
        return MatrixSequence(blocks, label, id)
    return blocks


def score_dataset(
    data: SequenceDataset | Iterable[MatrixSequence],
    model: Model,
    errors: list | None = None,
) -> list[ScoredSequence]:
    """Score every sequence; sequences that cannot be scored are skipped with a warning."""
    if isinstance(data, SequenceDataset):
        if data.frame_shape != tuple(model.spec.input_shape):
            msg = f"dataset frames {data.frame_shape} do not match model input {model.spec.input_shape}"
            raise ShapeError(msg)
        scores = model_losses(model, data.frames)
        return [
            ScoredSequence(data.ids[i], float(scores[i]), None if data.labels[i] == UNLABELLED else int(data.labels[i]))
            for i in range(len(data))
        ]
    results: list[ScoredSequence | None] = []
    groups: dict[int, list[int]] = {}
    seqs = list(data)
    for i, seq in enumerate(seqs):
        try:
            if seq.frames.shape[1:] != tuple(model.spec.input_shape):
                raise ShapeError(f"frames {seq.frames.shape[1:]} vs model input {model.spec.input_shape}")
            if model.spec.strategy == "encoder_predictor":
                t = seq.T - (1 if model.spec.input_transform == "temporal_difference" else 0)
                context_length(model.spec, t)
        except (ShapeError, ContractError) as exc:
            warnings.warn(f"skipping sequence {seq.id!r}: {exc}", stacklevel=2)
            log.warning("skipping sequence %r: %s", seq.id, exc)
            if errors is not None:
                errors.append((seq.id, str(exc)))
            results.append(None)
            continue
        groups.setdefault(seq.T, []).append(i)
        results.append(None)
    for idx in groups.values():
        scores = model_losses(model, np.stack([seqs[i].frames for i in idx]))
        for i, s in zip(idx, scores):
            results[i] = ScoredSequence(seqs[i].id, float(s), seqs[i].label)
    return [r for r in results if r is not None]


def stack_layerwise_train(dataset: SequenceDataset, spec: ModelSpec, cfg=None):
    """Train a two-layer stack bottom-up; returns ``(model, histories)``.

    Layer 1 is trained on the data and frozen; layer 2 is trained on the
    sequence of layer-1 encoder hidden states.
    """
    from .train import TrainConfig, train

    if spec.layers != 2:
        raise ContractError("layerwise stacking needs a two-layer spec")
    spec = replace(spec, layer_training="layerwise")
    cfg = cfg or TrainConfig()
    bottom_spec, top_spec = layer_specs(spec)
    bottom, hist0 = train(bottom_spec, dataset, cfg)
    hidden = SequenceDataset(hidden_sequence(bottom, dataset.frames), dataset.labels, dataset.ids)
    top, hist1 = train(top_spec, hidden, replace(cfg, seed=cfg.seed + 1))
    params = {f"L0.{k}": v for k, v in bottom.params.items()}
    params.update({f"L1.{k}": v for k, v in top.params.items()})
    return Model(spec, params), [hist0, hist1]
