"""Encoder/projector/predictor MLPs and the student-teacher pair.

The student is the back-propagated network: encoder -> projector ->
predictor, with per-worker (or simulated synced) BN between layers. The
teacher mirrors the encoder and projector only; its weights are an
exponential moving average of the student's and its BN layers normalize
with momentum statistics (or one of the baseline BN variants, for the
ablation grid). Teacher parameters never participate in gradients.

Whatever BN variant the teacher runs, each teacher BN layer keeps a
momentum history of its whole-batch statistics, committed once per
iteration. In momentum mode that history also drives the forward blend; in
the baseline modes it exists purely so that frozen-feature evaluation has
per-sample inference statistics.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import engine
from .engine import DimensionError, Tensor
from .normalization import (
    MomentumBNState,
    NormParams,
    WorkerLayout,
    constant_batch_stats,
    momentum_bn_forward,
    plain_bn_forward,
    shuffling_bn_forward,
    synced_bn_forward,
)

STUDENT_BN_KINDS = ("plain", "synced")
TEACHER_BN_KINDS = ("momentum", "plain", "synced", "shuffling")

#: Version stamp embedded in teacher dumps; bumped on layout changes.
TEACHER_DUMP_VERSION = 1


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths plus per-layer BN/ReLU flags (one flag per layer)."""

    widths: tuple
    bn: tuple
    relu: tuple

    def __post_init__(self):
        if len(self.widths) < 2:
            raise ValueError("an MLP needs at least one layer (two widths)")
        if any(w < 1 for w in self.widths):
            raise ValueError(f"widths must be >= 1, got {self.widths}")
        n = self.n_layers
        if len(self.bn) != n or len(self.relu) != n:
            raise ValueError(
                f"need {n} bn/relu flags for widths {self.widths}, "
                f"got {len(self.bn)}/{len(self.relu)}")

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    @property
    def in_dim(self) -> int:
        return self.widths[0]

    @property
    def out_dim(self) -> int:
        return self.widths[-1]

    def to_dict(self) -> dict:
        return {"widths": list(self.widths), "bn": list(self.bn),
                "relu": list(self.relu)}

    @staticmethod
    def from_dict(d: dict) -> "MlpSpec":
        return MlpSpec(widths=tuple(d["widths"]), bn=tuple(bool(b) for b in d["bn"]),
                       relu=tuple(bool(r) for r in d["relu"]))


def mlp_spec(widths: Sequence[int], final_plain: bool = True) -> MlpSpec:
    """BN+ReLU after every layer except, by default, the last."""
    n = len(widths) - 1
    flags = tuple(True if i < n - 1 or not final_plain else False
                  for i in range(n))
    return MlpSpec(widths=tuple(widths), bn=flags, relu=flags)


def default_encoder_spec(in_dim: int) -> MlpSpec:
    return MlpSpec(widths=(in_dim, 64, 64), bn=(True, True), relu=(True, True))


def default_projector_spec(in_dim: int = 64) -> MlpSpec:
    return mlp_spec((in_dim, 64, 32))


def default_predictor_spec(dim: int = 32) -> MlpSpec:
    return mlp_spec((dim, 32, 32))


@dataclass
class Layer:
    weight: Tensor
    bias: Tensor
    norm: Optional[NormParams]
    relu: bool
    state: Optional[MomentumBNState] = None


class Mlp:
    def __init__(self, name: str, spec: MlpSpec, layers: list[Layer]):
        self.name = name
        self.spec = spec
        self.layers = layers

    def params(self) -> list[tuple[str, Tensor, bool]]:
        """(name, tensor, excluded) triples; biases and BN affines carry the
        exclusion flag used by LARS and weight-decay filtering."""
        out = []
        for i, layer in enumerate(self.layers):
            out.append((f"{self.name}{i}.weight", layer.weight, False))
            out.append((f"{self.name}{i}.bias", layer.bias, True))
            if layer.norm is not None:
                out.append((f"{self.name}{i}.gamma", layer.norm.gamma, True))
                out.append((f"{self.name}{i}.beta", layer.norm.beta, True))
        return out

    def bn_states(self) -> list[MomentumBNState]:
        return [l.state for l in self.layers if l.state is not None]


def _init_mlp(name: str, spec: MlpSpec, rng: np.random.Generator,
              trainable: bool, eps: float,
              with_state: bool = False,
              alpha_semantics: str = "weight_on_batch") -> Mlp:
    layers = []
    for i in range(spec.n_layers):
        fan_in, fan_out = spec.widths[i], spec.widths[i + 1]
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        w = Tensor(rng.uniform(-lim, lim, size=(fan_in, fan_out)),
                   requires_grad=trainable)
        b = Tensor(np.zeros(fan_out), requires_grad=trainable)
        norm = None
        state = None
        if spec.bn[i]:
            norm = NormParams(
                gamma=Tensor(np.ones(fan_out), requires_grad=trainable),
                beta=Tensor(np.zeros(fan_out), requires_grad=trainable),
                eps=eps,
            )
            if with_state:
                state = MomentumBNState(alpha_semantics=alpha_semantics)
        layers.append(Layer(weight=w, bias=b, norm=norm, relu=spec.relu[i],
                            state=state))
    return Mlp(name, spec, layers)


def _copy_as_teacher(mlp: Mlp, alpha_semantics: str) -> Mlp:
    layers = []
    for layer in mlp.layers:
        norm = None
        state = None
        if layer.norm is not None:
            norm = NormParams(
                gamma=Tensor(layer.norm.gamma.values.copy(), requires_grad=False),
                beta=Tensor(layer.norm.beta.values.copy(), requires_grad=False),
                eps=layer.norm.eps,
            )
            state = MomentumBNState(alpha_semantics=alpha_semantics)
        layers.append(Layer(
            weight=Tensor(layer.weight.values.copy(), requires_grad=False),
            bias=Tensor(layer.bias.values.copy(), requires_grad=False),
            norm=norm, relu=layer.relu, state=state,
        ))
    return Mlp("t_" + mlp.name, mlp.spec, layers)


class StudentTeacherPair:
    """Student (encoder, projector, predictor) and its EMA teacher
    (encoder, projector)."""

    def __init__(self, encoder: Mlp, projector: Mlp, predictor: Mlp,
                 student_bn: str = "plain", teacher_bn: str = "momentum",
                 alpha_semantics: str = "weight_on_batch"):
        if student_bn not in STUDENT_BN_KINDS:
            raise ValueError(f"student_bn must be one of {STUDENT_BN_KINDS}")
        if teacher_bn not in TEACHER_BN_KINDS:
            raise ValueError(f"teacher_bn must be one of {TEACHER_BN_KINDS}")
        self.encoder = encoder
        self.projector = projector
        self.predictor = predictor
        self.student_bn = student_bn
        self.teacher_bn = teacher_bn
        self.alpha_semantics = alpha_semantics
        self.t_encoder = _copy_as_teacher(encoder, alpha_semantics)
        self.t_projector = _copy_as_teacher(projector, alpha_semantics)

    def student_params(self, include_predictor: bool = True):
        mlps = [self.encoder, self.projector]
        if include_predictor:
            mlps.append(self.predictor)
        out = []
        for m in mlps:
            out.extend(m.params())
        return out

    def ema_pairs(self) -> list[tuple[Tensor, Tensor]]:
        """(teacher tensor, student tensor) for every mirrored weight."""
        pairs = []
        for t_mlp, s_mlp in ((self.t_encoder, self.encoder),
                             (self.t_projector, self.projector)):
            for (_, t, _), (_, s, _) in zip(t_mlp.params(), s_mlp.params()):
                pairs.append((t, s))
        return pairs

    def teacher_bn_states(self) -> list[MomentumBNState]:
        return self.t_encoder.bn_states() + self.t_projector.bn_states()


def build_pair(encoder_spec: MlpSpec, projector_spec: MlpSpec,
               predictor_spec: MlpSpec, rng: np.random.Generator,
               student_bn: str = "plain", teacher_bn: str = "momentum",
               eps: float = 1e-5,
               alpha_semantics: str = "weight_on_batch") -> StudentTeacherPair:
    if encoder_spec.out_dim != projector_spec.in_dim:
        raise DimensionError(
            f"encoder out {encoder_spec.out_dim} != projector in "
            f"{projector_spec.in_dim}")
    if projector_spec.out_dim != predictor_spec.in_dim:
        raise DimensionError(
            f"projector out {projector_spec.out_dim} != predictor in "
            f"{predictor_spec.in_dim}")
    encoder = _init_mlp("enc", encoder_spec, rng, trainable=True, eps=eps)
    projector = _init_mlp("proj", projector_spec, rng, trainable=True, eps=eps)
    predictor = _init_mlp("pred", predictor_spec, rng, trainable=True, eps=eps)
    return StudentTeacherPair(encoder, projector, predictor,
                              student_bn=student_bn, teacher_bn=teacher_bn,
                              alpha_semantics=alpha_semantics)


# ---------------------------------------------------------------------------
# forwards


def _affine(x: Tensor, layer: Layer) -> Tensor:
    if x.values.shape[-1] != layer.weight.shape[0]:
        raise DimensionError(
            f"input width {x.values.shape[-1]} does not match layer "
            f"fan-in {layer.weight.shape[0]}")
    return engine.matmul(x, layer.weight) + layer.bias


def _forward_student_mlp(mlp: Mlp, x: Tensor, layout: WorkerLayout,
                         bn_kind: str) -> Tensor:
    for layer in mlp.layers:
        x = _affine(x, layer)
        if layer.norm is not None:
            if bn_kind == "plain":
                x = plain_bn_forward(x, layout, layer.norm)
            else:
                x = synced_bn_forward(x, layout, layer.norm)
        if layer.relu:
            x = engine.relu(x)
    return x


def forward_student(pair: StudentTeacherPair, v,
                    layout: WorkerLayout) -> tuple[Tensor, Tensor]:
    """Full student pass: returns (projection z, prediction p)."""
    x = engine.as_tensor(v)
    z = _forward_student_mlp(pair.encoder, x, layout, pair.student_bn)
    z = _forward_student_mlp(pair.projector, z, layout, pair.student_bn)
    p = _forward_student_mlp(pair.predictor, z, layout, pair.student_bn)
    return z, p


def _forward_teacher_mlp(mlp: Mlp, x: Tensor, alpha: float, bn_kind: str,
                         layout: Optional[WorkerLayout],
                         perm_seed: Optional[int]) -> Tensor:
    for layer in mlp.layers:
        x = _affine(x, layer)
        if layer.norm is not None:
            if bn_kind == "momentum":
                x, _ = momentum_bn_forward(x, layer.state, alpha, layer.norm)
            else:
                if layout is None:
                    raise ValueError(
                        f"teacher BN kind {bn_kind!r} needs a worker layout")
                # Whole-batch statistics are retained for the history commit
                # regardless of how the normalization groups the samples.
                layer.state.pending.append(constant_batch_stats(x.values))
                if bn_kind == "plain":
                    x = plain_bn_forward(x, layout, layer.norm)
                elif bn_kind == "synced":
                    x = synced_bn_forward(x, layout, layer.norm)
                else:
                    x = shuffling_bn_forward(x, layout, layer.norm,
                                             perm_seed=perm_seed)
        if layer.relu:
            x = engine.relu(x)
    return x


def forward_teacher(pair: StudentTeacherPair, v, alpha: float,
                    layout: Optional[WorkerLayout] = None,
                    perm_seed: Optional[int] = None) -> Tensor:
    """Teacher pass: projection z' with no gradient participation.

    Each BN layer's per-view statistics land on its state's pending list;
    commit them once per iteration via :func:`commit_teacher_bn`.
    """
    x = engine.constant(np.asarray(v.values if isinstance(v, Tensor) else v))
    x = _forward_teacher_mlp(pair.t_encoder, x, alpha, pair.teacher_bn,
                             layout, perm_seed)
    x = _forward_teacher_mlp(pair.t_projector, x, alpha, pair.teacher_bn,
                             layout, perm_seed)
    return x


# ---------------------------------------------------------------------------
# EMA and commits


def ema_update(pair: StudentTeacherPair, m: float) -> None:
    """teacher <- (1 - m) * teacher + m * student for every mirrored weight,
    including BN gamma/beta. Momentum BN histories are never touched here."""
    if not 0.0 <= m <= 1.0:
        raise ValueError(f"EMA coefficient must lie in [0, 1], got {m}")
    for t, s in pair.ema_pairs():
        t.values = (1.0 - m) * t.values + m * s.values


def commit_teacher_bn(pair: StudentTeacherPair, alpha: float) -> float:
    """Lazily commit every teacher BN layer's pending view statistics.

    Returns the total L2 drift of the histories, the per-iteration
    history-movement metric.
    """
    from .normalization import momentum_bn_lazy_commit

    drift_sq = 0.0
    for state in pair.teacher_bn_states():
        if not state.pending:
            continue
        before_mean = None if state.hist_mean is None else state.hist_mean.copy()
        before_var = None if state.hist_var is None else state.hist_var.copy()
        if len(state.pending) == 1:
            s = state.pending[0]
            momentum_bn_lazy_commit(state, s, s, alpha)
        elif len(state.pending) == 2:
            s_a, s_b = state.pending
            momentum_bn_lazy_commit(state, s_a, s_b, alpha)
        else:
            raise ValueError(
                f"{len(state.pending)} pending view statistics; expected 1 or 2")
        if before_mean is not None:
            drift_sq += float(np.sum((state.hist_mean - before_mean) ** 2))
            drift_sq += float(np.sum((state.hist_var - before_var) ** 2))
        else:
            drift_sq += float(np.sum(state.hist_mean ** 2))
            drift_sq += float(np.sum(state.hist_var ** 2))
    return float(np.sqrt(drift_sq))


# ---------------------------------------------------------------------------
# teacher dump


def dump_teacher(pair: StudentTeacherPair) -> dict:
    """Serializable payload of the teacher encoder: weights, BN affines and
    final momentum histories. This is the frozen feature extractor; the
    projector and the student's predictor are deliberately excluded."""
    arrays: dict[str, np.ndarray] = {}
    init_flags = []
    bn_eps = []
    for i, layer in enumerate(pair.t_encoder.layers):
        arrays[f"enc{i}.weight"] = layer.weight.values.copy()
        arrays[f"enc{i}.bias"] = layer.bias.values.copy()
        if layer.norm is not None:
            arrays[f"enc{i}.gamma"] = layer.norm.gamma.values.copy()
            arrays[f"enc{i}.beta"] = layer.norm.beta.values.copy()
            state = layer.state
            width = layer.weight.shape[1]
            if state is not None and state.initialized:
                arrays[f"enc{i}.hist_mean"] = state.hist_mean.copy()
                arrays[f"enc{i}.hist_var"] = state.hist_var.copy()
                init_flags.append(True)
            else:
                arrays[f"enc{i}.hist_mean"] = np.zeros(width)
                arrays[f"enc{i}.hist_var"] = np.ones(width)
                init_flags.append(False)
            bn_eps.append(layer.norm.eps)
    return {
        "version": TEACHER_DUMP_VERSION,
        "encoder_spec": pair.t_encoder.spec.to_dict(),
        "bn_initialized": init_flags,
        "bn_eps": bn_eps,
        "arrays": arrays,
    }


def expected_array_names(encoder_spec: MlpSpec) -> set:
    """The exact array-name set a valid teacher dump must contain."""
    names = set()
    for i in range(encoder_spec.n_layers):
        names.add(f"enc{i}.weight")
        names.add(f"enc{i}.bias")
        if encoder_spec.bn[i]:
            names.update({f"enc{i}.gamma", f"enc{i}.beta",
                          f"enc{i}.hist_mean", f"enc{i}.hist_var"})
    return names
