"""
Desk-scale diffusion transformer with a CFG denoising loop.

Pre-norm blocks (fused qkv attention + GELU MLP) over a tokens x dim latent,
a sinusoidal timestep embedding and a condition vector added to every
token, and a linear noise-prediction head. Every linear layer runs either at
reference precision or through the balanced fake-quantized path
y = Q_a(G_t(x)) @ Q_w(H_t(W)).

Massive outliers are planted the way pretrained DiTs show them: each
block's adaLN-style norm gains carry a few x20 channels whose position drifts
with the denoising phase, and a few value and fc1 output channels are
scaled so the proj and fc2 inputs carry static outliers as well.

Layer ids: block b owns qkv 4b, proj 4b+1, fc1 4b+2, fc2 4b+3; the head
is 4 * blocks.
"""
from __future__ import annotations

import logging
import math
import threading
import time
import weakref
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Mapping, Optional, Protocol, Sequence, Tuple

import numpy as np

from core.config import ConfigError
from core.constants import Branch, Component, K, Layer
from core.errors import CoverageError, ShapeError
from core.tensor import Tensor2D
from core.types import AttentionRecord, LayerError, OutputMetrics, TimestepTrace
from services.attention_share import SharingPlan, apply_sharing, cosine_similarity
from services.quantizer import MAX_BITS, MIN_BITS, QuantConfig, error_metrics, fake_quantize
from services.rotation import BalancingComponents, BalancingParams, transform_activations
from services.time_bank import TimeParamBank

from .layer_state import LayerStateStore
from .schedule import NoiseSchedule

logger = logging.getLogger("trdq.toy_dit")

PHASES = 4
OUTLIER_CHANNELS = 3
# Phase outlier channels live in the leading 1/HOT_BAND of the width, disjoint across phases.
HOT_BAND = 2
OUTLIER_GAIN = 20.0
STATIC_OUTLIERS = 2
STATIC_GAIN = 8.0
LN_EPS = 1e-6

MAIN = "main"
UNCOND = "uncond"

_BRANCHES = (Branch.CONDITIONAL, Branch.UNCONDITIONAL)


@dataclass(frozen=True)
class ToyDiTConfig:
    dim: int = 64
    heads: int = 4
    blocks: int = 4
    tokens: int = 16
    steps: int = 20
    cfg_scale: float = 4.5
    seed: int = 0
    tie_branches: bool = True
    mirror_condition: bool = False

    def __post_init__(self) -> None:
        for name in ("dim", "heads", "blocks", "tokens", "steps"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"model.{name} must be positive")
        if self.dim % self.heads != 0:
            raise ConfigError(f"model.dim {self.dim} must be divisible by model.heads {self.heads}")
        if self.dim % 2 != 0:
            raise ConfigError("model.dim must be even for the sinusoidal embedding")
        if self.dim // HOT_BAND < PHASES * OUTLIER_CHANNELS:
            raise ConfigError(f"model.dim must be at least {HOT_BAND * PHASES * OUTLIER_CHANNELS}")

    @classmethod
    def from_config(cls, model: Mapping[str, Any]) -> ToyDiTConfig:
        return cls(
            dim=int(model[K.DIM]),
            heads=int(model[K.HEADS]),
            blocks=int(model[K.BLOCKS]),
            tokens=int(model[K.TOKENS]),
            steps=int(model[K.STEPS]),
            cfg_scale=float(model[K.CFG_SCALE]),
            seed=int(model[K.MODEL_SEED]),
            tie_branches=bool(model.get(K.TIE_BRANCHES, True)),
            mirror_condition=bool(model.get(K.MIRROR_CONDITION, False)),
        )

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def head_layer(self) -> int:
        return Layer.PER_BLOCK * self.blocks

    @property
    def layer_ids(self) -> List[int]:
        return list(range(self.head_layer + 1))

    def layer_name(self, layer_id: int) -> str:
        if layer_id == self.head_layer:
            return "head"
        block, slot = divmod(layer_id, Layer.PER_BLOCK)
        return f"block{block}.{Layer.NAMES[slot]}"


@dataclass(frozen=True)
class LayerMode:
    """How linear layers run: reference, or balanced fake-quant with ablation toggles."""
    quantize: bool = False
    weight_bits: Optional[int] = None
    act_bits: Optional[int] = None
    components: BalancingComponents = BalancingComponents()
    time_rotation: bool = True

    def __post_init__(self) -> None:
        for name in ("weight_bits", "act_bits"):
            bits = getattr(self, name)
            if bits is not None and not MIN_BITS <= int(bits) <= MAX_BITS:
                raise ConfigError(f"{name} must be in [{MIN_BITS}, {MAX_BITS}], got {bits}")

    @classmethod
    def reference(cls) -> LayerMode:
        return cls()

    @classmethod
    def fake_quant(
        cls,
        weight_bits: Optional[int],
        act_bits: Optional[int],
        *,
        use_smoothing: bool = True,
        use_r1: bool = True,
        use_p: bool = True,
        use_r2: bool = True,
        use_time_rotation: bool = True,
    ) -> LayerMode:
        return cls(
            quantize=True,
            weight_bits=weight_bits,
            act_bits=act_bits,
            components=BalancingComponents(smooth=use_smoothing, r1=use_r1, p=use_p, r2=use_r2),
            time_rotation=use_time_rotation,
        )

    @classmethod
    def from_ablation(cls, weight_bits: Optional[int], act_bits: Optional[int], ablated: Iterable[str]) -> LayerMode:
        off = set(ablated)
        return cls(
            quantize=True,
            weight_bits=weight_bits,
            act_bits=act_bits,
            components=BalancingComponents.from_ablation(off),
            time_rotation=Component.TIME_ROTATION not in off,
        )

    @property
    def needs_bank(self) -> bool:
        c = self.components
        return self.quantize and (c.smooth or c.rotates)

    @property
    def label(self) -> str:
        if not self.quantize:
            return "reference"
        w = "-" if self.weight_bits is None else str(self.weight_bits)
        a = "-" if self.act_bits is None else str(self.act_bits)
        return f"W{w}A{a}"


class ForwardObserver(Protocol):
    def on_linear(self, layer_id: int, t: int, branch: int, x: Tensor2D) -> None: ...

    def on_attention(self, block_id: int, t: int, branch: int, probs: Tensor2D) -> None: ...


@dataclass
class DenoiseResult:
    latent: Tensor2D
    intermediates: List[Tensor2D]
    attention_executed: int
    attention_skipped: int
    wall_time: float
    layer_errors: List[LayerError] = field(default_factory=list)


@dataclass
class CaptureResult:
    traces: List[TimestepTrace]
    attention: List[AttentionRecord]


def layer_norm(x: Tensor2D) -> Tensor2D:
    mean = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    return (x - mean) / np.sqrt(var + LN_EPS)


def gelu(x: Tensor2D) -> Tensor2D:
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x ** 3)))


def timestep_embedding(train_t: int, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half, dtype=np.float64) / half)
    args = float(train_t) * freqs
    return np.concatenate([np.sin(args), np.cos(args)])


def attention_probs(q: Tensor2D, k: Tensor2D, heads: int) -> np.ndarray:
    """Softmax(q k^T / sqrt(d_h)) per head, shape (heads, T, T)."""
    tokens, dim = q.shape
    hd = dim // heads
    qh = q.reshape(tokens, heads, hd).transpose(1, 0, 2)
    kh = k.reshape(tokens, heads, hd).transpose(1, 0, 2)
    scores = qh @ kh.transpose(0, 2, 1) / math.sqrt(hd)
    scores = scores - scores.max(axis=-1, keepdims=True)
    weights = np.exp(scores)
    return weights / weights.sum(axis=-1, keepdims=True)


def attend(probs: np.ndarray, v: Tensor2D) -> Tensor2D:
    heads = probs.shape[0]
    tokens, dim = v.shape
    vh = v.reshape(tokens, heads, dim // heads).transpose(1, 0, 2)
    return (probs @ vh).transpose(1, 0, 2).reshape(tokens, dim)


def _seeded(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), stream]))


def condition_for_seed(seed: int, dim: int) -> np.ndarray:
    """Fixed random condition vector standing in for a text embedding."""
    return _seeded(seed, 1).standard_normal(dim)


def noise_for_seed(seed: int, tokens: int, dim: int) -> Tensor2D:
    return _seeded(seed, 0).standard_normal((tokens, dim))


class ToyDiT:
    """Weights, planted outlier structure and the batched CFG forward pass."""

    def __init__(self, cfg: ToyDiTConfig) -> None:
        self.cfg = cfg
        self.schedule = NoiseSchedule(cfg.steps)
        self._weights: Dict[Tuple[int, str], Tensor2D] = {}
        self._identity: Dict[int, BalancingParams] = {}
        self._stores: "weakref.WeakKeyDictionary[TimeParamBank, LayerStateStore]" = weakref.WeakKeyDictionary()
        self._unbanked_store = LayerStateStore()
        self._store_lock = threading.Lock()
        self._init_weights()

    def _init_weights(self) -> None:
        cfg = self.cfg
        dim = cfg.dim
        rng = np.random.default_rng(cfg.seed)
        self.norm1 = np.empty((cfg.blocks, PHASES, dim))
        self.norm2 = np.empty((cfg.blocks, PHASES, dim))

        for b in range(cfg.blocks):
            base = b * Layer.PER_BLOCK
            qkv = rng.standard_normal((dim, 3 * dim)) / math.sqrt(dim)
            uncond_qkv = rng.standard_normal((dim, 3 * dim)) / math.sqrt(dim)
            for c in rng.choice(dim, STATIC_OUTLIERS, replace=False):
                qkv[:, 2 * dim + c] *= STATIC_GAIN
                uncond_qkv[:, 2 * dim + c] *= STATIC_GAIN
            fc1 = rng.standard_normal((dim, 2 * dim)) / math.sqrt(dim)
            fc1[:, rng.choice(2 * dim, STATIC_OUTLIERS, replace=False)] *= STATIC_GAIN

            self._weights[(base + Layer.QKV, MAIN)] = qkv
            if not cfg.tie_branches:
                self._weights[(base + Layer.QKV, UNCOND)] = uncond_qkv
            self._weights[(base + Layer.PROJ, MAIN)] = rng.standard_normal((dim, dim)) / math.sqrt(dim)
            self._weights[(base + Layer.FC1, MAIN)] = fc1
            self._weights[(base + Layer.FC2, MAIN)] = rng.standard_normal((2 * dim, dim)) / math.sqrt(2 * dim)

            for gains in (self.norm1, self.norm2):
                hot = rng.choice(dim // HOT_BAND, PHASES * OUTLIER_CHANNELS, replace=False)
                for phase in range(PHASES):
                    gain = 1.0 + 0.1 * rng.standard_normal(dim)
                    gain[hot[phase * OUTLIER_CHANNELS:(phase + 1) * OUTLIER_CHANNELS]] *= OUTLIER_GAIN
                    gains[b, phase] = gain

        self._weights[(cfg.head_layer, MAIN)] = rng.standard_normal((dim, dim)) / math.sqrt(dim)
        self.norm_out = 1.0 + 0.1 * rng.standard_normal(dim)
        for w in self._weights.values():
            w.setflags(write=False)

    def weight(self, layer_id: int, variant: str = MAIN) -> Tensor2D:
        try:
            return self._weights[(layer_id, variant)]
        except KeyError:
            raise ShapeError(f"model has no weight for layer {layer_id} ({variant})") from None

    def layer_weights(self) -> Dict[int, Tensor2D]:
        """Main-branch weight per layer id, the calibration targets."""
        return {layer: w for (layer, variant), w in sorted(self._weights.items()) if variant == MAIN}

    def phase_of(self, t: int) -> int:
        return min(PHASES - 1, (t - 1) * PHASES // self.cfg.steps)

    def store_for(self, bank: Optional[TimeParamBank]) -> LayerStateStore:
        if bank is None:
            return self._unbanked_store
        with self._store_lock:
            store = self._stores.get(bank)
            if store is None:
                store = LayerStateStore()
                self._stores[bank] = store
        return store

    def identity_params(self, channels: int) -> BalancingParams:
        params = self._identity.get(channels)
        if params is None:
            params = BalancingParams.identity(channels, channels)
            self._identity[channels] = params
        return params

    def predict(self, x_t: Tensor2D, t: int, condition: np.ndarray, runner: _LinearRunner) -> Tuple[Tensor2D, Tensor2D]:
        """Noise predictions of the conditional and unconditional branches."""
        cfg = self.cfg
        dim = cfg.dim
        temb = timestep_embedding(self.schedule.train_timestep(t), dim)
        uncond_vec = condition if cfg.mirror_condition else np.zeros_like(condition)
        h = {
            Branch.CONDITIONAL: x_t + temb + condition,
            Branch.UNCONDITIONAL: x_t + temb + uncond_vec,
        }
        phase = self.phase_of(t)
        uncond_variant = MAIN if cfg.tie_branches else UNCOND
        v_cols = slice(2 * dim, 3 * dim)

        for b in range(cfg.blocks):
            base = b * Layer.PER_BLOCK
            a_c = layer_norm(h[Branch.CONDITIONAL]) * self.norm1[b, phase]
            a_u = layer_norm(h[Branch.UNCONDITIONAL]) * self.norm1[b, phase]

            qkv_c = runner.linear(base + Layer.QKV, MAIN, a_c, t, Branch.CONDITIONAL)
            probs_c = attention_probs(qkv_c[:, :dim], qkv_c[:, dim:2 * dim], cfg.heads)
            runner.observe_attention(b, t, Branch.CONDITIONAL, probs_c)

            held: Dict[str, Tensor2D] = {}

            def uncond_probs() -> np.ndarray:
                qkv_u = runner.linear(base + Layer.QKV, uncond_variant, a_u, t, Branch.UNCONDITIONAL)
                held["v"] = qkv_u[:, v_cols]
                probs = attention_probs(qkv_u[:, :dim], qkv_u[:, dim:2 * dim], cfg.heads)
                runner.observe_attention(b, t, Branch.UNCONDITIONAL, probs)
                return probs

            probs_u, computed = apply_sharing(runner.plan, b, t, probs_c, uncond_probs)
            runner.count_attention(computed)
            if computed:
                v_u = held["v"]
            else:
                v_u = runner.linear(base + Layer.QKV, uncond_variant, a_u, t, Branch.UNCONDITIONAL, cols=v_cols)

            outs = {
                Branch.CONDITIONAL: attend(probs_c, qkv_c[:, v_cols]),
                Branch.UNCONDITIONAL: attend(probs_u, v_u),
            }
            for branch in _BRANCHES:
                h[branch] = h[branch] + runner.linear(base + Layer.PROJ, MAIN, outs[branch], t, branch)
                m = layer_norm(h[branch]) * self.norm2[b, phase]
                f = gelu(runner.linear(base + Layer.FC1, MAIN, m, t, branch))
                h[branch] = h[branch] + runner.linear(base + Layer.FC2, MAIN, f, t, branch)

        eps = {
            branch: runner.linear(cfg.head_layer, MAIN, layer_norm(h[branch]) * self.norm_out, t, branch)
            for branch in _BRANCHES
        }
        return eps[Branch.CONDITIONAL], eps[Branch.UNCONDITIONAL]


class _LinearRunner:
    """Per-run dispatch of linear layers to reference or fake-quant execution."""

    def __init__(
        self,
        model: ToyDiT,
        mode: LayerMode,
        bank: Optional[TimeParamBank],
        plan: SharingPlan,
        observer: Optional[ForwardObserver],
        record_errors: bool,
    ) -> None:
        self.model = model
        self.mode = mode
        self.bank = bank if mode.needs_bank else None
        self.plan = plan
        self.observer = observer
        self.record_errors = record_errors and mode.quantize
        self.store = model.store_for(self.bank)
        self.act_cfg = QuantConfig(bits=mode.act_bits) if mode.act_bits is not None else None
        self.executed = 0
        self.skipped = 0
        self.layer_errors: List[LayerError] = []

    def count_attention(self, computed: bool) -> None:
        # The conditional branch always runs.
        self.executed += 2 if computed else 1
        self.skipped += 0 if computed else 1

    def observe_attention(self, block_id: int, t: int, branch: int, probs: np.ndarray) -> None:
        if self.observer is not None:
            heads, tokens, _ = probs.shape
            self.observer.on_attention(block_id, t, branch, probs.reshape(heads * tokens, tokens))

    def _params(self, layer_id: int, t: int, channels: int) -> Tuple[BalancingParams, int]:
        if self.bank is None:
            return self.model.identity_params(channels), 0
        return self.bank.lookup(layer_id, t), self.bank.grouping.group_of(t, self.bank.schedule_len)

    def linear(
        self,
        layer_id: int,
        variant: str,
        x: Tensor2D,
        t: int,
        branch: int,
        cols: Optional[slice] = None,
    ) -> Tensor2D:
        if self.observer is not None:
            self.observer.on_linear(layer_id, t, branch, x)
        w = self.model.weight(layer_id, variant)
        if not self.mode.quantize:
            return x @ (w if cols is None else w[:, cols])

        params, group = self._params(layer_id, t, x.shape[1])
        xt = transform_activations(x, params)
        if self.act_cfg is not None:
            xt = fake_quantize(xt, self.act_cfg)
        wq = self.store.weight(layer_id, variant, group, w, params, self.mode.weight_bits)
        y = xt @ (wq if cols is None else wq[:, cols])

        if self.record_errors and branch == Branch.CONDITIONAL and cols is None:
            metrics = error_metrics(x @ w, y)
            self.layer_errors.append(LayerError(
                layer_id=layer_id,
                layer_name=self.model.cfg.layer_name(layer_id),
                timestep=t,
                mse=metrics.mse,
                sqnr_db=metrics.sqnr_db,
            ))
        return y


def _check_bank(model: ToyDiT, mode: LayerMode, bank: Optional[TimeParamBank]) -> None:
    if not mode.needs_bank:
        return
    if bank is None:
        raise CoverageError("balanced quantization needs a calibrated bank")
    cfg = model.cfg
    if bank.schedule_len != cfg.steps:
        raise ConfigError(f"bank covers {bank.schedule_len} steps, model runs {cfg.steps}")
    if bank.components != mode.components:
        raise ConfigError(
            f"bank was calibrated with components {bank.components.names()}, "
            f"mode requests {mode.components.names()}"
        )
    if not mode.time_rotation and not bank.grouping.is_time_agnostic:
        raise ConfigError("time-agnostic mode needs a single-bucket bank (grouping buckets:1)")
    if bank.layers != cfg.layer_ids:
        raise ConfigError(f"bank covers layers {bank.layers}, model has {cfg.layer_ids}")
    missing = bank.missing(cfg.layer_ids)
    if missing:
        raise CoverageError("bank does not cover every (layer, group)", missing)
    for layer_id, w in model.layer_weights().items():
        channels = bank.lookup(layer_id, 1).channel_count
        if channels != w.shape[0]:
            raise ConfigError(f"bank layer {layer_id} covers {channels} channels, model has {w.shape[0]}")


def run_denoise(
    model: ToyDiT,
    mode: LayerMode,
    bank: Optional[TimeParamBank] = None,
    plan: Optional[SharingPlan] = None,
    condition: Optional[np.ndarray] = None,
    noise_seed: int = 0,
    *,
    observer: Optional[ForwardObserver] = None,
    record_errors: bool = False,
) -> DenoiseResult:
    cfg = model.cfg
    _check_bank(model, mode, bank)
    if condition is None:
        condition = condition_for_seed(noise_seed, cfg.dim)
    condition = np.asarray(condition, dtype=np.float64)
    if condition.shape != (cfg.dim,):
        raise ShapeError(f"condition must have length {cfg.dim}, got shape {condition.shape}")

    runner = _LinearRunner(model, mode, bank, plan or SharingPlan.disabled(), observer, record_errors)
    x = noise_for_seed(noise_seed, cfg.tokens, cfg.dim)
    intermediates: List[Tensor2D] = []
    start = time.perf_counter()
    for t in range(1, cfg.steps + 1):
        eps_c, eps_u = model.predict(x, t, condition, runner)
        eps = eps_u + cfg.cfg_scale * (eps_c - eps_u)
        x = model.schedule.ddim_step(x, eps, t)
        intermediates.append(x)
    wall = time.perf_counter() - start

    logger.debug(
        "Denoised %s seed=%d in %.3fs (attention %d run, %d shared)",
        mode.label, noise_seed, wall, runner.executed, runner.skipped,
    )
    return DenoiseResult(
        latent=x,
        intermediates=intermediates,
        attention_executed=runner.executed,
        attention_skipped=runner.skipped,
        wall_time=wall,
        layer_errors=runner.layer_errors,
    )


def denoise(
    cfg: ToyDiTConfig,
    mode: LayerMode,
    bank: Optional[TimeParamBank] = None,
    plan: Optional[SharingPlan] = None,
    condition: Optional[np.ndarray] = None,
    noise_seed: int = 0,
) -> Tensor2D:
    return run_denoise(ToyDiT(cfg), mode, bank, plan, condition, noise_seed).latent


class TraceRecorder:
    """Collects layer inputs and attention probabilities; rows concatenate across runs."""

    def __init__(self) -> None:
        self._linear: Dict[Tuple[int, int, int], List[Tensor2D]] = defaultdict(list)
        self._attention: Dict[Tuple[int, int, int], List[Tensor2D]] = defaultdict(list)

    def on_linear(self, layer_id: int, t: int, branch: int, x: Tensor2D) -> None:
        self._linear[(layer_id, t, branch)].append(np.array(x, dtype=np.float64))

    def on_attention(self, block_id: int, t: int, branch: int, probs: Tensor2D) -> None:
        self._attention[(block_id, t, branch)].append(np.array(probs, dtype=np.float64))

    def result(self) -> CaptureResult:
        traces = [
            TimestepTrace(layer_id=layer, timestep=t, activations=np.concatenate(parts, axis=0), branch=branch)
            for (layer, t, branch), parts in sorted(self._linear.items())
        ]
        attention = [
            AttentionRecord(block_id=block, timestep=t, branch=branch, attn=np.concatenate(parts, axis=0))
            for (block, t, branch), parts in sorted(self._attention.items())
        ]
        return CaptureResult(traces=traces, attention=attention)


def capture_traces(
    cfg: ToyDiTConfig,
    conditions: Sequence[np.ndarray],
    noise_seeds: Optional[Sequence[int]] = None,
) -> CaptureResult:
    seeds = list(noise_seeds) if noise_seeds is not None else list(range(len(conditions)))
    if len(seeds) != len(conditions):
        raise ShapeError(f"{len(conditions)} conditions but {len(seeds)} noise seeds")
    model = ToyDiT(cfg)
    recorder = TraceRecorder()
    for condition, seed in zip(conditions, seeds):
        run_denoise(model, LayerMode.reference(), condition=condition, noise_seed=seed, observer=recorder)
    result = recorder.result()
    logger.info(
        "Captured %d layer traces and %d attention records from %d runs",
        len(result.traces), len(result.attention), len(conditions),
    )
    return result


def calibration_inputs(cfg: ToyDiTConfig, count: int, base_seed: int) -> Tuple[List[np.ndarray], List[int]]:
    seeds = [base_seed + i for i in range(count)]
    return [condition_for_seed(s, cfg.dim) for s in seeds], seeds


def evaluate(reference_out: Tensor2D, quant_out: Tensor2D) -> OutputMetrics:
    metrics = error_metrics(reference_out, quant_out)
    return OutputMetrics(
        mse=metrics.mse,
        max_abs_err=metrics.max_abs_err,
        sqnr_db=metrics.sqnr_db,
        cosine=cosine_similarity(reference_out, quant_out),
    )
