"""Encoder/decoder networks, composite loss, and the deterministic training loop.

The encoder/decoder are frame-wise multilayer perceptrons: temporality is
carried entirely by the Koopman layer, which keeps desk-scale runs CPU-cheap.
Training uses Adam (beta1=0.9, beta2=0.999, eps=1e-8, no weight decay) with
seed-deterministic shuffling and initialization.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import koopman
from .autodiff import Tensor
from .errors import ConfigError, NumericError

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class ModelConfig:
    m: int
    k: int
    hidden: tuple[int, ...] = (128,)
    nonlinearity: str = "tanh"
    k_s: int = 8
    eps: float = 0.5
    mode: str = "default"
    selection: str = "distance"
    lambda_rec: float = 15.0
    lambda_pred: float = 1.0
    lambda_eig: float = 1.0
    noise_scale: float = 0.005
    lr: float = 1e-3
    epochs: int = 300
    batch_size: int = 32
    seed: int = 0
    output_range: str = "unit"   # "unit" -> sigmoid decoder head, else identity
    eig_terms: str = "both"      # ablation: "stat-only" drops L_dyn from the objective

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.k < self.k_s + 1:
            raise ConfigError(f"k must be >= k_s + 1 (k={self.k}, k_s={self.k_s})")
        if self.eig_terms not in ("both", "stat-only"):
            raise ConfigError(f"unknown eig_terms {self.eig_terms!r}")
        if min(self.lambda_rec, self.lambda_pred, self.lambda_eig) < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.noise_scale < 0:
            raise ConfigError("noise_scale must be non-negative")
        if self.nonlinearity not in ("tanh", "relu"):
            raise ConfigError(f"unknown nonlinearity {self.nonlinearity!r}")


@dataclass
class ModelParams:
    """Per-layer weights/biases plus Adam state."""

    enc: list[Tensor]   # alternating W, b
    dec: list[Tensor]
    adam_m: list[np.ndarray] = field(default_factory=list)
    adam_v: list[np.ndarray] = field(default_factory=list)
    step: int = 0

    def all_params(self) -> list[Tensor]:
        return self.enc + self.dec

    def init_adam(self) -> None:
        self.adam_m = [np.zeros_like(p.value) for p in self.all_params()]
        self.adam_v = [np.zeros_like(p.value) for p in self.all_params()]
        self.step = 0


def _layer_dims(config: ModelConfig) -> tuple[list[tuple[int, int]], list[tuple[int, int]]]:
    enc_sizes = [config.m, *config.hidden, config.k]
    dec_sizes = [config.k, *reversed(config.hidden), config.m]
    enc = list(zip(enc_sizes[:-1], enc_sizes[1:]))
    dec = list(zip(dec_sizes[:-1], dec_sizes[1:]))
    return enc, dec


def init_params(config: ModelConfig, rng: np.random.Generator | None = None) -> ModelParams:
    """Uniform fan-in initialization from the run seed."""
    if rng is None:
        rng = np.random.default_rng(config.seed)
    enc_dims, dec_dims = _layer_dims(config)

    def make(dims):
        layers = []
        for fan_in, fan_out in dims:
            bound = 1.0 / np.sqrt(fan_in)
            layers.append(Tensor(rng.uniform(-bound, bound, (fan_in, fan_out)),
                                 requires_grad=True))
            layers.append(Tensor(np.zeros(fan_out), requires_grad=True))
        return layers

    params = ModelParams(enc=make(enc_dims), dec=make(dec_dims))
    params.init_adam()
    return params


def _mlp(x: Tensor, layers: list[Tensor], nonlinearity: str, final) -> Tensor:
    n_layers = len(layers) // 2
    for i in range(n_layers):
        w, b = layers[2 * i], layers[2 * i + 1]
        x = x @ w + b
        if i < n_layers - 1:
            x = x.tanh() if nonlinearity == "tanh" else x.relu()
    if final == "sigmoid":
        x = x.sigmoid()
    return x


def encode(x: np.ndarray, params: ModelParams, config: ModelConfig,
           rng: np.random.Generator | None = None,
           training: bool = False) -> koopman.LatentBatch:
    """Frame-wise encoding X -> Z; adds uniform stabilization noise in training."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[2] != config.m:
        raise ConfigError(f"expected batch (b, t+1, {config.m}), got {x.shape}")
    b, t1, _ = x.shape
    flat = Tensor(x.reshape(b * t1, config.m))
    z = _mlp(flat, params.enc, config.nonlinearity, final=None)
    z = z.reshape(b, t1, config.k)
    if training and config.noise_scale > 0:
        if rng is None:
            raise ConfigError("training-mode encode needs an RNG for stabilization noise")
        z = z + config.noise_scale * rng.random(z.shape)
    return koopman.LatentBatch(z=z)


def decode(z, params: ModelParams, config: ModelConfig) -> Tensor:
    """Frame-wise decoding Z -> X; sigmoid head when observations live in [0,1]."""
    z = z if isinstance(z, Tensor) else Tensor(np.asarray(z, dtype=np.float64))
    shape = z.shape
    flat = z.reshape(int(np.prod(shape[:-1])), config.k)
    final = "sigmoid" if config.output_range == "unit" else None
    x = _mlp(flat, params.dec, config.nonlinearity, final=final)
    return x.reshape(*shape[:-1], config.m)


@dataclass
class LossTerms:
    total: Tensor
    rec: Tensor
    pred: Tensor
    stat: Tensor
    dyn: Tensor
    spectrum: koopman.KoopmanSpectrum


def total_loss(x: np.ndarray, params: ModelParams, config: ModelConfig,
               rng: np.random.Generator | None = None,
               training: bool = False) -> LossTerms:
    """L = lambda_rec L_rec + lambda_pred L_pred + lambda_eig (L_stat + L_dyn)."""
    x = np.asarray(x, dtype=np.float64)
    latent = encode(x, params, config, rng=rng, training=training)
    x_rec = decode(latent.z, params, config)
    l_rec = ((x_rec - x) ** 2).mean()

    spectrum = koopman.estimate_operator(latent)
    zf_hat = latent.zp @ spectrum.c
    xf = x[:, 1:, :].reshape(latent.b * latent.t, config.m)
    xf_hat = decode(zf_hat, params, config)
    l_pred = ((zf_hat - latent.zf) ** 2).mean() + ((xf_hat - xf) ** 2).mean()

    spec = koopman.spectral_loss(spectrum, config.k_s, config.eps,
                                 mode=config.mode, selection=config.selection)
    l_eig = spec.stat if config.eig_terms == "stat-only" else spec.eig
    total = (config.lambda_rec * l_rec + config.lambda_pred * l_pred
             + config.lambda_eig * l_eig)
    for name, term in (("L_rec", l_rec), ("L_pred", l_pred),
                       ("L_stat", spec.stat), ("L_dyn", spec.dyn), ("L", total)):
        if not np.isfinite(term.value):
            raise NumericError(f"{name} is not finite")
    return LossTerms(total=total, rec=l_rec, pred=l_pred,
                     stat=spec.stat, dyn=spec.dyn, spectrum=spectrum)


def adam_step(params: ModelParams, lr: float) -> None:
    """One Adam update from the gradients stored on the parameters."""
    params.step += 1
    t = params.step
    for i, p in enumerate(params.all_params()):
        g = p.grad if p.grad is not None else np.zeros_like(p.value)
        params.adam_m[i] = ADAM_BETA1 * params.adam_m[i] + (1 - ADAM_BETA1) * g
        params.adam_v[i] = ADAM_BETA2 * params.adam_v[i] + (1 - ADAM_BETA2) * g * g
        m_hat = params.adam_m[i] / (1 - ADAM_BETA1 ** t)
        v_hat = params.adam_v[i] / (1 - ADAM_BETA2 ** t)
        p.value = p.value - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
        p.grad = None


@dataclass
class ModelCheckpoint:
    """Everything needed for exact resumption: params, optimizer, RNG seed."""

    config: ModelConfig
    enc: list[np.ndarray]
    dec: list[np.ndarray]
    adam_m: list[np.ndarray]
    adam_v: list[np.ndarray]
    step: int
    seed: int
    loss_history: list[dict]
    final_eigenvalues: np.ndarray | None = None

    def to_params(self) -> ModelParams:
        p = ModelParams(
            enc=[Tensor(a.copy(), requires_grad=True) for a in self.enc],
            dec=[Tensor(a.copy(), requires_grad=True) for a in self.dec],
            adam_m=[a.copy() for a in self.adam_m],
            adam_v=[a.copy() for a in self.adam_v],
            step=self.step,
        )
        return p


def checkpoint_from(params: ModelParams, config: ModelConfig,
                    loss_history: list[dict],
                    final_eigenvalues: np.ndarray | None) -> ModelCheckpoint:
    return ModelCheckpoint(
        config=config,
        enc=[p.value.copy() for p in params.enc],
        dec=[p.value.copy() for p in params.dec],
        adam_m=[a.copy() for a in params.adam_m],
        adam_v=[a.copy() for a in params.adam_v],
        step=params.step,
        seed=config.seed,
        loss_history=loss_history,
        final_eigenvalues=final_eigenvalues,
    )


def train(config: ModelConfig, frames: np.ndarray,
          progress: bool = False) -> ModelCheckpoint:
    """Run the full training loop; deterministic given (config, frames).

    Aborts with a spectrum diagnostic if the loss diverges (NaN or > 1e6).
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 3 or frames.shape[2] != config.m:
        raise ConfigError(f"dataset frames must be (n, t+1, {config.m}), got {frames.shape}")
    n = frames.shape[0]
    rng = np.random.default_rng(config.seed)
    params = init_params(config, rng)
    history: list[dict] = []
    last_spectrum = None

    for epoch in range(config.epochs):
        order = rng.permutation(n)
        sums = {"L": 0.0, "L_rec": 0.0, "L_pred": 0.0, "L_stat": 0.0, "L_dyn": 0.0}
        n_batches = 0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            t = frames.shape[1] - 1
            if len(idx) < config.batch_size and len(idx) * t < config.k:
                continue   # straggler too small to determine the operator; skip it
            try:
                terms = total_loss(frames[idx], params, config, rng=rng, training=True)
            except NumericError as e:
                raise NumericError(
                    f"training diverged at epoch {epoch}: {e}; last spectrum: "
                    f"{None if last_spectrum is None else last_spectrum.values}") from e
            if terms.total.item() > 1e6:
                raise NumericError(
                    f"training diverged at epoch {epoch}: L={terms.total.item():.3e}; "
                    f"spectrum: {terms.spectrum.values}")
            terms.total.backward()
            adam_step(params, config.lr)
            last_spectrum = terms.spectrum
            sums["L"] += terms.total.item()
            sums["L_rec"] += terms.rec.item()
            sums["L_pred"] += terms.pred.item()
            sums["L_stat"] += terms.stat.item()
            sums["L_dyn"] += terms.dyn.item()
            n_batches += 1
        record = {"epoch": epoch, **{k: v / max(1, n_batches) for k, v in sums.items()}}
        history.append(record)
        if progress:
            print(f"epoch {epoch:4d}  L={record['L']:.5f}  L_rec={record['L_rec']:.5f}  "
                  f"L_stat={record['L_stat']:.5f}  L_dyn={record['L_dyn']:.5f}")

    final_values = None if last_spectrum is None else last_spectrum.values.copy()
    return checkpoint_from(params, config, history, final_values)


def encode_eval(ckpt: ModelCheckpoint, frames: np.ndarray) -> koopman.LatentBatch:
    """Inference-mode encoding (no stabilization noise, no gradient tracking)."""
    params = ckpt.to_params()
    for p in params.all_params():
        p.requires_grad = False
    return encode(frames, params, ckpt.config, training=False)


def decode_eval(ckpt: ModelCheckpoint, z: np.ndarray) -> np.ndarray:
    params = ckpt.to_params()
    for p in params.all_params():
        p.requires_grad = False
    return decode(np.asarray(z, dtype=np.float64), params, ckpt.config).value
