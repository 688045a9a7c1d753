"""Alternating training loop, checkpoints and run history.

One outer step updates the autoencoder ``(theta, psi)`` and then the image
discriminator ``omega``; it is followed by ``k`` inner iterations that update
the latent critic ``gamma`` and then the approximator ``phi``.  All gradients
of a step are taken at the pre-update parameters.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from aaae import __version__
from aaae.data import Dataset
from aaae.errors import CheckpointError, ConfigurationError, NumericalError
from aaae.model import AAAE, ModelSpec, ROLES, init_params
from aaae.objectives import (
    Hyperparams,
    LossReport,
    approximator_loss,
    autoencoder_generator_loss,
    critic_loss,
    image_discriminator_loss,
    reconstruction_cost,
)

log = logging.getLogger(__name__)

OPTIMIZERS = {
    "autoencoder": ("theta", "psi"),
    "image_disc": ("omega",),
    "critic": ("gamma",),
    "approximator": ("phi",),
}
HISTORY_COLUMNS = ["epoch", "step", "recon", "image_adv", "image_disc", "critic", "gp", "approx", "val_recon"]
CKPT_MAGIC = b"AAAECKPT"
CKPT_VERSION = 1
EVAL_CHUNK = 500


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    batch_size: int = 100
    epochs: int = 200
    k: int = 2
    hyperparams: Hyperparams = field(default_factory=Hyperparams)
    seed: int = 0
    early_stop_patience: int = 10
    validation_fraction: float = 0.05
    checkpoint_every: int = 0
    max_nonfinite_streak: int = 3

    def __post_init__(self):
        if isinstance(self.hyperparams, dict):
            object.__setattr__(self, "hyperparams", Hyperparams(**self.hyperparams))
        if not self.learning_rate >= 0:
            raise ConfigurationError("learning_rate must be >= 0")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ConfigurationError("Adam betas must lie in [0, 1)")
        if self.k < 1:
            raise ConfigurationError("k must be >= 1")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigurationError("batch_size must be >= 1 and epochs >= 0")
        if not 0 <= self.validation_fraction < 1:
            raise ConfigurationError("validation_fraction must be in [0, 1)")
        if self.early_stop_patience < 0 or self.max_nonfinite_streak < 1:
            raise ConfigurationError("early_stop_patience >= 0 and max_nonfinite_streak >= 1 required")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        return cls(**d)


def config_digest(config: TrainConfig, spec: ModelSpec) -> str:
    """Digest of everything that must agree for a checkpoint to be resumable.

    ``epochs`` and ``checkpoint_every`` are excluded so a run can be extended.
    """
    d = config.to_dict()
    d.pop("epochs")
    d.pop("checkpoint_every")
    blob = json.dumps({"train": d, "model": spec.to_dict()}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()


@dataclass
class TrainState:
    model: AAAE
    optimizers: dict
    generator: torch.Generator
    config: TrainConfig
    epoch: int = 0
    global_step: int = 0
    best_val: float = math.inf
    best_epoch: int = -1
    epochs_since_improvement: int = 0
    update_counts: dict = field(default_factory=lambda: {name: 0 for name in OPTIMIZERS})
    history: list = field(default_factory=list)
    events: list | None = None

    def params(self, opt_name):
        return [p for role in OPTIMIZERS[opt_name] for p in self.model.group(role).parameters()]

    def _record(self, what):
        self.update_counts[what] += 1
        if self.events is not None:
            self.events.append((self.global_step, what))


def make_optimizers(model: AAAE, config: TrainConfig) -> dict:
    betas = (config.adam_beta1, config.adam_beta2)
    return {
        name: torch.optim.Adam(
            [p for role in roles for p in model.group(role).parameters()],
            lr=config.learning_rate,
            betas=betas,
        )
        for name, roles in OPTIMIZERS.items()
    }


def init_state(config: TrainConfig, spec: ModelSpec) -> TrainState:
    model = init_params(spec, config.seed)
    gen = torch.Generator().manual_seed(config.seed + 1)
    return TrainState(model, make_optimizers(model, config), gen, config)


def _apply(state: TrainState, opt_name: str, grads) -> None:
    params = state.params(opt_name)
    for p, g in zip(params, grads):
        p.grad = torch.zeros_like(p) if g is None else g
    state.optimizers[opt_name].step()
    state.optimizers[opt_name].zero_grad(set_to_none=True)
    state._record(opt_name)


def _grads(loss, params):
    return torch.autograd.grad(loss, params, allow_unused=True, retain_graph=True)


def _buffers(model):
    return {n: b.detach().clone() for n, b in model.named_buffers()}


@torch.no_grad()
def _restore_buffers(model, saved):
    for n, b in model.named_buffers():
        b.copy_(saved[n])


def _check_finite(values: dict, batch_index):
    bad = {k: v for k, v in values.items() if not math.isfinite(v)}
    if bad:
        raise NumericalError(f"non-finite loss at batch {batch_index}: {bad}", batch_index, bad)


def train_outer_step(batch: torch.Tensor, state: TrainState, batch_index=None) -> LossReport:
    """One update of (theta, psi) followed by one update of omega.

    Returns the losses measured before the updates.  Raises NumericalError
    (and leaves parameters untouched) if any loss is non-finite.
    """
    model, hp = state.model, state.config.hyperparams
    model.encoder.train()
    model.decoder.train()
    model.image_disc.train()
    # train-mode forwards move batch-norm running stats; undo that if the step is rejected
    saved = _buffers(model)
    try:
        ae_loss, recon, adv, x_rec = autoencoder_generator_loss(batch, hp, model, return_parts=True)
        disc_loss = image_discriminator_loss(batch, x_rec.detach(), model)
        report = LossReport(reconstruction=recon.item(), image_adv=adv.item(), image_disc=disc_loss.item())
        _check_finite({"autoencoder": ae_loss.item(), **report.as_dict()}, batch_index)
    except NumericalError as exc:
        _restore_buffers(model, saved)
        raise NumericalError(f"batch {batch_index}: {exc}", batch_index, getattr(exc, "losses", None)) from exc

    g_ae = _grads(ae_loss, state.params("autoencoder"))
    g_disc = _grads(disc_loss, state.params("image_disc"))
    _apply(state, "autoencoder", g_ae)
    _apply(state, "image_disc", g_disc)
    return report


def _fresh_batch(pool, batch_size, gen):
    data = pool.data if isinstance(pool, Dataset) else pool
    n = len(data)
    idx = torch.randperm(n, generator=gen)[: min(batch_size, n)]
    return data[idx]


def train_inner_loop(state: TrainState, pool, batch_index=None) -> LossReport:
    """``k`` critic/approximator update pairs.

    Each iteration draws fresh noise and a fresh data batch from ``pool``;
    encoder codes are computed in evaluation mode without gradients.
    """
    model, cfg = state.model, state.config
    hp = cfg.hyperparams
    was_training = model.encoder.training
    model.encoder.eval()
    model.approximator.train()
    model.code_critic.train()
    reports = []
    try:
        for _ in range(cfg.k):
            z = torch.randn(cfg.batch_size, model.noise_dim, generator=state.generator)
            x = _fresh_batch(pool, cfg.batch_size, state.generator)
            with torch.no_grad():
                c_real = model.encode(x)
            c_fake = model.approximate(z)
            if c_real.shape[0] != c_fake.shape[0]:
                c_fake = c_fake[: c_real.shape[0]]
            crit, gp = critic_loss(c_real, c_fake, model, hp, return_parts=True)
            appr = approximator_loss(c_fake, model)
            rep = LossReport(critic=crit.item(), gradient_penalty=gp.item(), approximator=appr.item())
            _check_finite(rep.as_dict(), batch_index)
            g_critic = _grads(crit, state.params("critic"))
            g_approx = _grads(appr, state.params("approximator"))
            _apply(state, "critic", g_critic)
            _apply(state, "approximator", g_approx)
            reports.append(rep)
    finally:
        model.encoder.train(was_training)
    return LossReport.mean(reports)


def train_step(batch, state: TrainState, pool, batch_index=None) -> LossReport:
    outer = train_outer_step(batch, state, batch_index)
    inner = train_inner_loop(state, pool, batch_index)
    state.global_step += 1
    return replace(outer, critic=inner.critic, gradient_penalty=inner.gradient_penalty,
                   approximator=inner.approximator)


@torch.no_grad()
def reconstruct(model: AAAE, data: torch.Tensor, chunk=EVAL_CHUNK) -> torch.Tensor:
    was = model.training
    model.eval()
    try:
        return torch.cat([model.reconstruct(data[i:i + chunk]) for i in range(0, len(data), chunk)])
    finally:
        model.train(was)


def validation_loss(model: AAAE, data: torch.Tensor) -> float:
    """Reconstruction cost over ``data`` with running batch-norm statistics."""
    if len(data) == 0:
        return math.nan
    return float(reconstruction_cost(data, reconstruct(model, data)))


@dataclass
class TrainResult:
    best: TrainState
    last: TrainState
    history: list
    stopped_early: bool = False


class TrainingAborted(NumericalError):
    def __init__(self, message, checkpoint=None, batch_index=None):
        super().__init__(message, batch_index)
        self.checkpoint = checkpoint


def train(
    config: TrainConfig,
    dataset: Dataset,
    spec: ModelSpec,
    out_dir=None,
    resume: str | os.PathLike | None = None,
    record_events=False,
) -> TrainResult:
    """Run epochs with early stopping on validation reconstruction loss.

    With ``out_dir`` the per-epoch history CSV, ``last.ckpt`` and ``best.ckpt``
    are written there (plus ``epoch_NNNN.ckpt`` every ``checkpoint_every``
    epochs).  ``resume`` continues from a saved ``last.ckpt``.
    """
    if dataset is None or len(dataset) == 0:
        raise ConfigurationError("dataset is empty")
    if not isinstance(dataset, Dataset):
        dataset = Dataset(dataset)
    train_set, val_set = dataset.split(config.validation_fraction, config.seed)
    if len(train_set) == 0:
        raise ConfigurationError("no training samples left after the validation split")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    if resume is not None:
        state = load_checkpoint(resume, config, spec)
        state.config = config
        best_blob = None
        if out is not None and (out / "best.ckpt").exists():
            best_blob = (out / "best.ckpt").read_bytes()
    else:
        state = init_state(config, spec)
        best_blob = None
    if record_events:
        state.events = []

    stopped = False
    streak = 0
    while state.epoch < config.epochs:
        reports = []
        for bi, batch in enumerate(train_set.batches(config.batch_size, state.generator)):
            try:
                reports.append(train_step(batch, state, train_set, bi))
                streak = 0
            except NumericalError as exc:
                streak += 1
                log.warning("skipping step: %s", exc)
                if streak >= config.max_nonfinite_streak:
                    ckpt = None
                    if out is not None and best_blob is not None:
                        ckpt = out / "best.ckpt"
                    raise TrainingAborted(f"{streak} consecutive non-finite steps; last: {exc}",
                                          ckpt, exc.batch_index) from exc
        mean = LossReport.mean(reports)
        val = validation_loss(state.model, val_set.data) if len(val_set) else mean.reconstruction
        state.epoch += 1
        row = {
            "epoch": state.epoch,
            "step": state.global_step,
            "recon": mean.reconstruction,
            "image_adv": mean.image_adv,
            "image_disc": mean.image_disc,
            "critic": mean.critic,
            "gp": mean.gradient_penalty,
            "approx": mean.approximator,
            "val_recon": val,
        }
        state.history.append(row)
        log.info("epoch %d step %d recon %.5f val %.5f", state.epoch, state.global_step, mean.reconstruction, val)

        if val < state.best_val:
            state.best_val, state.best_epoch = val, state.epoch
            state.epochs_since_improvement = 0
            best_blob = checkpoint_bytes(state)
            if out is not None:
                _atomic_write(out / "best.ckpt", best_blob)
        else:
            state.epochs_since_improvement += 1
        if out is not None:
            write_history_csv(state.history, out / "history.csv")
            save_checkpoint(state, out / "last.ckpt")
            if config.checkpoint_every and state.epoch % config.checkpoint_every == 0:
                save_checkpoint(state, out / f"epoch_{state.epoch:04d}.ckpt")
        if config.early_stop_patience and state.epochs_since_improvement >= config.early_stop_patience:
            stopped = True
            break

    best = checkpoint_from_bytes(best_blob, config, spec) if best_blob is not None else state
    return TrainResult(best=best, last=state, history=list(state.history), stopped_early=stopped)


def write_history_csv(history, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(HISTORY_COLUMNS)
        for row in history:
            w.writerow([row[c] if isinstance(row[c], int) else repr(float(row[c])) for c in HISTORY_COLUMNS])


def read_history_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (int(v) if k in ("epoch", "step") else float(v)) for k, v in r.items()} for r in rows]


# -- checkpoint container -------------------------------------------------
#
# layout: MAGIC | u32 version | u64 header length | JSON header | payload
# The header lists every tensor (name, dtype, shape, offset, nbytes) and the
# SHA-256 of the payload.

def _named_tensors(state: TrainState) -> dict[str, torch.Tensor]:
    out = {}
    for role in ROLES:
        for k, v in state.model.group(role).state_dict().items():
            out[f"model/{role}/{k}"] = v
    for name, opt in state.optimizers.items():
        for idx, slots in opt.state_dict()["state"].items():
            for key, v in slots.items():
                out[f"optim/{name}/{idx}/{key}"] = v
    out["rng/torch"] = state.generator.get_state()
    return out


def checkpoint_bytes(state: TrainState) -> bytes:
    tensors = _named_tensors(state)
    index, chunks, offset = [], [], 0
    for name, t in tensors.items():
        arr = t.detach().cpu().contiguous().numpy()
        raw = arr.tobytes()
        index.append({"name": name, "dtype": str(arr.dtype), "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    groups = {}
    for name, opt in state.optimizers.items():
        groups[name] = [
            {k: (list(v) if isinstance(v, tuple) else v) for k, v in g.items()}
            for g in opt.state_dict()["param_groups"]
        ]
    header = {
        "format_version": CKPT_VERSION,
        "package_version": __version__,
        "config": state.config.to_dict(),
        "model_spec": state.model.spec.to_dict(),
        "config_digest": config_digest(state.config, state.model.spec),
        "epoch": state.epoch,
        "global_step": state.global_step,
        "best_val": None if math.isinf(state.best_val) else state.best_val,
        "best_epoch": state.best_epoch,
        "epochs_since_improvement": state.epochs_since_improvement,
        "update_counts": state.update_counts,
        "history": state.history,
        "optimizer_groups": groups,
        "tensors": index,
        "payload_nbytes": len(payload),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
        "run_metadata": {"adam_beta2": state.config.adam_beta2, "resize_filter": "bilinear"},
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    return CKPT_MAGIC + struct.pack("<IQ", CKPT_VERSION, len(hbytes)) + hbytes + payload


def read_checkpoint_header(blob: bytes) -> tuple[dict, bytes]:
    fixed = len(CKPT_MAGIC) + 12
    if len(blob) < fixed or blob[: len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise CheckpointError("not an AAAE checkpoint")
    version, hlen = struct.unpack("<IQ", blob[len(CKPT_MAGIC):fixed])
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if len(blob) < fixed + hlen:
        raise CheckpointError("truncated checkpoint header")
    try:
        header = json.loads(blob[fixed:fixed + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
    payload = blob[fixed + hlen:]
    if len(payload) != header["payload_nbytes"]:
        raise CheckpointError(f"truncated checkpoint payload ({len(payload)} of {header['payload_nbytes']} bytes)")
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CheckpointError("checkpoint payload checksum mismatch")
    return header, payload


def checkpoint_from_bytes(blob: bytes, config: TrainConfig | None = None, spec: ModelSpec | None = None) -> TrainState:
    header, payload = read_checkpoint_header(blob)
    saved_config = TrainConfig.from_dict(header["config"])
    saved_spec = ModelSpec.from_dict(header["model_spec"])
    if config is not None or spec is not None:
        want = config_digest(config or saved_config, spec or saved_spec)
        if want != header["config_digest"]:
            raise CheckpointError("config digest mismatch: checkpoint was written by a different configuration")

    tensors = {}
    for entry in header["tensors"]:
        raw = payload[entry["offset"]:entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
        tensors[entry["name"]] = torch.from_numpy(arr.copy())

    state = init_state(saved_config, saved_spec)
    for role in ROLES:
        prefix = f"model/{role}/"
        sd = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
        state.model.group(role).load_state_dict(sd)
    for name, opt in state.optimizers.items():
        prefix = f"optim/{name}/"
        slots = {}
        for k, v in tensors.items():
            if k.startswith(prefix):
                idx, key = k[len(prefix):].split("/", 1)
                slots.setdefault(int(idx), {})[key] = v
        groups = [
            {k: (tuple(v) if k == "betas" else v) for k, v in g.items()}
            for g in header["optimizer_groups"][name]
        ]
        opt.load_state_dict({"state": slots, "param_groups": groups})
    state.generator.set_state(tensors["rng/torch"])
    state.epoch = header["epoch"]
    state.global_step = header["global_step"]
    state.best_val = math.inf if header["best_val"] is None else header["best_val"]
    state.best_epoch = header["best_epoch"]
    state.epochs_since_improvement = header["epochs_since_improvement"]
    state.update_counts = dict(header["update_counts"])
    state.history = list(header["history"])
    return state


def _atomic_write(path: Path, blob: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def save_checkpoint(state: TrainState, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    _atomic_write(path, checkpoint_bytes(state))
    return path


def load_checkpoint(path, config: TrainConfig | None = None, spec: ModelSpec | None = None) -> TrainState:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    return checkpoint_from_bytes(blob, config, spec)


def load_model(path) -> AAAE:
    """Model only, in evaluation mode."""
    model = load_checkpoint(path).model
    model.eval()
    return model

