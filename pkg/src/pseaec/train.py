"""Multi-task training: round-robin AEC / PSE / PSE-AEC mini-batches, PLCPA
loss, Adam updates, checkpointing and exact resume."""
import enum
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .dsp import StftParams, safe_abs, safe_pow
from .embedding import embedding_for
from .models import ModelConfig, build_model, load_model, save_model
from .scene import read_manifest

log = logging.getLogger(__name__)


class TaskKind(str, enum.Enum):
    AEC = "AEC"
    PSE = "PSE"
    PSE_AEC = "PSE_AEC"


CYCLE = (TaskKind.AEC, TaskKind.PSE, TaskKind.PSE_AEC)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class LossParams:
    p: float = 0.3
    alpha: float = 0.5
    stft: StftParams = StftParams()

    def __post_init__(self):
        if not 0 < self.p <= 1:
            raise ValueError(f"p must be in (0, 1], got {self.p}")
        if not 0 <= self.alpha <= 1:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")


def _spec(x, params):
    frames = x.unfold(-1, params.win_length, params.hop_length)
    return torch.fft.rfft(frames * params.window(x.dtype), n=params.fft_size, dim=-1)


def plcpa_loss(est, ref, lp=LossParams()):
    """Power-law compressed phase-aware loss.

    ``alpha * mean((|S|^p - |S_hat|^p)^2) + (1 - alpha) * mean(|S_c - S_hat_c|^2)``
    where ``S_c = |S|^p * exp(j*phase(S))``; means run over every STFT bin and
    batch item. The gradient of ``|.|`` at zero is taken as zero.
    """
    if est.shape != ref.shape:
        raise ValueError(f"length mismatch: {tuple(est.shape)} vs {tuple(ref.shape)}")
    S, S_hat = _spec(ref, lp.stft), _spec(est, lp.stft)
    mag, mag_hat = safe_abs(S), safe_abs(S_hat)
    cmag, cmag_hat = safe_pow(mag, lp.p), safe_pow(mag_hat, lp.p)
    mag_term = torch.mean((cmag - cmag_hat) ** 2)
    # |S|^p e^{j phi} == S * |S|^(p - 1), and zero where S == 0
    Sc = S * safe_pow(mag, lp.p - 1) if lp.p < 1 else S
    Sc_hat = S_hat * safe_pow(mag_hat, lp.p - 1) if lp.p < 1 else S_hat
    diff = Sc - Sc_hat
    cplx_term = torch.mean(diff.real ** 2 + diff.imag ** 2)
    return lp.alpha * mag_term + (1 - lp.alpha) * cplx_term


def next_task(step, cycle=CYCLE):
    if step < 0:
        raise ValueError("step must be >= 0")
    return cycle[step % len(cycle)]


def task_cycle(config: ModelConfig):
    """Mini-batch kinds a model of this configuration trains on, in order."""
    if config.task == "aec":
        return (TaskKind.AEC,)
    if config.task == "pse":
        return (TaskKind.PSE,)
    if config.has_bypass:
        return CYCLE
    # no bypass: an embedding-free AEC batch has no path to train
    return (TaskKind.PSE, TaskKind.PSE_AEC)


def eligible(task, sample):
    spec = sample.spec
    if task == TaskKind.AEC:
        return spec.has_echo and not spec.has_interferer
    if task == TaskKind.PSE:
        return not spec.has_echo
    return spec.has_echo


@dataclass
class MiniBatch:
    task: TaskKind
    samples: list  # (mic, farend, target_ref) triples of equal length
    embeddings: list | None = None
    ids: list = field(default_factory=list)

    def validate(self):
        if self.task == TaskKind.AEC:
            if self.embeddings is not None:
                raise ValueError("AEC mini-batches carry no speaker embeddings")
        elif self.embeddings is None or len(self.embeddings) != len(self.samples):
            raise ValueError(f"{self.task.value} mini-batch needs one embedding per sample")
        if self.task == TaskKind.PSE and any(np.any(f != 0) for _, f, _ in self.samples):
            raise ValueError("PSE mini-batch far-end signals must be all-zero")
        if self.task != TaskKind.PSE and any(not np.any(f != 0) for _, f, _ in self.samples):
            raise ValueError(f"{self.task.value} mini-batch needs a far-end signal in every sample")
        return self

    def tensors(self, dtype=torch.float32):
        mic, far, ref = (torch.as_tensor(np.stack(x), dtype=dtype) for x in zip(*self.samples))
        emb = None
        if self.embeddings is not None:
            emb = torch.as_tensor(np.stack([e.vector for e in self.embeddings]), dtype=dtype)
        return mic, far, ref, emb


def make_minibatch(task, pool, batch_size, seed, crop=None, hop=160, embedding_seed=0):
    """Draw ``batch_size`` distinct eligible samples, optionally cropped to
    ``crop`` samples at a hop-aligned random offset."""
    task = TaskKind(task)
    cands = [s for s in pool if eligible(task, s)]
    if len(cands) < batch_size:
        raise ValueError(f"insufficient eligible samples for {task.value} mini-batch: "
                         f"{len(cands)} < {batch_size}")
    rng = np.random.default_rng(seed)
    picks = [cands[i] for i in rng.choice(len(cands), size=batch_size, replace=False)]
    length = min(len(s) for s in picks)
    if crop is not None and crop < length:
        length = crop
    out = []
    for s in picks:
        starts = np.arange((len(s) - length) // hop + 1) * hop
        if task != TaskKind.PSE:
            # a short crop can fall inside a far-end pause; only draw windows with far-end signal
            active = np.concatenate([[0], np.cumsum(s.farend != 0)])
            starts = starts[active[starts + length] > active[starts]]
            if not len(starts):
                raise ValueError(f"sample {s.id} has no {length}-sample window with far-end signal")
        start = int(starts[rng.integers(len(starts))])
        sl = slice(start, start + length)
        far = np.zeros(length) if task == TaskKind.PSE else s.farend[sl]
        out.append((s.mic[sl], far, s.target_ref[sl]))
    embs = None if task == TaskKind.AEC else [embedding_for(s.spec.speaker_id, embedding_seed) for s in picks]
    return MiniBatch(task, out, embs, [s.id for s in picks]).validate()


def route(model, task):
    task = TaskKind(task)
    if task not in task_cycle(model.config):
        raise ValueError(f"{model.config.describe()} model does not train on {task.value} batches")
    return "bypass" if task == TaskKind.AEC and model.has_bypass else "full"


def train_step(model, batch, optimizer, lp=LossParams()):
    """One forward/backward/update on a mini-batch; returns the batch loss."""
    path = route(model, batch.task)
    model.train()
    optimizer.zero_grad(set_to_none=True)
    mic, far, ref, emb = batch.tensors(model.dtype)
    est = model(mic, far, emb, path=path)
    loss = plcpa_loss(est, ref, lp)
    if not torch.isfinite(loss):
        raise TrainingError(f"non-finite loss {loss.item()} on {batch.task.value} batch {batch.ids} "
                            f"(path {path}, max |mic| {mic.abs().max().item():.3g}, "
                            f"max |est| {est.detach().abs().max().item():.3g})")
    loss.backward()
    optimizer.step()
    return loss.item(), optimizer


@dataclass
class TrainConfig:
    steps: int = 3
    batch_size: int = 4
    lr: float = 1e-3
    seed: int = 0
    checkpoint_every: int = 0
    crop: int | None = None
    embedding_seed: int = 0
    out_dir: str = "run"
    pool_manifest: str | None = None
    manifests: dict = field(default_factory=dict)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossParams = field(default_factory=LossParams)

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)
        if isinstance(self.loss, dict):
            d = dict(self.loss)
            if isinstance(d.get("stft"), dict):
                d["stft"] = StftParams(**d["stft"])
            self.loss = LossParams(**d)

    def to_dict(self):
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d


def make_optimizer(model, lr):
    return torch.optim.Adam(model.parameters(), lr=lr)


def optimizer_arrays(model, optimizer):
    names = {id(p): n for n, p in model.named_parameters()}
    out = {}
    for p, st in optimizer.state.items():
        n = names[id(p)]
        out[f"optim/{n}/step"] = np.array([float(st["step"])], dtype=np.float32)
        out[f"optim/{n}/exp_avg"] = st["exp_avg"].detach().numpy()
        out[f"optim/{n}/exp_avg_sq"] = st["exp_avg_sq"].detach().numpy()
    return out


def restore_optimizer(model, optimizer, arrays):
    for n, p in model.named_parameters():
        key = f"optim/{n}/step"
        if key not in arrays:
            continue
        optimizer.state[p] = {
            "step": torch.tensor(float(arrays[key][0]), dtype=torch.float32),
            "exp_avg": torch.from_numpy(arrays[f"optim/{n}/exp_avg"].copy()),
            "exp_avg_sq": torch.from_numpy(arrays[f"optim/{n}/exp_avg_sq"].copy()),
        }


def save_checkpoint(model, optimizer, step, path, meta=None):
    m = {"step": int(step)}
    m.update(meta or {})
    extra = optimizer_arrays(model, optimizer) if optimizer is not None else {}
    return save_model(model, path, extra=extra, meta=m)


def load_checkpoint(path, lr=1e-3):
    """Returns ``(model, optimizer, step, meta)``."""
    model, extra, meta = load_model(path)
    optimizer = make_optimizer(model, meta.get("lr", lr))
    restore_optimizer(model, optimizer, extra)
    return model, optimizer, int(meta["step"]), meta


def _task_pools(config, pool):
    if pool is not None:
        return {t: pool for t in CYCLE}
    pools = {}
    shared = read_manifest(config.pool_manifest) if config.pool_manifest else None
    for t in task_cycle(config.model):
        path = config.manifests.get(t.value)
        if path:
            pools[t] = read_manifest(path)
        elif shared is not None:
            pools[t] = shared
        else:
            raise ValueError(f"no training manifest for task {t.value}")
    return pools


def _step_seed(seed, step):
    return np.random.SeedSequence([seed, step]).generate_state(1)[0]


def train(config: TrainConfig, pool=None, resume=False, stop_at=None):
    """Run the multi-task loop; returns the final checkpoint path.

    Layout under ``out_dir``: ``checkpoints/step_XXXXXXX.ckpt`` and
    ``checkpoints/latest.ckpt``, plus ``logs/loss.jsonl`` with one
    ``{"step", "task", "loss"}`` record per step. ``stop_at`` ends the run
    early (as if interrupted) after that many steps.
    """
    out = Path(config.out_dir)
    ckpt_dir, log_path = out / "checkpoints", out / "logs" / "loss.jsonl"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    log_path.parent.mkdir(parents=True, exist_ok=True)
    pools = _task_pools(config, pool)
    cycle = task_cycle(config.model)
    latest = ckpt_dir / "latest.ckpt"

    if resume and latest.exists():
        model, optimizer, start, _ = load_checkpoint(latest, config.lr)
        if model.config != config.model:
            raise ValueError("checkpoint model config does not match the run config")
        rows = [r for r in log_path.read_text().splitlines() if r and json.loads(r)["step"] < start] \
            if log_path.exists() else []
        log_path.write_text("".join(r + "\n" for r in rows))
        log.info("resumed from %s at step %d", latest, start)
    else:
        model = build_model(config.model, seed=config.seed)
        optimizer = make_optimizer(model, config.lr)
        start = 0
        log_path.write_text("")

    meta = {"lr": config.lr, "seed": config.seed}
    end = config.steps if stop_at is None else min(config.steps, stop_at)
    with open(log_path, "a") as fh:
        for step in range(start, end):
            task = next_task(step, cycle)
            batch = make_minibatch(task, pools[task], config.batch_size, _step_seed(config.seed, step),
                                   crop=config.crop, hop=config.model.hop,
                                   embedding_seed=config.embedding_seed)
            loss, optimizer = train_step(model, batch, optimizer, config.loss)
            fh.write(json.dumps({"step": step, "task": task.value, "loss": loss}) + "\n")
            fh.flush()
            done = step + 1
            if config.checkpoint_every and done % config.checkpoint_every == 0 and done < end:
                save_checkpoint(model, optimizer, done, ckpt_dir / f"step_{done:07d}.ckpt", meta)
                save_checkpoint(model, optimizer, done, latest, meta)
    final = ckpt_dir / f"step_{end:07d}.ckpt"
    save_checkpoint(model, optimizer, end, final, meta)
    save_checkpoint(model, optimizer, end, latest, meta)
    return final


def read_loss_log(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
