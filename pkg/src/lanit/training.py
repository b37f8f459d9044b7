"""Alternating discriminator / generator optimization with stage-wise prompt learning."""
from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from lanit import checkpoint as ckpt
from lanit import losses as L
from lanit.config import RunConfig, config_from_dict
from lanit.data import batch_indices, write_image
from lanit.errors import CheckpointError, TrainingError
from lanit.labeling import PromptSet, build_prompts, label_batch, similarity_batch
from lanit.networks import TranslationModel, aggregate_styles

log = logging.getLogger(__name__)

EMA_MODULES = ("content_encoder", "generator", "style_encoder", "mapping_network")


def should_learn_prompt(iteration: int, config) -> bool:
    """True once ``iteration`` reaches the prompt-learning start (TrainConfig or RunConfig)."""
    train = getattr(config, "train", config)
    return iteration >= train.prompt_start


def to_unit_range(x: torch.Tensor) -> torch.Tensor:
    return (x + 1) / 2


@dataclass
class TrainState:
    config: RunConfig
    model: TranslationModel
    prompts: PromptSet
    ema: nn.ModuleDict | None
    opt_d: torch.optim.Adam
    opt_g: torch.optim.Adam
    opt_p: torch.optim.Adam
    rng: torch.Generator
    iteration: int = 0

    def ema_model(self) -> nn.ModuleDict:
        """Modules used for inference: the EMA shadow if kept, else the live weights."""
        if self.ema is not None:
            return self.ema
        return nn.ModuleDict({k: getattr(self.model, k) for k in EMA_MODULES})


def _adam(params, lr, cfg):
    return torch.optim.Adam(params, lr=lr, betas=(cfg.adam_beta1, cfg.adam_beta2))


def init_state(config: RunConfig, backend, prompts: PromptSet | None = None) -> TrainState:
    config.validate()
    lab = config.labeling
    if prompts is None:
        prompts = build_prompts(lab.template, lab.domains, backend, lab)
    torch.manual_seed(config.train.seed)
    model = TranslationModel(config.arch, prompts.N, seed=config.train.seed)
    ema = None
    if config.train.ema:
        ema = nn.ModuleDict({k: copy.deepcopy(getattr(model, k)) for k in EMA_MODULES})
        for p in ema.parameters():
            p.requires_grad_(False)
    t = config.train
    rng = torch.Generator().manual_seed(t.seed)
    return TrainState(
        config=config,
        model=model,
        prompts=prompts,
        ema=ema,
        opt_d=_adam(model.discriminator.parameters(), t.lr_main, t),
        opt_g=_adam(list(model.generator_parameters()), t.lr_main, t),
        opt_p=_adam(prompts.parameters(), t.lr_prompt, t),
        rng=rng,
    )


def _set_lr(state: TrainState):
    t = state.config.train
    if t.lr_step_size <= 0:
        return
    factor = t.lr_gamma ** (state.iteration // t.lr_step_size)
    for opt, base in ((state.opt_d, t.lr_main), (state.opt_g, t.lr_main), (state.opt_p, t.lr_prompt)):
        for g in opt.param_groups:
            g["lr"] = base * factor


def _grad_norm(params) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(p.grad.detach().double().pow(2).sum())
    return math.sqrt(total)


def compute_labels(state: TrainState, backend, images: torch.Tensor):
    """Pseudo labels (B, N) of model-range images under the current prompts (no gradient)."""
    lab = state.config.labeling
    with torch.no_grad():
        f, base = similarity_batch(to_unit_range(images), state.prompts, backend, lab.augment)
    return label_batch(f, base, lab).to(images.dtype)


def discriminator_step(state: TrainState, x, y, d_y):
    m, w = state.model, state.config.loss
    y = y.detach().requires_grad_(True)
    real = m.discriminate(y)
    with torch.no_grad():
        c_x = m.encode_content(x)
        fake_ref = m.generate(c_x, aggregate_styles(m.encode_style(y), d_y))
        z = torch.randn(x.shape[0], state.config.arch.latent_dim, generator=state.rng, dtype=x.dtype)
        fake_lat = m.generate(c_x, aggregate_styles(m.map_latent(z), d_y))
    # Real term counted once; reference and latent fakes share the fake term.
    adv = 0.5 * (
        L.adversarial_loss(real, m.discriminate(fake_ref), d_y, "discriminator")
        + L.adversarial_loss(real, m.discriminate(fake_lat), d_y, "discriminator")
    )
    r1 = L.r1_penalty(real, y, d_y)
    loss = w.adv * adv + w.r1 * r1
    state.opt_d.zero_grad(set_to_none=True)
    loss.backward()
    gnorm = _grad_norm(m.discriminator.parameters())
    state.opt_d.step()
    return float(adv.detach()), float(r1.detach()), gnorm


def generator_step(state: TrainState, backend, x, y, d_x, d_y):
    cfg = state.config
    m, w, lab = state.model, cfg.loss, cfg.labeling
    B, N = d_y.shape
    for p in m.discriminator.parameters():
        p.requires_grad_(False)
    try:
        c_x = m.encode_content(x)
        bank_y = m.encode_style(y)
        a_y = aggregate_styles(bank_y, d_y)
        y_hat = m.generate(c_x, a_y)
        bank_hat = m.encode_style(y_hat)

        adv_ref = L.adversarial_loss(None, m.discriminate(y_hat), d_y, "generator")
        sty_ref = L.style_recon_loss(a_y, aggregate_styles(bank_hat, d_y))

        a_x = aggregate_styles(m.encode_style(x), d_x)
        c_hat = m.encode_content(y_hat)
        cyc = L.cycle_loss(x, m.generate(c_hat, a_x))

        z1 = torch.randn(B, cfg.arch.latent_dim, generator=state.rng, dtype=x.dtype)
        z2 = torch.randn(B, cfg.arch.latent_dim, generator=state.rng, dtype=x.dtype)
        a1 = aggregate_styles(m.map_latent(z1), d_y)
        a2 = aggregate_styles(m.map_latent(z2), d_y)
        y1 = m.generate(c_x, a1)
        y2 = m.generate(c_x, a2)
        adv_lat = L.adversarial_loss(None, m.discriminate(y1), d_y, "generator")
        sty_lat = L.style_recon_loss(a1, aggregate_styles(m.encode_style(y1), d_y))
        ds = L.diversification_loss(y1, y2)

        n = torch.randint(0, N, (B,), generator=state.rng)
        d_inv = L.invert_label(d_y, n)
        if w.dl_to_generator:
            img_hat, bank_src, c_src = y_hat, bank_hat, c_hat
        else:
            img_hat, bank_src, c_src = y_hat.detach(), bank_hat.detach(), c_hat.detach()
        y_inv = m.generate(c_src, aggregate_styles(bank_src, d_inv, allow_empty=True))
        if not w.dl_to_generator:
            y_inv = y_inv.detach()
        pair = torch.cat([img_hat, y_inv])
        f_pair, base_pair = similarity_batch(to_unit_range(pair), state.prompts, backend, lab.augment)
        if base_pair is None:
            raise TrainingError("domain regularization needs a non-empty template (base prompt)")
        dl = L.domain_regularization_loss(
            d_y, n, f_pair[:B], base_pair[:B], f_pair[B:], base_pair[B:], w.tau
        ).to(x.dtype)

        adv = 0.5 * (adv_ref + adv_lat)
        sty = 0.5 * (sty_ref + sty_lat)
        lam_ds = w.ds
        if w.ds_decay_iters > 0:
            lam_ds = w.ds * max(0.0, 1.0 - state.iteration / w.ds_decay_iters)
        total = w.adv * adv + w.dl * dl + w.cyc * cyc + w.sty * sty - lam_ds * ds

        learn_prompt = should_learn_prompt(state.iteration, cfg) and w.dl_to_prompt
        state.opt_g.zero_grad(set_to_none=True)
        state.opt_p.zero_grad(set_to_none=True)
        total.backward()
        gnorm = _grad_norm(m.generator_parameters())
        pnorm = _grad_norm(state.prompts.parameters())
        state.opt_g.step()
        if learn_prompt:
            state.opt_p.step()
        state.opt_p.zero_grad(set_to_none=True)
    finally:
        for p in m.discriminator.parameters():
            p.requires_grad_(True)
    terms = {k: float(v.detach()) for k, v in dict(adv=adv, dl=dl, cyc=cyc, sty=sty, ds=ds, total=total).items()}
    return terms, gnorm, pnorm


def update_ema(state: TrainState):
    if state.ema is None:
        return
    beta = state.config.train.ema_decay
    with torch.no_grad():
        for name in EMA_MODULES:
            live = getattr(state.model, name)
            for pe, p in zip(state.ema[name].parameters(), live.parameters()):
                pe.lerp_(p, 1 - beta)


def train_step(state: TrainState, backend, x, y) -> tuple[TrainState, L.LossReport]:
    """One full optimization step on a content batch ``x`` and style batch ``y`` (model range)."""
    _set_lr(state)
    d_y = compute_labels(state, backend, y)
    d_x = compute_labels(state, backend, x)
    adv_d, r1, dnorm = discriminator_step(state, x, y, d_y)
    terms, gnorm, pnorm = generator_step(state, backend, x, y, d_x, d_y)
    update_ema(state)
    state.iteration += 1
    report = L.LossReport(
        iter=state.iteration,
        adv_d=adv_d,
        adv_g=terms["adv"],
        dl=terms["dl"],
        cyc=terms["cyc"],
        sty=terms["sty"],
        ds=terms["ds"],
        r1=r1,
        total=terms["total"],
        grad_norms={"discriminator": dnorm, "generator": gnorm, "prompt": pnorm},
    )
    values = [report.adv_d, report.adv_g, report.dl, report.cyc, report.sty, report.ds, report.r1, report.total]
    if not all(math.isfinite(v) for v in values):
        raise TrainingError(f"non-finite loss at iteration {state.iteration}: {report.log_record()}", report)
    return state, report


def get_batches(manifest, state: TrainState):
    t = state.config.train
    n = len(manifest)
    xi = batch_indices(n, t.batch_size, t.seed, state.iteration, stream=0)
    yi = batch_indices(n, t.batch_size, t.seed, state.iteration, stream=1)
    x = torch.from_numpy(manifest.batch(xi))
    y = torch.from_numpy(manifest.batch(yi))
    return x, y


# -- checkpoints ----------------------------------------------------------------


def _optimizer_arrays(prefix, opt):
    sd = opt.state_dict()
    arrays = {}
    for idx, st in sd["state"].items():
        for key, val in st.items():
            arrays[f"{prefix}/{idx}/{key}"] = val
    groups = [{k: v for k, v in g.items()} for g in sd["param_groups"]]
    for g in groups:
        g["betas"] = list(g["betas"])
    return arrays, groups


def _load_optimizer(opt, prefix, arrays, groups):
    state = {}
    for name, arr in arrays.items():
        if not name.startswith(prefix + "/"):
            continue
        _, idx, key = name.split("/")
        state.setdefault(int(idx), {})[key] = torch.from_numpy(arr.copy())
    for g in groups:
        g["betas"] = tuple(g["betas"])
    opt.load_state_dict({"state": state, "param_groups": groups})


def save_checkpoint(state: TrainState, path):
    arrays = {}
    for k, v in state.model.state_dict().items():
        arrays[f"model/{k}"] = v
    for k, v in state.prompts.state_dict().items():
        arrays[f"prompts/{k}"] = v
    if state.ema is not None:
        for k, v in state.ema.state_dict().items():
            arrays[f"ema/{k}"] = v
    groups = {}
    for name in ("opt_d", "opt_g", "opt_p"):
        arr, grp = _optimizer_arrays(name, getattr(state, name))
        arrays.update(arr)
        groups[name] = grp
    arrays["rng/torch"] = state.rng.get_state()
    meta = {
        "config": state.config.to_dict(),
        "domains": state.prompts.domain_names,
        "template_texts": state.prompts.template_texts,
        "template_lengths": [t.shape[0] for t in state.prompts.templates],
        "iteration": state.iteration,
        "optimizers": groups,
    }
    ckpt.write_archive(path, meta, arrays)


def checkpoint_config(path) -> RunConfig:
    """The run configuration stored in a checkpoint (to rebuild its backend)."""
    meta, _ = ckpt.read_archive(path)
    return config_from_dict(meta["config"])


def load_checkpoint(path, backend, config: RunConfig | None = None) -> TrainState:
    """Rebuild a :class:`TrainState`; ``config`` (if given) must match the saved architecture."""
    meta, arrays = ckpt.read_archive(path)
    saved = config_from_dict(meta["config"])
    if config is not None:
        if config.arch != saved.arch or list(config.labeling.domains) != list(meta["domains"]):
            raise CheckpointError(
                f"{path}: architecture/domain mismatch (checkpoint arch {saved.arch}, domains {meta['domains']})"
            )
    state = init_state(saved, backend)
    try:
        state.model.load_state_dict({k[6:]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith("model/")})
        pstate = {k[8:]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith("prompts/")}
        for i, t in enumerate(state.prompts.templates):
            key = f"templates.{i}"
            if key in pstate and tuple(pstate[key].shape) != tuple(t.shape):
                state.prompts.templates[i] = nn.Parameter(pstate[key].clone())
        state.prompts.load_state_dict(pstate)
        if state.ema is not None:
            state.ema.load_state_dict({k[4:]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith("ema/")})
    except (RuntimeError, KeyError) as e:
        raise CheckpointError(f"{path}: parameters do not match the saved architecture: {e}") from None
    t = saved.train
    state.opt_p = _adam(state.prompts.parameters(), t.lr_prompt, t)
    for name in ("opt_d", "opt_g", "opt_p"):
        _load_optimizer(getattr(state, name), name, arrays, meta["optimizers"][name])
    state.rng.set_state(torch.from_numpy(arrays["rng/torch"].copy()))
    state.iteration = int(meta["iteration"])
    return state


# -- inference helpers ----------------------------------------------------------


def translate_reference(modules, x, y, d_y):
    with torch.no_grad():
        a = aggregate_styles(modules["style_encoder"](y), d_y)
        return modules["generator"](modules["content_encoder"](x), a)


def translate_latent(modules, x, z, d):
    with torch.no_grad():
        a = aggregate_styles(modules["mapping_network"](z), d)
        return modules["generator"](modules["content_encoder"](x), a)


def to_hwc01(img: torch.Tensor) -> np.ndarray:
    return to_unit_range(img).clamp(0, 1).permute(1, 2, 0).cpu().numpy()


def sample_grid(state: TrainState, backend, x, y) -> np.ndarray:
    """Top row: style images; left column: content images; cell (i, j) = x_i in the style of y_j."""
    d_y = compute_labels(state, backend, y)
    mods = state.ema_model()
    B, _, H, W = x.shape
    grid = np.ones(((B + 1) * H, (y.shape[0] + 1) * W, 3), dtype=np.float32)
    for j in range(y.shape[0]):
        grid[:H, (j + 1) * W : (j + 2) * W] = to_hwc01(y[j])
    for i in range(B):
        grid[(i + 1) * H : (i + 2) * H, :W] = to_hwc01(x[i])
        xi = x[i : i + 1].expand(y.shape[0], -1, -1, -1)
        out = translate_reference(mods, xi, y, d_y)
        for j in range(y.shape[0]):
            grid[(i + 1) * H : (i + 2) * H, (j + 1) * W : (j + 2) * W] = to_hwc01(out[j])
    return grid


def run_training(state: TrainState, backend, manifest, out_dir, iterations: int | None = None, on_report=None):
    """Train until ``iterations`` total steps, writing logs, samples and checkpoints to ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t = state.config.train
    total = t.iterations if iterations is None else iterations
    log_path = out / "losses.jsonl"
    mode = "a" if state.iteration > 0 and log_path.exists() else "w"
    with open(log_path, mode) as fh:
        while state.iteration < total:
            x, y = get_batches(manifest, state)
            state, report = train_step(state, backend, x, y)
            if on_report is not None:
                on_report(report)
            if report.iter % t.log_interval == 0:
                fh.write(json.dumps(report.log_record()) + "\n")
                fh.flush()
            if t.sample_interval and report.iter % t.sample_interval == 0:
                k = min(4, x.shape[0])
                write_image(out / f"sample_{report.iter:06d}.png", sample_grid(state, backend, x[:k], y[:k]))
            if t.checkpoint_interval and report.iter % t.checkpoint_interval == 0:
                save_checkpoint(state, out / f"ckpt_{report.iter:06d}.lanit")
    save_checkpoint(state, out / "latest.lanit")
    return state
