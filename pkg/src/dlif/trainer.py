"""Alternating optimization of the liveness (U, C) and identity (V, D) branches.

Each iteration samples one batch and builds one forward graph.  Phase A
backpropagates the liveness objective into U and C with every V/D quantity
detached; phase B does the converse for the identity objective.  Parameters
and Adam moments are kept float32-representable so that checkpoints written
as DLIF1 (float32 payload) restore training state exactly.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from dlif import losses as L
from dlif.config import TrainConfig, parse_kv_text
from dlif.metrics import eer_threshold, hter, roc_auc
from dlif.networks import (Encoder, EncoderConfig, Head, HeadConfig, encode, head_forward,
                           load_parameters, read_weight_manifest, save_parameters, write_weight_manifest)
from dlif.stylecross import make_level_pairings
from dlif.synthdata import AugmentConfig, Batch, SyntheticDataset, load_dataset, resize_images, sample_batch
from dlif.tensor import Parameters, Tensor, backward
from dlif.tensor import dlif_io, ops

log = logging.getLogger(__name__)

LOSS_COLUMNS = ["step", "L_cls", "L_aaicU", "L_idamb", "L_orthoU", "L_FAS",
                "L_id", "L_aaicV", "L_liamb", "L_orthoV", "L_FR"]
HISTORY_COLUMNS = ["epoch", "split", "HTER", "AUC", "threshold"]


def snap_f32(a: np.ndarray) -> np.ndarray:
    return a.astype(np.float32).astype(np.float64)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def for_params(cls, params: Parameters) -> "AdamState":
        return cls({k: np.zeros(t.shape) for k, t in params.items()},
                   {k: np.zeros(t.shape) for k, t in params.items()})

    def snap(self) -> None:
        self.m = {k: snap_f32(a) for k, a in self.m.items()}
        self.v = {k: snap_f32(a) for k, a in self.v.items()}


def adam_step(params: Parameters, grads: dict[str, np.ndarray | None], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0) -> None:
    """Bias-corrected Adam with decoupled weight decay applied first.

    Parameter arrays are replaced, never written in place, so graphs and
    detached views built before the update keep their values.
    """
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros(p.shape)
        if g.shape != p.shape or state.m[name].shape != p.shape:
            raise ValueError(f"{name}: gradient {g.shape} / moment {state.m[name].shape} vs parameter {p.shape}")
        m = beta1 * state.m[name] + (1.0 - beta1) * g
        v = beta2 * state.v[name] + (1.0 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        decayed = p.data - lr * weight_decay * p.data
        p.data = decayed - lr * (m / c1) / (np.sqrt(v / c2) + eps)


def lr_at(config: TrainConfig, epoch: int) -> float:
    return config.lr * 0.5 ** (epoch // config.lr_halving_period)


# ---------------------------------------------------------------------------
# models


@dataclass
class Models:
    U: Encoder
    C: Head
    V: Encoder | None = None
    D: Head | None = None

    def groups(self) -> dict[str, Parameters]:
        out = {"U": self.U.params, "C": self.C.params}
        if self.V is not None:
            out["V"] = self.V.params
            out["D"] = self.D.params
        return out


def encoder_config(config: TrainConfig, cwsa: bool) -> EncoderConfig:
    ch = tuple(int(c) for c in config.stage_channels)
    return EncoderConfig(config.input_size, ch, ch[2], cwsa, config.cwsa_reduction)


def build_models(config: TrainConfig, n_id: int, seed: int | None = None) -> Models:
    rng = np.random.default_rng([config.seed if seed is None else seed, 0x1A17])
    dim = int(config.stage_channels[2])
    models = Models(Encoder(encoder_config(config, config.cwsa), rng),
                    Head(HeadConfig("classifier", 2, dim), rng))
    if config.use_v:
        models.V = Encoder(encoder_config(config, config.cwsa_v), rng)
        models.D = Head(HeadConfig("discriminator", n_id, dim), rng)
    for params in models.groups().values():
        for t in params.values():
            t.data = snap_f32(t.data)
    return models


def init_optimizers(models: Models) -> dict[str, AdamState]:
    return {k: AdamState.for_params(p) for k, p in models.groups().items()}


# ---------------------------------------------------------------------------
# one iteration


@dataclass
class Forward:
    batch: Batch
    id_labels: np.ndarray
    f_u: Tensor
    aug_u: list
    f_v: Tensor | None = None
    aug_v: list = field(default_factory=list)


def forward_pass(batch: Batch, models: Models, config: TrainConfig, rng: np.random.Generator,
                 id_labels: np.ndarray) -> Forward:
    x = Tensor(batch.images)
    plan_u = config.plan_u
    pair_u = make_level_pairings(plan_u, batch.liveness, rng) if plan_u.enabled else None
    enc_u = encode(models.U, x, plan_u if plan_u.enabled else None, pair_u)
    fwd = Forward(batch, id_labels, enc_u.features, enc_u.augmented)
    if models.V is not None:
        plan_v = config.plan_v
        pair_v = make_level_pairings(plan_v, batch.identity, rng) if plan_v.enabled else None
        enc_v = encode(models.V, x, plan_v if plan_v.enabled else None, pair_v)
        fwd.f_v, fwd.aug_v = enc_v.features, enc_v.augmented
    return fwd


def _contrast_u(fwd: Forward, config: TrainConfig) -> Tensor | None:
    if config.contrast == "none":
        return None
    views = [fwd.f_u] + list(fwd.aug_u)
    pool = ops.concat(views, axis=0) if len(views) > 1 else fwd.f_u
    n = len(views)
    b = fwd.batch
    if config.contrast == "aaic":
        return L.aaic_loss(pool, L.fas_contrast_labels(b.liveness, n), config.tau, config.aaic_form)
    if config.contrast == "binary":
        return L.binary_contrast_loss(pool, b.liveness, config.tau, config.aaic_form, n)
    labels = np.tile(L.asym_triplet_labels(b.liveness, b.domain), n)
    return L.triplet_loss(pool, labels, config.triplet_margin)


def _check_finite(parts: dict) -> None:
    for name, term in parts.items():
        if term is not None and not math.isfinite(term.item()):
            raise L.NonFiniteLossError(name, term.item())


def _normalized(f: Tensor) -> Tensor:
    return ops.l2_normalize(f, axis=1)


def _apply(params: Parameters, state: AdamState, config: TrainConfig, lr: float) -> None:
    adam_step(params, {k: t.grad for k, t in params.items()}, state, lr,
              config.beta1, config.beta2, config.adam_eps, config.weight_decay)
    for t in params.values():
        t.data = snap_f32(t.data)
        t.grad = None
    state.snap()


def phase_a(fwd: Forward, models: Models, opt: dict[str, AdamState], config: TrainConfig, lr: float) -> dict:
    """Liveness objective; updates U and C only."""
    w = config.loss_weights()
    _, cos_c = head_forward(models.C, fwd.f_u)
    parts = {"L_cls": L.asym_am_softmax(cos_c, fwd.batch.liveness, w.am_scale, w.m_live, w.m_spoof),
             "L_aaicU": _contrast_u(fwd, config), "L_idamb": None, "L_orthoU": None}
    if models.V is not None:
        probs_d, _ = head_forward(models.D, fwd.f_u, config.id_scale, detach_weights=True)
        parts["L_idamb"] = L.ambiguity_loss(probs_d)
        parts["L_orthoU"] = L.orthogonality_loss(_normalized(fwd.f_u), _normalized(fwd.f_v.detach()))
    _check_finite(parts)
    total = L.compose_fas_loss(parts, w)
    for p in (models.U.params, models.C.params):
        p.zero_grad()
    backward(total)
    _apply(models.U.params, opt["U"], config, lr)
    _apply(models.C.params, opt["C"], config, lr)
    rec = {k: (v.item() if v is not None else float("nan")) for k, v in parts.items()}
    rec["L_FAS"] = total.item()
    return rec


def phase_b(fwd: Forward, models: Models, opt: dict[str, AdamState], config: TrainConfig, lr: float) -> dict:
    """Identity objective; updates V and D only."""
    w = config.loss_weights()
    _, cos_d = head_forward(models.D, fwd.f_v)
    views = [fwd.f_v] + list(fwd.aug_v)
    pool = ops.concat(views, axis=0) if len(views) > 1 else fwd.f_v
    probs_c, _ = head_forward(models.C, fwd.f_v, config.liamb_scale, detach_weights=True)
    parts = {
        "L_id": L.cross_entropy(ops.scale(cos_d, config.id_scale), fwd.id_labels),
        "L_aaicV": L.aaic_loss(pool, L.fr_contrast_labels(fwd.batch.identity, len(views)), config.tau,
                               config.aaic_form),
        "L_liamb": L.ambiguity_loss(probs_c),
        "L_orthoV": L.orthogonality_loss(_normalized(fwd.f_u.detach()), _normalized(fwd.f_v)),
    }
    _check_finite(parts)
    total = L.compose_fr_loss(parts, w)
    for p in (models.V.params, models.D.params):
        p.zero_grad()
    backward(total)
    _apply(models.V.params, opt["V"], config, lr)
    _apply(models.D.params, opt["D"], config, lr)
    rec = {k: v.item() for k, v in parts.items()}
    rec["L_FR"] = total.item()
    return rec


def train_step(batch: Batch, models: Models, opt: dict[str, AdamState], config: TrainConfig,
               rng: np.random.Generator, lr: float, id_labels: np.ndarray) -> dict:
    fwd = forward_pass(batch, models, config, rng, id_labels)
    rec = phase_a(fwd, models, opt, config, lr)
    if models.V is not None:
        rec.update(phase_b(fwd, models, opt, config, lr))
    else:
        rec.update({k: float("nan") for k in ("L_id", "L_aaicV", "L_liamb", "L_orthoV", "L_FR")})
    return rec


# ---------------------------------------------------------------------------
# evaluation


def extract_features(encoder: Encoder, images: np.ndarray, chunk: int = 256) -> np.ndarray:
    out = [encode(encoder, Tensor(images[i:i + chunk])).features.data for i in range(0, len(images), chunk)]
    return np.concatenate(out) if out else np.zeros((0, encoder.config.feature_dim))


def head_probs(head: Head, features: np.ndarray, scale: float) -> np.ndarray:
    probs, _ = head_forward(head, Tensor(features), scale)
    return probs.data


def liveness_scores(models: Models, images: np.ndarray, config: TrainConfig) -> np.ndarray:
    """Live-class probability of C on U features."""
    images = resize_images(images, config.input_size)
    return head_probs(models.C, extract_features(models.U, images), config.am_scale)[:, 0]


def evaluate_split(models: Models, data: SyntheticDataset, config: TrainConfig, threshold: float) -> dict:
    scores = liveness_scores(models, data.images, config)
    return {"AUC": roc_auc(scores, data.liveness), "HTER": hter(scores, data.liveness, threshold),
            "threshold": threshold}


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(directory, models: Models, opt: dict[str, AdamState], state: dict,
                    config: TrainConfig) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rows = []
    for group, params in models.groups().items():
        rows += save_parameters(params, directory, prefix=f"{group}.")
        st = opt.get(group)
        if st is not None:
            for kind, buf in (("m", st.m), ("v", st.v)):
                for name, arr in buf.items():
                    fname = f"opt.{group}.{kind}.{name}.dlif"
                    dlif_io.save(directory / fname, arr)
                    rows.append((f"opt.{group}.{kind}.{name}", fname, arr.shape))
    write_weight_manifest(rows, directory / "manifest.csv")
    lines = []
    for key, value in state.items():
        text = json.dumps(value) if isinstance(value, (dict, list)) else repr(value)
        lines.append(f"{key} = {text}")
    for group, st in opt.items():
        lines.append(f"opt.{group}.step = {st.step}")
    (directory / "state.txt").write_text("\n".join(lines) + "\n")
    (directory / "config.txt").write_text(config.to_text())


def read_state(directory) -> dict:
    raw = parse_kv_text((Path(directory) / "state.txt").read_text())
    out = {}
    for key, text in raw.items():
        if text.startswith("{") or text.startswith("["):
            out[key] = json.loads(text)
        else:
            try:
                out[key] = int(text)
            except ValueError:
                out[key] = float(text) if text not in ("None",) else None
    return out


def load_checkpoint(directory, config: TrainConfig | None = None):
    """Return ``(models, opt_states, state, config)`` restored from ``directory``."""
    directory = Path(directory)
    if config is None:
        config = TrainConfig.from_mapping(parse_kv_text((directory / "config.txt").read_text()))
    state = read_state(directory)
    models = build_models(config, int(state["n_id"]))
    manifest = read_weight_manifest(directory / "manifest.csv")
    opt = init_optimizers(models)
    for group, params in models.groups().items():
        load_parameters(params, directory, manifest, prefix=f"{group}.")
        st = opt[group]
        st.step = int(state.get(f"opt.{group}.step", 0))
        for kind, buf in (("m", st.m), ("v", st.v)):
            for name in buf:
                fname, _ = manifest[f"opt.{group}.{kind}.{name}"]
                buf[name] = dlif_io.load(directory / fname)
    return models, opt, state, config


# ---------------------------------------------------------------------------
# data splits


@dataclass
class Splits:
    train: SyntheticDataset
    val: SyntheticDataset | None
    calib: SyntheticDataset
    train_ids: np.ndarray


def make_splits(source: SyntheticDataset, config: TrainConfig) -> Splits:
    rng = np.random.default_rng([config.seed, 0x5EED])
    ident, dom = source.identity, source.domain
    val_ids = []
    for tag in np.unique(dom):
        ids = np.unique(ident[dom == tag])
        n_val = max(1, int(round(config.val_fraction * ids.size))) if config.val_fraction > 0 else 0
        n_val = min(n_val, ids.size - 1)
        if n_val > 0:
            val_ids.extend(rng.choice(ids, size=n_val, replace=False).tolist())
    val_mask = np.isin(ident, val_ids)
    train_idx = np.flatnonzero(~val_mask)
    train = source.subset(train_idx)
    val = source.subset(np.flatnonzero(val_mask)) if val_ids else None
    n_calib = min(config.calib_size, len(train))
    calib = train.subset(np.sort(rng.choice(len(train), size=n_calib, replace=False)))
    return Splits(train, val, calib, np.unique(train.identity))


def _target_available(target_dir) -> bool:
    return bool(target_dir) and (Path(target_dir) / "manifest.csv").exists()


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    out_dir: Path | None
    history: list[dict]
    best_epoch: int
    best_auc: float
    best_hter: float
    models: Models
    summary: dict


def _write_table(path: Path, columns: list[str], rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in columns])


def read_table(path) -> list[dict]:
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            rows.append({k: (v if k == "split" else (int(v) if k in ("epoch", "step") else float(v)))
                         for k, v in rec.items()})
    return rows


def run_training(config: TrainConfig, source_dir=None, target_dir=None, out_dir=None,
                 resume: bool = False, epoch_callback=None) -> TrainResult:
    source_dir = source_dir or config.source_dir
    target_dir = target_dir if target_dir is not None else config.target_dir
    if not source_dir:
        raise FileNotFoundError("no source data directory configured")
    source = load_dataset(source_dir)
    splits = make_splits(source, config)
    need_target = config.selection == "target_eval"
    has_target = _target_available(target_dir)
    if need_target and not has_target:
        raise FileNotFoundError(f"selection=target_eval needs a target manifest in {target_dir!r}")
    target = load_dataset(target_dir) if has_target else None
    if config.selection == "source_val":
        if splits.val is None:
            raise ValueError("selection=source_val needs val_fraction > 0")
        selection_name, selection = "source_val", splits.val
    else:
        selection_name, selection = "target", target

    id_map = {int(i): k for k, i in enumerate(splits.train_ids)}
    n_id = len(id_map)
    batch_size = len(np.unique(splits.train.domain)) * config.batch_ids_per_domain * (
        config.batch_live_per_id + config.batch_spoof_per_id)
    steps = config.steps_per_epoch or max(1, math.ceil(len(splits.train) / batch_size))
    augment = AugmentConfig(config.augment, (config.aug_scale_min, config.aug_scale_max), config.aug_rotation)

    out = Path(out_dir) if out_dir else None
    models = build_models(config, n_id)
    opt = init_optimizers(models)
    data_rng = np.random.default_rng([config.seed, 0xBA7C])
    history: list[dict] = []
    loss_rows: list[dict] = []
    start_epoch, global_step = 0, 0
    best = {"auc": -1.0, "hter": float("inf"), "epoch": -1}
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(config.to_text())
        if resume and (out / "last" / "state.txt").exists():
            models, opt, state, _ = load_checkpoint(out / "last", config)
            data_rng.bit_generator.state = state["rng_state"]
            start_epoch = int(state["epoch"]) + 1
            global_step = int(state["global_step"])
            best = {"auc": float(state["best_auc"]), "hter": float(state["best_hter"]),
                    "epoch": int(state["best_epoch"])}
            history = read_table(out / "history.csv")
            loss_rows = read_table(out / "losses.csv")

    for epoch in range(start_epoch, config.epochs):
        lr = lr_at(config, epoch)
        for _ in range(steps):
            batch = sample_batch(splits.train, data_rng, config.batch_ids_per_domain, config.batch_live_per_id,
                                 config.batch_spoof_per_id, augment, config.input_size)
            ids = np.array([id_map[int(i)] for i in batch.identity])
            rec = train_step(batch, models, opt, config, data_rng, lr, ids)
            global_step += 1
            loss_rows.append({"step": global_step, **{k: rec[k] for k in LOSS_COLUMNS[1:]}})

        calib_scores = liveness_scores(models, splits.calib.images, config)
        threshold, _ = eer_threshold(calib_scores, splits.calib.liveness)
        sel = evaluate_split(models, selection, config, threshold)
        history.append({"epoch": epoch, "split": selection_name, **{k: sel[k] for k in ("HTER", "AUC", "threshold")}})
        if target is not None and selection_name != "target":
            tm = evaluate_split(models, target, config, threshold)
            history.append({"epoch": epoch, "split": "target", **{k: tm[k] for k in ("HTER", "AUC", "threshold")}})
        improved = sel["AUC"] > best["auc"] or (sel["AUC"] == best["auc"] and sel["HTER"] < best["hter"])
        if improved:
            best = {"auc": sel["AUC"], "hter": sel["HTER"], "epoch": epoch}
        state = {"epoch": epoch, "global_step": global_step, "lr": lr, "best_auc": best["auc"],
                 "best_hter": best["hter"], "best_epoch": best["epoch"], "threshold": threshold,
                 "n_id": n_id, "rng_state": data_rng.bit_generator.state}
        if out is not None:
            if improved:
                save_checkpoint(out / "best", models, opt, state, config)
            save_checkpoint(out / "last", models, opt, state, config)
            _write_table(out / "history.csv", HISTORY_COLUMNS, history)
            _write_table(out / "losses.csv", LOSS_COLUMNS, loss_rows)
        if epoch_callback is not None:
            epoch_callback(epoch, sel, models)
        log.info("epoch %d lr %.2e %s AUC %.4f HTER %.4f", epoch, lr, selection_name, sel["AUC"], sel["HTER"])

    summary = {"best_epoch": best["epoch"], "best_auc": best["auc"], "best_hter": best["hter"],
               "n_id": n_id, "steps_per_epoch": steps}
    if target is not None and history:
        final_target = [h for h in history if h["split"] == "target"][-1]
        summary["final_target_auc"] = final_target["AUC"]
        summary["final_target_hter"] = final_target["HTER"]
        if out is not None and (out / "best").exists():
            best_models, _, bstate, _ = load_checkpoint(out / "best", config)
            bm = evaluate_split(best_models, target, config, float(bstate["threshold"]))
            summary["best_target_auc"] = bm["AUC"]
            summary["best_target_hter"] = bm["HTER"]
    if out is not None:
        (out / "summary.txt").write_text("".join(f"{k} = {v!r}\n" for k, v in summary.items()))
    return TrainResult(out, history, best["epoch"], best["auc"], best["hter"], models, summary)


def disentanglement_report(models: Models, data: SyntheticDataset, config: TrainConfig):
    """Probe U/V features of ``data``; C's live probability on f_v uses the scoring scale."""
    from dlif.metrics import probe_disentanglement
    if models.V is None:
        raise ValueError("disentanglement probes need the identity branch (use_v = true)")
    images = resize_images(data.images, config.input_size)
    fu = extract_features(models.U, images)
    fv = extract_features(models.V, images)
    live_prob_v = head_probs(models.C, fv, config.am_scale)[:, 0]
    return probe_disentanglement(fu, fv, data.identity, data.liveness, live_prob_v)
