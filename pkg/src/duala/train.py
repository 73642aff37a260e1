"""Training orchestration: source pretraining, reference fitting, finetuning.

Pretraining fits per-subject voxel adapters and the shared backbone jointly
with the contrastive retrieval objective, interleaving subjects round-robin.
compute_reference then freezes class-level knowledge into the checkpoint:
cross-subject category statistics in the shared latent space and a reference
class-similarity matrix in retrieval space. Finetuning adapts to a new
subject from a small session: a fresh adapter plus low-rank backbone deltas
train against the combined objective (contrastive + triplet alignment +
relational consistency) with the distribution-scaling augmentation on the
training path; the base backbone stays frozen.

Checkpoints are named-tensor tables with a config snapshot, saved in a
little-endian binary format with magic "DUALACK1".
"""

import os
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from duala import config as config_mod
from duala import kernels
from duala.backbone import (
    BackboneDims,
    backbone_backward,
    backbone_forward,
    init_backbone,
    init_lora,
)
from duala.errors import (
    BadMagicError,
    DuplicateTensorError,
    EmptyOverlapError,
    FormatError,
    FormatVersionError,
    NonFiniteError,
    TruncatedFileError,
    ValidationError,
)
from duala.losses import (
    LossOutput,
    ReferenceMatrix,
    bidirectional_contrastive_loss,
    class_prototypes,
    class_similarity_matrix,
    combined_objective,
    mine_triplets,
    mixco_backward,
    mixco_targets,
    reference_matrix,
    relational_consistency_from_embeddings,
    semantic_alignment_loss,
    softclip_targets,
)
from duala.optim import AdamW, LRSchedule, lr_at
from duala.perturb import (
    fit_category_stats,
    perturb,
    perturb_backward,
    perturb_stochastic,
    stats_from_tensors,
    stats_to_tensors,
)
from duala.ridge import RidgeAdapter, adapter_backward, random_adapter

CKPT_MAGIC = b"DUALACK1"
CKPT_VERSION = 1

# rng stream tags so optional components never shift shared draws
_STREAM_BACKBONE = 1
_STREAM_ADAPTER = 2
_STREAM_LORA = 5
_STREAM_SHUFFLE = 3
_STREAM_MIX = 4
_STREAM_TRIPLET = 8
_STREAM_SDP = 9


@dataclass
class TrainConfig:
    epochs: int = 150
    batch_size: int = 10
    peak_lr: float = 3e-4
    margin: float = 0.2
    lambda_sa: float = 1.0
    lambda_rc: float = 0.1
    alpha_contrastive: float = 1.0
    temperature: float = 0.05
    temp_targets: float = 0.1
    beta_mix: float = 0.15
    lora_rank: int = 8
    ridge_lambda: float = 1e-3
    sdp_variant: str = "deterministic"
    sdp_noise: float = 0.1
    triplet_policy: str = "all"
    softclip_fraction: float = 1.0 / 3.0
    omega_mode: str = "union"
    latent_dim: int = 256
    seed: int = 0

    def validate(self):
        if self.epochs < 1 or self.batch_size < 2:
            raise ValidationError("epochs >= 1 and batch_size >= 2 required")
        if self.peak_lr < 0 or self.margin <= 0:
            raise ValidationError("peak_lr >= 0 and margin > 0 required")
        if min(self.lambda_sa, self.lambda_rc, self.alpha_contrastive) < 0:
            raise ValidationError("objective weights must be >= 0")
        if self.temperature <= 0 or self.temp_targets <= 0 or self.beta_mix <= 0:
            raise ValidationError("temperatures and beta_mix must be positive")
        if self.lora_rank < 1 or self.latent_dim < 1:
            raise ValidationError("lora_rank and latent_dim must be >= 1")
        if self.ridge_lambda < 0 or self.sdp_noise < 0:
            raise ValidationError("ridge_lambda and sdp_noise must be >= 0")
        if self.sdp_variant not in ("deterministic", "stochastic", "off"):
            raise ValidationError(f"unknown sdp_variant {self.sdp_variant!r}")
        if self.triplet_policy not in ("all", "random_per_anchor"):
            raise ValidationError(
                f"unknown triplet_policy {self.triplet_policy!r}")
        if not 0.0 <= self.softclip_fraction <= 1.0:
            raise ValidationError("softclip_fraction must lie in [0, 1]")
        if self.omega_mode not in ("union", "intersection"):
            raise ValidationError(f"unknown omega_mode {self.omega_mode!r}")
        return self

    @classmethod
    def from_text(cls, text, source="<config>", overrides=None):
        cfg = config_mod.dataclass_from_kv(cls, text, source, overrides)
        return cfg.validate()

    def to_text(self):
        return config_mod.dataclass_to_kv(self)


@dataclass
class Checkpoint:
    tensors: dict
    config_text: str
    version: int = CKPT_VERSION
    trace: list = field(default_factory=list, repr=False, compare=False)
    counters: dict = field(default_factory=dict, repr=False, compare=False)

    def config(self):
        return TrainConfig.from_text(self.config_text, "<checkpoint>")

    def backbone_params(self):
        """View of the backbone tensors under their module-level names."""
        return {name[3:]: arr for name, arr in self.tensors.items()
                if name.startswith("bb/")}

    def lora_params(self):
        lora = {name: arr for name, arr in self.tensors.items()
                if name.startswith("lora/")}
        return lora or None

    def adapter_ids(self):
        return sorted(int(n.split("/")[1]) for n in self.tensors
                      if n.startswith("adapter/"))

    def adapter(self, subject_id):
        try:
            return self.tensors[f"adapter/{int(subject_id)}"]
        except KeyError:
            raise ValidationError(
                f"checkpoint has no adapter for subject {subject_id}; "
                f"known subjects: {self.adapter_ids()}") from None

    def center(self, subject_id):
        try:
            return self.tensors[f"center/{int(subject_id)}"]
        except KeyError:
            raise ValidationError(
                f"checkpoint has no center for subject {subject_id}") from None

    def stats(self):
        return stats_from_tensors(self.tensors)

    def reference(self):
        if "ref/s" not in self.tensors:
            return None
        return ReferenceMatrix(self.tensors["ref/s"].astype(np.float64),
                               self.tensors["ref/omega"] > 0.5)


def _rng(seed, *stream):
    return np.random.default_rng([seed, *stream])


def _batch_starts(n_rows, batch_size):
    """Chunk boundaries over shuffled rows; a trailing single row is dropped
    (pairwise objectives need at least 2)."""
    starts = list(range(0, n_rows, batch_size))
    if starts and n_rows - starts[-1] < 2:
        starts.pop()
    return starts


def _steps_per_epoch(row_counts, batch_size):
    return sum(len(_batch_starts(n, batch_size)) for n in row_counts)


def _softclip_start(config):
    soft = int(round(config.softclip_fraction * config.epochs))
    return config.epochs - soft


def _center_of(voxels, rows):
    return voxels[rows].mean(axis=0, dtype=np.float64).astype(np.float32)


def _work_dtype():
    """Training math runs in 32-bit unless DUALA_F64=1 promotes it."""
    return np.float64 if os.environ.get("DUALA_F64") == "1" else np.float32


def _cast_tensors(tensors, dtype):
    # astype(copy=False) keeps the same arrays on the fast path
    return {name: arr.astype(dtype, copy=False)
            for name, arr in tensors.items()}


def _latent_forward(x, weight):
    """Voxels -> adapter -> latent anchored on the sqrt(h) sphere.

    The row normalization pins the latent scale so per-dimension class
    statistics stay below 1; with an unanchored scale the category-deviation
    scaling would amplify subject-specific spread instead of shrinking it.
    """
    raw = x @ weight
    unit, norms = kernels.normalize_rows_fwd(raw)
    scale = float(np.sqrt(weight.shape[1]))
    return scale * unit, (unit, norms, scale)


def _latent_backward(cache, d_z):
    unit, norms, scale = cache
    # match the forward dtype so the kernel sees a homogeneous signature
    dy = np.asarray(scale * d_z, dtype=unit.dtype)
    return kernels.normalize_rows_bwd(unit, norms, dy)


def init_pretrain_state(pack, subject_ids, config):
    """Deterministic initial tensor table for pretraining."""
    dims = BackboneDims(latent=config.latent_dim,
                        tokens=pack.dims.tokens_per_stimulus,
                        token_dim=pack.dims.token_dim,
                        retrieval=pack.dims.retrieval_dim)
    tensors = {}
    bb = init_backbone(dims, _rng(config.seed, _STREAM_BACKBONE))
    for name, arr in bb.items():
        tensors[f"bb/{name}"] = arr
    for sid in subject_ids:
        ds = pack.subject(sid)
        if ds.train_indices.size == 0:
            raise ValidationError(f"subject {sid} has no train rows")
        tensors[f"adapter/{sid}"] = random_adapter(
            ds.voxel_dim, config.latent_dim,
            _rng(config.seed, _STREAM_ADAPTER, sid), subject_id=sid).weight
        tensors[f"center/{sid}"] = _center_of(ds.voxels, ds.train_indices)
    return tensors, dims


def _contrastive_step(z, img, epoch_kind, config, rng_mix):
    """Shared contrastive plumbing: pick targets, mix if scheduled.

    Returns (backbone input, targets, mix or None)."""
    if epoch_kind == "mix":
        mix = mixco_targets(z, rng_mix, config.beta_mix)
        return mix.mixed, mix.targets, mix
    return z, softclip_targets(img, config.temp_targets), None


def pretrain(pack, subject_ids, config):
    """Joint contrastive training of subject adapters and the backbone.

    Batches interleave subjects round-robin within each epoch; contrastive
    targets follow the mix-then-soften schedule. Deterministic for a given
    (pack, subject list, config).
    """
    config.validate()
    subject_ids = sorted(int(s) for s in subject_ids)
    if not subject_ids:
        raise ValidationError("need at least one source subject")
    tensors, dims = init_pretrain_state(pack, subject_ids, config)
    tensors = _cast_tensors(tensors, _work_dtype())
    bb = {name[3:]: arr for name, arr in tensors.items()
          if name.startswith("bb/")}
    datasets = {sid: pack.subject(sid) for sid in subject_ids}
    token_grid = (dims.tokens, dims.token_dim)

    row_counts = [datasets[s].train_indices.size for s in subject_ids]
    spe = _steps_per_epoch(row_counts, config.batch_size)
    if spe == 0:
        raise ValidationError("no trainable batches (empty train split)")
    schedule = LRSchedule(total_steps=config.epochs * spe,
                          peak_lr=config.peak_lr)
    decay = {f"adapter/{sid}": config.ridge_lambda for sid in subject_ids}
    opt = AdamW(weight_decay=decay)
    rng_shuffle = _rng(config.seed, _STREAM_SHUFFLE)
    rng_mix = _rng(config.seed, _STREAM_MIX)
    soft_start = _softclip_start(config)

    trace = []
    step = 0
    for epoch in range(config.epochs):
        kind = "mix" if epoch < soft_start else "soft"
        order = {sid: rng_shuffle.permutation(datasets[sid].train_indices)
                 for sid in subject_ids}
        starts = {sid: _batch_starts(order[sid].size, config.batch_size)
                  for sid in subject_ids}
        max_batches = max(len(s) for s in starts.values())
        for b in range(max_batches):
            for sid in subject_ids:
                if b >= len(starts[sid]):
                    continue
                rows = order[sid][starts[sid][b]:
                                  starts[sid][b] + config.batch_size]
                ds = datasets[sid]
                x = ds.voxels[rows] - tensors[f"center/{sid}"]
                z, zcache = _latent_forward(x, tensors[f"adapter/{sid}"])
                ids = ds.stimulus_ids[rows]
                img = pack.retrieval_targets(ids)
                z_in, targets, mix = _contrastive_step(
                    z, img, kind, config, rng_mix)
                try:
                    _, retr, cache = backbone_forward(bb, None, z_in,
                                                      token_grid)
                    closs = bidirectional_contrastive_loss(
                        retr, img, config.temperature, targets)
                except NonFiniteError as exc:
                    raise NonFiniteError(
                        f"non-finite loss at epoch {epoch} step {step}: "
                        f"{exc}") from exc
                total = config.alpha_contrastive * closs.value
                d_retr = config.alpha_contrastive * closs.grads["brain"]
                grads, d_zin = backbone_backward(cache, None, d_retr)
                d_z = mixco_backward(mix, d_zin) if mix is not None else d_zin
                grads = {f"bb/{k}": v for k, v in grads.items()}
                grads[f"adapter/{sid}"] = adapter_backward(
                    RidgeAdapter(tensors[f"adapter/{sid}"], sid), x,
                    _latent_backward(zcache, d_z))
                opt.step(tensors, grads, lr_at(schedule, step))
                trace.append((epoch, step, total, closs.value, 0.0, 0.0,
                              lr_at(schedule, step), kind))
                step += 1
    return Checkpoint(tensors, config.to_text(), trace=trace)


def _subject_embeddings(ckpt, pack, subject_id, rows, bb=None, lora=None):
    """Centered voxels -> adapter -> backbone; returns (latents, retrieval)."""
    dtype = _work_dtype()
    ds = pack.subject(subject_id)
    if bb is None:
        bb = _cast_tensors(ckpt.backbone_params(), dtype)
    if lora is None:
        lora = ckpt.lora_params()
        if lora is not None:
            lora = _cast_tensors(lora, dtype)
    x = (ds.voxels[rows] - ckpt.center(subject_id)).astype(dtype, copy=False)
    z, _ = _latent_forward(x, ckpt.adapter(subject_id).astype(dtype,
                                                              copy=False))
    _, retr, _ = backbone_forward(
        bb, lora, z, (pack.dims.tokens_per_stimulus, pack.dims.token_dim))
    return z, retr


def embed_subject(ckpt, pack, subject_id, split="test"):
    """Evaluation-path embeddings (no augmentation). Returns (z, retr, ids)."""
    ds = pack.subject(subject_id)
    rows = ds.test_indices if split == "test" else ds.train_indices
    if rows.size == 0:
        raise ValidationError(f"subject {subject_id} has no {split} rows")
    z, retr = _subject_embeddings(ckpt, pack, subject_id, rows)
    return z, retr, ds.stimulus_ids[rows]


def compute_reference(ckpt, pack):
    """Fit category stats and the reference similarity matrix into ckpt.

    Uses every source subject's train rows under the current adapters and
    backbone. Idempotent: recomputation overwrites the same tensors.
    """
    config = ckpt.config()
    per_subject = []
    sims = []
    for sid in ckpt.adapter_ids():
        ds = pack.subject(sid)
        rows = ds.train_indices
        if rows.size == 0:
            raise ValidationError(f"subject {sid} has no train rows")
        z, retr = _subject_embeddings(ckpt, pack, sid, rows)
        labels = pack.class_labels(ds.stimulus_ids[rows])
        per_subject.append((sid, z, labels))
        sims.append(class_similarity_matrix(
            class_prototypes(retr, labels, pack.class_count)))
    stats = fit_category_stats(per_subject, pack.class_count)
    ref = reference_matrix(sims, mode=config.omega_mode)
    ckpt.tensors.update(stats_to_tensors(stats))
    ckpt.tensors["ref/s"] = ref.s_ref.astype(np.float32)
    ckpt.tensors["ref/omega"] = ref.omega.astype(np.float32)
    return ckpt


def finetune(ckpt, pack, new_subject, config):
    """Adapt to a new subject: fresh adapter + low-rank deltas, frozen base.

    new_subject is the (possibly session-restricted) SubjectDataset to
    train on. Steps run the full combined objective; the augmentation and
    auxiliary losses degrade gracefully (skipped and counted) on batches
    that cannot support them.
    """
    config.validate()
    stats = ckpt.stats()
    ref = ckpt.reference()
    if stats is None or ref is None:
        raise ValidationError(
            "checkpoint is missing reference matrix or category stats; "
            "run compute_reference first")
    sid = int(new_subject.subject_id)
    rows_all = new_subject.train_indices
    if rows_all.size == 0:
        raise ValidationError(f"subject {sid} has no train rows")

    dtype = _work_dtype()
    # astype always copies here, so frozen checkpoint tensors stay untouched
    tensors = {name: arr.astype(dtype) for name, arr in ckpt.tensors.items()}
    dims = BackboneDims(latent=config.latent_dim,
                        tokens=pack.dims.tokens_per_stimulus,
                        token_dim=pack.dims.token_dim,
                        retrieval=pack.dims.retrieval_dim)
    token_grid = (dims.tokens, dims.token_dim)
    tensors[f"adapter/{sid}"] = random_adapter(
        new_subject.voxel_dim, config.latent_dim,
        _rng(config.seed, _STREAM_ADAPTER, sid),
        subject_id=sid).weight.astype(dtype, copy=False)
    tensors[f"center/{sid}"] = _center_of(
        new_subject.voxels, rows_all).astype(dtype, copy=False)
    lora = init_lora(dims, config.lora_rank, _rng(config.seed, _STREAM_LORA))
    tensors.update(_cast_tensors(lora, dtype))
    bb = {name[3:]: arr for name, arr in tensors.items()
          if name.startswith("bb/")}

    spe = _steps_per_epoch([rows_all.size], config.batch_size)
    if spe == 0:
        raise ValidationError("no trainable batches (session too small)")
    schedule = LRSchedule(total_steps=config.epochs * spe,
                          peak_lr=config.peak_lr)
    opt = AdamW(weight_decay={f"adapter/{sid}": config.ridge_lambda})
    rng_shuffle = _rng(config.seed, _STREAM_SHUFFLE, sid)
    rng_mix = _rng(config.seed, _STREAM_MIX, sid)
    rng_trip = _rng(config.seed, _STREAM_TRIPLET, sid)
    rng_sdp = _rng(config.seed, _STREAM_SDP, sid)
    soft_start = _softclip_start(config)
    center = tensors[f"center/{sid}"]
    adapter_name = f"adapter/{sid}"
    use_sdp = config.sdp_variant != "off"
    counters = {"sa_skipped": 0, "rc_skipped": 0, "sdp_passthrough": 0}

    trace = []
    step = 0
    for epoch in range(config.epochs):
        kind = "mix" if epoch < soft_start else "soft"
        order = rng_shuffle.permutation(rows_all)
        for start in _batch_starts(order.size, config.batch_size):
            rows = order[start:start + config.batch_size]
            x = new_subject.voxels[rows] - center
            z, zcache = _latent_forward(x, tensors[adapter_name])
            ids = new_subject.stimulus_ids[rows]
            labels = pack.class_labels(ids)
            img = pack.retrieval_targets(ids)

            if use_sdp:
                counters["sdp_passthrough"] += int(
                    stats.missing_mask(labels).sum())
                if config.sdp_variant == "stochastic":
                    z_t = perturb_stochastic(z, labels, stats,
                                             config.sdp_noise, rng_sdp)
                else:
                    z_t = perturb(z, labels, stats)
            else:
                z_t = z

            multi_class = np.unique(labels).size >= 2
            sa = None
            if config.lambda_sa > 0 and multi_class:
                trips = mine_triplets(
                    labels, config.triplet_policy,
                    rng_trip if config.triplet_policy == "random_per_anchor"
                    else None)
                if trips.shape[0]:
                    sa = semantic_alignment_loss(z_t, trips, config.margin)
            if config.lambda_sa > 0 and sa is None:
                counters["sa_skipped"] += 1

            z_in, targets, mix = _contrastive_step(
                z_t, img, kind, config, rng_mix)
            try:
                _, retr, cache = backbone_forward(bb, lora, z_in, token_grid)
                closs = bidirectional_contrastive_loss(
                    retr, img, config.temperature, targets)
                rc = None
                cache2 = None
                if config.lambda_rc > 0 and multi_class:
                    try:
                        if mix is None:
                            rc = relational_consistency_from_embeddings(
                                retr, labels, pack.class_count, ref)
                        else:
                            # mixing destroys class identity, so prototypes
                            # come from a second pass over the unmixed batch
                            _, retr2, cache2 = backbone_forward(
                                bb, lora, z_t, token_grid)
                            rc = relational_consistency_from_embeddings(
                                retr2, labels, pack.class_count, ref)
                    except EmptyOverlapError:
                        rc = None
                if config.lambda_rc > 0 and rc is None:
                    counters["rc_skipped"] += 1

                # rekey the part gradients by the tensor they live on:
                # "brain" is the mixed-path retrieval output, "latents" the
                # post-augmentation latents, "retr_rc" the prototype path
                combined = combined_objective(
                    {"contrastive": closs,
                     "sa": None if sa is None else LossOutput(
                         sa.value, {"latents": sa.grads["Z"]}),
                     "rc": None if rc is None else LossOutput(
                         rc.value, {"retr_rc": rc.grads["Z"]})},
                    config.lambda_sa, config.lambda_rc,
                    config.alpha_contrastive)
            except NonFiniteError as exc:
                raise NonFiniteError(
                    f"non-finite loss at epoch {epoch} step {step}: "
                    f"{exc}") from exc

            d_retr = combined.grads["brain"]
            if rc is not None and cache2 is None:
                d_retr = d_retr + combined.grads["retr_rc"]
            grads_l, d_zin = backbone_backward(cache, None, d_retr,
                                               base_grads=False)
            d_zt = mixco_backward(mix, d_zin) if mix is not None else d_zin
            if rc is not None and cache2 is not None:
                g2, d_zt2 = backbone_backward(
                    cache2, None, combined.grads["retr_rc"],
                    base_grads=False)
                for name, g in g2.items():
                    grads_l[name] = grads_l[name] + g
                d_zt = d_zt + d_zt2
            if sa is not None:
                d_zt = d_zt + combined.grads["latents"]
            d_z = perturb_backward(labels, stats, d_zt) if use_sdp else d_zt

            grads = dict(grads_l)
            grads[adapter_name] = adapter_backward(
                RidgeAdapter(tensors[adapter_name], sid), x,
                _latent_backward(zcache, d_z))
            opt.step(tensors, grads, lr_at(schedule, step))
            trace.append((epoch, step, combined.value, closs.value,
                          0.0 if sa is None else sa.value,
                          0.0 if rc is None else rc.value,
                          lr_at(schedule, step), kind))
            step += 1
    return Checkpoint(tensors, config.to_text(), trace=trace,
                      counters=counters)


# ---------------------------------------------------------------------------
# persistence

TRACE_FIELDS = ("epoch", "step", "loss_total", "loss_contrastive",
                "loss_sa", "loss_rc", "lr", "target_kind")


def write_trace(ckpt, path):
    """Per-step loss trace as CSV with a fixed header."""
    with open(path, "w") as fh:
        fh.write(",".join(TRACE_FIELDS) + "\n")
        for row in ckpt.trace:
            epoch, step, lt, lc, lsa, lrc, lr, kind = row
            fh.write(f"{epoch},{step},{lt:.6g},{lc:.6g},{lsa:.6g},"
                     f"{lrc:.6g},{lr:.6g},{kind}\n")
    return path


def _read_exact(fh, n, what):
    buf = fh.read(n)
    if len(buf) != n:
        raise TruncatedFileError(f"truncated checkpoint while reading {what}")
    return buf


def save_checkpoint(ckpt, path):
    """Named-tensor table, f32 payloads, sorted by name for stable bytes."""
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", ckpt.version, len(ckpt.tensors)))
        for name in sorted(ckpt.tensors):
            arr = np.ascontiguousarray(ckpt.tensors[name], dtype="<f4")
            encoded = name.encode("utf-8")
            if len(encoded) > 0xFFFF:
                raise ValidationError(f"tensor name too long: {name[:40]}...")
            if arr.ndim < 1 or arr.ndim > 0xFF:
                raise ValidationError(f"tensor {name} has unsupported rank")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())
        config_bytes = ckpt.config_text.encode("utf-8")
        fh.write(struct.pack("<I", len(config_bytes)))
        fh.write(config_bytes)
    return path


def load_checkpoint(path):
    with open(path, "rb") as fh:
        magic = fh.read(len(CKPT_MAGIC))
        if magic != CKPT_MAGIC:
            raise BadMagicError(f"bad magic {magic!r}; not a checkpoint")
        version, count = struct.unpack("<II", _read_exact(fh, 8, "header"))
        if version != CKPT_VERSION:
            raise FormatVersionError(
                f"checkpoint version {version}; this build reads "
                f"{CKPT_VERSION}")
        tensors = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2, "name length"))
            name = _read_exact(fh, name_len, "tensor name").decode("utf-8")
            (rank,) = struct.unpack("<B", _read_exact(fh, 1, "tensor rank"))
            dims = struct.unpack(f"<{rank}Q",
                                 _read_exact(fh, 8 * rank, "tensor dims"))
            size = 1
            for d in dims:
                size *= d
            payload = np.frombuffer(
                _read_exact(fh, 4 * size, f"tensor {name}"),
                dtype="<f4").copy().reshape(dims)
            if name in tensors:
                raise DuplicateTensorError(f"tensor {name} appears twice")
            tensors[name] = payload
        (cfg_len,) = struct.unpack("<I", _read_exact(fh, 4, "config length"))
        config_text = _read_exact(fh, cfg_len, "config block").decode("utf-8")
        if fh.read(1):
            raise FormatError("trailing bytes after checkpoint payload")
    return Checkpoint(tensors, config_text, version=version)
