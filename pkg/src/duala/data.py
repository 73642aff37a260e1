"""Datasets, the on-disk pack format, and the synthetic multi-subject generator.

A pack bundles a stimulus table (per-stimulus class label and target
embeddings) with per-subject voxel-response datasets. The synthetic
generator realizes an explicit factor decomposition: every stimulus has a
true latent (class factor plus instance variation), each subject observes
a per-dimension gain-scaled copy of that latent through its own random
mixing matrix, plus sensor noise. Target embeddings are deterministic
functions of the true latent, so the ground-truth correspondence between
voxels and targets is known exactly.
"""

import dataclasses
import struct
from dataclasses import dataclass, field

import numpy as np

from duala.config import dataclass_from_kv, dataclass_to_kv
from duala.errors import (
    BadMagicError,
    DanglingStimulusError,
    DimensionMismatchError,
    FormatError,
    FormatVersionError,
    TruncatedFileError,
    ValidationError,
)

PACK_MAGIC = b"DUALAPK1"
PACK_VERSION = 1

TRAIN = 0
TEST = 1


@dataclass
class StimulusRecord:
    """One stimulus: class label plus its target embeddings.

    target_tokens is (tokens_per_stimulus, token_dim); target_retrieval is a
    unit-norm vector in the retrieval space.
    """

    stimulus_id: int
    class_id: int
    target_tokens: np.ndarray
    target_retrieval: np.ndarray


@dataclass
class SubjectDataset:
    """One subject's voxel responses with stimulus ids and split tags.

    voxels is (n_rows, voxel_dim); split holds TRAIN/TEST codes per row.
    """

    subject_id: int
    voxels: np.ndarray
    stimulus_ids: np.ndarray
    split: np.ndarray

    @property
    def n_rows(self):
        return self.voxels.shape[0]

    @property
    def voxel_dim(self):
        return self.voxels.shape[1]

    @property
    def train_indices(self):
        return np.flatnonzero(self.split == TRAIN)

    @property
    def test_indices(self):
        return np.flatnonzero(self.split == TEST)


@dataclass
class PackDims:
    tokens_per_stimulus: int
    token_dim: int
    retrieval_dim: int


@dataclass
class DatasetPack:
    stimulus_table: list
    subjects: list
    class_count: int
    dims: PackDims
    _by_id: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self._by_id = {rec.stimulus_id: rec for rec in self.stimulus_table}

    def stimulus(self, stimulus_id):
        return self._by_id[int(stimulus_id)]

    def subject(self, subject_id):
        for s in self.subjects:
            if s.subject_id == subject_id:
                return s
        raise ValidationError(f"no subject with id {subject_id}")

    def class_labels(self, stimulus_ids):
        return np.array([self._by_id[int(i)].class_id for i in stimulus_ids],
                        dtype=np.int64)

    def retrieval_targets(self, stimulus_ids):
        return np.stack([self._by_id[int(i)].target_retrieval for i in stimulus_ids])

    def token_targets(self, stimulus_ids):
        return np.stack([self._by_id[int(i)].target_tokens for i in stimulus_ids])


@dataclass
class SynthConfig:
    """Knobs for the synthetic multi-subject benchmark generator.

    The generator emits k_source + 1 subjects; by convention the last one is
    held out as the new subject for fine-tuning. Stimulus sets are disjoint
    across subjects except for a shared_fraction tail appended to every
    subject (and landing in the test split when shared_fraction is at most
    test_fraction).
    """

    k_source: int = 3
    d_range: tuple[int, int] = (512, 1024)
    trials_per_subject: int = 1500
    class_count: int = 10
    true_latent_dim: int = 12
    noise_std: float = 0.05
    subject_gain_std: float = 0.3
    instance_std: float = 0.5
    seed: int = 0
    shared_fraction: float = 0.0
    test_fraction: float = 0.2
    tokens_per_stimulus: int = 16
    token_dim: int = 64
    retrieval_dim: int = 64
    # How much of the instance component reaches the voxels. 1 means the
    # voxels see the full stimulus latent; values below 1 model neural
    # responses that encode category content more robustly than instance
    # detail, while target embeddings always keep the full latent.
    neural_instance_gain: float = 1.0

    def validate(self):
        if self.k_source < 1:
            raise ValidationError("k_source must be >= 1")
        lo, hi = self.d_range
        if lo <= 0 or hi < lo:
            raise ValidationError(f"bad d_range {self.d_range}")
        if lo < self.true_latent_dim:
            raise ValidationError(
                f"d_range lower bound {lo} is below true_latent_dim "
                f"{self.true_latent_dim}; the mixing would be unrecoverable")
        for name in ("trials_per_subject", "class_count", "true_latent_dim",
                     "tokens_per_stimulus", "token_dim", "retrieval_dim"):
            if getattr(self, name) <= 0:
                raise ValidationError(f"{name} must be positive")
        for name in ("noise_std", "subject_gain_std", "instance_std",
                     "neural_instance_gain"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be >= 0")
        if not 0.0 <= self.shared_fraction < 1.0:
            raise ValidationError("shared_fraction must be in [0, 1)")
        if not 0.0 < self.test_fraction < 1.0:
            raise ValidationError("test_fraction must be in (0, 1)")
        if self.token_dim != self.retrieval_dim:
            raise ValidationError(
                "retrieval targets are pooled tokens; token_dim and "
                "retrieval_dim must match")

    @classmethod
    def from_text(cls, text, source="<config>", overrides=None):
        cfg = dataclass_from_kv(cls, text, source, overrides)
        cfg.validate()
        return cfg

    def to_text(self):
        return dataclass_to_kv(self)


def _normalize_rows(x):
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def generate_synthetic(config: SynthConfig) -> DatasetPack:
    """Generate a multi-subject pack from the factor model.

    Per stimulus: latent = class_factor[class] + instance_noise. Per subject:
    voxel row = A_s @ (g_s * latent) + sensor noise, with A_s a random
    full-rank mixing matrix and g_s a per-dimension response gain. Targets
    are normalized random linear views of the latent. neural_instance_gain
    below 1 attenuates the instance component on the voxel side only.
    Deterministic in the config seed, bitwise.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    n_subjects = config.k_source + 1
    ht = config.true_latent_dim
    tok_t, tok_e = config.tokens_per_stimulus, config.token_dim

    shared_count = int(round(config.shared_fraction * config.trials_per_subject))
    own_count = config.trials_per_subject - shared_count
    n_stimuli = n_subjects * own_count + shared_count

    class_ids = np.arange(n_stimuli, dtype=np.int64) % config.class_count
    class_factors = rng.standard_normal((config.class_count, ht))
    instances = config.instance_std * rng.standard_normal((n_stimuli, ht))
    latents = class_factors[class_ids] + instances
    # voxels may see an attenuated instance component; gain 1 reproduces
    # latents bitwise so the default keeps voxels and targets in lockstep
    neural_latents = (class_factors[class_ids]
                      + config.neural_instance_gain * instances)

    token_maps = rng.standard_normal((tok_t, tok_e, ht)) / np.sqrt(ht)
    tokens = np.einsum("teh,nh->nte", token_maps, latents)
    tokens = _normalize_rows(tokens)
    retrieval = _normalize_rows(tokens.mean(axis=1))

    records = [
        StimulusRecord(int(i), int(class_ids[i]),
                       tokens[i].astype(np.float32),
                       retrieval[i].astype(np.float32))
        for i in range(n_stimuli)
    ]

    shared_ids = np.arange(n_subjects * own_count, n_stimuli, dtype=np.int64)
    subjects = []
    for s in range(n_subjects):
        d_s = int(rng.integers(config.d_range[0], config.d_range[1] + 1))
        mixing = rng.standard_normal((d_s, ht)) / np.sqrt(ht)
        gains = 1.0 + config.subject_gain_std * rng.standard_normal(ht)
        own_ids = np.arange(s * own_count, (s + 1) * own_count, dtype=np.int64)
        ids = np.concatenate([own_ids, shared_ids])
        voxels = (neural_latents[ids] * gains) @ mixing.T
        voxels = voxels + config.noise_std * rng.standard_normal(voxels.shape)
        n_rows = ids.size
        n_test = int(round(config.test_fraction * n_rows))
        split = np.zeros(n_rows, dtype=np.uint8)
        split[n_rows - n_test:] = TEST
        subjects.append(SubjectDataset(s, voxels.astype(np.float32), ids, split))

    dims = PackDims(tok_t, tok_e, config.retrieval_dim)
    pack = DatasetPack(records, subjects, config.class_count, dims)
    validate_pack(pack)
    return pack


def validate_pack(pack: DatasetPack):
    """Check structural invariants; raises on the first violation."""
    if not pack.subjects:
        raise ValidationError("pack has no subjects")
    ids = [rec.stimulus_id for rec in pack.stimulus_table]
    if len(set(ids)) != len(ids):
        raise ValidationError("duplicate stimulus ids")
    classes = {rec.class_id for rec in pack.stimulus_table}
    if classes != set(range(pack.class_count)):
        raise ValidationError(
            f"class ids must cover [0, {pack.class_count}); saw {sorted(classes)}")
    for rec in pack.stimulus_table:
        norm = float(np.linalg.norm(rec.target_retrieval))
        if abs(norm - 1.0) > 1e-6:
            raise ValidationError(
                f"stimulus {rec.stimulus_id}: retrieval target norm {norm:.8f}")
    known = set(ids)
    for subj in pack.subjects:
        if subj.n_rows < 1 or subj.voxel_dim < 1:
            raise ValidationError(f"subject {subj.subject_id}: empty dataset")
        missing = set(int(i) for i in subj.stimulus_ids) - known
        if missing:
            raise DanglingStimulusError(
                f"subject {subj.subject_id} references unknown stimulus ids "
                f"{sorted(missing)[:5]}")
        train_ids = set(subj.stimulus_ids[subj.split == TRAIN].tolist())
        test_ids = set(subj.stimulus_ids[subj.split == TEST].tolist())
        if train_ids & test_ids:
            raise ValidationError(
                f"subject {subj.subject_id}: stimulus ids shared across splits")


def session_subset(ds: SubjectDataset, n_trials: int) -> SubjectDataset:
    """First n_trials train rows (stored order) plus all test rows."""
    train_rows = ds.train_indices
    if n_trials > train_rows.size:
        raise ValidationError(
            f"requested {n_trials} trials but subject {ds.subject_id} has "
            f"only {train_rows.size} train rows")
    keep = np.zeros(ds.n_rows, dtype=bool)
    keep[train_rows[:n_trials]] = True
    keep[ds.split == TEST] = True
    return SubjectDataset(ds.subject_id, ds.voxels[keep].copy(),
                          ds.stimulus_ids[keep].copy(), ds.split[keep].copy())


def _read_exact(fh, n, what):
    buf = fh.read(n)
    if len(buf) != n:
        raise TruncatedFileError(f"truncated pack file while reading {what}")
    return buf


def _read_f32(fh, count, what):
    return np.frombuffer(_read_exact(fh, 4 * count, what), dtype="<f4").copy()


def save_pack(pack: DatasetPack, path):
    with open(path, "wb") as fh:
        fh.write(PACK_MAGIC)
        fh.write(struct.pack("<IIIIII",
                             PACK_VERSION, len(pack.stimulus_table),
                             len(pack.subjects), pack.class_count,
                             pack.dims.tokens_per_stimulus, pack.dims.token_dim))
        fh.write(struct.pack("<I", pack.dims.retrieval_dim))
        for rec in pack.stimulus_table:
            fh.write(struct.pack("<II", rec.stimulus_id, rec.class_id))
            fh.write(np.ascontiguousarray(rec.target_tokens, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(rec.target_retrieval, dtype="<f4").tobytes())
        for subj in pack.subjects:
            fh.write(struct.pack("<III", subj.subject_id, subj.n_rows,
                                 subj.voxel_dim))
            fh.write(np.ascontiguousarray(subj.voxels, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(subj.stimulus_ids, dtype="<u4").tobytes())
            fh.write(np.ascontiguousarray(subj.split, dtype="u1").tobytes())


def load_pack(path) -> DatasetPack:
    with open(path, "rb") as fh:
        magic = fh.read(len(PACK_MAGIC))
        if magic != PACK_MAGIC:
            raise BadMagicError(f"bad magic {magic!r}; not a pack file")
        version, n_stim, n_subj, n_classes, tok_t, tok_e = struct.unpack(
            "<IIIIII", _read_exact(fh, 24, "header"))
        if version != PACK_VERSION:
            raise FormatVersionError(
                f"pack version {version}; this build reads {PACK_VERSION}")
        (retr_e,) = struct.unpack("<I", _read_exact(fh, 4, "header"))
        records = []
        for _ in range(n_stim):
            sid, cid = struct.unpack("<II", _read_exact(fh, 8, "stimulus header"))
            tokens = _read_f32(fh, tok_t * tok_e, "stimulus tokens")
            retr = _read_f32(fh, retr_e, "stimulus retrieval target")
            records.append(StimulusRecord(sid, cid,
                                          tokens.reshape(tok_t, tok_e), retr))
        subjects = []
        for _ in range(n_subj):
            sid, n_rows, d = struct.unpack("<III",
                                           _read_exact(fh, 12, "subject header"))
            voxels = _read_f32(fh, n_rows * d, "voxels").reshape(n_rows, d)
            ids = np.frombuffer(_read_exact(fh, 4 * n_rows, "stimulus ids"),
                                dtype="<u4").astype(np.int64)
            split = np.frombuffer(_read_exact(fh, n_rows, "split tags"),
                                  dtype="u1").copy()
            subjects.append(SubjectDataset(sid, voxels, ids, split))
        trailing = fh.read(1)
        if trailing:
            raise FormatError("trailing bytes after pack payload")
    pack = DatasetPack(records, subjects, n_classes,
                       PackDims(tok_t, tok_e, retr_e))
    validate_pack(pack)
    return pack
