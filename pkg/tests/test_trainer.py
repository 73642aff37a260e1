"""Tests for the training orchestration and checkpoint persistence."""

import csv
import dataclasses
import struct

import numpy as np
import pytest

from conftest import small_train_config
from duala.data import TEST, SubjectDataset, session_subset
from duala.errors import (
    BadMagicError,
    DuplicateTensorError,
    FormatError,
    FormatVersionError,
    TruncatedFileError,
    ValidationError,
)
from duala.train import (
    CKPT_MAGIC,
    Checkpoint,
    TRACE_FIELDS,
    TrainConfig,
    _batch_starts,
    _softclip_start,
    _steps_per_epoch,
    compute_reference,
    embed_subject,
    finetune,
    init_pretrain_state,
    load_checkpoint,
    pretrain,
    save_checkpoint,
    write_trace,
)

NEW_SID = 2  # held-out subject in the small pack (sources are 0 and 1)


def _assert_tensors_equal(a, b):
    assert sorted(a) == sorted(b)
    for name in a:
        np.testing.assert_array_equal(a[name], b[name], err_msg=name)


# ---------------------------------------------------------------------------
# scheduling helpers


def test_batch_starts_keeps_two_row_tail():
    assert _batch_starts(10, 4) == [0, 4, 8]


def test_batch_starts_drops_single_row_tail():
    # pairwise objectives need >= 2 rows, so a lone trailing row is dropped
    assert _batch_starts(9, 4) == [0, 4]


def test_batch_starts_edge_sizes():
    assert _batch_starts(0, 4) == []
    assert _batch_starts(1, 4) == []
    assert _batch_starts(2, 10) == [0]
    assert _batch_starts(4, 4) == [0]


def test_steps_per_epoch_sums_subjects():
    assert _steps_per_epoch([10, 9], 4) == 3 + 2


def test_softclip_start_examples():
    cfg = TrainConfig(epochs=150)
    assert _softclip_start(cfg) == 100
    assert _softclip_start(dataclasses.replace(cfg, epochs=3)) == 2
    assert _softclip_start(dataclasses.replace(cfg, epochs=4)) == 3
    none = dataclasses.replace(cfg, epochs=6, softclip_fraction=0.0)
    assert _softclip_start(none) == 6
    allsoft = dataclasses.replace(cfg, epochs=6, softclip_fraction=1.0)
    assert _softclip_start(allsoft) == 0


# ---------------------------------------------------------------------------
# config validation


@pytest.mark.parametrize("bad", [
    {"epochs": 0},
    {"batch_size": 1},
    {"margin": 0.0},
    {"peak_lr": -1e-3},
    {"lambda_sa": -0.1},
    {"temperature": 0.0},
    {"beta_mix": 0.0},
    {"lora_rank": 0},
    {"ridge_lambda": -1.0},
    {"sdp_variant": "sometimes"},
    {"triplet_policy": "hardest"},
    {"softclip_fraction": 1.5},
    {"omega_mode": "xor"},
])
def test_config_validate_rejects(bad):
    with pytest.raises(ValidationError):
        TrainConfig(**bad).validate()


def test_config_text_roundtrip():
    cfg = TrainConfig(epochs=7, lambda_rc=0.25, sdp_variant="stochastic")
    again = TrainConfig.from_text(cfg.to_text())
    assert again == cfg


# ---------------------------------------------------------------------------
# pretraining


def test_init_state_names_and_shapes(small_pack):
    cfg = small_train_config()
    tensors, dims = init_pretrain_state(small_pack, [0, 1], cfg)
    h = cfg.latent_dim
    assert dims.latent == h
    for sid in (0, 1):
        d = small_pack.subject(sid).voxel_dim
        assert tensors[f"adapter/{sid}"].shape == (d, h)
        assert tensors[f"center/{sid}"].shape == (d,)
        assert tensors[f"center/{sid}"].dtype == np.float32
    bb_names = [n for n in tensors if n.startswith("bb/")]
    assert len(bb_names) == 4 * 6 + 4  # 4 residual blocks + two heads


def test_init_state_rejects_subject_without_train_rows(small_pack):
    ds = small_pack.subject(0)
    all_test = SubjectDataset(subject_id=0, voxels=ds.voxels,
                              stimulus_ids=ds.stimulus_ids,
                              split=np.full(ds.n_rows, TEST, dtype=np.uint8))
    crippled = dataclasses.replace(small_pack, subjects=[all_test])
    with pytest.raises(ValidationError, match="no train rows"):
        init_pretrain_state(crippled, [0], small_train_config())


def test_pretrain_requires_subjects(small_pack):
    with pytest.raises(ValidationError, match="source subject"):
        pretrain(small_pack, [], small_train_config())


def test_pretrain_is_deterministic(small_pack):
    cfg = small_train_config(epochs=2)
    a = pretrain(small_pack, [0, 1], cfg)
    b = pretrain(small_pack, [0, 1], cfg)
    _assert_tensors_equal(a.tensors, b.tensors)
    assert a.trace == b.trace


def test_pretrain_f64_mode(small_pack, monkeypatch):
    cfg = small_train_config(epochs=2)
    plain = pretrain(small_pack, [0, 1], cfg)
    monkeypatch.setenv("DUALA_F64", "1")
    a = pretrain(small_pack, [0, 1], cfg)
    b = pretrain(small_pack, [0, 1], cfg)
    _assert_tensors_equal(a.tensors, b.tensors)
    assert all(a.tensors[n].dtype == np.float64 for n in a.tensors)
    # promoted precision must actually change the accumulated arithmetic
    name = "bb/block0/fc1/w"
    assert not np.array_equal(plain.tensors[name],
                              a.tensors[name].astype(np.float32))


def test_pretrain_trace_schedule(pretrained, small_pack):
    cfg = small_train_config()
    spe = _steps_per_epoch(
        [small_pack.subject(s).train_indices.size for s in (0, 1)],
        cfg.batch_size)
    assert len(pretrained.trace) == cfg.epochs * spe
    steps = [row[1] for row in pretrained.trace]
    assert steps == list(range(len(steps)))
    kinds = {row[0]: row[7] for row in pretrained.trace}
    soft_start = _softclip_start(cfg)
    for epoch, kind in kinds.items():
        assert kind == ("mix" if epoch < soft_start else "soft")
    assert all(row[6] > 0 for row in pretrained.trace)  # lr column
    # pretraining runs the contrastive objective only
    assert all(row[4] == 0.0 and row[5] == 0.0 for row in pretrained.trace)


def test_pretrain_reduces_loss(pretrained):
    losses = [row[2] for row in pretrained.trace]
    k = max(1, len(losses) // 5)
    assert np.mean(losses[-k:]) < np.mean(losses[:k])


def test_pretrain_trains_every_subject(pretrained, small_pack):
    assert pretrained.adapter_ids() == [0, 1]
    init, _ = init_pretrain_state(small_pack, [0, 1],
                                  small_train_config())
    for sid in (0, 1):
        assert not np.array_equal(pretrained.adapter(sid),
                                  init[f"adapter/{sid}"])
        np.testing.assert_array_equal(pretrained.center(sid),
                                      init[f"center/{sid}"])


def test_checkpoint_accessor_errors(pretrained):
    with pytest.raises(ValidationError, match=r"known subjects: \[0, 1\]"):
        pretrained.adapter(99)
    with pytest.raises(ValidationError, match="no center"):
        pretrained.center(99)


# ---------------------------------------------------------------------------
# embeddings and the reference stage


def test_embed_subject_contract(pretrained, small_pack):
    ds = small_pack.subject(0)
    z, retr, ids = embed_subject(pretrained, small_pack, 0)
    assert z.shape == (ds.test_indices.size,
                       small_train_config().latent_dim)
    assert retr.shape == (ds.test_indices.size,
                          small_pack.dims.retrieval_dim)
    np.testing.assert_allclose(np.linalg.norm(retr, axis=1), 1.0, atol=1e-5)
    np.testing.assert_array_equal(ids, ds.stimulus_ids[ds.test_indices])
    _, _, train_ids = embed_subject(pretrained, small_pack, 0, split="train")
    assert train_ids.size == ds.train_indices.size


def test_embed_unknown_subject(pretrained, small_pack):
    with pytest.raises(ValidationError):
        embed_subject(pretrained, small_pack, 7)


def test_reference_tensors_present(pretrained, small_pack):
    t = pretrained.tensors
    assert t["stats/mu"].shape == (small_pack.class_count,
                                   pretrained.config().latent_dim)
    assert t["stats/sigma_bar"].shape == t["stats/mu"].shape
    assert t["stats/present"].shape == (small_pack.class_count, 2)
    for sid in (0, 1):
        assert f"stats/sigma/{sid}" in t
    C = small_pack.class_count
    assert t["ref/s"].shape == (C, C)
    np.testing.assert_allclose(t["ref/s"], t["ref/s"].T, atol=1e-6)
    assert set(np.unique(t["ref/omega"])) <= {0.0, 1.0}
    stats = pretrained.stats()
    assert stats is not None and list(stats.subject_ids) == [0, 1]
    assert pretrained.reference() is not None


def test_compute_reference_idempotent(small_pack):
    cfg = small_train_config(epochs=2)
    ckpt = compute_reference(pretrain(small_pack, [0, 1], cfg), small_pack)
    first = {n: a.copy() for n, a in ckpt.tensors.items()}
    compute_reference(ckpt, small_pack)
    _assert_tensors_equal(ckpt.tensors, first)


def test_stats_absent_before_reference(small_pack):
    cfg = small_train_config(epochs=1)
    ckpt = pretrain(small_pack, [0, 1], cfg)
    assert ckpt.stats() is None
    assert ckpt.reference() is None


# ---------------------------------------------------------------------------
# finetuning


@pytest.fixture(scope="module")
def ft_config():
    return small_train_config(epochs=2, seed=3)


@pytest.fixture(scope="module")
def session(small_pack):
    return session_subset(small_pack.subject(NEW_SID), 60)


@pytest.fixture(scope="module")
def finetuned(pretrained, small_pack, session, ft_config):
    return finetune(pretrained, small_pack, session, ft_config)


def test_finetune_requires_reference(small_pack, session, ft_config):
    bare = pretrain(small_pack, [0, 1],
                    dataclasses.replace(ft_config, epochs=1))
    with pytest.raises(ValidationError, match="compute_reference"):
        finetune(bare, small_pack, session, ft_config)


def test_finetune_freezes_base(pretrained, finetuned):
    """Everything but the new subject's tensors and the low-rank deltas is
    bitwise-unchanged; the source checkpoint itself is not mutated."""
    fresh = {n for n in finetuned.tensors if n not in pretrained.tensors}
    assert fresh == {f"adapter/{NEW_SID}", f"center/{NEW_SID}"} | {
        n for n in fresh if n.startswith("lora/")}
    assert any(n.startswith("lora/") for n in fresh)
    for name, arr in pretrained.tensors.items():
        np.testing.assert_array_equal(finetuned.tensors[name], arr,
                                      err_msg=name)


def test_finetune_trains_new_subject(finetuned, session, small_pack,
                                     ft_config):
    from duala.ridge import random_adapter
    from duala.train import _STREAM_ADAPTER, _rng

    init = random_adapter(session.voxel_dim, ft_config.latent_dim,
                          _rng(ft_config.seed, _STREAM_ADAPTER, NEW_SID),
                          subject_id=NEW_SID).weight
    assert not np.array_equal(finetuned.adapter(NEW_SID), init)
    lora = finetuned.lora_params()
    assert lora is not None
    assert any(np.any(t != 0) for n, t in lora.items() if n.endswith("/b"))


def test_finetune_counters_and_trace(finetuned, session, ft_config):
    assert set(finetuned.counters) == {"sa_skipped", "rc_skipped",
                                       "sdp_passthrough"}
    assert all(v >= 0 for v in finetuned.counters.values())
    spe = _steps_per_epoch([session.train_indices.size],
                           ft_config.batch_size)
    assert len(finetuned.trace) == ft_config.epochs * spe
    # auxiliary objectives actually fire on this data
    assert any(row[4] > 0 for row in finetuned.trace)
    assert any(row[5] > 0 for row in finetuned.trace)


def test_finetune_is_deterministic(pretrained, small_pack, session,
                                   ft_config, finetuned):
    again = finetune(pretrained, small_pack, session, ft_config)
    _assert_tensors_equal(again.tensors, finetuned.tensors)
    assert again.trace == finetuned.trace
    assert again.counters == finetuned.counters


def test_finetune_stochastic_zero_noise_matches_deterministic(
        pretrained, small_pack, session, ft_config, finetuned):
    """The stochastic augmentation with zero noise consumes its own rng
    stream but must reproduce the deterministic path bitwise."""
    cfg = dataclasses.replace(ft_config, sdp_variant="stochastic",
                              sdp_noise=0.0)
    out = finetune(pretrained, small_pack, session, cfg)
    _assert_tensors_equal(out.tensors, finetuned.tensors)


def test_finetune_auxiliary_losses_change_training(pretrained, small_pack,
                                                   session, ft_config):
    cfg_on = dataclasses.replace(ft_config, epochs=1)
    cfg_off = dataclasses.replace(cfg_on, lambda_sa=0.0, lambda_rc=0.0)
    on = finetune(pretrained, small_pack, session, cfg_on)
    off = finetune(pretrained, small_pack, session, cfg_off)
    assert not np.array_equal(on.adapter(NEW_SID), off.adapter(NEW_SID))


def test_finetune_session_too_small(pretrained, small_pack, ft_config):
    ds = small_pack.subject(NEW_SID)
    tiny = session_subset(ds, 1)
    with pytest.raises(ValidationError, match="session too small"):
        finetune(pretrained, small_pack, tiny, ft_config)


# ---------------------------------------------------------------------------
# persistence


def test_checkpoint_roundtrip(finetuned, tmp_path):
    path = tmp_path / "ft.ckpt"
    save_checkpoint(finetuned, path)
    loaded = load_checkpoint(path)
    assert loaded.version == finetuned.version
    assert loaded.config_text == finetuned.config_text
    assert sorted(loaded.tensors) == sorted(finetuned.tensors)
    for name, arr in finetuned.tensors.items():
        saved = np.asarray(arr, dtype=np.float32)
        np.testing.assert_array_equal(loaded.tensors[name], saved,
                                      err_msg=name)
    assert loaded.config() == finetuned.config()


def test_save_bytes_independent_of_insertion_order(finetuned, tmp_path):
    shuffled = dict(sorted(finetuned.tensors.items(), reverse=True))
    a = tmp_path / "a.ckpt"
    b = tmp_path / "b.ckpt"
    save_checkpoint(finetuned, a)
    save_checkpoint(Checkpoint(shuffled, finetuned.config_text), b)
    assert a.read_bytes() == b.read_bytes()


def test_save_same_bytes_twice(finetuned, tmp_path):
    a = tmp_path / "a.ckpt"
    b = tmp_path / "b.ckpt"
    save_checkpoint(finetuned, a)
    save_checkpoint(finetuned, b)
    assert a.read_bytes() == b.read_bytes()


def _tiny_checkpoint_bytes(config_text=""):
    payload = np.arange(3, dtype="<f4")
    entry = (struct.pack("<H", 1) + b"a" + struct.pack("<B", 1) +
             struct.pack("<Q", 3) + payload.tobytes())
    cfg = config_text.encode()
    return (CKPT_MAGIC + struct.pack("<II", 1, 1) + entry +
            struct.pack("<I", len(cfg)) + cfg)


def test_load_minimal_handcrafted_file(tmp_path):
    path = tmp_path / "tiny.ckpt"
    path.write_bytes(_tiny_checkpoint_bytes("epochs = 1\n"))
    ckpt = load_checkpoint(path)
    np.testing.assert_array_equal(ckpt.tensors["a"], [0.0, 1.0, 2.0])
    assert ckpt.config_text == "epochs = 1\n"


def test_load_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOTDUALA" + _tiny_checkpoint_bytes()[8:])
    with pytest.raises(BadMagicError):
        load_checkpoint(path)


def test_load_rejects_future_version(tmp_path):
    blob = bytearray(_tiny_checkpoint_bytes())
    blob[8] = 99
    path = tmp_path / "v99.ckpt"
    path.write_bytes(bytes(blob))
    with pytest.raises(FormatVersionError):
        load_checkpoint(path)


def test_load_rejects_truncation(tmp_path):
    blob = _tiny_checkpoint_bytes()
    path = tmp_path / "cut.ckpt"
    path.write_bytes(blob[:-3])
    with pytest.raises(TruncatedFileError):
        load_checkpoint(path)


def test_load_rejects_trailing_bytes(tmp_path):
    path = tmp_path / "extra.ckpt"
    path.write_bytes(_tiny_checkpoint_bytes() + b"\x00")
    with pytest.raises(FormatError):
        load_checkpoint(path)


def test_load_rejects_duplicate_tensor(tmp_path):
    payload = np.zeros(2, dtype="<f4")
    entry = (struct.pack("<H", 1) + b"w" + struct.pack("<B", 1) +
             struct.pack("<Q", 2) + payload.tobytes())
    blob = (CKPT_MAGIC + struct.pack("<II", 1, 2) + entry + entry +
            struct.pack("<I", 0))
    path = tmp_path / "dup.ckpt"
    path.write_bytes(blob)
    with pytest.raises(DuplicateTensorError):
        load_checkpoint(path)


def test_load_missing_file(tmp_path):
    with pytest.raises(OSError):
        load_checkpoint(tmp_path / "nope.ckpt")


def test_write_trace_csv(finetuned, tmp_path):
    path = tmp_path / "trace.csv"
    write_trace(finetuned, path)
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    assert tuple(rows[0]) == TRACE_FIELDS
    assert len(rows) == len(finetuned.trace)
    assert rows[0]["target_kind"] == "mix"
    assert rows[-1]["target_kind"] == "soft"
    assert float(rows[3]["loss_total"]) == pytest.approx(
        finetuned.trace[3][2], rel=1e-4)
