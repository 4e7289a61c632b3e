import hashlib
import struct

import numpy as np
import pytest

from conceptmil.conceptprior import ConceptSet, compute_prior
from conceptmil.dataio import (
    HEADER,
    BadMagicError,
    CheckpointError,
    DimensionOverflowError,
    MatrixFormatError,
    SynthConfig,
    TruncatedPayloadError,
    UnsupportedVersionError,
    compute_priors,
    generate_synthetic,
    load_checkpoint,
    load_concept_set,
    load_manifest,
    read_matrix,
    save_checkpoint,
    tree_digest,
    write_matrix,
    write_synthetic,
)
from conceptmil.model import DualMIL, ModelConfig


def test_small_round_trip_is_bit_identical(tmp_path):
    a = np.array([[1.5, -2.0, np.pi], [0.0, 1e-300, -7.25]])
    write_matrix(tmp_path / "a.geko", a)
    b = read_matrix(tmp_path / "a.geko")
    assert b.dtype == np.float64 and b.tobytes() == a.tobytes()


def test_f32_round_trip_and_header_layout(tmp_path):
    a = np.arange(6, dtype=np.float32).reshape(3, 2)
    path = tmp_path / "a.geko"
    write_matrix(path, a, dtype="f32")
    raw = path.read_bytes()
    assert raw[:4] == b"GEKO"
    assert struct.unpack_from("<HB", raw, 4) == (1, 1)
    assert struct.unpack_from("<QQ", raw, 8) == (3, 2)
    assert len(raw) == HEADER.size + 6 * 4
    assert read_matrix(path).tobytes() == a.tobytes()


def test_million_entry_hash_round_trip(tmp_path):
    a = np.random.default_rng(0).standard_normal((1000, 1000))
    write_matrix(tmp_path / "big.geko", a)
    b = read_matrix(tmp_path / "big.geko")
    assert hashlib.sha256(a.tobytes()).hexdigest() == hashlib.sha256(b.tobytes()).hexdigest()


def test_format_errors_are_distinct(tmp_path):
    good = tmp_path / "g.geko"
    write_matrix(good, np.ones((2, 3)))
    raw = good.read_bytes()

    (tmp_path / "magic.geko").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(BadMagicError):
        read_matrix(tmp_path / "magic.geko")

    (tmp_path / "short.geko").write_bytes(raw[:-8])
    with pytest.raises(TruncatedPayloadError):
        read_matrix(tmp_path / "short.geko")

    (tmp_path / "huge.geko").write_bytes(HEADER.pack(b"GEKO", 1, 2, 2**21, 2**20))
    with pytest.raises(DimensionOverflowError):
        read_matrix(tmp_path / "huge.geko")

    (tmp_path / "v9.geko").write_bytes(HEADER.pack(b"GEKO", 9, 2, 2, 3) + raw[HEADER.size:])
    with pytest.raises(UnsupportedVersionError):
        read_matrix(tmp_path / "v9.geko")

    (tmp_path / "tail.geko").write_bytes(raw + b"\0")
    with pytest.raises(MatrixFormatError):
        read_matrix(tmp_path / "tail.geko")

    kinds = {BadMagicError, TruncatedPayloadError, DimensionOverflowError, UnsupportedVersionError}
    assert len({k.code for k in kinds}) == len(kinds)


def test_noise_free_construction_plants_top1():
    cfg = SynthConfig(n_slides_per_class=5, n_patches=8, dim=16, concepts_per_class=1,
                      salient_fraction=1.0, noise=0.0, concept_noise=0.0, seed=2)
    ds = generate_synthetic(cfg)
    for bag in ds.bags:
        M = compute_prior(bag, ds.concepts).matrix
        assert np.all(np.argmax(M, axis=1) == bag.label)


def test_class_concepts_have_higher_mean_activation():
    # measured on the planted salient patches, where the class signal lives
    ds = generate_synthetic(SynthConfig(n_slides_per_class=20, signal=2.0, noise=0.3, seed=3))
    part = ds.concepts.class_partition
    for bag in ds.bags:
        M = compute_prior(bag, ds.concepts).matrix[ds.salient[bag.slide_id]]
        own = M[:, part[bag.label]].mean()
        other = np.mean([M[:, part[l]].mean() for l in part if l != bag.label])
        assert own - other > 0.1


def test_generator_invariants():
    cfg = SynthConfig(n_classes=3, n_slides_per_class=7, n_patches=12, dim=24, concepts_per_class=4, seed=4)
    ds = generate_synthetic(cfg)
    labels = [b.label for b in ds.bags]
    assert [labels.count(l) for l in range(3)] == [7, 7, 7]
    for bag in ds.bags:
        assert np.abs(np.linalg.norm(bag.features, axis=1) - 1).max() < 1e-9
        assert len(ds.salient[bag.slide_id]) == 3
    d = ds.directions
    cos = d @ d.T
    assert np.abs(cos[~np.eye(len(d), dtype=bool)]).max() < 0.3


def test_generator_errors():
    with pytest.raises(ValueError):
        SynthConfig(n_patches=4, salient_fraction=0.1)
    with pytest.raises(ValueError, match="could not place"):
        generate_synthetic(SynthConfig(dim=2, concepts_per_class=10, n_slides_per_class=1))


def test_same_seed_gives_identical_tree(tmp_path):
    cfg = SynthConfig(n_slides_per_class=4, n_patches=8, dim=8, concepts_per_class=2, aux_dim=5, seed=5)
    write_synthetic(generate_synthetic(cfg), tmp_path / "a")
    write_synthetic(generate_synthetic(cfg), tmp_path / "b")
    assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")
    assert (tmp_path / "a" / "manifest.json").read_bytes() == (tmp_path / "b" / "manifest.json").read_bytes()


def test_manifest_and_priors_round_trip(tmp_path):
    cfg = SynthConfig(n_slides_per_class=3, n_patches=6, dim=8, concepts_per_class=2, seed=6)
    ds = generate_synthetic(cfg)
    write_synthetic(ds, tmp_path)
    m = load_manifest(tmp_path / "manifest.json")
    assert (m.D, m.C, len(m.slides)) == (8, 4, 6)
    concepts = load_concept_set(tmp_path / m.concepts_path)
    assert concepts.embeddings.tobytes() == ds.concepts.embeddings.tobytes()
    paths = compute_priors(m, concepts, tmp_path / "priors")
    for path, bag in zip(paths, ds.bags):
        assert read_matrix(path).tobytes() == compute_prior(bag, concepts).matrix.tobytes()


def test_manifest_dimension_check(tmp_path):
    write_synthetic(generate_synthetic(SynthConfig(n_slides_per_class=2, n_patches=4, dim=8, concepts_per_class=2)), tmp_path)
    write_matrix(tmp_path / "features" / "c0_s0000.geko", np.ones((4, 5)))
    with pytest.raises(ValueError, match="c0_s0000"):
        load_manifest(tmp_path / "manifest.json")


def _small_model(C=20, seed=0):
    return DualMIL(ModelConfig(in_dim=8, n_concepts=C, hidden=6, attn_hidden=5, k=3, n_samples=10,
                               mixer_layers=2, mixer_hidden=4, gate_hidden=4, seed=seed))


def test_checkpoint_round_trip_is_bitwise(tmp_path):
    model = _small_model()
    rng = np.random.default_rng(7)
    F, M = rng.standard_normal((9, 8)), rng.uniform(-1, 1, (9, 20))
    before = model.encode(F, M, mode="eval")
    save_checkpoint(tmp_path / "m.ckpt", model, {"note": "x"})
    loaded, meta = load_checkpoint(tmp_path / "m.ckpt")
    after = loaded.encode(F, M, mode="eval")
    assert meta["extra"] == {"note": "x"}
    assert before.F_wsi.data.tobytes() == after.F_wsi.data.tobytes()
    assert before.M_wsi.data.tobytes() == after.M_wsi.data.tobytes()
    save_checkpoint(tmp_path / "m2.ckpt", loaded, {"note": "x"})
    assert (tmp_path / "m.ckpt").read_bytes() == (tmp_path / "m2.ckpt").read_bytes()


def test_checkpoint_dimension_mismatch(tmp_path):
    save_checkpoint(tmp_path / "m.ckpt", _small_model(C=20))
    thirty = ConceptSet([f"c{i}" for i in range(30)], np.eye(30)[:, :8], {0: list(range(15)), 1: list(range(15, 30))})
    with pytest.raises(CheckpointError, match="C=20"):
        load_checkpoint(tmp_path / "m.ckpt", concepts=thirty)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "m.ckpt", in_dim=9)
