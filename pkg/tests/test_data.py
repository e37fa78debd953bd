"""Clip store round-trips, manifests, and split protocols."""

import numpy as np
import pytest

from csimae import data as D


def make_clip(i, labels=None, rng=None):
    rng = rng or np.random.default_rng(i)
    return D.CsiClip(
        data=rng.standard_normal((600, 90)).astype(np.float32),
        labels=labels or {"class": f"c{i % 3}", "environment": f"env{i % 2}"},
        provenance=D.Provenance(f"src{i:04d}", 0, 0, 0, 0),
    )


def test_store_round_trip_is_bit_identical(tmp_path):
    clips = [make_clip(i) for i in range(3)]
    manifest = D.write_clip_store(clips, tmp_path)
    assert len(manifest.entries) == 3
    back = D.load_clips(tmp_path, manifest, [c.clip_id for c in clips])
    for orig, rt in zip(clips, back):
        assert orig.data.tobytes() == rt.data.tobytes()
        assert orig.labels == rt.labels
        assert orig.provenance == rt.provenance


def test_empty_store_rejected(tmp_path):
    with pytest.raises(D.DataError, match="empty dataset"):
        D.write_clip_store([], tmp_path)


def test_bad_shape_rejected_with_clip_id(tmp_path):
    clip = make_clip(5)
    clip.data = clip.data[:10]
    with pytest.raises(D.DataError, match="src0005"):
        D.write_clip_store([clip], tmp_path)


def test_parallel_writers_produce_identical_store(tmp_path):
    clips = [make_clip(i) for i in range(1000)]
    m1 = D.write_clip_store(clips, tmp_path / "w1", n_workers=1)
    m8 = D.write_clip_store(clips, tmp_path / "w8", n_workers=8)
    assert m1.to_json() == m8.to_json()
    for shard in sorted(p.name for p in (tmp_path / "w1").glob("shard-*.bin")):
        assert (tmp_path / "w1" / shard).read_bytes() == (tmp_path / "w8" / shard).read_bytes()


def test_manifest_save_load_round_trip(tmp_path):
    manifest = D.write_clip_store([make_clip(i) for i in range(7)], tmp_path)
    loaded = D.DatasetManifest.load(tmp_path)
    assert loaded.to_json() == manifest.to_json()


def test_duplicate_clip_ids_rejected(tmp_path):
    clips = [make_clip(1), make_clip(1)]
    with pytest.raises(D.DataError, match="duplicate"):
        D.write_clip_store(clips, tmp_path)


def _manifest_with_domains(counts):
    entries = []
    i = 0
    for env, n in counts.items():
        for _ in range(n):
            entries.append(
                D.ManifestEntry(
                    clip_id=f"id{i:04d}",
                    shard_path="shard-0000.bin",
                    byte_offset=0,
                    labels={"class": f"c{i % 4}", "environment": env},
                    provenance=D.Provenance(f"s{i}", 0, 0, 0, 0),
                )
            )
            i += 1
    return D.DatasetManifest(entries)


def test_leave_one_domain_out_partitions_by_label():
    manifest = _manifest_with_domains({"A": 10, "B": 12, "C": 9})
    spec = D.SplitSpec("leave_one_domain_out", "environment", "C", seed=3)
    train, test = D.make_split(manifest, spec)
    assert len(test) == 9 and len(train) == 22
    assert {manifest.by_id(c).labels["environment"] for c in test} == {"C"}
    assert "C" not in {manifest.by_id(c).labels["environment"] for c in train}
    assert sorted(train + test) == sorted(manifest.ids())


def test_single_domain_rejected():
    manifest = _manifest_with_domains({"A": 10})
    with pytest.raises(D.SplitError, match="no second domain"):
        D.make_split(manifest, D.SplitSpec("leave_one_domain_out", "environment", "A"))


def test_absent_held_out_value_rejected():
    manifest = _manifest_with_domains({"A": 5, "B": 5})
    with pytest.raises(D.SplitError, match="absent"):
        D.make_split(manifest, D.SplitSpec("leave_one_domain_out", "environment", "Z"))


def test_in_domain_8020_ratio_and_determinism():
    manifest = _manifest_with_domains({"A": 50, "B": 50})
    spec = D.SplitSpec("in_domain_8020", seed=7)
    train, test = D.make_split(manifest, spec)
    assert len(train) == 80 and len(test) == 20
    train2, test2 = D.make_split(manifest, spec)
    assert train == train2 and test == test2
    # different seed moves the sample
    train3, _ = D.make_split(manifest, D.SplitSpec("in_domain_8020", seed=8))
    assert train3 != train


def test_in_domain_8020_stratifies_by_class():
    manifest = _manifest_with_domains({"A": 100})
    train, test = D.make_split(manifest, D.SplitSpec("in_domain_8020", seed=1))
    for cls in ("c0", "c1", "c2", "c3"):
        n_cls = sum(1 for e in manifest.entries if e.labels["class"] == cls)
        n_test = sum(1 for c in test if manifest.by_id(c).labels["class"] == cls)
        assert abs(n_test - 0.2 * n_cls) <= 1


def test_split_is_total_and_disjoint_partition():
    manifest = _manifest_with_domains({"A": 33, "B": 21})
    for spec in (
        D.SplitSpec("in_domain_8020", seed=5),
        D.SplitSpec("leave_one_domain_out", "environment", "B"),
    ):
        train, test = D.make_split(manifest, spec)
        assert set(train) | set(test) == set(manifest.ids())
        assert set(train) & set(test) == set()


def test_recording_file_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    data = rng.standard_normal((40, 3, 1, 30)) + 1j * rng.standard_normal((40, 3, 1, 30))
    data[7] = complex(np.nan, np.nan)  # missing packet
    rec = D.ChannelRecording(
        data=data,
        sampling_rate=100.0,
        center_frequency=5e9,
        bandwidth=20e6,
        n_recv=1,
        n_apr=3,
        labels={"class": "c1", "environment": "env0"},
        source_id="rec-rt",
    )
    path = D.save_recording(rec, tmp_path / "r.csir")
    back = D.load_recording(path)
    finite = ~np.isnan(data)
    assert np.array_equal(back.data[finite], data[finite])
    assert np.isnan(back.data[7]).all()
    assert back.labels == rec.labels and back.source_id == "rec-rt"
    assert back.sampling_rate == 100.0 and back.bandwidth == 20e6


def test_recording_invariants_enforced():
    rec = D.ChannelRecording(
        data=np.zeros((10, 4, 1, 30), dtype=complex),
        sampling_rate=100.0,
        center_frequency=5e9,
        bandwidth=20e6,
        n_recv=1,
        n_apr=3,
    )
    with pytest.raises(D.DataError, match="n_rx"):
        rec.validate()
    rec = D.ChannelRecording(
        data=np.zeros((10, 3, 1, 30), dtype=complex),
        sampling_rate=100.0,
        center_frequency=5e9,
        bandwidth=33e6,
        n_recv=1,
        n_apr=3,
    )
    with pytest.raises(D.DataError, match="bandwidth"):
        rec.validate()
