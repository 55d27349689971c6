import numpy as np
import pytest

from fmtforge.data import TrainingDataset, collect_store
from fmtforge.model import FmtConfig
from fmtforge.sim import TaskSpec
from fmtforge.store import Episode, EpisodeStore, StoreFormatError, StreamSpec
from conftest import toy_config


def tiny_store(n_eps=2, rows=5):
    rng = np.random.default_rng(0)
    specs = [StreamSpec("a", "f32le", (3,), 10.0), StreamSpec("b", "f64le", (2, 2), 100.0)]
    eps = []
    for i in range(n_eps):
        eps.append(
            Episode(
                f"ep{i:03d}",
                seed=i,
                meta={"success": bool(i % 2)},
                streams={
                    "a": (np.arange(rows) * 0.1, rng.normal(size=(rows, 3)).astype(np.float32)),
                    "b": (np.arange(rows * 2) * 0.01, rng.normal(size=(rows * 2, 2, 2))),
                },
            )
        )
    return EpisodeStore(specs, eps, meta={"task": {"name": "tiny"}})


class TestStoreRoundTrip:
    def test_bit_exact_round_trip(self, tmp_path):
        store = tiny_store()
        d1, d2 = tmp_path / "one", tmp_path / "two"
        store.save(d1)
        EpisodeStore.load(d1).save(d2)
        files1 = sorted(p.name for p in d1.iterdir())
        files2 = sorted(p.name for p in d2.iterdir())
        assert files1 == files2
        for name in files1:
            assert (d1 / name).read_bytes() == (d2 / name).read_bytes(), name

    def test_manifest_lists_episodes(self, tmp_path):
        store = tiny_store(n_eps=4)
        store.save(tmp_path / "s")
        loaded = EpisodeStore.load(tmp_path / "s")
        assert len(loaded) == 4
        assert loaded.episodes[1].meta["success"] is True

    def test_size_mismatch_detected(self, tmp_path):
        store = tiny_store()
        store.save(tmp_path / "s")
        blob = tmp_path / "s" / "ep000__a.bin"
        blob.write_bytes(blob.read_bytes()[:-4])
        with pytest.raises(StoreFormatError, match="bytes"):
            EpisodeStore.load(tmp_path / "s")

    def test_undeclared_file_detected(self, tmp_path):
        store = tiny_store()
        store.save(tmp_path / "s")
        (tmp_path / "s" / "rogue__x.bin").write_bytes(b"1234")
        with pytest.raises(StoreFormatError, match="not declared"):
            EpisodeStore.load(tmp_path / "s")

    def test_unsorted_timestamps_rejected(self, tmp_path):
        specs = [StreamSpec("a", "f32le", (1,), 1.0)]
        ep = Episode("ep000", 0, {}, {"a": (np.array([0.0, 0.0]), np.zeros((2, 1), np.float32))})
        with pytest.raises(StoreFormatError, match="increasing"):
            EpisodeStore(specs, [ep]).save(tmp_path / "s")

    def test_stream_mismatch_rejected(self):
        specs = [StreamSpec("a", "f32le", (1,), 1.0)]
        ep = Episode("ep000", 0, {}, {"other": (np.array([0.0]), np.zeros((1, 1), np.float32))})
        with pytest.raises(StoreFormatError, match="streams"):
            EpisodeStore(specs, [ep])

    def test_bad_dtype_rejected(self):
        with pytest.raises(StoreFormatError, match="dtype"):
            StreamSpec("a", "u8", (1,), 1.0)


class TestCollect:
    @pytest.fixture(scope="class")
    def small_store(self, tmp_path_factory):
        spec = TaskSpec(task="peg_insert")
        store = collect_store(spec, demo_count=6, seed=99)
        d = tmp_path_factory.mktemp("corpus")
        store.save(d / "peg")
        return d / "peg"

    def test_round_trips_bit_exact(self, small_store, tmp_path):
        loaded = EpisodeStore.load(small_store)
        loaded.save(tmp_path / "again")
        for p in sorted(small_store.iterdir()):
            assert (tmp_path / "again" / p.name).read_bytes() == p.read_bytes(), p.name

    def test_compensated_free_space_mean_near_zero(self, small_store):
        loaded = EpisodeStore.load(small_store)
        residuals = []
        for ep in loaded.episodes:
            ts, comp = loaded.stream(ep, "wrench_comp")
            # free-space = first idle frames of every episode (no contact)
            mask = ts < 0.1
            residuals.append(np.abs(comp[mask, :3]).mean())
        assert np.mean(residuals) < 0.05

    def test_actions_compose_back_to_final_pose(self, small_store):
        from fmtforge import alignment as al

        loaded = EpisodeStore.load(small_store)
        ep = loaded.episodes[0]
        _, poses = loaded.stream(ep, "poses")
        _, actions = loaded.stream(ep, "actions")
        pose = poses[0]
        for a in actions:
            pose = al.compose_delta(pose, a)
        np.testing.assert_allclose(pose[:3], poses[-1][:3], atol=1e-6)

    def test_demo_count_in_manifest(self, small_store):
        loaded = EpisodeStore.load(small_store)
        assert len(loaded) == loaded.meta["collect"]["demo_count"] == 6


class TestTrainingDataset:
    @pytest.fixture(scope="class")
    def store(self):
        return collect_store(TaskSpec(task="peg_insert"), demo_count=4, seed=100)

    def test_shapes_and_counts(self, store):
        cfg = toy_config(image_hw=32, patch=8, action_dim=6)
        ds = TrainingDataset(store, cfg)
        assert len(ds) > 0
        images, ft, actions = ds.gather(np.arange(3))
        assert images.shape == (3, 2, 2, 32, 32)
        assert ft.shape == (3, cfg.ft_raw_len, 6)
        assert actions.shape == (3, cfg.horizon, 6)
        assert np.all(np.abs(actions) <= 1.0 + 1e-9)

    def test_rgb_only_reads_zero_ft_bytes(self, tmp_path):
        store = collect_store(TaskSpec(task="peg_insert"), demo_count=2, seed=101)
        cfg = toy_config(image_hw=32, patch=8, use_ft=False, action_dim=6)
        store.save(tmp_path / "s")
        loaded = EpisodeStore.load(tmp_path / "s", lazy=True)
        ds = TrainingDataset(loaded, cfg)
        assert loaded.bytes_read["wrench_comp"] == 0
        assert loaded.bytes_read["wrench_raw"] == 0
        assert loaded.bytes_read["images"] > 0
        images, ft, actions = ds.gather(np.arange(2))
        assert ft is None

    def test_decimation_smooths_wrench_blocks(self, store):
        cfg = toy_config(image_hw=32, patch=8, action_dim=6)
        full = TrainingDataset(store, cfg, ft_rate=200)
        slow = TrainingDataset(store, cfg, ft_rate=30)
        # high-frequency content: mean absolute successive difference of fz
        def roughness(ds):
            blocks = ds._ft_blocks
            return np.abs(np.diff(blocks[..., 2], axis=1)).mean()

        assert roughness(slow) < 0.5 * roughness(full)
