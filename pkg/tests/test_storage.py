"""存储层：IDX、检查点、PGM 渲染、表格与 MNIST 仓库"""

import gzip
import struct

import numpy as np
import pytest
import yaml

from npkit.core.config import settings
from npkit.core.exceptions import (
    BadMagicError,
    CheckpointFormatError,
    DimensionOverflowError,
    DuplicateTensorError,
    IdxFormatError,
    LengthMismatchError,
    MissingTensorError,
    ShapeError,
    TruncatedPayloadError,
    VersionMismatchError,
)
from npkit.engine.graph import Graph
from npkit.engine.random import make_rng
from npkit.models.domain import Checkpoint, PointSet
from npkit.models.schemas import TrainConfig
from npkit.services.classifier_service import fit_classifier, predict_proba
from npkit.services.neural_process import NeuralProcess
from npkit.services.training_service import init_optimizer_state
from npkit.storage.checkpoint import (
    decode_checkpoint,
    decode_container,
    encode_checkpoint,
    encode_container,
    load_checkpoint,
    load_classifier,
    save_checkpoint,
    save_classifier,
)
from npkit.storage.idx import normalize_images, parse_idx, read_idx, serialize_idx, write_idx
from npkit.storage.render import (
    SENTINEL,
    SEPARATOR,
    completion_columns,
    context_image,
    decode_pgm,
    encode_pgm,
    render_grid,
    write_pgm,
)
from npkit.storage.repositories.mnist_repository import DESK_SUFFIX, MnistRepository
from npkit.storage.tables import read_tsv, write_manifest, write_tsv

IMAGES_HEADER = bytes([0, 0, 0x08, 3]) + struct.pack(">III", 2, 2, 2)


class TestIdx:
    def test_round_trip(self):
        images = make_rng(0).integers(0, 256, size=(3, 4, 5)).astype(np.uint8)
        parsed = parse_idx(serialize_idx(images), expect_ndim=3)
        np.testing.assert_array_equal(parsed, images)
        assert parsed.dtype == np.uint8

    def test_mnist_images_keep_their_shape(self):
        parsed = parse_idx(serialize_idx(np.zeros((5, 28, 28), dtype=np.uint8)), expect_ndim=3)
        assert parsed.shape == (5, 28, 28)
        labels = parse_idx(serialize_idx(np.arange(5, dtype=np.uint8)), expect_ndim=1)
        assert labels.shape == (5,)

    def test_mnist_header(self):
        data = serialize_idx(np.zeros((2, 28, 28), dtype=np.uint8))
        assert data[:4] == bytes([0, 0, 8, 3])
        assert struct.unpack(">III", data[4:16]) == (2, 28, 28)

    def test_float_payload_is_big_endian(self):
        values = np.array([1.5, -2.0], dtype=np.float32)
        data = serialize_idx(values)
        assert data[2] == 0x0D
        assert data[8:12] == struct.pack(">f", 1.5)
        np.testing.assert_array_equal(parse_idx(data), values)

    @pytest.mark.parametrize("data,error", [
        (b"", TruncatedPayloadError),
        (b"\x00\x00\x08", TruncatedPayloadError),
        (b"\x01\x00\x08\x01" + struct.pack(">I", 1) + b"\x00", BadMagicError),
        (b"\x00\x00\x07\x01" + struct.pack(">I", 1) + b"\x00", BadMagicError),
        (b"\x00\x00\x08\x00", BadMagicError),
        (b"\x00\x00\x08\x03" + struct.pack(">I", 2), TruncatedPayloadError),
        (IMAGES_HEADER + b"\x00" * 7, TruncatedPayloadError),
        (IMAGES_HEADER + b"\x00" * 9, IdxFormatError),
        (b"\x00\x00\x08\x03" + struct.pack(">III", 65536, 65536, 2), DimensionOverflowError),
        (b"\x00\x00\x0c\x01" + struct.pack(">I", 2) + b"\x00" * 6, TruncatedPayloadError),
    ])
    def test_corrupted(self, data, error):
        with pytest.raises(error):
            parse_idx(data)

    def test_unexpected_rank(self):
        with pytest.raises(BadMagicError):
            parse_idx(IMAGES_HEADER + b"\x00" * 8, expect_ndim=1)

    def test_gzip_file(self, tmp_path):
        labels = np.arange(10, dtype=np.uint8)
        path = tmp_path / "labels.gz"
        path.write_bytes(gzip.compress(serialize_idx(labels)))
        np.testing.assert_array_equal(read_idx(path, expect_ndim=1), labels)

    def test_unsupported_dtype(self):
        with pytest.raises(IdxFormatError):
            serialize_idx(np.zeros(3, dtype=np.int64))

    def test_normalize(self):
        np.testing.assert_allclose(normalize_images(np.array([0, 255], dtype=np.uint8)), [0.0, 1.0])


@pytest.fixture
def checkpoint(plain_model):
    train_config = TrainConfig(epochs=3, objective="np")
    return Checkpoint(
        model_config=plain_model.config,
        params=plain_model.params,
        train_config=train_config,
        seed=7,
        epoch=2,
        optimizer=init_optimizer_state(plain_model.params, train_config),
    )


class TestCheckpoint:
    def test_round_trip(self, checkpoint):
        restored = decode_checkpoint(encode_checkpoint(checkpoint))
        assert restored.model_config == checkpoint.model_config
        assert restored.train_config == checkpoint.train_config
        assert (restored.seed, restored.epoch) == (7, 2)
        for name, value in checkpoint.params.items():
            np.testing.assert_array_equal(restored.params[name], value)
            assert restored.params[name].dtype == value.dtype
        assert restored.optimizer.step == 0
        assert set(restored.optimizer.m) == set(checkpoint.params)

    def test_forward_pass_identity(self, checkpoint, plain_model, image, tmp_path):
        path = tmp_path / "model.npc"
        save_checkpoint(path, checkpoint)
        restored = load_checkpoint(path)
        model = NeuralProcess(restored.model_config, restored.params)
        context = PointSet.from_image(image, np.arange(0, 64, 3))
        a = plain_model.encode_np(Graph(dtype=np.float64, requires_grad=False), context).posterior
        b = model.encode_np(Graph(dtype=np.float64, requires_grad=False), context).posterior
        np.testing.assert_array_equal(a.mu.value, b.mu.value)
        np.testing.assert_array_equal(a.sigma.value, b.sigma.value)

    def test_without_optimizer(self, checkpoint):
        checkpoint.optimizer = None
        checkpoint.train_config = None
        restored = decode_checkpoint(encode_checkpoint(checkpoint))
        assert restored.optimizer is None and restored.train_config is None

    def test_bad_magic(self, checkpoint):
        data = encode_checkpoint(checkpoint)
        with pytest.raises(CheckpointFormatError):
            decode_checkpoint(b"XXXX" + data[4:])

    def test_version_mismatch(self, checkpoint):
        data = encode_checkpoint(checkpoint)
        with pytest.raises(VersionMismatchError):
            decode_checkpoint(data[:4] + struct.pack("<I", 99) + data[8:])

    def test_truncated(self, checkpoint):
        data = encode_checkpoint(checkpoint)
        with pytest.raises(LengthMismatchError):
            decode_checkpoint(data[:-1])

    def test_trailing_bytes(self, checkpoint):
        with pytest.raises(LengthMismatchError):
            decode_checkpoint(encode_checkpoint(checkpoint) + b"\x00")

    def test_duplicate_tensor(self):
        empty = encode_container({"kind": "test"}, {})
        block = encode_container({"kind": "test"}, {"a": np.ones(2, dtype=np.float32)})[len(empty):]
        data = empty[:-4] + struct.pack("<I", 2) + block + block
        with pytest.raises(DuplicateTensorError):
            decode_container(data)

    def test_missing_tensor(self, checkpoint):
        metadata, tensors = decode_container(encode_checkpoint(checkpoint))
        del tensors["g.4.W"]
        with pytest.raises(MissingTensorError):
            decode_checkpoint(encode_container(metadata, tensors))

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_checkpoint(tmp_path / "absent.npc")

    def test_classifier_round_trip(self, digits, tmp_path):
        features = digits.images.reshape(len(digits), -1)
        model = fit_classifier(features, digits.labels, 10, "image", seed=0, hidden=8, epochs=1, progress=False)
        save_classifier(tmp_path / "clf.npc", model)
        restored = load_classifier(tmp_path / "clf.npc")
        assert restored.labels == model.labels and restored.input_kind == "image"
        np.testing.assert_array_equal(predict_proba(restored, features), predict_proba(model, features))

    def test_classifier_kind_checked(self, checkpoint, tmp_path):
        path = tmp_path / "model.npc"
        save_checkpoint(path, checkpoint)
        with pytest.raises(CheckpointFormatError):
            load_classifier(path)


class TestRender:
    def _column(self, h=28, w=28, samples=3):
        rng = make_rng(0)
        context = np.full((h, w), np.nan)
        context[0, :5] = 1.0
        return context, rng.uniform(size=(samples, h, w)), np.zeros((h, w))

    def test_layout(self):
        context, means, std = self._column()
        raster = render_grid([context], [means], [std])
        assert raster.shape == (5 * 28 + 4, 28)
        assert raster.dtype == np.uint8
        # 分隔线
        assert np.all(raster[28] == SEPARATOR)

    def test_columns_separated(self):
        context, means, std = self._column()
        raster = render_grid([context, context], [means, means], [std, std])
        assert raster.shape == (144, 57)
        assert np.all(raster[:, 28] == SEPARATOR)

    def test_sentinel_and_black_std(self):
        context, means, std = self._column()
        raster = render_grid([context], [means], [std])
        assert np.all(raster[0, :5] == 255)
        assert np.all(raster[1:28, :] == SENTINEL)
        assert np.all(raster[4 * 29:, :] == 0)

    def test_std_scaling(self):
        context, means, _ = self._column()
        raster = render_grid([context], [means], [np.full((28, 28), 0.25)])
        assert np.all(raster[4 * 29:, :] == 128)

    def test_ground_truth_inset(self):
        context, means, std = self._column()
        truth = np.ones((28, 28))
        raster = render_grid([context], [means], [std], ground_truth=truth)
        assert np.all(raster[:14, 14:28] == 255)

    def test_deterministic_bytes_and_header(self, tmp_path):
        context, means, std = self._column()
        raster = render_grid([context], [means], [std])
        data = encode_pgm(raster)
        assert data.startswith(b"P5\n28 144\n255\n")
        assert data == encode_pgm(render_grid([context], [means], [std]))
        write_pgm(tmp_path / "grid.pgm", raster)
        np.testing.assert_array_equal(decode_pgm((tmp_path / "grid.pgm").read_bytes()), raster)

    def test_mismatched_inputs(self):
        context, means, std = self._column()
        with pytest.raises(ShapeError):
            render_grid([context], [means, means], [std])
        with pytest.raises(ShapeError):
            render_grid([context], [means[:, :10]], [std])
        with pytest.raises(ShapeError):
            render_grid([context], [means], [std], ground_truth=np.zeros((5, 5)))

    def test_completion_columns(self, image):
        context = PointSet.from_image(image, [0, 9])
        raster = completion_columns([context], [np.zeros((6, 8, 8))], [np.zeros((8, 8))], (8, 8), show=2)
        assert raster.shape == (4 * 8 + 3, 8)
        np.testing.assert_array_equal(context_image(context, (8, 8))[0, 0], image[0, 0])


class TestTables:
    def test_tsv(self, tmp_path):
        write_tsv(tmp_path / "t.tsv", ["a", "b"], [[1, "x"], [2, "y"]])
        assert (tmp_path / "t.tsv").read_text(encoding="utf-8").splitlines()[0] == "#a\tb"
        assert read_tsv(tmp_path / "t.tsv") == [["1", "x"], ["2", "y"]]

    def test_manifest(self, tmp_path):
        path = write_manifest(tmp_path, "train", 3, {"d_z": 8}, None, {"images": 10})
        manifest = yaml.safe_load(path.read_text(encoding="utf-8"))
        assert manifest["seed"] == 3
        assert manifest["images"] == 10
        assert manifest["build"].startswith("npkit-")


class TestMnistRepository:
    def _write(self, directory, name_images, name_labels, count):
        images = make_rng(0).integers(0, 256, size=(count, 4, 4)).astype(np.uint8)
        write_idx(directory / name_images, images)
        write_idx(directory / name_labels, (np.arange(count) % 10).astype(np.uint8))
        return images

    def test_load_split(self, tmp_path):
        images = self._write(tmp_path, "img", "lbl", 6)
        dataset = MnistRepository(str(tmp_path)).load_split("img", "lbl", limit=4)
        assert len(dataset) == 4
        np.testing.assert_allclose(dataset.images, images[:4] / 255.0)

    def test_desk_subset_preferred(self, tmp_path):
        self._write(tmp_path, settings.train_images_file, settings.train_labels_file, 6)
        self._write(tmp_path, settings.train_images_file + DESK_SUFFIX, settings.train_labels_file + DESK_SUFFIX, 3)
        repo = MnistRepository(str(tmp_path))
        assert len(repo.load_train(desk=True)) == 3
        assert len(repo.load_train()) == 6

    def test_missing_file(self, tmp_path):
        repo = MnistRepository(str(tmp_path))
        assert not repo.available()
        with pytest.raises(FileNotFoundError):
            repo.load_test()

    def test_mismatched_counts(self, tmp_path):
        write_idx(tmp_path / "img", np.zeros((3, 2, 2), dtype=np.uint8))
        write_idx(tmp_path / "lbl", np.zeros(2, dtype=np.uint8))
        with pytest.raises(ShapeError):
            MnistRepository(str(tmp_path)).load_split("img", "lbl")
