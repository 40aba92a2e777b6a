import numpy as np
import pytest
from PIL import Image

from src.data_ingestion import ImageIngestion, load_image_dir, write_image_dir
from src.exceptions import ImageLoadError
from src.preprocessing.pixels import normalize_pixels


class TestImageIngestion:
    """Test suite for ImageIngestion class"""

    @pytest.fixture
    def image_ingestion(self):
        """Fixture to create ImageIngestion instance for tests"""
        return ImageIngestion()

    def test_import_dir_valid_folder(self, image_ingestion, tmp_path):
        """Test importing a folder of PNG files"""
        for name, value in (("b.png", 255), ("a.png", 0)):
            Image.fromarray(np.full((8, 8), value, dtype=np.uint8)).save(tmp_path / name)

        result = image_ingestion.import_dir(tmp_path, resolution=8, channels=1)
        assert len(result) == 2
        assert result.channel_count == 1
        assert result.resolution == 8
        # a.png sorts first
        assert float(result.data[0].max()) == -1.0
        assert float(result.data[1].min()) == 1.0

    def test_import_dir_bytewise_order(self, image_ingestion, tmp_path):
        """Uppercase names sort before lowercase ones"""
        Image.fromarray(np.full((8, 8), 10, dtype=np.uint8)).save(tmp_path / "a.png")
        Image.fromarray(np.full((8, 8), 200, dtype=np.uint8)).save(tmp_path / "B.png")

        files = image_ingestion.list_image_files(tmp_path)
        assert [f.name for f in files] == ["B.png", "a.png"]

    def test_import_dir_resizes_and_converts(self, image_ingestion, tmp_path):
        """Test that images are resized and converted to RGB"""
        Image.fromarray(np.zeros((16, 12), dtype=np.uint8)).save(tmp_path / "img.png")
        result = image_ingestion.import_dir(tmp_path, resolution=8, channels=3)
        assert tuple(result.data.shape) == (1, 3, 8, 8)

    def test_import_dir_nonexistent_folder(self, image_ingestion, tmp_path):
        """Test importing a non-existent folder"""
        with pytest.raises(ImageLoadError, match="not found"):
            image_ingestion.import_dir(tmp_path / "missing", resolution=8, channels=1)

    def test_import_dir_empty_folder(self, image_ingestion, tmp_path):
        """Test importing an empty folder"""
        with pytest.raises(ImageLoadError, match="zero images found"):
            image_ingestion.import_dir(tmp_path, resolution=8, channels=1)

    def test_import_dir_undecodable_file(self, image_ingestion, tmp_path):
        """The error names the broken file"""
        (tmp_path / "broken.png").write_bytes(b"not an image")
        with pytest.raises(ImageLoadError, match="broken.png"):
            image_ingestion.import_dir(tmp_path, resolution=8, channels=1)

    def test_write_then_load_is_exact(self, tmp_path):
        """PNG export keeps uint8-representable pixels exactly"""
        raw = np.random.default_rng(0).integers(0, 256, size=(3, 3, 8, 8), dtype=np.uint8)
        batch = normalize_pixels(raw)
        write_image_dir(batch, tmp_path / "out")

        loaded = load_image_dir(tmp_path / "out", resolution=8, channels=3)
        assert np.array_equal(loaded.data.numpy(), batch.data.numpy())
