"""On-disk formats: clouds, augmented records, masks, calibration, priors and GT"""
import json

import numpy as np
import pytest

from app.database.codecs import (AUGMENTED_DTYPE, atomic_write_json, read_augmented, read_calibration,
                                 read_cloud, read_gt, read_json, read_mask, read_pgm, read_priors,
                                 write_augmented, write_calibration, write_cloud, write_gt, write_mask,
                                 write_pgm, write_priors)
from app.errors import FormatError, RejectedInputError
from app.services.fp_augment import Box3D
from app.services.instance_painter import Instance3DPrior, InstanceMask, InstanceRecord
from app.services.projection import ring_rig
from app.services.scene_model import assemble_augmented


class TestCloud:
    def test_empty_file(self, tmp_path):
        (tmp_path / "empty.bin").write_bytes(b"")
        assert read_cloud(tmp_path / "empty.bin").shape == (0, 5)

    def test_four_field_rows_get_a_zero_offset(self, tmp_path):
        values = np.array([[1.0, 2.0, 3.0, 0.5], [4.0, 5.0, 6.0, 0.25]], dtype="<f4")
        (tmp_path / "c.bin").write_bytes(values.tobytes())
        cloud = read_cloud(tmp_path / "c.bin", field_count=4)
        np.testing.assert_array_equal(cloud[:, :4], values)
        np.testing.assert_array_equal(cloud[:, 4], 0.0)

    def test_ragged_file_reports_the_offset(self, tmp_path):
        (tmp_path / "c.bin").write_bytes(b"\x00" * 17)
        with pytest.raises(FormatError) as excinfo:
            read_cloud(tmp_path / "c.bin", field_count=4)
        assert excinfo.value.byte_offset == 16

    def test_non_finite_value(self, tmp_path):
        values = np.zeros((2, 5), dtype="<f4")
        values[1, 2] = np.nan
        (tmp_path / "c.bin").write_bytes(values.tobytes())
        with pytest.raises(FormatError) as excinfo:
            read_cloud(tmp_path / "c.bin")
        assert excinfo.value.byte_offset == 28

    def test_unsupported_field_count(self, tmp_path):
        with pytest.raises(RejectedInputError):
            read_cloud(tmp_path / "c.bin", field_count=3)

    def test_write_then_read(self, tmp_path, rng):
        cloud = rng.uniform(-10, 10, size=(50, 5)).astype("<f4").astype(np.float64)
        write_cloud(tmp_path / "c.bin", cloud)
        np.testing.assert_array_equal(read_cloud(tmp_path / "c.bin"), cloud)


class TestAugmented:
    def _cloud(self):
        pts = np.array([[1.0, 2.0, 3.0, 0.5], [4.0, 5.0, 6.0, 0.25], [0.0, 0.0, 0.0, 0.0]])
        return assemble_augmented(pts, [2, 2, 0], [[1.5, 2.5, 3.5], [1.5, 2.5, 3.5], [0, 0, 0]], [7, 7, 0])

    def test_records_are_thirty_six_bytes(self, tmp_path):
        write_augmented(self._cloud(), tmp_path / "a.bin")
        assert AUGMENTED_DTYPE.itemsize == 36
        assert (tmp_path / "a.bin").stat().st_size == 3 * 36

    def test_field_layout(self, tmp_path):
        write_augmented(self._cloud(), tmp_path / "a.bin")
        raw = np.frombuffer((tmp_path / "a.bin").read_bytes()[:36], dtype="<f4", count=8)
        np.testing.assert_array_equal(raw, [1.0, 2.0, 3.0, 0.5, 2.0, 1.5, 2.5, 3.5])
        assert np.frombuffer((tmp_path / "a.bin").read_bytes()[32:36], dtype="<i4")[0] == 7

    def test_read_back(self, tmp_path):
        cloud = self._cloud()
        write_augmented(cloud, tmp_path / "a.bin")
        again = read_augmented(tmp_path / "a.bin")
        np.testing.assert_array_equal(again.labels, [2, 2, 0])
        np.testing.assert_array_equal(again.instance_ids, [7, 7, 0])
        np.testing.assert_allclose(again.centers, cloud.centers)
        again.validate()

    def test_ragged_file(self, tmp_path):
        write_augmented(self._cloud(), tmp_path / "a.bin")
        blob = (tmp_path / "a.bin").read_bytes()
        (tmp_path / "a.bin").write_bytes(blob[:-1])
        with pytest.raises(FormatError) as excinfo:
            read_augmented(tmp_path / "a.bin")
        assert excinfo.value.byte_offset == 72


class TestPgm:
    def test_sixteen_bit_round_trip(self, tmp_path):
        raster = np.array([[0, 1, 300], [65535, 2, 0]], dtype=np.uint16)
        write_pgm(tmp_path / "m.pgm", raster)
        np.testing.assert_array_equal(read_pgm(tmp_path / "m.pgm"), raster)

    def test_header_comments_and_eight_bit_samples(self, tmp_path):
        (tmp_path / "m.pgm").write_bytes(b"P5\n# from a labeller\n2 2\n255\n" + bytes([0, 1, 2, 3]))
        np.testing.assert_array_equal(read_pgm(tmp_path / "m.pgm"), [[0, 1], [2, 3]])

    def test_bad_magic(self, tmp_path):
        (tmp_path / "m.pgm").write_bytes(b"P2\n2 2\n255\n0 1 2 3\n")
        with pytest.raises(FormatError) as excinfo:
            read_pgm(tmp_path / "m.pgm")
        assert excinfo.value.byte_offset == 0

    def test_truncated_body(self, tmp_path):
        header = b"P5\n2 2\n65535\n"
        (tmp_path / "m.pgm").write_bytes(header + b"\x00" * 7)
        with pytest.raises(FormatError) as excinfo:
            read_pgm(tmp_path / "m.pgm")
        assert excinfo.value.byte_offset == len(header) + 7

    def test_mask_with_sidecar(self, tmp_path):
        raster = np.zeros((4, 6), dtype=np.uint16)
        raster[1:3, 0:2] = 5
        mask = InstanceMask(2, raster, {5: InstanceRecord(5, 1, 0.75, touches_left=True)})
        write_mask(mask, tmp_path / "m.pgm", tmp_path / "m.json")
        again = read_mask(tmp_path / "m.pgm", tmp_path / "m.json", camera=2)
        np.testing.assert_array_equal(again.raster, raster)
        assert again.records[5] == mask.records[5]

    def test_mask_id_without_a_record(self, tmp_path):
        write_pgm(tmp_path / "m.pgm", np.full((2, 2), 3, dtype=np.uint16))
        (tmp_path / "m.json").write_text("{}")
        with pytest.raises(RejectedInputError):
            read_mask(tmp_path / "m.pgm", tmp_path / "m.json", camera=0)

    def test_malformed_sidecar(self, tmp_path):
        write_pgm(tmp_path / "m.pgm", np.zeros((2, 2), dtype=np.uint16))
        (tmp_path / "m.json").write_text('{"1": {"score": 0.5}}')
        with pytest.raises(FormatError):
            read_mask(tmp_path / "m.pgm", tmp_path / "m.json", camera=0)


class TestSidecars:
    def test_calibration_round_trip(self, tmp_path):
        rig = ring_rig()
        write_calibration(rig, tmp_path / "calib.json")
        again = read_calibration(tmp_path / "calib.json")
        assert again.camera_count == rig.camera_count
        for a, b in zip(rig.cameras, again.cameras):
            np.testing.assert_allclose(a.extrinsic.matrix, b.extrinsic.matrix)
            assert (a.fx, a.width, a.height) == (b.fx, b.width, b.height)

    def test_calibration_missing_field(self, tmp_path):
        (tmp_path / "calib.json").write_text(json.dumps({"cameras": []}))
        with pytest.raises(FormatError):
            read_calibration(tmp_path / "calib.json")

    def test_priors_round_trip(self, tmp_path):
        priors = [Instance3DPrior(3, 1, 0.8, [4, 1, 9], [1.0, 2.0, 0.5], evicted=[2]),
                  Instance3DPrior(4, 6, 0.4, [0], [0.0, -3.0, 0.2], low_confidence=True)]
        write_priors(priors, tmp_path / "priors.json")
        again = read_priors(tmp_path / "priors.json")
        assert [p.instance_id for p in again] == [3, 4]
        np.testing.assert_array_equal(again[0].members, [4, 1, 9])
        np.testing.assert_array_equal(again[0].evicted, [2])
        assert again[1].low_confidence and again[1].label == 6

    def test_gt_round_trip(self, tmp_path):
        boxes = [Box3D((10.0, 0.0, 0.85), (4.6, 1.9, 1.7), 0.3, 1)]
        write_gt(tmp_path / "gt", boxes, [0, -1, 0])
        again, point_gt = read_gt(tmp_path / "gt")
        assert again == boxes
        assert point_gt.tolist() == [0, -1, 0]

    def test_gt_index_out_of_range(self, tmp_path):
        write_gt(tmp_path / "gt", [], [0])
        with pytest.raises(FormatError):
            read_gt(tmp_path / "gt")

    def test_invalid_json(self, tmp_path):
        (tmp_path / "x.json").write_text("{not json")
        with pytest.raises(FormatError) as excinfo:
            read_json(tmp_path / "x.json", "config")
        assert "config" in str(excinfo.value)


class TestAtomicWrites:
    def test_no_temp_files_are_left_behind(self, tmp_path):
        atomic_write_json(tmp_path / "out" / "m.json", {"a": 1})
        atomic_write_json(tmp_path / "out" / "m.json", {"a": 2})
        assert [p.name for p in (tmp_path / "out").iterdir()] == ["m.json"]
        assert json.loads((tmp_path / "out" / "m.json").read_text()) == {"a": 2}
