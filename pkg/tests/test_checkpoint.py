import json
import random
import threading

import pytest

from anomaly_scanner.checkpoint import (
    STATUS_NO_RESULT, STATUS_OK, STATUS_PERM_ERROR, CheckpointWriter, ScanRecord,
    dumps_record, load_scan_checkpoint, ordered_keys, read_ndjson,
)
from anomaly_scanner.errors import CheckpointError
from anomaly_scanner.llm_client import Usage
from anomaly_scanner.metrics import ConfidenceMetrics, ThresholdConfig

HEADER = {'kind': 'header', 'fingerprint': 'abc123', 'config': {'thresholds': {
    'entropy_max': 1.0, 'tail_max': 0.2, 'margin_min': 0.5}, 'token_range': [0, 4]}}


def ok_record(token_id):
    metrics = ConfidenceMetrics(entropy=0.1, tail_prob=0.0, margin=0.9, top_prob=0.95)
    return ScanRecord(token_id, STATUS_OK, Usage(5, 2, 1), metrics=metrics)


def write_checkpoint(path, ids):
    with CheckpointWriter(path, ids, header=HEADER, flush_every=1) as writer:
        for i in ids:
            writer.commit(i, ok_record(i).to_dict())
    return path


class TestScanRecord:
    def test_dict_shape(self):
        record = ScanRecord(7, STATUS_PERM_ERROR, Usage(requests=5), error_code=400)
        assert record.to_dict() == {'id': 7, 'status': 'perm_error', 'error_code': 400,
                                    'usage': {'prompt_tokens': 0, 'completion_tokens': 0, 'requests': 5}}
        assert ScanRecord.from_dict(record.to_dict()) == record

    def test_top_tokens_kept(self):
        record = ScanRecord(3, STATUS_OK, Usage(5, 2, 1), metrics=ok_record(3).metrics,
                            top_tokens=("close", " close", "\tClose"))
        assert record.to_dict()['top_tokens'] == ["close", " close", "\tClose"]
        assert ScanRecord.from_dict(record.to_dict()) == record
        assert 'top_tokens' not in ok_record(3).to_dict()

    def test_metrics_required_for_ok(self):
        with pytest.raises(ValueError):
            ScanRecord(1, STATUS_OK, Usage())
        with pytest.raises(ValueError):
            ScanRecord(1, STATUS_NO_RESULT, Usage(), metrics=ok_record(1).metrics)

    def test_canonical_line(self):
        assert dumps_record({'b': 1, 'a': "é"}) == '{"a":"\\u00e9","b":1}'


class TestCheckpointWriter:
    def test_out_of_order_commits_land_in_order(self, tmp_path):
        path = tmp_path / "scan.ndjson"
        ids = list(range(20))
        shuffled = ids[:]
        random.Random(5).shuffle(shuffled)

        with CheckpointWriter(path, ids, header=HEADER, flush_every=3) as writer:
            for i in shuffled:
                writer.commit(i, {'id': i})
            assert writer.complete

        rows = read_ndjson(path)
        assert rows[0] == HEADER
        assert [row['id'] for row in rows[1:]] == ids

    def test_concurrent_commits(self, tmp_path):
        path = tmp_path / "scan.ndjson"
        ids = list(range(400))
        writer = CheckpointWriter(path, ids, flush_every=7)

        def commit_slice(start):
            for i in ids[start::4]:
                writer.commit(i, {'id': i})

        threads = [threading.Thread(target=commit_slice, args=(s,)) for s in range(4)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        writer.close()

        assert [row['id'] for row in read_ndjson(path)] == ids

    def test_records_behind_gap_are_not_written(self, tmp_path):
        path = tmp_path / "scan.ndjson"
        writer = CheckpointWriter(path, [0, 1, 2], header=HEADER)
        writer.commit(0, {'id': 0})
        writer.commit(2, {'id': 2})
        assert not writer.complete
        writer.close()

        assert [row.get('id') for row in read_ndjson(path)] == [None, 0]

    def test_header_written_once(self, tmp_path):
        path = write_checkpoint(tmp_path / "scan.ndjson", [0, 1])
        with CheckpointWriter(path, [2], header=HEADER) as writer:
            writer.commit(2, ok_record(2).to_dict())

        rows = read_ndjson(path)
        assert sum(1 for row in rows if row.get('kind') == 'header') == 1
        assert len(rows) == 4

    def test_ordered_keys(self):
        assert ordered_keys([5, 1, 9, 3], done=[9]) == [5, 1, 3]


class TestLoadScanCheckpoint:
    def test_missing_file(self, tmp_path):
        assert load_scan_checkpoint(tmp_path / "absent.ndjson") is None

    def test_roundtrip(self, tmp_path):
        checkpoint = load_scan_checkpoint(write_checkpoint(tmp_path / "scan.ndjson", [0, 1, 2, 3]))

        assert checkpoint.completed_ids == [0, 1, 2, 3]
        assert checkpoint.fingerprint == "abc123"
        assert checkpoint.token_range == (0, 4)
        assert checkpoint.thresholds() == ThresholdConfig(tail_max=0.2)
        assert checkpoint.usage_total() == Usage(20, 8, 4)

    def test_thresholds_fall_back_to_default(self, tmp_path):
        path = tmp_path / "scan.ndjson"
        path.write_text(dumps_record({'kind': 'header', 'fingerprint': 'x'}) + "\n")
        assert load_scan_checkpoint(path).thresholds() == ThresholdConfig()

    def test_torn_tail_is_repaired(self, tmp_path):
        path = write_checkpoint(tmp_path / "scan.ndjson", [0, 1, 2])
        intact = path.read_bytes()
        path.write_bytes(intact + b'{"id":3,"sta')

        checkpoint = load_scan_checkpoint(path, repair=True)

        assert checkpoint.completed_ids == [0, 1, 2]
        assert path.read_bytes() == intact

    def test_torn_tail_without_repair_leaves_file(self, tmp_path):
        path = write_checkpoint(tmp_path / "scan.ndjson", [0])
        torn = path.read_bytes() + b'{"id":1'
        path.write_bytes(torn)

        assert load_scan_checkpoint(path).completed_ids == [0]
        assert path.read_bytes() == torn

    def test_duplicate_id(self, tmp_path):
        path = write_checkpoint(tmp_path / "scan.ndjson", [0, 1])
        with open(path, 'a') as f:
            f.write(dumps_record(ok_record(1).to_dict()) + "\n")

        with pytest.raises(CheckpointError, match="twice"):
            load_scan_checkpoint(path)

    def test_missing_header(self, tmp_path):
        path = tmp_path / "scan.ndjson"
        path.write_text(json.dumps({'id': 0}) + "\n")
        with pytest.raises(CheckpointError, match="header"):
            load_scan_checkpoint(path)

    def test_corrupt_middle_line(self, tmp_path):
        path = tmp_path / "scan.ndjson"
        path.write_text(dumps_record(HEADER) + "\nnot json\n")
        with pytest.raises(CheckpointError, match="line 2"):
            load_scan_checkpoint(path)

    def test_fingerprint_mismatch(self, tmp_path):
        checkpoint = load_scan_checkpoint(write_checkpoint(tmp_path / "scan.ndjson", [0]))
        checkpoint.verify("abc123")
        with pytest.raises(CheckpointError, match="refusing to resume"):
            checkpoint.verify("other")
