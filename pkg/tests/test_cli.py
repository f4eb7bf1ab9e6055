import json
import subprocess
import sys
from pathlib import Path

import click
import pytest
from click.testing import CliRunner

from anomaly_scanner import cli
from anomaly_scanner.cli import main, parse_range
from anomaly_scanner.mock_llm import serve
from anomaly_scanner.vocab import Vocabulary, write_vocabulary

from conftest import PLANTED, planted_overrides, profile_for, word_ranks

REPO_ROOT = Path(__file__).resolve().parents[1]

# Error400 plants would make the CLI wait through real backoff delays
CLI_PLANTS = {i: plant for i, plant in PLANTED.items() if plant[1] != 'perm_error'}


@pytest.fixture(autouse=True)
def quiet_logging(monkeypatch):
    monkeypatch.setattr(cli, "configure_logging", lambda level, log_file=None: None)


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def fast_config(tmp_path):
    path = tmp_path / "settings.yaml"
    path.write_text("rate_per_minute: 100000\nconcurrency: 4\nflush_every: 50\n")
    return path


@pytest.fixture
def words_file(tmp_path):
    return write_vocabulary(word_ranks(1000), tmp_path / "words.tiktoken")


@pytest.fixture
def planted_server():
    vocab = Vocabulary.from_ranks(word_ranks(1000))
    with serve(profile_for(planted_overrides(vocab, CLI_PLANTS)), port=0) as handle:
        yield handle


def invoke(runner, *args):
    return runner.invoke(main, [str(a) for a in args], catch_exceptions=False)


class TestParseRange:
    def test_parse(self):
        assert parse_range("10..20") == (10, 20)
        assert parse_range(None) is None

    @pytest.mark.parametrize("value", ["10-20", "20..10", "a..b", "-1..5"])
    def test_invalid(self, value):
        with pytest.raises(click.BadParameter):
            parse_range(value)


class TestPipelineCommands:
    def test_scan_confirm_report(self, runner, tmp_path, words_file, planted_server, fast_config):
        scan_path = tmp_path / "scan.ndjson"
        confirm_path = tmp_path / "confirm.ndjson"
        json_path = tmp_path / "report.json"
        csv_path = tmp_path / "report.csv"
        common = ['--endpoint', planted_server.url, '--config', fast_config]

        result = invoke(runner, *common, 'scan', '--vocab', words_file, '--checkpoint', scan_path)
        assert result.exit_code == 0, result.output
        assert "scanned 1000" in result.output
        assert "candidates 20" in result.output

        result = invoke(runner, *common, 'confirm', '--vocab', words_file,
                        '--scan-checkpoint', scan_path, '--checkpoint', confirm_path)
        assert result.exit_code == 0, result.output
        assert "major 8" in result.output

        result = invoke(runner, *common, 'report', '--vocab', words_file, '--scan-checkpoint', scan_path,
                        '--confirm-checkpoint', confirm_path, '--json', json_path, '--csv', csv_path)
        assert result.exit_code == 0, result.output

        summary = json.loads(json_path.read_text())['summary']
        assert (summary['major'], summary['minor'], summary['false_positive'], summary['no_result']) == (8, 4, 5, 3)
        assert len(csv_path.read_text().splitlines()) == 21

        server = planted_server.ledger()
        ledger = json.loads(json_path.read_text())['ledger']['total']
        assert ledger['requests'] == server['request_count']
        assert ledger['prompt_tokens'] == server['prompt_tokens']

    def test_rescan_resumes_and_range_limits(self, runner, tmp_path, words_file, planted_server, fast_config):
        scan_path = tmp_path / "scan.ndjson"
        args = ['--endpoint', planted_server.url, '--config', fast_config,
                'scan', '--vocab', words_file, '--checkpoint', scan_path, '--range', '0..40']

        assert "scanned 40" in invoke(runner, *args).output
        before = scan_path.read_bytes()
        assert "scanned 40" in invoke(runner, *args).output
        assert scan_path.read_bytes() == before

    def test_changed_thresholds_refuse_resume(self, runner, tmp_path, words_file, planted_server, fast_config):
        scan_path = tmp_path / "scan.ndjson"
        invoke(runner, '--endpoint', planted_server.url, '--config', fast_config,
               'scan', '--vocab', words_file, '--checkpoint', scan_path, '--range', '0..10')

        strict = tmp_path / "strict.yaml"
        strict.write_text(fast_config.read_text() + "tail_max: 0.05\n")
        result = invoke(runner, '--endpoint', planted_server.url, '--config', strict,
                        'scan', '--vocab', words_file, '--checkpoint', scan_path, '--range', '0..10')
        assert result.exit_code == 1
        assert "refusing to resume" in result.output

    def test_confirm_needs_complete_scan(self, runner, tmp_path, words_file, planted_server, fast_config):
        scan_path = tmp_path / "scan.ndjson"
        invoke(runner, '--endpoint', planted_server.url, '--config', fast_config,
               'scan', '--vocab', words_file, '--checkpoint', scan_path, '--range', '0..50')
        lines = scan_path.read_text().splitlines(keepends=True)
        scan_path.write_text("".join(lines[:-5]))

        result = invoke(runner, '--endpoint', planted_server.url, 'confirm', '--vocab', words_file,
                        '--scan-checkpoint', scan_path, '--checkpoint', tmp_path / "confirm.ndjson")
        assert result.exit_code == 1
        assert "incomplete" in result.output


class TestGuardCommand:
    def write_ids(self, tmp_path, *ids):
        path = tmp_path / "ids.txt"
        path.write_text("".join(f"{i}\n" for i in ids))
        return path

    def test_perturbs_stdin(self, runner, tmp_path, guard_vocab_file):
        result = runner.invoke(main, ['guard', '--vocab', str(guard_vocab_file),
                                      '--blocklist', str(self.write_ids(tmp_path, 258))], input="abc.abc")
        assert result.exit_code == 0
        assert result.output == " abc. abc"

    def test_from_report(self, runner, tmp_path, guard_vocab_file):
        report = tmp_path / "report.json"
        report.write_text(json.dumps({'records': [{'id': 258, 'classification': 'major'}]}))
        result = runner.invoke(main, ['guard', '--vocab', str(guard_vocab_file), '--blocklist', str(report)],
                               input="xabc")
        assert result.output == "x abc"

    def test_crlf_passes_through(self, runner, tmp_path, guard_vocab_file):
        result = runner.invoke(main, ['guard', '--vocab', str(guard_vocab_file),
                                      '--blocklist', str(self.write_ids(tmp_path, 258))], input=b"xyz\r\nabc\r\n")
        assert result.exit_code == 0
        assert result.stdout_bytes == b"xyz\r\n abc\r\n"

    def test_unchanged_text_is_byte_identical(self, runner, tmp_path, guard_vocab_file):
        text = "café\r\n\tx\r\r\n".encode("utf-8")
        result = runner.invoke(main, ['guard', '--vocab', str(guard_vocab_file),
                                      '--blocklist', str(self.write_ids(tmp_path, 258))], input=text)
        assert result.exit_code == 0
        assert result.stdout_bytes == text

    def test_invalid_utf8_input(self, runner, tmp_path, guard_vocab_file):
        result = runner.invoke(main, ['guard', '--vocab', str(guard_vocab_file),
                                      '--blocklist', str(self.write_ids(tmp_path, 258))], input=b"ab\xff")
        assert result.exit_code == 1
        assert "not valid UTF-8" in result.output

    def test_crlf_through_real_stdin(self, tmp_path, guard_vocab_file):
        proc = subprocess.run(
            [sys.executable, "-m", "anomaly_scanner", "guard", "--vocab", str(guard_vocab_file),
             "--blocklist", str(self.write_ids(tmp_path, 258))],
            input=b"xyz\r\nabc\r\n", capture_output=True, cwd=REPO_ROOT, timeout=60,
        )
        assert proc.returncode == 0, proc.stderr
        assert proc.stdout == b"xyz\r\n abc\r\n"

    def test_unresolvable_exit_code(self, runner, tmp_path, guard_vocab_file):
        result = runner.invoke(main, ['guard', '--vocab', str(guard_vocab_file),
                                      '--blocklist', str(self.write_ids(tmp_path, 256, 258))], input="abc")
        assert result.exit_code == 2

    def test_unknown_id_in_blocklist(self, runner, tmp_path, guard_vocab_file):
        result = runner.invoke(main, ['guard', '--vocab', str(guard_vocab_file),
                                      '--blocklist', str(self.write_ids(tmp_path, 5000))], input="abc")
        assert result.exit_code == 1


class TestExplainCommand:
    def test_major_token_varies(self, runner):
        with serve(profile_for({'bako': 'major'}), port=0) as handle:
            result = invoke(runner, '--endpoint', handle.url, 'explain', '--text', 'bako', '-n', 4)
        assert result.exit_code == 0, result.output
        assert "4 distinct text fields over 4 samples" in result.output
        assert result.output.count("echo_match=False") == 4

    def test_by_id(self, runner, words_file):
        with serve(profile_for({}), port=0) as handle:
            result = invoke(runner, '--endpoint', handle.url, 'explain', '--vocab', words_file, '--id', 0, '-n', 2)
        assert "1 distinct text fields over 2 samples" in result.output
        assert result.output.count("echo_match=True") == 2

    def test_needs_exactly_one_source(self, runner):
        result = runner.invoke(main, ['explain', '--id', '3', '--text', 'x'])
        assert result.exit_code == 2


class TestErrors:
    def test_bad_config(self, runner, tmp_path, words_file):
        config = tmp_path / "bad.yaml"
        config.write_text("concurency: 4\n")
        result = runner.invoke(main, ['--config', str(config), 'scan', '--vocab', str(words_file),
                                      '--checkpoint', str(tmp_path / "s.ndjson")])
        assert result.exit_code == 1
        assert "unknown config keys: concurency" in result.output

    def test_malformed_vocabulary(self, runner, tmp_path):
        vocab = tmp_path / "bad.tiktoken"
        vocab.write_text("YQ== 0\nnot-a-line\n")
        result = runner.invoke(main, ['scan', '--vocab', str(vocab), '--checkpoint', str(tmp_path / "s.ndjson")])
        assert result.exit_code == 1
        assert "line 2" in result.output

    def test_bad_profile(self, runner, tmp_path):
        profile = tmp_path / "profile.json"
        profile.write_text(json.dumps({'overrides': {'x': 'sometimes'}}))
        result = runner.invoke(main, ['mock-serve', '--profile', str(profile), '--port', '0'])
        assert result.exit_code == 1
        assert "unknown behavior kind" in result.output
