import functools
import json
import shutil
import socket
import threading
from http.server import SimpleHTTPRequestHandler, ThreadingHTTPServer

import pytest

from ecg_beatnet import cli, fetch, wfdb
from ecg_beatnet.errors import DigestMismatch, NetworkError


class _Quiet(SimpleHTTPRequestHandler):
    def log_message(self, *args):
        pass


@pytest.fixture
def server(tmp_path, synth_corpus):
    root = tmp_path / "remote"
    root.mkdir()
    src, _ = synth_corpus
    for ext in ("hea", "dat", "atr"):
        shutil.copy(src / f"s01.{ext}", root / f"s01.{ext}")
    httpd = ThreadingHTTPServer(("127.0.0.1", 0), functools.partial(_Quiet, directory=str(root)))
    thread = threading.Thread(target=httpd.serve_forever, daemon=True)
    thread.start()
    yield root, f"http://127.0.0.1:{httpd.server_address[1]}/"
    httpd.shutdown()
    httpd.server_close()


def _closed_port_url():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        port = s.getsockname()[1]
    return f"http://127.0.0.1:{port}/"


def test_fresh_fetch_then_idempotent(server, tmp_path):
    root, url = server
    data = tmp_path / "data"
    first = fetch.fetch_records(["s01"], data, url, backoff=0.01)
    assert sorted(first.downloaded) == ["s01.atr", "s01.dat", "s01.hea"]
    assert first.bytes_transferred == sum((root / n).stat().st_size for n in first.downloaded)
    manifest = json.loads((data / "manifest.json").read_text())["files"]
    assert set(manifest) == {"s01.atr", "s01.dat", "s01.hea"}
    assert manifest["s01.dat"]["sha256"] == fetch.sha256((root / "s01.dat").read_bytes())
    rec = wfdb.read_record(data, "s01")
    assert all(c.ok for c in wfdb.verify_checksums(rec.data, rec.header))

    second = fetch.fetch_records(["s01"], data, url, backoff=0.01)
    assert second.bytes_transferred == 0 and second.downloaded == []
    assert len(second.skipped) == 3


def test_corrupt_local_file_is_redownloaded(server, tmp_path):
    _, url = server
    data = tmp_path / "data"
    fetch.fetch_records(["s01"], data, url, backoff=0.01)
    good = (data / "s01.dat").read_bytes()
    (data / "s01.dat").write_bytes(b"garbage")
    res = fetch.fetch_records(["s01"], data, url, backoff=0.01)
    assert res.downloaded == ["s01.dat"]
    assert (data / "s01.dat").read_bytes() == good


def test_digest_mismatch_is_fatal(server, tmp_path):
    root, url = server
    data = tmp_path / "data"
    fetch.fetch_records(["s01"], data, url, backoff=0.01)
    (data / "s01.hea").write_text("tampered\n")
    (root / "s01.hea").write_text("changed upstream\n")
    with pytest.raises(DigestMismatch):
        fetch.fetch_records(["s01"], data, url, backoff=0.01)
    # the untouched files stay recorded
    assert "s01.dat" in json.loads((data / "manifest.json").read_text())["files"]


def test_network_error(tmp_path):
    with pytest.raises(NetworkError):
        fetch.fetch_records(["100"], tmp_path, _closed_port_url(), backoff=0.0)


def test_missing_remote_file(server, tmp_path):
    _, url = server
    with pytest.raises(NetworkError):
        fetch.fetch_records(["nope"], tmp_path, url, backoff=0.0)


def test_cli_fetch_exit_codes(server, tmp_path, capsys):
    root, url = server
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"base_url": url, "records": ["s01"]}))
    data = tmp_path / "data"
    assert cli.run(["fetch", "--config", str(cfg), "--data-dir", str(data), "--format", "json"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["bytes_transferred"] > 0
    assert cli.run(["fetch", "--config", str(cfg), "--data-dir", str(data), "--format", "json"]) == 0
    assert json.loads(capsys.readouterr().out)["bytes_transferred"] == 0

    cfg.write_text(json.dumps({"base_url": _closed_port_url(), "records": ["s01"]}))
    assert cli.run(["fetch", "--config", str(cfg), "--data-dir", str(tmp_path / "empty")]) == 3
