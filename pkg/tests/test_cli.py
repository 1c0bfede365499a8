from __future__ import annotations

import json
import socket
import threading
import time

import pytest
import uvicorn

from emtree.api import create_app
from emtree.cli import build_parser, main
from emtree.clock import VirtualClock
from emtree.gateway import LmGateway
from emtree.scripted import ScriptedBackend
from emtree.service import MemoryService, save_event_file
from emtree.tree import deserialize

from .conftest import T0
from .test_service import _config, _event, wait_until


def _free_port() -> int:
    with socket.socket() as sock:
        sock.bind(("127.0.0.1", 0))
        return sock.getsockname()[1]


@pytest.fixture(scope="module")
def live_service():
    clock = VirtualClock(T0)
    service = MemoryService(_config(batch_cap=32), LmGateway(ScriptedBackend()), clock=clock)
    service.start()
    port = _free_port()
    server = uvicorn.Server(
        uvicorn.Config(create_app(service), host="127.0.0.1", port=port, log_level="error")
    )
    thread = threading.Thread(target=server.run, daemon=True)
    thread.start()
    deadline = time.monotonic() + 10
    while not server.started and time.monotonic() < deadline:
        time.sleep(0.02)
    assert server.started
    yield service, f"http://127.0.0.1:{port}"
    server.should_exit = True
    thread.join(timeout=10)
    service.stop()


class TestParser:
    def test_subcommands_exist(self):
        parser = build_parser()
        for argv in (
            ["serve", "--lm-backend", "scripted"],
            ["replay", "events.jsonl", "--sweep"],
            ["ask", "hello"],
            ["feedback", "hello"],
            ["eval", "config.json", "--seed", "3"],
        ):
            args = parser.parse_args(argv)
            assert callable(args.func)

    def test_requires_subcommand(self):
        with pytest.raises(SystemExit):
            build_parser().parse_args([])


class TestReplay:
    def test_replay_writes_tree(self, tmp_path, capsys):
        events = [
            _event(T0, action="Pickup(Cup_1)"),
            _event(T0 + 40, action="Place(Cup_1)"),
            _event(T0 + 90, action="Open(Fridge)"),
        ]
        event_file = tmp_path / "events.jsonl"
        save_event_file(events, event_file)
        out_file = tmp_path / "tree.emtree"
        code = main(["replay", str(event_file), "--sweep", "--out", str(out_file)])
        assert code == 0
        printed = capsys.readouterr().out
        assert "events: 3" in printed
        tree = deserialize(out_file.read_text())
        assert tree.version >= 3

    def test_replay_with_config_and_batching(self, tmp_path, capsys):
        config_file = tmp_path / "config.json"
        config_file.write_text(json.dumps({"builder": {"max_depth": 4}}))
        events = [_event(T0 + i * 30) for i in range(6)]
        event_file = tmp_path / "events.jsonl"
        save_event_file(events, event_file)
        code = main(["replay", str(event_file), "--config", str(config_file), "--batch", "3"])
        assert code == 0
        assert "tree version: 2" in capsys.readouterr().out


class TestAskFeedback:
    def test_ask_and_feedback_against_live_service(self, live_service, capsys):
        service, url = live_service
        service.ingest(_event(T0, action="Pickup(Knife_0)"))
        wait_until(lambda: service.queue_state()[1] >= 1)

        code = main(["ask", "What did you pick up?", "--url", url])
        assert code == 0
        printed = capsys.readouterr().out
        assert "tokens:" in printed

        code = main(["feedback", "You should always remember the knife", "--url", url])
        assert code == 0
        assert "rules version: 1" in capsys.readouterr().out


class TestEval:
    def test_eval_writes_report(self, tmp_path, capsys):
        config_file = tmp_path / "eval.json"
        config_file.write_text(
            json.dumps(
                {"variants": ["online-time-decay"], "seeds": [1], "episodes": 4}
            )
        )
        out_file = tmp_path / "report.tsv"
        code = main(["eval", str(config_file), "--out", str(out_file)])
        assert code == 0
        table = out_file.read_text()
        assert table.startswith("variant\t")
        assert "online-time-decay" in table

    def test_eval_seed_override(self, tmp_path, capsys):
        config_file = tmp_path / "eval.json"
        config_file.write_text(json.dumps({"variants": ["online-time-decay"], "episodes": 4}))
        code = main(["eval", str(config_file), "--seed", "7"])
        assert code == 0
        assert "online-time-decay" in capsys.readouterr().out


class TestEvalDetail:
    def test_detail_log_written(self, tmp_path):
        config_file = tmp_path / "eval.json"
        config_file.write_text(
            json.dumps({"variants": ["online-time-decay"], "seeds": [1], "episodes": 4})
        )
        detail_file = tmp_path / "detail.jsonl"
        out_file = tmp_path / "report.tsv"
        code = main(
            ["eval", str(config_file), "--out", str(out_file), "--detail", str(detail_file)]
        )
        assert code == 0
        lines = [json.loads(l) for l in detail_file.read_text().splitlines()]
        assert lines
        assert {"variant", "seed", "round", "question", "category"} <= set(lines[0])


class TestYamlConfig:
    def test_replay_accepts_yaml(self, tmp_path, capsys):
        config_file = tmp_path / "config.yaml"
        config_file.write_text("builder:\n  max_depth: 4\nforgetting: time\n")
        events = [_event(T0), _event(T0 + 30, action="Pickup(Cup_1)")]
        event_file = tmp_path / "events.jsonl"
        save_event_file(events, event_file)
        assert main(["replay", str(event_file), "--config", str(config_file)]) == 0
        assert "events: 2" in capsys.readouterr().out
