"""Smoke test for the asyncfl Python extension.

Build first:
    cargo build --release -p asyncfl-py --features extension-module
then run:
    python3 python/smoke_test.py [path/to/libasyncfl.so]
"""

import importlib.machinery
import importlib.util
import json
import math
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def load(path):
    loader = importlib.machinery.ExtensionFileLoader("asyncfl", str(path))
    spec = importlib.util.spec_from_file_location("asyncfl", str(path), loader=loader)
    mod = importlib.util.module_from_spec(spec)
    loader.exec_module(mod)
    return mod


def close(a, b, tol=1e-12):
    return len(a) == len(b) and all(abs(x - y) <= tol for x, y in zip(a, b))


def main():
    lib = Path(sys.argv[1]) if len(sys.argv) > 1 else ROOT / "target" / "release" / "libasyncfl.so"
    fl = load(lib)

    # aggregation rules
    s = fl.Submission("a", [0.0], loss=0.5, qod=0.9, data_size=1000, global_version_used=2)
    assert abs(fl.contribution_ratio(s, 3) - 1800.0) < 1e-9
    try:
        fl.contribution_ratio(s, 2)
        raise AssertionError("stale version accepted")
    except ValueError:
        pass
    assert close(fl.normalize_ratios([1800.0, 200.0]), [0.9, 0.1])
    assert close(fl.merge_local([0.5, 0.2], [0.4, 0.4], [0.3, 0.3], 0.25), [0.5, 0.25])
    alpha = fl.local_mix_coefficient(1.0, 100, 3.0, 1.0, 300, 1.0, beta=0.5)
    assert abs(alpha - 0.25) < 1e-12

    a = fl.Submission("a", [1.0, 0.0], 1.0, 1.0, 100, 0)
    b = fl.Submission("b", [0.0, 4.0], 1.0, 1.0, 300, 0)
    assert close(fl.aggregate_fedavg([a, b], 2), [0.25, 3.0])
    weights, shares = fl.aggregate_asyn2f([a, b], 1)
    assert close(weights, [0.25, 3.0]) and [w for _, _, w in shares] == [0.25, 0.75]
    g, buf = fl.aggregate_mstep_kafl([3.0, -2.0], [[1.0, 2.0]], [0.0, 0.0], 2, 0.5)
    assert close(g, [2.5, -1.0]) and buf == []

    assert fl.cosine_decay_lr(0, 60, 0.1) == 0.1
    assert fl.cosine_decay_lr(60, 60, 0.1) == 0.0
    assert abs(fl.cosine_decay_lr(30, 60, 0.1) - 0.05) < 1e-12

    # wire codec
    raw = (ROOT / "crates" / "core" / "tests" / "fixtures" / "worker_notify.json").read_text()
    kind, text = fl.decode_message(raw.encode())
    assert kind == "WORKER_NOTIFY"
    assert json.loads(text)["content"]["loss"] == 1.232
    assert fl.encode_message(text) == text.encode()
    try:
        fl.decode_message(b'{"headers": {}}')
        raise AssertionError("malformed message accepted")
    except ValueError:
        pass

    # scenarios and the simulator
    try:
        fl.Scenario.parse("workers = 2\ntrain.lr = fast\n")
        raise AssertionError("bad scenario accepted")
    except ValueError as e:
        assert "line 2" in str(e)
    sc = fl.Scenario.parse("workers = 5\ntrain.local_rounds = 1\nserver.max_epochs = 8\n")
    sc = sc.with_variant("asyn2f", "sync", 3)
    assert sc.trainers == 5 and sc.seed == 3
    assert fl.Scenario.parse(sc.to_text()).to_text() == sc.to_text()

    run = fl.run_scenario(sc)
    again = fl.run_scenario(sc)
    assert run.version == 8 and run.complete
    assert 0.0 <= run.final_accuracy <= 1.0 and not math.isnan(run.final_accuracy)
    assert len(run.tester_curve()) >= 1
    assert fl.replay_check(run.log_jsonl(), again.log_jsonl())
    other = fl.run_scenario(sc.with_variant("asyn2f", "sync", 4))
    assert not fl.replay_check(run.log_jsonl(), other.log_jsonl())

    with tempfile.TemporaryDirectory() as out:
        md, rows = fl.run_experiment(sc, ["asyn2f", "fedavg"], ["fixed", "async"], [1], out_dir=out)
        assert len(rows) == 4
        na = [r for r in rows if r[0] == "fedavg" and r[1] == "async"]
        assert na == [("fedavg", "async", None, "NA", "NA")]
        assert (Path(out) / "summary.csv").exists() and "| fedavg | async |" in md

    print(f"asyncfl {fl.__version__}: smoke test passed ({len(run)} events, accuracy {run.final_accuracy:.3f})")


if __name__ == "__main__":
    main()
