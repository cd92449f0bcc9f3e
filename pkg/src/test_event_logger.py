import datetime
import os
import tempfile

import pandas as pd

from event_logger import EVENT_KINDS, EventLogger, FilterEvents


def sample_events():
    events = FilterEvents()
    events.record("gated", t=1.25, statistic=20.1, threshold=9.49)
    events.record("gated", t=2.5, statistic=11.0, threshold=9.49)
    events.record("augmented_initialized", t=1.0)
    events.record("nees_regularized")
    return events


def test_filter_events_buffer():
    events = sample_events()
    assert len(events) == 4
    assert events.counts() == {"gated": 2, "augmented_initialized": 1, "nees_regularized": 1}
    df = events.to_frame()
    assert list(df.columns) == ["t", "kind", "details"]
    assert df["details"].iloc[0] == "statistic=20.1, threshold=9.49"


def test_unknown_kind_rejected():
    try:
        FilterEvents().record("exploded")
        assert False, "expected ValueError"
    except ValueError:
        pass


def test_log_file_and_counts():
    with tempfile.TemporaryDirectory() as d:
        logger = EventLogger(d)
        logger.log_events("msc-ikf/seed_0", sample_events())
        today = datetime.date.today().strftime('%Y-%m-%d')
        with open(os.path.join(d, f"events_{today}.log")) as f:
            lines = f.read().strip().splitlines()
        assert lines[0].startswith("--- Run msc-ikf/seed_0: ")
        assert lines[1] == "[1.250] gated: statistic=20.1, threshold=9.49"
        assert lines[4].rstrip() == "[-] nees_regularized:"
        # counters survive a reload
        again = EventLogger(d)
        assert again.get_counts("msc-ikf/seed_0")["gated"] == 2


def test_run_without_events_resets_counts():
    with tempfile.TemporaryDirectory() as d:
        logger = EventLogger(d)
        logger.log_events("vio/seed_0", sample_events())
        logger.log_events("vio/seed_0", FilterEvents())
        assert logger.get_counts("vio/seed_0") == {}
        assert logger.get_counts("never-ran") == {}


def test_all_counts_table():
    with tempfile.TemporaryDirectory() as d:
        logger = EventLogger(d)
        assert list(logger.get_all_counts().columns) == ["run_id", *EVENT_KINDS]
        logger.log_events("a", sample_events())
        logger.log_events("b", pd.DataFrame({"t": [0.5], "kind": ["track_dropped"], "details": [""]}))
        table = logger.get_all_counts().set_index("run_id")
    assert table.loc["a", "gated"] == 2 and table.loc["a", "track_dropped"] == 0
    assert table.loc["b", "track_dropped"] == 1


def test_corrupt_counts_file_starts_fresh():
    with tempfile.TemporaryDirectory() as d:
        with open(os.path.join(d, "event_counts.json"), "w") as f:
            f.write("{not json")
        assert EventLogger(d).event_counts == {}


if __name__ == "__main__":
    print("=== EVENT LOGGER TESTS ===")
    failures = 0
    for name, fn in sorted(globals().items()):
        if name.startswith("test_") and callable(fn):
            try:
                fn()
                print(f"✅ PASS: {name}")
            except AssertionError as e:
                failures += 1
                print(f"❌ FAIL: {name} {e}")
    print(f"\n{failures} failure(s)")
