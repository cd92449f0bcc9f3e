import os
import json
import datetime
import logging
from collections import Counter

import pandas as pd

logger = logging.getLogger(__name__)

EVENT_KINDS = ("update_skipped", "gated", "track_dropped", "nees_regularized",
               "augmented_initialized")


class FilterEvents:
    """In-memory event buffer owned by one filter instance."""

    def __init__(self):
        self.rows = []

    def record(self, kind, t=None, **details):
        if kind not in EVENT_KINDS:
            raise ValueError(f"unknown event kind '{kind}'")
        self.rows.append({"t": t, "kind": kind,
                          "details": ", ".join(f"{k}={v}" for k, v in details.items())})
        logger.debug("%s at t=%s %s", kind, t, details)

    def counts(self):
        return dict(Counter(row["kind"] for row in self.rows))

    def to_frame(self):
        return pd.DataFrame(self.rows, columns=["t", "kind", "details"])

    def __len__(self):
        return len(self.rows)


class EventLogger:
    def __init__(self, log_dir="logs"):
        self.log_dir = log_dir
        self.counts_file = os.path.join(log_dir, "event_counts.json")

        os.makedirs(log_dir, exist_ok=True)

        self.event_counts = self._load_counts()

    def _load_counts(self):
        """Load per-run event counters from JSON file."""
        if os.path.exists(self.counts_file):
            try:
                with open(self.counts_file, 'r') as f:
                    return json.load(f)
            except (OSError, json.JSONDecodeError):
                logger.warning("could not read %s, starting fresh", self.counts_file)
                return {}
        return {}

    def _save_counts(self):
        tmp = self.counts_file + ".tmp"
        with open(tmp, 'w') as f:
            json.dump(self.event_counts, f, indent=4)
        os.replace(tmp, self.counts_file)

    def log_events(self, run_id, events):
        """
        Append one run's events to the daily log file.
        events: FilterEvents or DataFrame with 't', 'kind', 'details'
        """
        events_df = events.to_frame() if isinstance(events, FilterEvents) else events
        self.event_counts[str(run_id)] = {} if events_df is None else \
            {str(k): int(v) for k, v in events_df['kind'].value_counts().items()}
        self._save_counts()
        if events_df is None or events_df.empty:
            return

        today = datetime.date.today().strftime('%Y-%m-%d')
        log_file = os.path.join(self.log_dir, f"events_{today}.log")

        timestamp = datetime.datetime.now().strftime('%Y-%m-%d %H:%M:%S')

        try:
            with open(log_file, 'a') as f:
                f.write(f"\n--- Run {run_id}: {timestamp} ---\n")
                for _, row in events_df.iterrows():
                    t = "-" if pd.isna(row.get('t')) else f"{row.get('t'):.3f}"
                    f.write(f"[{t}] {row.get('kind')}: {row.get('details')}\n")
        except OSError as e:
            logger.error("error logging events for run %s: %s", run_id, e)

    def get_counts(self, run_id):
        return self.event_counts.get(str(run_id), {})

    def get_all_counts(self):
        """Returns a DataFrame of event counters, one row per run."""
        if not self.event_counts:
            return pd.DataFrame(columns=["run_id", *EVENT_KINDS])
        rows = [{"run_id": run_id, **{k: counts.get(k, 0) for k in EVENT_KINDS}}
                for run_id, counts in self.event_counts.items()]
        return pd.DataFrame(rows)
