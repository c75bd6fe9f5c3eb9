#!/usr/bin/env python3
import sqlite3
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional

from twinid_shared import LEDGER_PATH


class RunLedger:
    """sqlite record of CLI runs and the evidence each produced.

    Stored outside the output directory.
    """

    def __init__(self, db_path: Path = LEDGER_PATH):
        self.db_path = Path(db_path)
        self.db_path.parent.mkdir(parents=True, exist_ok=True)
        self.init_database()

    def init_database(self) -> None:
        conn = sqlite3.connect(self.db_path)
        cursor = conn.cursor()

        cursor.execute("""
            CREATE TABLE IF NOT EXISTS runs (
                run_id TEXT PRIMARY KEY,
                command TEXT,
                started_at TIMESTAMP,
                ended_at TIMESTAMP,
                status TEXT,
                config_digest TEXT,
                out_dir TEXT,
                seed INTEGER,
                workers INTEGER
            )
        """)

        cursor.execute("""
            CREATE TABLE IF NOT EXISTS results (
                id INTEGER PRIMARY KEY AUTOINCREMENT,
                run_id TEXT,
                model TEXT,
                logz FLOAT,
                logz_err FLOAT,
                nfe INTEGER,
                archive_path TEXT
            )
        """)

        conn.commit()
        conn.close()

    def create_run(self, command: str, config_digest: str = "", out_dir: str = "",
                   seed: int = 0, workers: int = 1) -> str:
        now = datetime.now()
        base_id = now.strftime("%Y%m%d_%H%M%S")
        run_id = base_id
        conn = sqlite3.connect(self.db_path)
        cursor = conn.cursor()

        counter = 0
        while True:
            try:
                cursor.execute(
                    "INSERT INTO runs (run_id, command, started_at, status, config_digest, out_dir, seed, workers) "
                    "VALUES (?, ?, ?, ?, ?, ?, ?, ?)",
                    (run_id, command, now.isoformat(), "running", config_digest, str(out_dir), seed, workers)
                )
                conn.commit()
                break
            except sqlite3.IntegrityError:
                counter += 1
                run_id = f"{base_id}_{counter}"

        conn.close()
        return run_id

    def record_result(self, run_id: str, model: str, logz: float = None, logz_err: float = None,
                      nfe: int = None, archive_path: str = "") -> None:
        conn = sqlite3.connect(self.db_path)
        cursor = conn.cursor()
        cursor.execute(
            "INSERT INTO results (run_id, model, logz, logz_err, nfe, archive_path) VALUES (?, ?, ?, ?, ?, ?)",
            (run_id, model, logz, logz_err, nfe, str(archive_path))
        )
        conn.commit()
        conn.close()

    def finish_run(self, run_id: str, status: str = "ok") -> None:
        conn = sqlite3.connect(self.db_path)
        cursor = conn.cursor()
        cursor.execute(
            "UPDATE runs SET ended_at = ?, status = ? WHERE run_id = ?",
            (datetime.now().isoformat(), status, run_id)
        )
        conn.commit()
        conn.close()

    def list_runs(self, limit: int = 20) -> List[Dict]:
        conn = sqlite3.connect(self.db_path)
        conn.row_factory = sqlite3.Row
        cursor = conn.cursor()
        cursor.execute("SELECT * FROM runs ORDER BY started_at DESC, run_id DESC LIMIT ?", (limit,))
        rows = [dict(r) for r in cursor.fetchall()]
        conn.close()
        return rows

    def get_run(self, run_id: str) -> Optional[Dict]:
        conn = sqlite3.connect(self.db_path)
        conn.row_factory = sqlite3.Row
        cursor = conn.cursor()
        cursor.execute("SELECT * FROM runs WHERE run_id = ?", (run_id,))
        row = cursor.fetchone()
        if row is None:
            conn.close()
            return None
        run = dict(row)
        cursor.execute("SELECT model, logz, logz_err, nfe, archive_path FROM results WHERE run_id = ? ORDER BY id",
                       (run_id,))
        run["results"] = [dict(r) for r in cursor.fetchall()]
        conn.close()
        return run

    def count_runs(self) -> int:
        conn = sqlite3.connect(self.db_path)
        cursor = conn.cursor()
        cursor.execute("SELECT COUNT(*) FROM runs")
        total = cursor.fetchone()[0]
        conn.close()
        return total
