# database.py - Run Registry Module
import json
import shutil
import sqlite3
import logging
import threading
from datetime import datetime, timedelta
from pathlib import Path
from typing import Dict, List, Any, Optional

import config

logger = logging.getLogger(__name__)

SWEEP_COLUMNS = ("rho", "eps", "status", "wc_cost", "lambda_star", "rho_min", "solve_time",
                 "backend", "wasserstein_cost", "h2_reference_cost")
COMPARISON_COLUMNS = ("replication", "controller", "rho", "eps", "status", "realized_cost",
                      "mc_mean", "mc_stderr")


def _timestamp(moment: datetime) -> str:
    return moment.isoformat(sep=" ")


class Database:
    def __init__(self, db_name: Optional[str] = None):
        self.db_name = db_name or config.RESULTS_DB
        self.lock = threading.Lock()
        self._create_tables()

    def _get_connection(self):
        """Database connection बनाता है"""
        conn = sqlite3.connect(self.db_name)
        conn.row_factory = sqlite3.Row
        return conn

    def _create_tables(self):
        """सभी required tables बनाता है"""
        with self._get_connection() as conn:
            # One row per CLI invocation
            conn.execute('''
                CREATE TABLE IF NOT EXISTS runs (
                    id INTEGER PRIMARY KEY AUTOINCREMENT,
                    command TEXT NOT NULL,
                    config_hash TEXT,
                    seed INTEGER,
                    manifest_json TEXT,
                    created_at TIMESTAMP DEFAULT CURRENT_TIMESTAMP
                )
            ''')

            conn.execute('''
                CREATE TABLE IF NOT EXISTS sweep_records (
                    id INTEGER PRIMARY KEY AUTOINCREMENT,
                    run_id INTEGER NOT NULL,
                    rho REAL,
                    eps REAL,
                    status TEXT,
                    wc_cost REAL,
                    lambda_star REAL,
                    rho_min REAL,
                    solve_time REAL,
                    backend TEXT,
                    wasserstein_cost REAL,
                    h2_reference_cost REAL,
                    FOREIGN KEY (run_id) REFERENCES runs (id)
                )
            ''')

            conn.execute('''
                CREATE TABLE IF NOT EXISTS comparison_rows (
                    id INTEGER PRIMARY KEY AUTOINCREMENT,
                    run_id INTEGER NOT NULL,
                    replication INTEGER,
                    controller TEXT,
                    rho REAL,
                    eps REAL,
                    status TEXT,
                    realized_cost REAL,
                    mc_mean REAL,
                    mc_stderr REAL,
                    FOREIGN KEY (run_id) REFERENCES runs (id)
                )
            ''')

            conn.commit()
            logger.debug(f"Run registry ready at {self.db_name}")

    def register_run(self, command: str, manifest: Dict[str, Any]) -> int:
        """नया run register करता है और उसका id return करता है"""
        with self.lock:
            with self._get_connection() as conn:
                cursor = conn.execute('''
                    INSERT INTO runs (command, config_hash, seed, manifest_json, created_at)
                    VALUES (?, ?, ?, ?, ?)
                ''', (command, manifest.get("config_hash"), manifest.get("seed"),
                      json.dumps(manifest, sort_keys=True, default=str), _timestamp(datetime.now())))
                conn.commit()
                return cursor.lastrowid

    def _insert_rows(self, table: str, columns: tuple, run_id: int, rows: List[Dict[str, Any]]):
        placeholders = ", ".join("?" * (len(columns) + 1))
        query = f"INSERT INTO {table} (run_id, {', '.join(columns)}) VALUES ({placeholders})"
        values = [(run_id, *(row.get(column) for column in columns)) for row in rows]
        with self.lock:
            with self._get_connection() as conn:
                conn.executemany(query, values)
                conn.commit()

    def save_sweep_records(self, run_id: int, records: List[Dict[str, Any]]):
        """Sweep के सभी cells save करता है"""
        self._insert_rows("sweep_records", SWEEP_COLUMNS, run_id, records)

    def save_comparison_rows(self, run_id: int, rows: List[Dict[str, Any]]):
        self._insert_rows("comparison_rows", COMPARISON_COLUMNS, run_id, rows)

    def get_run(self, run_id: int) -> Dict[str, Any]:
        with self._get_connection() as conn:
            row = conn.execute('SELECT * FROM runs WHERE id = ?', (run_id,)).fetchone()
            if not row:
                return {}
            run = dict(row)
            run["manifest"] = json.loads(run.pop("manifest_json") or "{}")
            return run

    def recent_runs(self, limit: int = 20) -> List[Dict[str, Any]]:
        """Latest runs first, without their manifests"""
        with self._get_connection() as conn:
            rows = conn.execute('''
                SELECT id, command, config_hash, seed, created_at FROM runs
                ORDER BY id DESC LIMIT ?
            ''', (limit,)).fetchall()
            return [dict(row) for row in rows]

    def get_sweep_records(self, run_id: int) -> List[Dict[str, Any]]:
        with self._get_connection() as conn:
            rows = conn.execute('''
                SELECT * FROM sweep_records WHERE run_id = ? ORDER BY rho, eps
            ''', (run_id,)).fetchall()
            return [dict(row) for row in rows]

    def get_comparison_rows(self, run_id: int) -> List[Dict[str, Any]]:
        with self._get_connection() as conn:
            rows = conn.execute('''
                SELECT * FROM comparison_rows WHERE run_id = ? ORDER BY replication, controller
            ''', (run_id,)).fetchall()
            return [dict(row) for row in rows]

    def backup_database(self, backup_path: str) -> bool:
        """Database का backup बनाता है"""
        try:
            Path(backup_path).mkdir(parents=True, exist_ok=True)
            backup_file = f"{backup_path}/backup_{datetime.now().strftime('%Y%m%d_%H%M%S')}.db"
            shutil.copy2(self.db_name, backup_file)
            logger.info(f"Database backup created: {backup_file}")
            self._prune_backups(backup_path)
            return True
        except Exception as e:
            logger.error(f"Backup failed: {e}")
            return False

    def _prune_backups(self, backup_path: str):
        backups = sorted(Path(backup_path).glob("backup_*.db"))
        for old in backups[:-config.MAX_BACKUP_FILES]:
            old.unlink()

    def cleanup_old_runs(self, days: int = 30):
        """पुराने runs और उनके rows cleanup करता है"""
        cutoff_date = datetime.now() - timedelta(days=days)
        with self.lock:
            with self._get_connection() as conn:
                old = 'SELECT id FROM runs WHERE created_at < ?'
                conn.execute(f'DELETE FROM sweep_records WHERE run_id IN ({old})', (_timestamp(cutoff_date),))
                conn.execute(f'DELETE FROM comparison_rows WHERE run_id IN ({old})', (_timestamp(cutoff_date),))
                conn.execute('DELETE FROM runs WHERE created_at < ?', (_timestamp(cutoff_date),))
                conn.commit()
                logger.info(f"Cleaned up runs older than {days} days")
