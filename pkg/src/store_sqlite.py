from __future__ import annotations

from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from sqlalchemy import create_engine, text
from sqlalchemy.exc import SQLAlchemyError
import pandas as pd

from errors import AkinError
from kinematics import KinematicsSummary


# SQLite column names are case-insensitive, so U_o / u_o are stored under distinct names.
SCHEMA_SQL = """
CREATE TABLE IF NOT EXISTS kinematics_summary (
  case_id TEXT NOT NULL,
  region TEXT NOT NULL,         -- crop label, 'full' when uncropped
  U_o_mm REAL,                  -- p99 |displacement|
  u_n_o_mm REAL,                -- p99 |normal displacement|
  eps_o REAL,                   -- p99 |strain| (fraction, not percent)
  n_valid INTEGER,
  n_invalid INTEGER,
  created_utc TEXT,
  PRIMARY KEY (case_id, region)
);

CREATE INDEX IF NOT EXISTS idx_kinematics_case ON kinematics_summary(case_id);
"""

# frame column -> table column
STORED_NAMES = {"U_o": "U_o_mm", "u_o": "u_n_o_mm"}
COLUMNS = ["case_id", "region", "U_o", "u_o", "eps_o", "n_valid", "n_invalid", "created_utc"]


@dataclass
class KinematicsStore:
    db_path: Path

    def __post_init__(self):
        self.db_path = Path(self.db_path)
        try:
            self.db_path.parent.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise AkinError(f"Cannot create database directory {self.db_path.parent}: {e}") from e
        self.engine = create_engine(f"sqlite:///{self.db_path.as_posix()}", future=True)

    def _fail(self, action: str, e: SQLAlchemyError) -> AkinError:
        reason = getattr(e, "orig", None) or e
        return AkinError(f"Database {self.db_path}: {action} failed ({reason}). Check paths.database.")

    def init_schema(self) -> None:
        try:
            with self.engine.begin() as conn:
                for stmt in SCHEMA_SQL.strip().split(";"):
                    s = stmt.strip()
                    if s:
                        conn.execute(text(s))
        except SQLAlchemyError as e:
            raise self._fail("schema setup", e) from e

    def upsert_summary(self, case_id: str, summary: KinematicsSummary, region: str = "full") -> int:
        df = pd.DataFrame([{
            "case_id": str(case_id),
            "region": region,
            "U_o": summary.U_o,
            "u_o": summary.u_o,
            "eps_o": summary.eps_o,
            "n_valid": summary.n_valid,
            "n_invalid": summary.n_invalid,
            "created_utc": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        }])
        return self.upsert_rows(df)

    def upsert_rows(self, df: pd.DataFrame) -> int:
        """
        Works on older SQLite versions using INSERT OR REPLACE.
        df columns required:
          case_id, U_o, u_o, eps_o (region, n_valid, n_invalid, created_utc optional)
        """
        if df is None or df.empty:
            return 0

        df = df.copy()
        if "region" not in df.columns:
            df["region"] = "full"
        for c in COLUMNS:
            if c not in df.columns:
                df[c] = None
        df = df[COLUMNS].rename(columns=STORED_NAMES)

        records = df.to_dict(orient="records")

        try:
            with self.engine.begin() as conn:
                conn.execute(
                    text("""
                    INSERT OR REPLACE INTO kinematics_summary
                      (case_id, region, U_o_mm, u_n_o_mm, eps_o, n_valid, n_invalid, created_utc)
                    VALUES
                      (:case_id, :region, :U_o_mm, :u_n_o_mm, :eps_o, :n_valid, :n_invalid, :created_utc)
                    """),
                    records,
                )
        except SQLAlchemyError as e:
            raise self._fail("upsert", e) from e

        return len(df)

    def load_summaries(self, region: str | None = None) -> pd.DataFrame:
        """Stored rows with the store names mapped back to U_o / u_o."""
        if not self.db_path.exists():
            raise AkinError(f"Missing database: {self.db_path}. Run the kinematics stage first.")
        sql = "SELECT * FROM kinematics_summary"
        params = {}
        if region is not None:
            sql += " WHERE region = :region"
            params["region"] = region
        sql += " ORDER BY case_id, region"
        try:
            with self.engine.connect() as conn:
                df = pd.read_sql_query(text(sql), conn, params=params)
        except SQLAlchemyError as e:
            raise self._fail("query", e) from e
        return df.rename(columns={v: k for k, v in STORED_NAMES.items()})
