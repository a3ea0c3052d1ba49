"""
Module pour la persistance des vues de référence.
Cache SQLite des rendus analytiques, indexé par empreinte de scène et caméra.
"""

import sqlite3
from datetime import datetime
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from src.constants import *


class ViewRepository:
    def __init__(self, db_path: str):
        self.db_path = str(db_path)
        Path(self.db_path).parent.mkdir(parents=True, exist_ok=True)
        self._init_db()

    def _init_db(self):
        """Initialise la base de données avec la table des vues."""
        with sqlite3.connect(self.db_path) as conn:
            conn.execute(
                """
                CREATE TABLE IF NOT EXISTS views (
                    scene_digest TEXT,
                    split TEXT,
                    camera_index INTEGER,
                    n_samples INTEGER,
                    height INTEGER NOT NULL,
                    width INTEGER NOT NULL,
                    pixels BLOB NOT NULL,
                    created_at TEXT,
                    PRIMARY KEY (scene_digest, split, camera_index, n_samples)
                )
            """
            )
            conn.commit()

    def save_view(
        self, scene_digest: str, split: str, camera_index: int, n_samples: int, image: np.ndarray
    ) -> None:
        """Sauvegarde ou remplace une image (H, W, 3) float64."""
        image = np.ascontiguousarray(image, dtype="<f8")
        with sqlite3.connect(self.db_path) as conn:
            conn.execute(
                """
                INSERT OR REPLACE INTO views
                (scene_digest, split, camera_index, n_samples, height, width, pixels, created_at)
                VALUES (?, ?, ?, ?, ?, ?, ?, ?)
            """,
                (
                    scene_digest,
                    split,
                    camera_index,
                    n_samples,
                    image.shape[0],
                    image.shape[1],
                    image.tobytes(),
                    datetime.now().isoformat(),
                ),
            )
            conn.commit()

    def get_view(
        self, scene_digest: str, split: str, camera_index: int, n_samples: int
    ) -> Optional[np.ndarray]:
        with sqlite3.connect(self.db_path) as conn:
            cursor = conn.execute(
                """
                SELECT height, width, pixels FROM views
                WHERE scene_digest = ? AND split = ? AND camera_index = ? AND n_samples = ?
            """,
                (scene_digest, split, camera_index, n_samples),
            )
            row = cursor.fetchone()
            if row is None:
                return None
            height, width, pixels = row
            return np.frombuffer(pixels, dtype="<f8").reshape(height, width, 3).copy()

    def get_views(self, scene_digest: str, split: str, n_samples: int) -> Dict[int, np.ndarray]:
        """Toutes les vues en cache d'une scène pour une partition."""
        with sqlite3.connect(self.db_path) as conn:
            cursor = conn.execute(
                """
                SELECT camera_index, height, width, pixels FROM views
                WHERE scene_digest = ? AND split = ? AND n_samples = ?
                ORDER BY camera_index
            """,
                (scene_digest, split, n_samples),
            )
            return {
                index: np.frombuffer(pixels, dtype="<f8").reshape(height, width, 3).copy()
                for index, height, width, pixels in cursor.fetchall()
            }

    def clear_scene(self, scene_digest: str) -> None:
        """Supprime les vues d'une scène."""
        with sqlite3.connect(self.db_path) as conn:
            conn.execute("DELETE FROM views WHERE scene_digest = ?", (scene_digest,))
            conn.commit()
