# ===== IMPORTS =====
# === Standard library ===
import logging
from typing import Dict, Sequence

# === Thirdparty ===
import requests

# === Local ===
from coldrank.engine.serving import FrontEndQuery
from coldrank.features.dataset import AdCandidate, UserContext


# ===== GLOBALS =====
logger = logging.getLogger(__name__)


# ===== CLASSES =====
class ScoreClient:
    """Thin `requests` client of the scoring service."""

    def __init__(self, base_url, timeout=5.0):
        self.base_url = base_url.rstrip('/')
        self.timeout = timeout
        self._session = requests.Session()

    def close(self):
        self._session.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def healthz(self) -> Dict:
        response = self._session.get(f'{self.base_url}/healthz', timeout=self.timeout)
        response.raise_for_status()
        return response.json()

    def post_raw(self, body: bytes) -> requests.Response:
        return self._session.post(f'{self.base_url}/score', data=body, timeout=self.timeout,
                                  headers={'Content-Type': 'application/json'})

    def score(self, user: UserContext, candidates: Sequence[AdCandidate], n: int) -> Dict:
        payload = {
            'user': user.to_dict(),
            'candidates': [ad.to_dict() for ad in candidates],
            'n': n,
        }
        response = self._session.post(f'{self.base_url}/score', json=payload, timeout=self.timeout)
        response.raise_for_status()
        return response.json()

    def score_query(self, query: FrontEndQuery) -> Dict:
        return self.score(query.user, query.candidates, query.n)
