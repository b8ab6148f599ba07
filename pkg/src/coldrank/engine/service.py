# ===== IMPORTS =====
# === Standard library ===
from concurrent.futures import ThreadPoolExecutor
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
import json
import logging
import threading
import time
from typing import Optional

# === Local ===
from coldrank.engine.serving import FrontEndQuery, SplitPlan, split_and_score
from coldrank.exceptions import ColdRankError, ModelNotReadyError
from coldrank.features.dataset import AdCandidate, UserContext, conform_features, read_dataset
from coldrank.features.schema import Side
from coldrank.models.checkpoint import load_model
from coldrank.training.bus import SnapshotBus
from coldrank.training.trainer import OnlineStats, TrainConfig, train_online
from coldrank.utils import JsonLinesWriter


# ===== GLOBALS =====
logger = logging.getLogger(__name__)
MAX_BODY_BYTES = 64 << 20


# ===== CLASSES =====
class BadRequest(ColdRankError):
    pass


def parse_query(document, schema, request_id) -> FrontEndQuery:
    if not isinstance(document, dict):
        raise BadRequest('Request body must be a JSON object')
    try:
        user_doc = document['user']
        candidate_docs = document['candidates']
    except KeyError as exc:
        raise BadRequest(f'Missing field {exc}') from None
    if not isinstance(candidate_docs, list) or not candidate_docs:
        raise BadRequest('candidates must be a non-empty list')
    try:
        user = UserContext.from_dict(user_doc)
        user.features = conform_features(schema, user.features, sides=(Side.USER,))
        candidates = []
        for doc in candidate_docs:
            ad = AdCandidate.from_dict(doc)
            if ad.bid < 0:
                raise BadRequest(f'Negative bid for ad {ad.ad_id}')
            ad.features = conform_features(schema, ad.features, sides=(Side.AD,))
            candidates.append(ad)
        n = int(document.get('n', len(candidates)))
    except (KeyError, TypeError, ValueError, AttributeError) as exc:
        raise BadRequest(f'Malformed request: {exc}') from exc
    return FrontEndQuery(request_id, user, candidates, n)


class ScoringService:
    """HTTP/JSON front end scoring every request with the latest published snapshot."""

    def __init__(self, bus: SnapshotBus, host='127.0.0.1', port=8080, plan: Optional[SplitPlan] = None,
                 path='column'):
        self.bus = bus
        self.plan = plan or SplitPlan()
        self.path = path
        self._counter = 0
        self._counter_lock = threading.Lock()
        self._chunk_pool = ThreadPoolExecutor(max_workers=self.plan.workers) if self.plan.workers > 1 else None
        self._server = ThreadingHTTPServer((host, port), self._handler_class())
        self._server.daemon_threads = True
        self._thread = None

    @property
    def address(self):
        return self._server.server_address[:2]

    @property
    def url(self):
        host, port = self.address
        return f'http://{host}:{port}'

    def next_request_id(self):
        with self._counter_lock:
            self._counter += 1
            return f'r{self._counter}'

    def score(self, document):
        # one snapshot reference per request
        model = self.bus.current()
        query = parse_query(document, model.schema, self.next_request_id())
        return split_and_score(query, model, self.plan, executor=self._chunk_pool, path=self.path).to_dict()

    def _handler_class(self):
        service = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, fmt, *args):
                logger.debug('%s - %s', self.address_string(), fmt % args)

            def _reply(self, status, document):
                body = json.dumps(document, sort_keys=True).encode('utf8')
                self.send_response(status)
                self.send_header('Content-Type', 'application/json')
                self.send_header('Content-Length', str(len(body)))
                self.end_headers()
                self.wfile.write(body)

            def _error(self, status, error, message):
                self._reply(status, {'error': error, 'message': message})

            def do_GET(self):
                if self.path != '/healthz':
                    return self._error(404, 'NotFound', f'No route {self.path}')
                self._reply(200, {'status': 'ok', 'version': service.bus.version})

            def do_POST(self):
                if self.path != '/score':
                    return self._error(404, 'NotFound', f'No route {self.path}')
                try:
                    length = int(self.headers.get('Content-Length') or 0)
                except ValueError:
                    return self._error(400, 'BadContentLength', 'Content-Length is not an integer')
                if length < 0:
                    return self._error(400, 'BadContentLength', f'Negative Content-Length {length}')
                if length > MAX_BODY_BYTES:
                    return self._error(413, 'TooLarge', f'Body of {length} bytes')
                try:
                    document = json.loads(self.rfile.read(length).decode('utf8'))
                    self._reply(200, service.score(document))
                except ModelNotReadyError as exc:
                    self._error(503, type(exc).__name__, str(exc))
                except (json.JSONDecodeError, UnicodeDecodeError) as exc:
                    self._error(400, 'MalformedJSON', str(exc))
                except ColdRankError as exc:
                    self._error(400, type(exc).__name__, str(exc))
                except Exception as exc:
                    logger.exception('Failed to score request')
                    self._error(500, type(exc).__name__, str(exc))

        return Handler

    def start(self):
        self._thread = threading.Thread(target=self._server.serve_forever, name='scoring-service', daemon=True)
        self._thread.start()
        logger.info('Scoring service listening on %s', self.url)
        return self

    def serve_forever(self):
        logger.info('Scoring service listening on %s', self.url)
        self._server.serve_forever()

    def close(self):
        self._server.server_close()
        if self._chunk_pool is not None:
            self._chunk_pool.shutdown()

    def stop(self):
        self._server.shutdown()
        if self._thread is not None:
            self._thread.join()
        self.close()
        logger.info('Scoring service stopped')

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


# ===== FUNCTIONS =====
def serve(bus: SnapshotBus, address=('127.0.0.1', 8080), plan: Optional[SplitPlan] = None,
          path='column') -> ScoringService:
    host, port = address
    return ScoringService(bus, host, port, plan, path).start()


def start_online_training(bus: SnapshotBus, stream_path, train_args, metrics_path=None):
    """Background writer: trains a private copy on a stream file and publishes into `bus`."""
    config = TrainConfig.from_args(train_args)
    stats = OnlineStats()

    def run():
        _, examples = read_dataset(stream_path)
        examples.sort(key=lambda e: e.timestamp)
        writer_model = bus.current().clone()
        with JsonLinesWriter(metrics_path) as metrics:
            for _ in train_online(writer_model, examples, config, bus=bus, stats=stats, metrics=metrics):
                pass

    thread = threading.Thread(target=run, name='online-trainer', daemon=True)
    thread.start()
    return thread, stats


def run_service(args):
    """Serves a checkpoint, optionally learning online from a stream file meanwhile."""
    bus = SnapshotBus(load_model(args['checkpoint_path']))
    plan = SplitPlan.from_args(args.get('plan', {}))
    service = ScoringService(bus, args.get('host', '127.0.0.1'), int(args.get('port', 8080)),
                             plan, args.get('path', 'column'))
    trainer = None
    if args.get('stream_path'):
        trainer, _ = start_online_training(bus, args['stream_path'], args.get('training', {}),
                                           args.get('metrics_path'))
    duration = args.get('duration_s')
    if duration is None:
        try:
            service.serve_forever()
        except KeyboardInterrupt:
            logger.info('Interrupted')
        finally:
            service.close()
        return {'step': args, 'version': bus.version}
    with service:
        time.sleep(float(duration))
    if trainer is not None:
        trainer.join(timeout=0)
    return {'step': args, 'version': bus.version, 'url': service.url}
