"""Collection, decoding and storage of executed-fill event logs.

Logs are pulled with ``eth_getLogs`` in fixed-size block chunks. Chunks that
trip a provider's result limit are bisected; transport failures rotate through
the configured endpoints. Decoded fills are written to a tab-separated corpus
whose SHA-256 content hash is independent of collection order.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator, Protocol, Sequence

import requests
from Crypto.Hash import keccak

logger = logging.getLogger(__name__)

CTF_EXCHANGE = "0x4bfb41d5b3570defd03c39a9a4d8de6bd8b8982e"
ORDER_FILLED_SIGNATURE = (
    "OrderFilled(bytes32,address,address,uint256,uint256,uint256,uint256,uint256)"
)
DEFAULT_CHUNK_SIZE = 2_000
DEFAULT_RETRIES = 3
CORPUS_SCHEMA = "fillscope-corpus/1"
USDC_SCALE = 10**6

BUY = "BUY"
SELL = "SELL"

_ADDRESS_RE = re.compile(r"^(0x)?[0-9a-fA-F]{40}$")
_WORD_RE = re.compile(r"^0x[0-9a-fA-F]{64}$")
# Messages providers use when a range or result set is over their limit.
_LIMIT_RE = re.compile(
    r"(more than \d+ results|query returned more than|block range|range is too large|"
    r"too many|limit exceeded|response size|exceed)",
    re.IGNORECASE,
)


def event_topic(signature: str) -> str:
    h = keccak.new(digest_bits=256)
    h.update(signature.encode("ascii"))
    return "0x" + h.hexdigest()


ORDER_FILLED_TOPIC = event_topic(ORDER_FILLED_SIGNATURE)


class IngestError(Exception):
    """Base class for ingestion failures."""


class EndpointError(IngestError):
    """A single endpoint failed to serve a request (retryable)."""


class ResponseTooLarge(EndpointError):
    """The provider refused the request because of its size limits."""


class AllEndpointsFailed(IngestError):
    pass


class MalformedResponse(IngestError):
    pass


class QuarantineError(IngestError):
    """A log that cannot be turned into a FillRecord."""


class UnknownAssetPair(QuarantineError):
    pass


class ZeroTokenAmount(QuarantineError):
    pass


class PriceOutOfRange(QuarantineError):
    pass


class CorruptCorpus(IngestError):
    pass


def normalize_address(address: str) -> str:
    if not isinstance(address, str) or not _ADDRESS_RE.match(address):
        raise ValueError(f"malformed address: {address!r}")
    address = address.lower()
    return address if address.startswith("0x") else "0x" + address


def format_fixed(value: int) -> str:
    """Render a non-negative 6-decimal fixed-point integer, e.g. 500000 -> '0.500000'."""
    if value < 0:
        raise ValueError("fixed-point amounts are non-negative")
    return f"{value // USDC_SCALE}.{value % USDC_SCALE:06d}"


def parse_fixed(text: str) -> int:
    whole, _, frac = text.partition(".")
    if len(frac) > 6 or not whole.isdigit() or (frac and not frac.isdigit()):
        raise ValueError(f"bad fixed-point value {text!r}")
    return int(whole) * USDC_SCALE + int(frac.ljust(6, "0") or 0)


@dataclass(frozen=True)
class LogFilterSpec:
    from_block: int
    to_block: int
    contract_address: str = CTF_EXCHANGE
    event_topic: str = ORDER_FILLED_TOPIC
    chunk_size: int = DEFAULT_CHUNK_SIZE

    def __post_init__(self):
        object.__setattr__(self, "contract_address", normalize_address(self.contract_address))
        if not _WORD_RE.match(self.event_topic):
            raise ValueError(f"event topic must be a 32-byte hex word: {self.event_topic!r}")
        object.__setattr__(self, "event_topic", self.event_topic.lower())
        if self.from_block < 0 or self.to_block < 0:
            raise ValueError("block numbers are unsigned")
        if self.from_block > self.to_block:
            raise ValueError("from_block must not exceed to_block")
        if self.chunk_size < 1:
            raise ValueError("chunk_size must be positive")

    def chunks(self) -> list[tuple[int, int]]:
        out = []
        lo = self.from_block
        while lo <= self.to_block:
            hi = min(lo + self.chunk_size - 1, self.to_block)
            out.append((lo, hi))
            lo = hi + 1
        return out


def _hex_int(value: Any) -> int:
    if isinstance(value, int):
        return value
    if isinstance(value, str):
        return int(value, 16) if value.startswith("0x") else int(value)
    raise TypeError(f"not a quantity: {value!r}")


@dataclass(frozen=True)
class RawLogEntry:
    block_number: int
    tx_hash: str
    log_index: int
    topics: tuple[str, ...]
    data: bytes
    timestamp: int | None = None
    address: str | None = None

    def __post_init__(self):
        if not self.topics:
            raise ValueError("log entry without topics")

    @classmethod
    def from_rpc(cls, obj: dict) -> "RawLogEntry":
        """Build an entry from an ``eth_getLogs`` result object."""
        try:
            data = obj.get("data") or "0x"
            ts = obj.get("timestamp", obj.get("blockTimestamp"))
            return cls(
                block_number=_hex_int(obj["blockNumber"]),
                tx_hash=str(obj["transactionHash"]).lower(),
                log_index=_hex_int(obj["logIndex"]),
                topics=tuple(str(t).lower() for t in obj["topics"]),
                data=bytes.fromhex(data[2:] if data.startswith("0x") else data),
                timestamp=None if ts is None else _hex_int(ts),
                address=None if obj.get("address") is None else str(obj["address"]).lower(),
            )
        except (KeyError, TypeError, ValueError, AttributeError) as exc:
            raise MalformedResponse(f"undecodable log object: {exc}") from exc

    def to_rpc(self) -> dict:
        obj = {
            "address": self.address,
            "blockNumber": hex(self.block_number),
            "transactionHash": self.tx_hash,
            "logIndex": hex(self.log_index),
            "topics": list(self.topics),
            "data": "0x" + self.data.hex(),
        }
        if self.timestamp is not None:
            obj["timestamp"] = self.timestamp
        return obj

    def word(self, i: int) -> int:
        chunk = self.data[32 * i: 32 * (i + 1)]
        if len(chunk) != 32:
            raise MalformedResponse(f"log data has no word {i}")
        return int.from_bytes(chunk, "big")


class Endpoint(Protocol):
    name: str

    def get_logs(self, address: str, topic0: str, from_block: int, to_block: int) -> list[dict]:
        ...


class JsonRpcEndpoint:
    """Minimal JSON-RPC 2.0 client for ``eth_getLogs`` and block lookups."""

    def __init__(self, url: str, timeout: float = 30.0, session: requests.Session | None = None):
        self.url = url
        self.name = url
        self.timeout = timeout
        self.session = session or requests.Session()
        self._next_id = 0

    def call(self, method: str, params: list) -> Any:
        self._next_id += 1
        body = {"jsonrpc": "2.0", "id": self._next_id, "method": method, "params": params}
        try:
            resp = self.session.post(self.url, json=body, timeout=self.timeout)
        except requests.RequestException as exc:
            raise EndpointError(f"{self.url}: {exc}") from exc
        if resp.status_code == 413:
            raise ResponseTooLarge(f"{self.url}: HTTP 413")
        if resp.status_code >= 500 or resp.status_code == 429:
            raise EndpointError(f"{self.url}: HTTP {resp.status_code}")
        try:
            payload = resp.json()
        except ValueError as exc:
            raise MalformedResponse(f"{self.url}: response is not JSON") from exc
        if not isinstance(payload, dict):
            raise MalformedResponse(f"{self.url}: response is not a JSON-RPC envelope")
        if payload.get("error") is not None:
            err = payload["error"]
            msg = err.get("message", "") if isinstance(err, dict) else str(err)
            code = err.get("code") if isinstance(err, dict) else None
            if code == -32005 or _LIMIT_RE.search(msg):
                raise ResponseTooLarge(f"{self.url}: {msg}")
            raise EndpointError(f"{self.url}: rpc error {code}: {msg}")
        if "result" not in payload:
            raise MalformedResponse(f"{self.url}: envelope without result")
        return payload["result"]

    def get_logs(self, address, topic0, from_block, to_block):
        result = self.call(
            "eth_getLogs",
            [{"address": address, "topics": [topic0],
              "fromBlock": hex(from_block), "toBlock": hex(to_block)}],
        )
        if not isinstance(result, list):
            raise MalformedResponse(f"{self.url}: eth_getLogs result is not a list")
        return result

    def block_timestamp(self, block: int) -> int:
        result = self.call("eth_getBlockByNumber", [hex(block), False])
        if not isinstance(result, dict) or "timestamp" not in result:
            raise MalformedResponse(f"{self.url}: block {block} has no timestamp")
        return _hex_int(result["timestamp"])


class FixtureEndpoint:
    """Serves pre-recorded logs through the same interface as a live endpoint.

    ``max_results`` mimics a provider result cap so bisection can be exercised
    offline.
    """

    def __init__(self, logs: Iterable[dict], name: str = "fixture", max_results: int | None = None):
        self.logs = list(logs)
        self.name = name
        self.max_results = max_results
        self.calls: list[tuple[int, int]] = []

    @classmethod
    def from_file(cls, path: str | Path, **kw) -> "FixtureEndpoint":
        path = Path(path)
        logs = [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
        return cls(logs, name=str(path), **kw)

    def get_logs(self, address, topic0, from_block, to_block):
        self.calls.append((from_block, to_block))
        out = []
        for obj in self.logs:
            block = _hex_int(obj["blockNumber"])
            if not from_block <= block <= to_block:
                continue
            if obj.get("address") and obj["address"].lower() != address.lower():
                continue
            if obj["topics"][0].lower() != topic0.lower():
                continue
            out.append(obj)
        if self.max_results is not None and len(out) > self.max_results:
            raise ResponseTooLarge(f"query returned more than {self.max_results} results")
        return out


def _fetch_range(filt: LogFilterSpec, endpoints: Sequence[Endpoint], lo: int, hi: int,
                 retries: int, backoff: float) -> list[RawLogEntry]:
    errors = []
    for endpoint in endpoints:
        for attempt in range(retries):
            try:
                raw = endpoint.get_logs(filt.contract_address, filt.event_topic, lo, hi)
            except ResponseTooLarge as exc:
                if hi > lo:
                    mid = (lo + hi) // 2
                    logger.debug("bisecting %d-%d after %s", lo, hi, exc)
                    return (_fetch_range(filt, endpoints, lo, mid, retries, backoff)
                            + _fetch_range(filt, endpoints, mid + 1, hi, retries, backoff))
                errors.append(f"{endpoint.name}: {exc}")
            except EndpointError as exc:
                errors.append(f"{endpoint.name}: {exc}")
            else:
                return _validate_chunk(raw, filt, lo, hi)
            if backoff:
                time.sleep(backoff * (2 ** attempt))
    raise AllEndpointsFailed(f"blocks {lo}-{hi}: " + "; ".join(errors[-len(endpoints) * retries:]))


def _validate_chunk(raw: Any, filt: LogFilterSpec, lo: int, hi: int) -> list[RawLogEntry]:
    if not isinstance(raw, list):
        raise MalformedResponse("eth_getLogs result is not a list")
    entries = []
    for obj in raw:
        if not isinstance(obj, dict):
            raise MalformedResponse("log entry is not an object")
        if obj.get("removed"):
            continue
        entry = RawLogEntry.from_rpc(obj)
        if not lo <= entry.block_number <= hi:
            raise MalformedResponse(f"log at block {entry.block_number} outside requested {lo}-{hi}")
        if entry.topics[0] != filt.event_topic:
            continue
        if entry.address is not None and entry.address != filt.contract_address:
            continue
        entries.append(entry)
    entries.sort(key=lambda e: (e.block_number, e.log_index))
    return entries


def fetch_logs(filt: LogFilterSpec, endpoints: Sequence[Endpoint], *, retries: int = DEFAULT_RETRIES,
               max_in_flight: int = 1, backoff: float = 0.0) -> Iterator[RawLogEntry]:
    """Yield every matching log exactly once, in (block, log_index) order.

    Up to ``max_in_flight`` chunks are requested concurrently; results are
    yielded in chunk order so output does not depend on the degree of
    parallelism.
    """
    if not endpoints:
        raise ValueError("at least one endpoint is required")
    if retries < 1:
        raise ValueError("retries must be >= 1")
    chunks = filt.chunks()

    def work(chunk):
        return _fetch_range(filt, endpoints, chunk[0], chunk[1], retries, backoff)

    if max_in_flight <= 1:
        for chunk in chunks:
            yield from work(chunk)
        return
    with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
        pending: deque = deque()
        it = iter(chunks)
        for chunk in it:
            pending.append(pool.submit(work, chunk))
            if len(pending) >= max_in_flight:
                break
        while pending:
            entries = pending.popleft().result()
            nxt = next(it, None)
            if nxt is not None:
                pending.append(pool.submit(work, nxt))
            yield from entries


@dataclass(frozen=True)
class DecodeRule:
    """Where the OrderFilled fields live in a log.

    Topic positions count topic0 as 0; data positions are 32-byte word offsets.
    """

    topic: str = ORDER_FILLED_TOPIC
    maker_topic: int = 2
    taker_topic: int = 3
    maker_asset_word: int = 0
    taker_asset_word: int = 1
    maker_amount_word: int = 2
    taker_amount_word: int = 3
    collateral_id: int = 0


DEFAULT_RULE = DecodeRule()


@dataclass(frozen=True)
class FillRecord:
    block_number: int
    tx_hash: str
    log_index: int
    maker: str
    taker: str
    market_token: str
    side: str           # taker's side on the outcome token
    price_e6: int
    notional_e6: int
    timestamp: int

    FIELDS = ("block_number", "tx_hash", "log_index", "maker", "taker", "market_token",
              "side", "price", "notional", "timestamp")

    def __post_init__(self):
        if self.side not in (BUY, SELL):
            raise ValueError(f"side must be BUY or SELL, got {self.side!r}")
        if not 0 <= self.price_e6 <= USDC_SCALE:
            raise ValueError(f"price out of [0, 1]: {self.price_e6}")
        if self.notional_e6 < 0:
            raise ValueError("negative notional")

    @property
    def price(self) -> float:
        return self.price_e6 / USDC_SCALE

    @property
    def notional(self) -> float:
        return self.notional_e6 / USDC_SCALE

    @property
    def sort_key(self) -> tuple:
        return (self.block_number, self.log_index, self.tx_hash)

    def to_line(self) -> str:
        return "\t".join([
            str(self.block_number), self.tx_hash, str(self.log_index), self.maker, self.taker,
            self.market_token, self.side, format_fixed(self.price_e6),
            format_fixed(self.notional_e6), str(self.timestamp),
        ])

    @classmethod
    def from_line(cls, line: str) -> "FillRecord":
        parts = line.rstrip("\n").split("\t")
        if len(parts) != len(cls.FIELDS):
            raise ValueError(f"expected {len(cls.FIELDS)} fields, got {len(parts)}")
        return cls(
            block_number=int(parts[0]), tx_hash=parts[1], log_index=int(parts[2]),
            maker=parts[3], taker=parts[4], market_token=parts[5], side=parts[6],
            price_e6=parse_fixed(parts[7]), notional_e6=parse_fixed(parts[8]),
            timestamp=int(parts[9]),
        )


def _topic_address(word: str) -> str:
    return "0x" + word[-40:].lower()


def decode_fill(entry: RawLogEntry, rule: DecodeRule = DEFAULT_RULE,
                timestamp: int | None = None) -> FillRecord:
    """Turn one OrderFilled log into a FillRecord.

    The leg whose asset id equals the collateral id is the USDC leg; price is
    collateral / tokens in 6-decimal fixed point (round half up).
    """
    if entry.topics[0] != rule.topic:
        raise ValueError("log topic does not match the decode rule")
    if len(entry.topics) <= max(rule.maker_topic, rule.taker_topic):
        raise MalformedResponse("log has too few indexed topics")
    maker = _topic_address(entry.topics[rule.maker_topic])
    taker = _topic_address(entry.topics[rule.taker_topic])
    maker_asset = entry.word(rule.maker_asset_word)
    taker_asset = entry.word(rule.taker_asset_word)
    maker_amount = entry.word(rule.maker_amount_word)
    taker_amount = entry.word(rule.taker_amount_word)

    if maker_asset == rule.collateral_id and taker_asset != rule.collateral_id:
        # maker pays collateral for tokens: the taker is selling tokens
        collateral, tokens, token_id, side = maker_amount, taker_amount, taker_asset, SELL
    elif taker_asset == rule.collateral_id and maker_asset != rule.collateral_id:
        collateral, tokens, token_id, side = taker_amount, maker_amount, maker_asset, BUY
    else:
        raise UnknownAssetPair(f"{entry.tx_hash}:{entry.log_index} assets {maker_asset}/{taker_asset}")
    if tokens == 0:
        raise ZeroTokenAmount(f"{entry.tx_hash}:{entry.log_index}")
    if collateral > tokens:
        raise PriceOutOfRange(f"{entry.tx_hash}:{entry.log_index} collateral {collateral} > tokens {tokens}")
    price_e6 = (2 * collateral * USDC_SCALE + tokens) // (2 * tokens)
    ts = entry.timestamp if timestamp is None else timestamp
    if ts is None:
        raise ValueError(f"no timestamp for block {entry.block_number}")
    return FillRecord(
        block_number=entry.block_number, tx_hash=entry.tx_hash, log_index=entry.log_index,
        maker=maker, taker=taker, market_token=str(token_id), side=side,
        price_e6=price_e6, notional_e6=collateral, timestamp=int(ts),
    )


class BlockTimeResolver:
    """block -> UTC seconds, from a preloaded table with an optional RPC fallback."""

    def __init__(self, table: dict[int, int] | None = None, endpoint: JsonRpcEndpoint | None = None):
        self.cache = dict(table or {})
        self.endpoint = endpoint

    @classmethod
    def from_file(cls, path: str | Path, endpoint=None) -> "BlockTimeResolver":
        table = {}
        for line in Path(path).read_text().splitlines():
            if line.strip() and not line.startswith("#"):
                block, ts = line.split()[:2]
                table[int(block)] = int(ts)
        return cls(table, endpoint)

    def __call__(self, block: int) -> int:
        if block not in self.cache:
            if self.endpoint is None:
                raise KeyError(f"no timestamp for block {block}")
            self.cache[block] = self.endpoint.block_timestamp(block)
        return self.cache[block]


@dataclass
class Quarantined:
    tx_hash: str
    log_index: int
    block_number: int
    reason: str

    def to_line(self) -> str:
        return f"{self.block_number}\t{self.tx_hash}\t{self.log_index}\t{self.reason}"


def decode_all(entries: Iterable[RawLogEntry], rule: DecodeRule = DEFAULT_RULE,
               resolver: BlockTimeResolver | None = None) -> tuple[list[FillRecord], list[Quarantined]]:
    records, quarantined = [], []
    for entry in entries:
        ts = entry.timestamp
        if ts is None and resolver is not None:
            ts = resolver(entry.block_number)
        try:
            records.append(decode_fill(entry, rule, timestamp=ts))
        except QuarantineError as exc:
            quarantined.append(Quarantined(entry.tx_hash, entry.log_index, entry.block_number,
                                           f"{type(exc).__name__}: {exc}"))
    return records, quarantined


def exclude_venue(records: Iterable[FillRecord], venue_address: str = CTF_EXCHANGE) -> tuple[list[FillRecord], int]:
    """Drop fills in which the venue contract appears as maker or taker."""
    venue = normalize_address(venue_address)
    records = list(records)
    kept = [r for r in records if r.maker != venue and r.taker != venue]
    return kept, len(records) - len(kept)


def canonical_lines(records: Iterable[FillRecord]) -> list[str]:
    ordered = sorted(records, key=lambda r: r.sort_key)
    seen = set()
    for r in ordered:
        key = (r.tx_hash, r.log_index)
        if key in seen:
            raise ValueError(f"duplicate fill {r.tx_hash}:{r.log_index}")
        seen.add(key)
    return [r.to_line() for r in ordered]


def content_hash(records: Iterable[FillRecord]) -> str:
    h = hashlib.sha256()
    for line in canonical_lines(records):
        h.update(line.encode("utf-8"))
        h.update(b"\n")
    return h.hexdigest()


def parameter_hash(params: dict) -> str:
    blob = json.dumps(params, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


@dataclass
class IngestManifest:
    input_descriptor: str
    filter_spec: dict | None
    record_count: int
    content_hash: str
    parameter_hash: str
    wall_time_seconds: float
    quarantined_count: int = 0
    file_sha256: str = ""
    schema: str = CORPUS_SCHEMA
    parameters: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def load(cls, path: str | Path) -> "IngestManifest":
        return cls(**json.loads(Path(path).read_text()))


def manifest_path(path: str | Path) -> Path:
    return Path(str(path) + ".manifest.json")


def quarantine_path(path: str | Path) -> Path:
    return Path(str(path) + ".quarantine.tsv")


def write_corpus(records: Iterable[FillRecord], path: str | Path, *, capabilities: dict | None = None,
                 input_descriptor: str = "", filter_spec: LogFilterSpec | None = None,
                 parameters: dict | None = None, quarantined: Sequence[Quarantined] = (),
                 started: float | None = None) -> IngestManifest:
    """Write records in canonical order plus a JSON manifest sidecar."""
    t0 = time.perf_counter() if started is None else started
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = canonical_lines(records)
    header = "#" + CORPUS_SCHEMA + "\t" + ",".join(FillRecord.FIELDS) + "\t" + json.dumps(
        {"capabilities": capabilities or {}}, sort_keys=True, separators=(",", ":"))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(header + "\n")
        for line in lines:
            fh.write(line + "\n")
    h = hashlib.sha256()
    for line in lines:
        h.update(line.encode("utf-8") + b"\n")
    if quarantined:
        with open(quarantine_path(path), "w", encoding="utf-8", newline="\n") as fh:
            for q in quarantined:
                fh.write(q.to_line() + "\n")
    params = dict(parameters or {})
    manifest = IngestManifest(
        input_descriptor=input_descriptor,
        filter_spec=None if filter_spec is None else asdict(filter_spec),
        record_count=len(lines),
        content_hash=h.hexdigest(),
        parameter_hash=parameter_hash(params),
        wall_time_seconds=round(time.perf_counter() - t0, 6),
        quarantined_count=len(quarantined),
        file_sha256=file_sha256(path),
        parameters=params,
    )
    manifest_path(path).write_text(manifest.to_json())
    return manifest


def _read_header(first: str) -> dict:
    if not first.startswith("#" + CORPUS_SCHEMA):
        raise CorruptCorpus(f"unrecognized corpus header: {first[:40]!r}")
    parts = first.rstrip("\n").split("\t")
    if len(parts) != 3 or parts[1] != ",".join(FillRecord.FIELDS):
        raise CorruptCorpus("corpus header does not declare the expected field order")
    try:
        return json.loads(parts[2])
    except ValueError as exc:
        raise CorruptCorpus("corpus header metadata is not JSON") from exc


def read_capabilities(path: str | Path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return _read_header(fh.readline()).get("capabilities", {})


def read_corpus(path: str | Path, verify: bool = False) -> list[FillRecord]:
    """Read a corpus; with ``verify`` the manifest hashes must match."""
    path = Path(path)
    try:
        text = path.read_bytes().decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CorruptCorpus(f"{path} is not valid UTF-8") from exc
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise CorruptCorpus(f"{path} is empty")
    _read_header(lines[0])
    records = []
    for n, line in enumerate(lines[1:], start=2):
        try:
            records.append(FillRecord.from_line(line))
        except ValueError as exc:
            raise CorruptCorpus(f"{path}:{n}: {exc}") from exc
    if verify:
        mpath = manifest_path(path)
        if not mpath.exists():
            raise CorruptCorpus(f"no manifest next to {path}")
        manifest = IngestManifest.load(mpath)
        if manifest.file_sha256 and file_sha256(path) != manifest.file_sha256:
            raise CorruptCorpus(f"{path}: file hash does not match manifest")
        try:
            digest = content_hash(records)
        except ValueError as exc:
            raise CorruptCorpus(str(exc)) from exc
        if digest != manifest.content_hash or len(records) != manifest.record_count:
            raise CorruptCorpus(f"{path}: content hash does not match manifest")
    return records
