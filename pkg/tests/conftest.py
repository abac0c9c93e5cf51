from __future__ import annotations

import numpy as np
import pytest

from fillscope import synth
from fillscope.ingest import BUY, SELL, FillRecord


def addr(i: int) -> str:
    return "0x" + f"{i:040x}"


def make_fill(i: int, maker: int, taker: int, market: str = "m1", side: str = BUY,
              price: float = 0.5, notional: float = 10.0, ts: int = 1_700_000_000,
              block: int | None = None) -> FillRecord:
    return FillRecord(
        block_number=block if block is not None else 100 + i,
        tx_hash="0x" + f"{i:064x}",
        log_index=i % 7,
        maker=addr(maker),
        taker=addr(taker),
        market_token=market,
        side=side,
        price_e6=int(round(price * 1e6)),
        notional_e6=int(round(notional * 1e6)),
        timestamp=ts,
    )


def random_fills(rng: np.random.Generator, n: int, n_addr: int = 30, n_markets: int = 6,
                 t0: int = 1_700_000_000, span: int = 5 * 86400) -> list[FillRecord]:
    out = []
    for i in range(n):
        maker, taker = rng.choice(n_addr, size=2, replace=False)
        out.append(make_fill(
            i, int(maker), int(taker), market=f"m{int(rng.integers(n_markets))}",
            side=BUY if rng.uniform() < 0.5 else SELL,
            price=float(rng.integers(1, 1000)) / 1000, notional=float(rng.integers(1, 10_000_000)) / 1e3,
            ts=t0 + int(rng.integers(span)),
        ))
    return out


@pytest.fixture(scope="session")
def full_corpus():
    return synth.generate(synth.SynthSpec())


@pytest.fixture(scope="session")
def small_corpus():
    return synth.generate(synth.small_spec())
