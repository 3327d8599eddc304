"""Fleet-scale key/firmware update simulator.

Compares the key-only update against four firmware-delivery baselines
over a shared sequential link:

    BL1  full firmware, restart on failure
    BL2  delta image (default 20% of full), restart on failure
    BL3  full firmware, chunked, only the failed chunk is resent
    BL4  delta image, chunked, only the failed chunk is resent
    KEY  key records only (36,864 bytes: both 18 KiB key areas)

Expected mode is closed-form: restart strategies pay ``n * (1 + f)``
transmissions (5% failures on 100 devices means 105 transmissions) and
resumable ones ``n * (1 + f * chunk/payload)``.  Stochastic mode draws
the failures per attempt from a seeded generator; its mean converges to
expected mode (geometric retries differ from the ``1 + f`` accounting
by f^2/(1-f), well under the 2% tolerance at f = 0.05).

Fleet time for the key-only strategy uses a measured per-device service
time (default 1.0 s) rather than payload/bandwidth: transfer is a
negligible slice of it, and the figure is the anchor all fleet numbers
derive from.  Byte counts always come from the payload.

The delta baselines' absolute fleet times are not derivable from the
delta ratio alone; the fleet experiment grids give them a calibrated
1.0 s per-device overhead and assertions on them are ordering-only.
"""

from __future__ import annotations

import csv
import random
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

KEY_PAYLOAD_BYTES = 36_864  # two 18 KiB key areas, upper bound
MB = 1_000_000

FIRMWARE_SIZES_MB = {
    "gateway": 9.68,
    "camera": 32.1,
    "drone": 175.84,
    "gimbal": 76.1,
}
FLEET_SIZES = (1000, 3000, 5000, 8000, 10000)
FLEET_BANDWIDTH = 6.5 * MB
FLEET_FAILURE_RATE = 0.05
CALIBRATED_DELTA_OVERHEAD = 1.0  # seconds per device for BL2/BL4 fleet grids


class StrategyKind(str, Enum):
    BL1 = "BL1"
    BL2 = "BL2"
    BL3 = "BL3"
    BL4 = "BL4"
    OTA_KEY = "OtaKey"


RESTART_KINDS = (StrategyKind.BL1, StrategyKind.BL2, StrategyKind.OTA_KEY)
DELTA_KINDS = (StrategyKind.BL2, StrategyKind.BL4)
CHUNKED_KINDS = (StrategyKind.BL3, StrategyKind.BL4)


@dataclass(frozen=True)
class Strategy:
    kind: StrategyKind
    delta_ratio: float = 0.20
    chunk_size: int = 1 << 20
    per_device_overhead: float = 0.0

    def __post_init__(self):
        if not 0 < self.delta_ratio <= 1:
            raise ValueError("delta_ratio must be in (0, 1]")
        if self.chunk_size <= 0:
            raise ValueError("chunk_size must be positive")


@dataclass(frozen=True)
class FleetConfig:
    n_devices: int
    bandwidth: float = FLEET_BANDWIDTH
    failure_rate: float = FLEET_FAILURE_RATE
    firmware_size: float = FIRMWARE_SIZES_MB["camera"] * MB
    key_payload: int = KEY_PAYLOAD_BYTES
    per_device_service_time: float = 1.0  # key-only strategy, fleet time
    seed: int | None = None  # None = expected (analytic) mode

    def __post_init__(self):
        if not 0 <= self.failure_rate < 1:
            raise ValueError("failure_rate must be in [0, 1)")
        if self.bandwidth <= 0:
            raise ValueError("bandwidth must be positive")


@dataclass
class SimResult:
    total_time: float
    total_bytes: float
    per_device: list[tuple[float, float]] = field(default_factory=list)


def payload_bytes(strategy: Strategy, firmware_size: float,
                  key_payload: int = KEY_PAYLOAD_BYTES) -> float:
    if strategy.kind == StrategyKind.OTA_KEY:
        return float(key_payload)
    if strategy.kind in DELTA_KINDS:
        return strategy.delta_ratio * firmware_size
    return float(firmware_size)


def single_device_time(strategy: Strategy, firmware_size: float, bandwidth: float,
                       key_payload: int = KEY_PAYLOAD_BYTES) -> float:
    """Failure-free update time for one device at the given link rate.

    Key-only time does not depend on the firmware size at all.
    """
    if bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    return payload_bytes(strategy, firmware_size, key_payload) / bandwidth \
        + strategy.per_device_overhead


def _expected_factor(strategy: Strategy, config: FleetConfig) -> float:
    payload = payload_bytes(strategy, config.firmware_size, config.key_payload)
    if strategy.kind in CHUNKED_KINDS:
        chunk_fraction = min(strategy.chunk_size / payload, 1.0) if payload else 0.0
        return 1.0 + config.failure_rate * chunk_fraction
    return 1.0 + config.failure_rate


def _per_device_cost(strategy: Strategy, config: FleetConfig) -> tuple[float, float]:
    """(seconds, bytes) for one clean transmission."""
    payload = payload_bytes(strategy, config.firmware_size, config.key_payload)
    if strategy.kind == StrategyKind.OTA_KEY:
        return config.per_device_service_time + strategy.per_device_overhead, payload
    return payload / config.bandwidth + strategy.per_device_overhead, payload


def fleet_update(strategy: Strategy, config: FleetConfig,
                 keep_breakdown: bool = False) -> SimResult:
    """Total wall time and bytes to update every device once, sequentially."""
    per_time, per_bytes = _per_device_cost(strategy, config)
    n = config.n_devices
    if n == 0:
        return SimResult(0.0, 0.0)

    if config.seed is None:
        factor = _expected_factor(strategy, config)
        result = SimResult(n * factor * per_time, n * factor * per_bytes)
        if keep_breakdown:
            result.per_device = [(factor * per_time, factor * per_bytes)] * n
        return result

    prng = random.Random(config.seed)
    f = config.failure_rate
    total_time = total_bytes = 0.0
    breakdown = []
    chunked = strategy.kind in CHUNKED_KINDS
    chunk_cost = min(strategy.chunk_size, per_bytes)
    for _ in range(n):
        if chunked:
            # a failed transfer costs one resent chunk
            extra = chunk_cost if prng.random() < f else 0.0
            t = per_time + extra / config.bandwidth
            b = per_bytes + extra
        else:
            attempts = 1
            while prng.random() < f:
                attempts += 1
            t = attempts * per_time
            b = attempts * per_bytes
        total_time += t
        total_bytes += b
        if keep_breakdown:
            breakdown.append((t, b))
    return SimResult(total_time, total_bytes, breakdown)


def fleet_volume(strategy: Strategy, config: FleetConfig) -> float:
    return fleet_update(strategy, config).total_bytes


@dataclass(frozen=True)
class GrayReleasePlan:
    batch_size: int = 100
    check_time: float = 180.0

    def __post_init__(self):
        if self.batch_size <= 0:
            raise ValueError("batch_size must be positive")


def gray_release_time(n_devices: int, plan: GrayReleasePlan = GrayReleasePlan(),
                      per_device_service_time: float = 1.0) -> float:
    """Batched rollout with a verification pause after every batch.

    The last partial batch pays transmission for its actual device count
    but still runs the full check.
    """
    if n_devices <= 0:
        return 0.0
    full, rem = divmod(n_devices, plan.batch_size)
    total = full * (plan.batch_size * per_device_service_time + plan.check_time)
    if rem:
        total += rem * per_device_service_time + plan.check_time
    return total


# experiment grids

def _fleet_strategies(delta_ratio: float = 0.20,
                      delta_overhead: float = CALIBRATED_DELTA_OVERHEAD) -> list[Strategy]:
    return [
        Strategy(StrategyKind.BL1),
        Strategy(StrategyKind.BL2, delta_ratio=delta_ratio,
                 per_device_overhead=delta_overhead),
        Strategy(StrategyKind.BL3),
        Strategy(StrategyKind.BL4, delta_ratio=delta_ratio,
                 per_device_overhead=delta_overhead),
        Strategy(StrategyKind.OTA_KEY),
    ]


def _write_csv(path: Path, rows: list[dict]):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["strategy", "n_devices", "firmware_mb",
                                                "time_s", "bytes"])
        writer.writeheader()
        writer.writerows(rows)


def single_device_grid(bandwidth: float = 1.0 * MB,
                       delta_ratio: float = 0.20) -> list[dict]:
    """Per-firmware-size single-device times (the bar-chart grid)."""
    rows = []
    for strategy in _fleet_strategies(delta_ratio, delta_overhead=0.0):
        for size_mb in sorted(FIRMWARE_SIZES_MB.values()):
            t = single_device_time(strategy, size_mb * MB, bandwidth)
            rows.append({"strategy": strategy.kind.value, "n_devices": 1,
                         "firmware_mb": size_mb, "time_s": round(t, 6),
                         "bytes": int(payload_bytes(strategy, size_mb * MB))})
    return rows


def fleet_grid(firmware_mb: float = FIRMWARE_SIZES_MB["camera"],
               failure_rate: float = FLEET_FAILURE_RATE, delta_ratio: float = 0.20,
               seed: int | None = None) -> list[dict]:
    """Fleet-size sweep of total time or volume, the two line-chart grids."""
    rows = []
    for strategy in _fleet_strategies(delta_ratio):
        for n in FLEET_SIZES:
            config = FleetConfig(n_devices=n, firmware_size=firmware_mb * MB,
                                 failure_rate=failure_rate, seed=seed)
            result = fleet_update(strategy, config)
            rows.append({"strategy": strategy.kind.value, "n_devices": n,
                         "firmware_mb": firmware_mb,
                         "time_s": round(result.total_time, 3),
                         "bytes": int(result.total_bytes)})
    return rows


def gray_release_grid(per_device_service_time: float = 1.0) -> list[dict]:
    rows = []
    for n in (100, 300, 500, 1000):
        t = gray_release_time(n, per_device_service_time=per_device_service_time)
        rows.append({"strategy": "OtaKey-gray", "n_devices": n, "firmware_mb": 0,
                     "time_s": round(t, 3), "bytes": n * KEY_PAYLOAD_BYTES})
    return rows


def run_experiment_suite(out_dir, failure_rate: float = FLEET_FAILURE_RATE,
                         delta_ratio: float = 0.20, seed: int | None = None) -> dict[str, Path]:
    """Emit all four CSV grids under ``out_dir``."""
    out = Path(out_dir)
    files = {
        "fig7": out / "fig7_single_device_time.csv",
        "fig8": out / "fig8_fleet_time.csv",
        "fig9": out / "fig9_fleet_volume.csv",
        "gray": out / "gray_release.csv",
    }
    _write_csv(files["fig7"], single_device_grid(delta_ratio=delta_ratio))
    _write_csv(files["fig8"], fleet_grid(failure_rate=failure_rate,
                                         delta_ratio=delta_ratio, seed=seed))
    _write_csv(files["fig9"], fleet_grid(failure_rate=failure_rate,
                                         delta_ratio=delta_ratio, seed=seed))
    _write_csv(files["gray"], gray_release_grid())
    return files
