"""Over-the-air provisioning, rotation and cloud hand-off of per-device
symmetric keys, with an emulated key-slot flash, fault-injection and
network-attacker harnesses, and a fleet update simulator."""

__version__ = "0.1.0"

from .device import Device, DeviceIdentity, Phase
from .envelope import Rng, SealedMessage, generate_key, open, seal
from .flash import FlashImage, KeyKind, boot_scan, first_stage_burn

__all__ = [
    "Device", "DeviceIdentity", "FlashImage", "KeyKind", "Phase", "Rng",
    "SealedMessage", "boot_scan", "first_stage_burn", "generate_key",
    "open", "seal",
]
