"""awaker-moe: mixture-of-LoRA-experts adaptation of a frozen transformer."""

__version__ = "0.1.0"
