"""fghopt: source-to-source optimizer for recursive queries over ordered
semirings."""

__version__ = "0.1.0"
