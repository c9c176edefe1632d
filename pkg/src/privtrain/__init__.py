"""Two-party secure CNN training over a hybrid HE/OT protocol stack."""

__version__ = "0.1.0"
