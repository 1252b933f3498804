"""Multi-step generative policies trained by grouped moment matching, with twin-critic guidance."""
__version__ = "0.1.0"
