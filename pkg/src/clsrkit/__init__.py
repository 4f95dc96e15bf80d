"""Language-specific gated experts, distillation and quantization-bias tooling on a numpy substrate."""

__version__ = "0.1.0"
