"""galasim: simulator and toolchain for streaming-kernel graphs on FPGA clusters."""

__version__ = "0.1.0"
