"""Bayer-free low-light enhancement: raw packing, a monochrome-synthesis
U-net and a dual-branch fusion network with channel attention, joint L1
training on a self-contained autodiff engine, quality metrics, synthetic
paired-dataset generation, and homography alignment.

Submodules are imported explicitly (``darkforge.models``, ``darkforge.train``,
...) so the ``DARKFORGE_THREADS`` handling in the CLI can run before numpy
loads.
"""

__version__ = "0.1.0"
