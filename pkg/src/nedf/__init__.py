"""Deferred neural rendering of composed implicit objects.

Each object's surface is distilled into a small network that maps a ray to
its first-intersection depth; scenes of many such objects are rendered with
a three-step deferred pipeline (depth/ID buffers, single-evaluation shading,
shadow rays) and served to a browser viewer for interactive composition.
"""

__version__ = "0.1.0"
