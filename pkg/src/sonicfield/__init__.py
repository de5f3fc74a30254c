"""Neural acoustic fields: pose-conditioned binaural masks, radiance fields and room-acoustic metrics."""

__version__ = "0.1.0"
